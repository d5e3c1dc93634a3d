// Command-line front end: synth / train / track / eval / selftest / bench.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 selftest failure.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tempotrack/checkpoint.hpp"
#include "tempotrack/config_io.hpp"
#include "tempotrack/eval.hpp"
#include "tempotrack/selftest.hpp"
#include "tempotrack/synth.hpp"
#include "tempotrack/tracker.hpp"
#include "tempotrack/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tempotrack;

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

void echo_config(const TrackerConfig& cfg, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  write_text(out_dir / "effective_config.json", config_to_json(cfg).dump(2) + "\n");
}

TrackerConfig resolve_config(const std::string& profile, const std::string& config_path) {
  TrackerConfig base = profile == "paper" ? TrackerConfig{} : toy_config();
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw IoError("cannot open config: " + config_path);
    json j = json::parse(f, nullptr, false);
    if (j.is_discarded()) throw FormatError("config is not valid JSON: " + config_path);
    base = config_from_json(j, base);
  }
  return base;
}

std::vector<Sequence> load_sequence_dirs(const fs::path& dir) {
  std::vector<fs::path> subdirs;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / "groundtruth_rect.txt"))
      subdirs.push_back(e.path());
  std::sort(subdirs.begin(), subdirs.end());
  if (subdirs.empty()) throw IoError("no sequences found in " + dir.string());
  std::vector<Sequence> seqs;
  for (const auto& d : subdirs) seqs.push_back(load_sequence(d));
  return seqs;
}

class ModelTracker final : public SequenceTracker {
 public:
  explicit ModelTracker(const Model<float>* model) : model_(model) {}
  void init(const Image& frame, const BBox& box) override {
    state_ = tracker_init(*model_, frame, box);
  }
  std::pair<BBox, double> step(const Image& frame) override {
    auto r = tracker_step(*model_, state_, frame);
    return {r.bbox, r.score};
  }

 private:
  const Model<float>* model_;
  TrackerState<float> state_;
};

std::string results_file_text(const TrackResult& result) {
  std::string out;
  for (const auto& b : result.boxes)
    out += fmt_double(b.x0() + 1.0) + "," + fmt_double(b.y0() + 1.0) + "," + fmt_double(b.w) +
           "," + fmt_double(b.h) + "\n";
  return out;
}

// ---------------------------------------------------------------------------

int cmd_synth(const fs::path& out_dir, std::uint64_t seed, int count, int frames) {
  fs::create_directories(out_dir);
  auto specs = default_benchmark_specs(seed, count, frames);
  json manifest;
  manifest["seed"] = seed;
  manifest["sequences"] = json::array();
  for (const auto& spec : specs) {
    Sequence seq = generate_synthetic(spec);
    save_sequence(out_dir / spec.name, seq);
    std::uint64_t hash = 1469598103934665603ull;
    for (const auto& frame : seq.frames) hash = splitmix64(hash ^ pixel_hash(frame));
    json occ = json::array();
    for (const auto& e : spec.occlusion_events)
      occ.push_back({{"start", e.start}, {"duration", e.duration}, {"coverage", e.coverage}});
    json blur = json::array();
    for (const auto& e : spec.blur_events)
      blur.push_back({{"start", e.start}, {"duration", e.duration}, {"sigma", e.sigma}});
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(hash));
    manifest["sequences"].push_back({{"name", spec.name},
                                     {"frames", spec.n_frames},
                                     {"seed", spec.seed},
                                     {"attributes", seq.attributes},
                                     {"occlusion_events", occ},
                                     {"blur_events", blur},
                                     {"distractors", spec.distractors},
                                     {"pixel_hash", std::string(hex)}});
    std::cout << "wrote " << spec.name << " (" << spec.n_frames << " frames)\n";
  }
  write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return 0;
}

int cmd_train(const TrackerConfig& cfg, const TrainConfig& tc, const fs::path& data_dir,
              const fs::path& out_dir) {
  auto dataset = load_sequence_dirs(data_dir);
  echo_config(cfg, out_dir);
  Model<float> model = Model<float>::random_init(cfg);
  std::cout << "training on " << dataset.size() << " sequences, " << model.param_count()
            << " parameters\n";
  std::string csv = "epoch,step,lr,loss\n";
  auto trace = toy_train<float>(model, dataset, tc, [&](const TrainRecord& r) {
    csv += std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + fmt_double(r.lr) + "," +
           fmt_double(r.loss) + "\n";
    if (r.step % 10 == 0)
      std::cout << "epoch " << r.epoch << " step " << r.step << " lr " << r.lr << " loss "
                << r.loss << "\n";
  });
  write_text(out_dir / "loss_trace.csv", csv);
  save_checkpoint(model, out_dir / "checkpoint.bin");
  std::cout << "checkpoint: " << (out_dir / "checkpoint.bin").string() << "\n";
  if (!trace.empty())
    std::cout << "loss first " << trace.front().loss << " -> last " << trace.back().loss << "\n";
  return 0;
}

int cmd_track(const fs::path& checkpoint, const fs::path& seq_dir, bool seq_dir_is_parent,
              const fs::path& out_dir, const std::string& ablation, double tau_override,
              bool has_tau, const std::vector<int>& n_hist_values, int threads) {
  std::vector<Sequence> seqs;
  if (seq_dir_is_parent)
    seqs = load_sequence_dirs(seq_dir);
  else
    seqs.push_back(load_sequence(seq_dir));

  auto run_one_setting = [&](int n_hist, const fs::path& setting_dir) {
    Model<float> model = load_checkpoint<float>(checkpoint);
    if (!ablation.empty()) model.cfg.ablation = ablation_from_string(ablation);
    if (has_tau) model.cfg.tau = tau_override;
    if (n_hist >= 0) adapt_history_length(model, n_hist);
    echo_config(model.cfg, setting_dir);

    OpeOptions opts;
    opts.threads = threads;
    auto factory = [&model](const Sequence&) -> std::unique_ptr<SequenceTracker> {
      return std::make_unique<ModelTracker>(&model);
    };
    OpeOutcome outcome = run_ope(factory, seqs, opts);

    for (const auto& [name, result] : outcome.results) {
      const fs::path sd = setting_dir / name;
      fs::create_directories(sd);
      write_text(sd / "results.txt", results_file_text(result));
      json summary = {{"name", name},
                      {"frames", result.boxes.size()},
                      {"fps", result.fps},
                      {"scores", result.scores},
                      {"ablation", to_string(model.cfg.ablation)},
                      {"tau", model.cfg.tau},
                      {"n_hist", model.cfg.n_hist}};
      write_text(sd / "summary.json", summary.dump(2) + "\n");
    }
    write_report_files(outcome.report, setting_dir);
    std::cout << "setting n_hist=" << (n_hist >= 0 ? std::to_string(n_hist) : "trained")
              << " ablation=" << to_string(model.cfg.ablation)
              << ": auc=" << outcome.report.aggregate.auc
              << " precision@20=" << outcome.report.aggregate.precision_at_20 << "\n";
    if (!outcome.failures.empty()) {
      for (const auto& [name, why] : outcome.failures)
        std::cerr << "failed sequence " << name << ": " << why << "\n";
    }
  };

  if (n_hist_values.empty()) {
    run_one_setting(-1, out_dir);
  } else if (n_hist_values.size() == 1) {
    run_one_setting(n_hist_values[0], out_dir);
  } else {
    for (int n : n_hist_values)
      run_one_setting(n, out_dir / ("nhist_" + std::to_string(n)));
  }
  return 0;
}

int cmd_eval(const fs::path& results_dir, const fs::path& sequences_dir, const fs::path& out_dir) {
  auto seqs = load_sequence_dirs(sequences_dir);
  std::map<std::string, TrackResult> results;
  std::map<std::string, std::vector<BBox>> gts;
  std::vector<std::string> missing;
  for (const auto& seq : seqs) {
    fs::path f = results_dir / seq.name / "results.txt";
    if (!fs::exists(f)) f = results_dir / (seq.name + ".txt");
    if (!fs::exists(f)) {
      missing.push_back(seq.name);
      continue;
    }
    TrackResult tr;
    std::ifstream in(f);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
      tr.boxes.push_back(parse_gt_line(line, line_no));
    }
    tr.scores.assign(tr.boxes.size(), 0.0);
    results[seq.name] = std::move(tr);
    gts[seq.name] = seq.gt;
  }
  if (!missing.empty()) {
    std::string names;
    for (const auto& n : missing) names += (names.empty() ? "" : ", ") + n;
    throw IoError("missing result files for sequences: " + names);
  }
  MetricsReport report = compute_metrics(results, gts);
  write_report_files(report, out_dir);
  std::cout << "auc=" << report.aggregate.auc
            << " precision@20=" << report.aggregate.precision_at_20
            << " mean_cle=" << report.aggregate.mean_cle << "\n";
  return 0;
}

int cmd_selftest(const std::string& inject_fault, const fs::path& out_dir) {
  if (inject_fault == "softmax") debug::softmax_fault() = true;
  auto checks = run_selftests();
  debug::softmax_fault() = false;
  bool all_pass = true;
  json report = json::array();
  for (const auto& c : checks) {
    all_pass = all_pass && c.pass;
    std::printf("%-40s max_error=%-12.3e tolerance=%-8.0e %s\n", c.name.c_str(), c.max_error,
                c.tolerance, c.pass ? "PASS" : "FAIL");
    report.push_back({{"name", c.name},
                      {"max_error", c.max_error},
                      {"tolerance", c.tolerance},
                      {"pass", c.pass}});
  }
  if (!out_dir.empty()) write_text(out_dir / "selftest.json", report.dump(2) + "\n");
  std::cout << (all_pass ? "all checks passed" : "SELFTEST FAILURE") << "\n";
  return all_pass ? 0 : 3;
}

int cmd_bench(const fs::path& checkpoint, const fs::path& seq_dir, const fs::path& out_dir,
              int frame_limit) {
  Model<float> model = load_checkpoint<float>(checkpoint);
  Sequence seq = load_sequence(seq_dir);
  const std::size_t n_frames =
      frame_limit > 0 ? std::min<std::size_t>(seq.size(), frame_limit) : seq.size();

  TrackerState<float> state = tracker_init(model, seq.frame(0), seq.gt[0]);
  StageTimes total;
  const auto t0 = std::chrono::steady_clock::now();
  double checked_frames = 0;
  for (std::size_t f = 1; f < n_frames; ++f) {
    StepTrace<float> trace;
    tracker_step(model, state, seq.frame(f), &trace);
    total.backbone_ms += trace.times.backbone_ms;
    total.temporal_ms += trace.times.temporal_ms;
    total.transformer_ms += trace.times.transformer_ms;
    total.head_ms += trace.times.head_ms;
    checked_frames += 1;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double fps = checked_frames > 0 ? checked_frames / secs : 0.0;

  // Logits-product instrumentation: one transformer forward with transpose
  // reuse vs one where the current branch computes its own product.
  const int grid = model.cfg.corr_size();
  Tensor<float> corr = Tensor<float>::zeros({static_cast<std::size_t>(grid),
                                             static_cast<std::size_t>(grid),
                                             static_cast<std::size_t>(model.cfg.channels)});
  {
    Rng rng(1);
    for (auto& v : corr.data()) v = static_cast<float>(rng.uniform(-1, 1));
  }
  Tensor<float> hist = reshape(corr, {static_cast<std::size_t>(grid) * grid,
                                      static_cast<std::size_t>(model.cfg.channels)});
  TransformerToggles reuse_tog, noreuse_tog;
  noreuse_tog.reuse_logits = false;
  reset_op_counters();
  mutual_transformer_forward(corr, hist, model.transformer, model.cfg.attention(), reuse_tog);
  const std::uint64_t logits_reuse = op_counters().attention_logits_products;
  reset_op_counters();
  mutual_transformer_forward(corr, hist, model.transformer, model.cfg.attention(), noreuse_tog);
  const std::uint64_t logits_noreuse = op_counters().attention_logits_products;
  reset_op_counters();

  const std::size_t analytic = analytic_param_count(model.cfg);
  const std::size_t actual = model.param_count();

  json j;
  j["fps"] = fps;
  j["frames_timed"] = checked_frames;
  j["stage_mean_ms"] = {{"backbone", total.backbone_ms / std::max(1.0, checked_frames)},
                        {"temporal_correlation", total.temporal_ms / std::max(1.0, checked_frames)},
                        {"mutual_transformer", total.transformer_ms / std::max(1.0, checked_frames)},
                        {"head", total.head_ms / std::max(1.0, checked_frames)}};
  j["parameters"] = {{"analytic", analytic}, {"checkpoint_sum", actual},
                     {"match", analytic == actual}};
  json breakdown = json::object();
  for (const auto& p : model.params) breakdown[p.name] = p.tensor.size();
  j["parameter_breakdown"] = breakdown;
  j["attention_logits_products"] = {
      {"reuse", logits_reuse},
      {"no_reuse", logits_noreuse},
      {"decoder_layers", model.cfg.dec_layers},
      {"saved_per_decoder_layer",
       static_cast<double>(logits_noreuse - logits_reuse) / model.cfg.dec_layers}};
  fs::create_directories(out_dir);
  write_text(out_dir / "bench.json", j.dump(2) + "\n");
  std::cout << "fps=" << fps << " params(analytic)=" << analytic << " params(checkpoint)=" << actual
            << "\nlogits products: reuse=" << logits_reuse << " no_reuse=" << logits_noreuse
            << " (saves " << (logits_noreuse - logits_reuse) << " over " << model.cfg.dec_layers
            << " decoder layers)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tempotrack: temporal-correlation tracker with mutual map refinement"};
  app.require_subcommand(1);

  std::string config_path, profile = "toy";
  std::uint64_t seed = 42;
  std::string out_dir = "out";
  int threads = 1;
  app.add_option("--config", config_path, "JSON config file")->capture_default_str();
  app.add_option("--profile", profile, "base config profile: toy|paper")
      ->check(CLI::IsMember({"toy", "paper"}));
  app.add_option("--seed", seed, "master seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--threads", threads, "worker threads for multi-sequence runs");

  auto* synth = app.add_subcommand("synth", "generate a synthetic benchmark");
  int synth_count = 20, synth_frames = 100;
  synth->add_option("--count", synth_count, "number of sequences");
  synth->add_option("--frames", synth_frames, "frames per sequence");

  auto* train = app.add_subcommand("train", "toy-scale training");
  std::string train_data;
  TrainConfig tc;
  train->add_option("--data", train_data, "directory of training sequences")->required();
  train->add_option("--epochs", tc.epochs, "epochs");
  train->add_option("--batch", tc.batch_size, "batch size");
  train->add_option("--samples-per-epoch", tc.samples_per_epoch, "samples per epoch");

  auto* track = app.add_subcommand("track", "run the tracker over sequences");
  std::string ckpt, sequence_dir, sequences_dir, ablation;
  double tau_override = 0;
  std::vector<int> n_hist_values;
  track->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  track->add_option("--sequence", sequence_dir, "single sequence directory");
  track->add_option("--sequences", sequences_dir, "directory of sequence directories");
  track->add_option("--ablation", ablation,
                    "baseline|temcor|mt|no-encoder|no-filter|full (overrides checkpoint)");
  auto* tau_opt = track->add_option("--tau", tau_override, "memory update threshold override");
  track->add_option("--n-hist", n_hist_values,
                    "history length override; multiple values run a sweep");

  auto* eval_cmd = app.add_subcommand("eval", "compute OPE metrics from results files");
  std::string results_dir, eval_sequences;
  eval_cmd->add_option("--results", results_dir, "directory with per-sequence results")->required();
  eval_cmd->add_option("--sequences", eval_sequences, "directory of sequences with groundtruth")
      ->required();

  auto* selftest = app.add_subcommand("selftest", "run numeric release-gate checks");
  std::string inject_fault;
  selftest->add_option("--inject-fault", inject_fault,
                       "diagnostic fault injection (softmax) for negative control");

  auto* bench = app.add_subcommand("bench", "timing, parameters, matmul instrumentation");
  std::string bench_ckpt, bench_seq;
  int bench_frames = 0;
  bench->add_option("--checkpoint", bench_ckpt, "model checkpoint")->required();
  bench->add_option("--sequence", bench_seq, "sequence directory")->required();
  bench->add_option("--frames", bench_frames, "limit the number of timed frames");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(out_dir, seed, synth_count, synth_frames);
    if (train->parsed()) {
      TrackerConfig cfg = resolve_config(profile, config_path);
      if (app.count("--seed")) cfg.seed = seed;
      tc.seed = cfg.seed;
      cfg.validate();
      return cmd_train(cfg, tc, train_data, out_dir);
    }
    if (track->parsed()) {
      if (sequence_dir.empty() == sequences_dir.empty()) {
        std::cerr << "track: provide exactly one of --sequence or --sequences\n";
        return 1;
      }
      const bool parent = !sequences_dir.empty();
      return cmd_track(ckpt, parent ? fs::path(sequences_dir) : fs::path(sequence_dir), parent,
                       out_dir, ablation, tau_override, tau_opt->count() > 0, n_hist_values,
                       threads);
    }
    if (eval_cmd->parsed()) return cmd_eval(results_dir, eval_sequences, out_dir);
    if (selftest->parsed()) return cmd_selftest(inject_fault, out_dir);
    if (bench->parsed()) return cmd_bench(bench_ckpt, bench_seq, out_dir, bench_frames);
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
