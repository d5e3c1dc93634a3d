#include "tempotrack/eval.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include <json.hpp>

namespace tempotrack {

namespace {

// Shortest round-trip decimal form.
std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<std::filesystem::path> list_frames(const std::filesystem::path& img_dir) {
  std::vector<std::filesystem::path> paths;
  if (!std::filesystem::is_directory(img_dir)) return paths;
  for (const auto& entry : std::filesystem::directory_iterator(img_dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext == ".ppm" || ext == ".jpg" || ext == ".jpeg") paths.push_back(entry.path());
  }
  std::sort(paths.begin(), paths.end());
  return paths;
}

}  // namespace

BBox parse_gt_line(const std::string& line, int line_no) {
  std::vector<double> vals;
  std::size_t pos = 0;
  while (pos <= line.size() && vals.size() < 5) {
    std::size_t next = line.find_first_of(",\t", pos);
    if (next == std::string::npos) next = line.size();
    std::string tok = line.substr(pos, next - pos);
    // trim spaces and trailing CR
    const auto b = tok.find_first_not_of(" \r\n");
    const auto e = tok.find_last_not_of(" \r\n");
    tok = b == std::string::npos ? "" : tok.substr(b, e - b + 1);
    if (!tok.empty()) {
      double v;
      auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size())
        throw FormatError("groundtruth line " + std::to_string(line_no) +
                          ": cannot parse field '" + tok + "'");
      vals.push_back(v);
    }
    pos = next + 1;
    if (next == line.size()) break;
  }
  if (vals.size() != 4)
    throw FormatError("groundtruth line " + std::to_string(line_no) + ": expected 4 fields, got " +
                      std::to_string(vals.size()));
  // File coordinates are 1-based corner form.
  return BBox::from_corner(vals[0] - 1.0, vals[1] - 1.0, vals[2], vals[3]);
}

Sequence load_sequence(const std::filesystem::path& dir) {
  Sequence seq;
  seq.name = dir.filename().string();
  seq.frame_paths = list_frames(dir / "img");

  const std::filesystem::path gt_path = dir / "groundtruth_rect.txt";
  std::ifstream gt(gt_path);
  if (!gt) throw IoError("missing groundtruth_rect.txt in " + dir.string());
  std::string line;
  int line_no = 0;
  while (std::getline(gt, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    seq.gt.push_back(parse_gt_line(line, line_no));
  }
  if (seq.gt.size() != seq.frame_paths.size())
    throw FormatError("sequence " + seq.name + ": " + std::to_string(seq.frame_paths.size()) +
                      " frames but " + std::to_string(seq.gt.size()) + " groundtruth lines");
  if (seq.gt.size() < 2)
    throw FormatError("sequence " + seq.name + ": needs at least 2 frames");
  return seq;
}

void save_sequence(const std::filesystem::path& dir, const Sequence& seq) {
  std::filesystem::create_directories(dir / "img");
  char name[32];
  for (std::size_t i = 0; i < seq.size(); ++i) {
    std::snprintf(name, sizeof(name), "%04zu.ppm", i + 1);
    save_ppm(dir / "img" / name, seq.frame(i));
  }
  std::ofstream gt(dir / "groundtruth_rect.txt");
  if (!gt) throw IoError("cannot write groundtruth in " + dir.string());
  for (const auto& b : seq.gt)
    gt << fmt_double(b.x0() + 1.0) << "," << fmt_double(b.y0() + 1.0) << ","
       << fmt_double(b.w) << "," << fmt_double(b.h) << "\n";
}

namespace {

SequenceMetrics metrics_for(const TrackResult& result, const std::vector<BBox>& gt) {
  if (result.boxes.size() != gt.size())
    throw ContractError("compute_metrics: result has " + std::to_string(result.boxes.size()) +
                        " boxes but groundtruth has " + std::to_string(gt.size()));
  SequenceMetrics m;
  m.precision_curve.assign(kCurvePoints, 0.0);
  m.success_curve.assign(kCurvePoints, 0.0);
  const std::size_t n = gt.size();
  double cle_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = cle(result.boxes[i], gt[i]);
    const double ov = iou(result.boxes[i], gt[i]);
    cle_sum += d;
    for (int t = 0; t < kCurvePoints; ++t) {
      if (d <= static_cast<double>(t)) m.precision_curve[t] += 1.0;
      if (ov > static_cast<double>(t) / 50.0) m.success_curve[t] += 1.0;
    }
  }
  for (int t = 0; t < kCurvePoints; ++t) {
    m.precision_curve[t] /= static_cast<double>(n);
    m.success_curve[t] /= static_cast<double>(n);
  }
  m.precision_at_20 = m.precision_curve[20];
  double auc = 0;
  for (double v : m.success_curve) auc += v;
  m.auc = auc / kCurvePoints;
  m.mean_cle = cle_sum / static_cast<double>(n);
  m.fps = result.fps;
  return m;
}

}  // namespace

MetricsReport compute_metrics(const std::map<std::string, TrackResult>& results,
                              const std::map<std::string, std::vector<BBox>>& gts) {
  MetricsReport report;
  report.aggregate.precision_curve.assign(kCurvePoints, 0.0);
  report.aggregate.success_curve.assign(kCurvePoints, 0.0);
  for (const auto& [name, result] : results) {
    auto it = gts.find(name);
    if (it == gts.end()) throw ContractError("compute_metrics: no groundtruth for " + name);
    report.sequences[name] = metrics_for(result, it->second);
  }
  const double count = static_cast<double>(report.sequences.size());
  if (count > 0) {
    for (const auto& [_, m] : report.sequences) {
      for (int t = 0; t < kCurvePoints; ++t) {
        report.aggregate.precision_curve[t] += m.precision_curve[t] / count;
        report.aggregate.success_curve[t] += m.success_curve[t] / count;
      }
      report.aggregate.precision_at_20 += m.precision_at_20 / count;
      report.aggregate.auc += m.auc / count;
      report.aggregate.mean_cle += m.mean_cle / count;
      report.aggregate.fps += m.fps / count;
    }
  }
  return report;
}

OpeOutcome run_ope(const TrackerFactory& factory, const std::vector<Sequence>& sequences,
                   const OpeOptions& options) {
  OpeOutcome outcome;
  std::mutex mu;
  std::atomic<std::size_t> next{0};

  auto worker = [&]() {
    for (;;) {
      const std::size_t idx = next.fetch_add(1);
      if (idx >= sequences.size()) return;
      const Sequence& seq = sequences[idx];
      try {
        auto tracker = factory(seq);
        TrackResult result;
        result.boxes.reserve(seq.size());
        const auto t0 = std::chrono::steady_clock::now();
        tracker->init(seq.frame(0), seq.gt[0]);
        result.boxes.push_back(seq.gt[0]);
        result.scores.push_back(0.0);
        for (std::size_t f = 1; f < seq.size(); ++f) {
          auto [box, score] = tracker->step(seq.frame(f));
          result.boxes.push_back(box);
          result.scores.push_back(score);
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.fps = secs > 0 ? static_cast<double>(seq.size()) / secs : 0.0;
        std::lock_guard<std::mutex> lock(mu);
        outcome.results[seq.name] = std::move(result);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(mu);
        outcome.failures.emplace_back(seq.name, e.what());
        std::cerr << "warning: sequence '" << seq.name << "' failed and is excluded: " << e.what()
                  << "\n";
      }
    }
  };

  const int n_threads = std::max(1, options.threads);
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::map<std::string, std::vector<BBox>> gts;
  for (const auto& seq : sequences)
    if (outcome.results.count(seq.name)) gts[seq.name] = seq.gt;
  outcome.report = compute_metrics(outcome.results, gts);
  return outcome;
}

namespace {

nlohmann::json metrics_to_json(const SequenceMetrics& m) {
  return nlohmann::json{{"precision_curve", m.precision_curve},
                        {"success_curve", m.success_curve},
                        {"auc", m.auc},
                        {"precision_at_20", m.precision_at_20},
                        {"mean_cle", m.mean_cle},
                        {"fps", m.fps}};
}

}  // namespace

std::string report_to_json(const MetricsReport& report) {
  nlohmann::json seqs = nlohmann::json::object();
  for (const auto& [name, m] : report.sequences) seqs[name] = metrics_to_json(m);
  return nlohmann::json{{"sequences", seqs}, {"aggregate", metrics_to_json(report.aggregate)}}
      .dump(2);
}

void write_report_files(const MetricsReport& report, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream f(out_dir / "metrics.json");
    if (!f) throw IoError("cannot write metrics.json in " + out_dir.string());
    f << report_to_json(report) << "\n";
  }
  {
    std::ofstream f(out_dir / "precision_curve.csv");
    f << "threshold,value\n";
    for (int t = 0; t < kCurvePoints; ++t)
      f << t << "," << fmt_double(report.aggregate.precision_curve[t]) << "\n";
  }
  {
    std::ofstream f(out_dir / "success_curve.csv");
    f << "threshold,value\n";
    for (int t = 0; t < kCurvePoints; ++t)
      f << fmt_double(static_cast<double>(t) / 50.0) << ","
        << fmt_double(report.aggregate.success_curve[t]) << "\n";
  }
}

}  // namespace tempotrack
