#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "tempotrack/eval.hpp"
#include "tempotrack/synth.hpp"

#include "oracles.hpp"

using namespace tempotrack;
namespace fs = std::filesystem;

namespace {

struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& tag) {
    dir = fs::temp_directory_path() / ("tempotrack_test_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
};

Sequence tiny_sequence(int frames, int w = 32, int h = 24) {
  Sequence seq;
  seq.name = "tiny";
  for (int f = 0; f < frames; ++f) {
    seq.frames.push_back(Image::solid(w, h, 10, 20, 30));
    seq.gt.push_back(BBox::from_corner(2 + f, 3, 8, 6));
  }
  return seq;
}

}  // namespace

TEST_CASE("iou examples") {
  BBox a = BBox::from_corner(0, 0, 2, 2);
  CHECK(iou(a, a) == 1.0);
  BBox b = BBox::from_corner(10, 10, 2, 2);
  CHECK(iou(a, b) == 0.0);
  BBox c = BBox::from_corner(1, 0, 2, 2);
  CHECK(iou(a, c) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("cle examples") {
  BBox a = BBox::from_corner(0, 0, 4, 4);
  CHECK(cle(a, a) == 0.0);
  BBox b{a.cx + 3, a.cy + 4, 4, 4};
  CHECK(cle(a, b) == doctest::Approx(5.0));
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    BBox p{rng.uniform(-50, 50), rng.uniform(-50, 50), 5, 5};
    BBox q{rng.uniform(-50, 50), rng.uniform(-50, 50), 7, 3};
    CHECK(cle(p, q) == doctest::Approx(std::hypot(p.cx - q.cx, p.cy - q.cy)).epsilon(1e-12));
  }
}

TEST_CASE("compute_metrics: perfect predictions") {
  std::map<std::string, TrackResult> results;
  std::map<std::string, std::vector<BBox>> gts;
  TrackResult tr;
  for (int i = 0; i < 4; ++i) tr.boxes.push_back(BBox::from_corner(i, i, 10, 12));
  tr.scores.assign(4, 0.0);
  results["s"] = tr;
  gts["s"] = tr.boxes;
  MetricsReport rep = compute_metrics(results, gts);
  CHECK(rep.sequences.at("s").precision_at_20 == 1.0);
  // IoU = 1 fails the strict > at the 1.0 threshold, so AUC is 50/51
  CHECK(rep.sequences.at("s").auc == doctest::Approx(50.0 / 51.0).epsilon(1e-12));
  CHECK(rep.aggregate.auc == doctest::Approx(50.0 / 51.0).epsilon(1e-12));
}

TEST_CASE("compute_metrics: far disjoint predictions score zero") {
  std::map<std::string, TrackResult> results;
  std::map<std::string, std::vector<BBox>> gts;
  TrackResult tr;
  tr.boxes.assign(3, BBox::from_corner(500, 500, 5, 5));
  tr.scores.assign(3, 0.0);
  results["s"] = tr;
  gts["s"].assign(3, BBox::from_corner(0, 0, 5, 5));
  MetricsReport rep = compute_metrics(results, gts);
  CHECK(rep.sequences.at("s").precision_at_20 == 0.0);
  CHECK(rep.sequences.at("s").auc == 0.0);  // IoU = 0 is not > 0
}

TEST_CASE("compute_metrics: CLEs {0,15,30} give precision(20) = 2/3") {
  std::map<std::string, TrackResult> results;
  std::map<std::string, std::vector<BBox>> gts;
  TrackResult tr;
  tr.boxes = {BBox::from_corner(0, 0, 10, 10), BBox::from_corner(15, 0, 10, 10),
              BBox::from_corner(30, 0, 10, 10)};
  tr.scores.assign(3, 0.0);
  results["s"] = tr;
  gts["s"].assign(3, BBox::from_corner(0, 0, 10, 10));
  MetricsReport rep = compute_metrics(results, gts);
  CHECK(rep.sequences.at("s").precision_at_20 == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("curves are monotone and metrics match a recount oracle") {
  Rng rng(2);
  std::map<std::string, TrackResult> results;
  std::map<std::string, std::vector<BBox>> gts;
  TrackResult tr;
  std::vector<BBox> gt;
  for (int i = 0; i < 10; ++i) {
    tr.boxes.push_back(BBox::from_corner(rng.uniform(0, 40), rng.uniform(0, 40),
                                         rng.uniform(4, 20), rng.uniform(4, 20)));
    gt.push_back(BBox::from_corner(rng.uniform(0, 40), rng.uniform(0, 40), rng.uniform(4, 20),
                                   rng.uniform(4, 20)));
  }
  tr.scores.assign(10, 0.0);
  results["s"] = tr;
  gts["s"] = gt;
  MetricsReport rep = compute_metrics(results, gts);
  const auto& m = rep.sequences.at("s");
  for (int t = 1; t < kCurvePoints; ++t) {
    CHECK(m.precision_curve[t] >= m.precision_curve[t - 1]);  // non-decreasing in theta
    CHECK(m.success_curve[t] <= m.success_curve[t - 1]);      // non-increasing in rho
  }
  for (int t = 0; t < kCurvePoints; ++t) {
    int pc = 0, sc = 0;
    for (int i = 0; i < 10; ++i) {
      if (cle(tr.boxes[i], gt[i]) <= t) ++pc;
      if (iou(tr.boxes[i], gt[i]) > t / 50.0) ++sc;
    }
    CHECK(m.precision_curve[t] == doctest::Approx(pc / 10.0).epsilon(1e-15));
    CHECK(m.success_curve[t] == doctest::Approx(sc / 10.0).epsilon(1e-15));
  }
  double auc = 0;
  for (double v : m.success_curve) auc += v;
  CHECK(m.auc == doctest::Approx(auc / 51.0).epsilon(1e-15));
}

TEST_CASE("load_sequence parses the directory fixture") {
  Scratch scratch("load");
  fs::create_directories(scratch.dir / "seq" / "img");
  save_ppm(scratch.dir / "seq" / "img" / "0001.ppm", Image::solid(16, 12, 1, 2, 3));
  save_ppm(scratch.dir / "seq" / "img" / "0002.ppm", Image::solid(16, 12, 4, 5, 6));
  {
    std::ofstream gt(scratch.dir / "seq" / "groundtruth_rect.txt");
    gt << "3,4,5,6\n7\t8\t5\t6\n";  // comma then tab delimited
  }
  Sequence seq = load_sequence(scratch.dir / "seq");
  CHECK(seq.size() == 2);
  // 1-based corner form converts to 0-based internal coordinates
  CHECK(seq.gt[0].x0() == doctest::Approx(2.0));
  CHECK(seq.gt[0].y0() == doctest::Approx(3.0));
  CHECK(seq.gt[0].w == 5.0);
  CHECK(seq.gt[1].x0() == doctest::Approx(6.0));
  CHECK(seq.frame(1).px(0, 0)[0] == 4);
}

TEST_CASE("load_sequence error paths") {
  Scratch scratch("load_err");
  fs::create_directories(scratch.dir / "seq" / "img");
  save_ppm(scratch.dir / "seq" / "img" / "0001.ppm", Image::solid(8, 8, 0, 0, 0));
  save_ppm(scratch.dir / "seq" / "img" / "0002.ppm", Image::solid(8, 8, 0, 0, 0));

  {
    std::ofstream gt(scratch.dir / "seq" / "groundtruth_rect.txt");
    gt << "1,2,3,4\n1,2,3\n";  // malformed arity on line 2
  }
  try {
    load_sequence(scratch.dir / "seq");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }

  {
    std::ofstream gt(scratch.dir / "seq" / "groundtruth_rect.txt");
    gt << "1,2,3,4\n";  // one line for two frames
  }
  try {
    load_sequence(scratch.dir / "seq");
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2 frames") != std::string::npos);
    CHECK(msg.find("1 groundtruth") != std::string::npos);
  }
}

TEST_CASE("sequence save/load round-trips exactly") {
  Scratch scratch("roundtrip");
  Sequence seq = tiny_sequence(3);
  save_sequence(scratch.dir / "tiny", seq);
  Sequence loaded = load_sequence(scratch.dir / "tiny");
  REQUIRE(loaded.size() == seq.size());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    CHECK(loaded.gt[i].cx == seq.gt[i].cx);
    CHECK(loaded.gt[i].cy == seq.gt[i].cy);
    CHECK(loaded.gt[i].w == seq.gt[i].w);
    CHECK(loaded.gt[i].h == seq.gt[i].h);
    const Image a = seq.frames[i], b = loaded.frame(i);
    REQUIRE(a.rgb.size() == b.rgb.size());
    CHECK(std::equal(a.rgb.begin(), a.rgb.end(), b.rgb.begin()));
  }

  // second round trip is byte-stable too
  save_sequence(scratch.dir / "tiny2", loaded);
  Sequence loaded2 = load_sequence(scratch.dir / "tiny2");
  for (std::size_t i = 0; i < seq.size(); ++i) {
    CHECK(loaded2.gt[i].cx == loaded.gt[i].cx);
    CHECK(loaded2.gt[i].w == loaded.gt[i].w);
  }
}

TEST_CASE("synthetic: zero motion spec keeps gt constant") {
  SyntheticSpec spec;
  spec.n_frames = 5;
  spec.waypoints = 1;
  spec.jitter_amp = 0;
  spec.scale_rate = 0;
  Sequence seq = generate_synthetic(spec);
  for (std::size_t i = 1; i < seq.size(); ++i) {
    CHECK(seq.gt[i].cx == seq.gt[0].cx);
    CHECK(seq.gt[i].cy == seq.gt[0].cy);
    CHECK(seq.gt[i].w == seq.gt[0].w);
  }
}

TEST_CASE("synthetic: determinism and gt-inside-frame") {
  SyntheticSpec spec;
  spec.n_frames = 8;
  spec.distractors = 2;
  spec.seed = 99;
  spec.blur_events.push_back({2, 3, 1.2});
  Sequence a = generate_synthetic(spec);
  Sequence b = generate_synthetic(spec);
  for (std::size_t f = 0; f < a.frames.size(); ++f)
    CHECK(pixel_hash(a.frames[f]) == pixel_hash(b.frames[f]));
  for (const auto& g : a.gt) {
    CHECK(g.x0() >= 0);
    CHECK(g.y0() >= 0);
    CHECK(g.x1() <= spec.frame_w);
    CHECK(g.y1() <= spec.frame_h);
  }
}

TEST_CASE("synthetic: rendered centroid matches emitted gt center") {
  SyntheticSpec spec;
  spec.n_frames = 6;
  spec.seed = 5;
  TargetMasks masks;
  Sequence seq = generate_synthetic(spec, &masks);
  REQUIRE(masks.size() == seq.size());
  for (std::size_t f = 0; f < seq.size(); ++f) {
    double sx = 0, sy = 0, n = 0;
    for (int y = 0; y < spec.frame_h; ++y)
      for (int x = 0; x < spec.frame_w; ++x)
        if (masks[f][static_cast<std::size_t>(y) * spec.frame_w + x]) {
          sx += x + 0.5;
          sy += y + 0.5;
          n += 1;
        }
    REQUIRE(n > 0);
    CHECK(std::abs(sx / n - seq.gt[f].cx) <= 0.5);
    CHECK(std::abs(sy / n - seq.gt[f].cy) <= 0.5);
  }
}

TEST_CASE("synthetic: full occlusion hides every target pixel") {
  SyntheticSpec spec;
  spec.n_frames = 20;
  spec.seed = 17;
  spec.occlusion_events.push_back({10, 5, 1.0});
  TargetMasks masks;
  Sequence seq = generate_synthetic(spec, &masks);
  for (int f = 10; f < 15; ++f) {
    const Image& img = seq.frames[f];
    for (int y = 0; y < spec.frame_h; ++y)
      for (int x = 0; x < spec.frame_w; ++x)
        if (masks[f][static_cast<std::size_t>(y) * spec.frame_w + x]) {
          // occluder fill colour
          CHECK(img.px(x, y)[0] == 38);
          CHECK(img.px(x, y)[2] == 46);
        }
  }
}

TEST_CASE("synthetic: target larger than frame is a spec error") {
  SyntheticSpec spec;
  spec.target_w = 1000;
  CHECK_THROWS_AS(generate_synthetic(spec), ContractError);
}

namespace {

class OracleTracker final : public SequenceTracker {
 public:
  explicit OracleTracker(const Sequence& seq) : seq_(&seq) {}
  void init(const Image&, const BBox&) override { next_ = 1; }
  std::pair<BBox, double> step(const Image&) override { return {seq_->gt[next_++], 1.0}; }

 private:
  const Sequence* seq_;
  std::size_t next_ = 1;
};

class StaticTracker final : public SequenceTracker {
 public:
  void init(const Image&, const BBox& box) override { box_ = box; }
  std::pair<BBox, double> step(const Image&) override { return {box_, 0.0}; }

 private:
  BBox box_;
};

}  // namespace

TEST_CASE("run_ope: oracle vs static tracker ordering") {
  SyntheticSpec spec;
  spec.n_frames = 12;
  spec.frame_w = 64;
  spec.frame_h = 48;
  spec.target_w = 12;
  spec.target_h = 10;
  spec.seed = 3;
  std::vector<Sequence> seqs = {generate_synthetic(spec)};

  OpeOutcome oracle = run_ope(
      [](const Sequence& s) -> std::unique_ptr<SequenceTracker> {
        return std::make_unique<OracleTracker>(s);
      },
      seqs);
  CHECK(oracle.report.aggregate.precision_at_20 == 1.0);
  CHECK(oracle.report.aggregate.auc == doctest::Approx(50.0 / 51.0).epsilon(1e-12));

  OpeOutcome fixed = run_ope(
      [](const Sequence&) -> std::unique_ptr<SequenceTracker> {
        return std::make_unique<StaticTracker>();
      },
      seqs);
  CHECK(fixed.report.aggregate.auc < oracle.report.aggregate.auc);

  // reproducible across runs
  OpeOutcome fixed2 = run_ope(
      [](const Sequence&) -> std::unique_ptr<SequenceTracker> {
        return std::make_unique<StaticTracker>();
      },
      seqs);
  CHECK(fixed.report.aggregate.auc == fixed2.report.aggregate.auc);
  CHECK(fixed.report.aggregate.mean_cle == fixed2.report.aggregate.mean_cle);
}

TEST_CASE("run_ope: failing trackers are excluded with a diagnostic") {
  class ThrowingTracker final : public SequenceTracker {
   public:
    void init(const Image&, const BBox&) override {}
    std::pair<BBox, double> step(const Image&) override {
      throw ContractError("synthetic failure");
    }
  };
  std::vector<Sequence> seqs = {tiny_sequence(4)};
  OpeOutcome out = run_ope(
      [](const Sequence&) -> std::unique_ptr<SequenceTracker> {
        return std::make_unique<ThrowingTracker>();
      },
      seqs);
  CHECK(out.results.empty());
  REQUIRE(out.failures.size() == 1);
  CHECK(out.failures[0].first == "tiny");
  CHECK(out.failures[0].second.find("synthetic failure") != std::string::npos);
}

TEST_CASE("report JSON has the documented schema") {
  std::map<std::string, TrackResult> results;
  std::map<std::string, std::vector<BBox>> gts;
  TrackResult tr;
  tr.boxes.assign(2, BBox::from_corner(0, 0, 4, 4));
  tr.scores.assign(2, 0.0);
  tr.fps = 33.0;
  results["a"] = tr;
  gts["a"] = tr.boxes;
  MetricsReport rep = compute_metrics(results, gts);
  const std::string json = report_to_json(rep);
  for (const char* key : {"\"sequences\"", "\"aggregate\"", "\"precision_curve\"",
                          "\"success_curve\"", "\"auc\"", "\"precision_at_20\"", "\"mean_cle\"",
                          "\"fps\""})
    CHECK(json.find(key) != std::string::npos);
}
