#pragma once

// Sequence I/O in the OTB directory convention, OPE metrics (precision /
// success / AUC / CLE), and the one-pass evaluation driver.

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tempotrack/geometry.hpp"
#include "tempotrack/image.hpp"

namespace tempotrack {

struct Sequence {
  std::string name;
  std::vector<std::filesystem::path> frame_paths;  // used when frames is empty
  std::vector<Image> frames;                       // in-memory variant
  std::vector<BBox> gt;                            // one per frame
  std::vector<std::string> attributes;

  std::size_t size() const { return gt.size(); }
  Image frame(std::size_t i) const {
    if (!frames.empty()) return frames[i];
    return load_image(frame_paths.at(i));
  }
};

struct TrackResult {
  std::vector<BBox> boxes;
  std::vector<double> scores;
  double fps = 0;
};

struct SequenceMetrics {
  std::vector<double> precision_curve;  // thresholds 0..50 px
  std::vector<double> success_curve;    // IoU thresholds 0..1 in steps of 0.02
  double precision_at_20 = 0;
  double auc = 0;
  double mean_cle = 0;
  double fps = 0;
};

struct MetricsReport {
  std::map<std::string, SequenceMetrics> sequences;
  SequenceMetrics aggregate;
};

inline constexpr int kCurvePoints = 51;

// Directory layout: <dir>/img/0001.ppm (or .jpg), one zero-padded frame per
// gt line in <dir>/groundtruth_rect.txt ("x,y,w,h", comma or tab separated,
// corner form, 1-based pixel coordinates).
Sequence load_sequence(const std::filesystem::path& dir);

// Writes the same layout (frames as PPM). Frames must be in memory.
void save_sequence(const std::filesystem::path& dir, const Sequence& seq);

// Parses one groundtruth line; throws FormatError mentioning line_no on bad
// arity or non-numeric fields.
BBox parse_gt_line(const std::string& line, int line_no);

MetricsReport compute_metrics(const std::map<std::string, TrackResult>& results,
                              const std::map<std::string, std::vector<BBox>>& gts);

// Per-sequence tracker interface used by the OPE driver; one instance per
// sequence, never shared across threads.
class SequenceTracker {
 public:
  virtual ~SequenceTracker() = default;
  virtual void init(const Image& frame, const BBox& box) = 0;
  virtual std::pair<BBox, double> step(const Image& frame) = 0;
};

using TrackerFactory = std::function<std::unique_ptr<SequenceTracker>(const Sequence&)>;

struct OpeOptions {
  int threads = 1;
};

struct OpeOutcome {
  std::map<std::string, TrackResult> results;
  std::vector<std::pair<std::string, std::string>> failures;  // name, diagnostic
  MetricsReport report;
};

// Init on frame 0 ground truth, track every later frame, no re-init. Failed
// sequences are excluded from the report with a warning on stderr.
OpeOutcome run_ope(const TrackerFactory& factory, const std::vector<Sequence>& sequences,
                   const OpeOptions& options = {});

// JSON/CSV emission of a metrics report (schema documented in the README).
std::string report_to_json(const MetricsReport& report);
void write_report_files(const MetricsReport& report, const std::filesystem::path& out_dir);

}  // namespace tempotrack
