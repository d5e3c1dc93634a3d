#pragma once

// Seeded synthetic UAV-style sequences: a textured target over a textured
// background with piecewise-linear motion, jitter, scale change, appearance
// drift, distractors, blur bursts, and occlusion windows. Exact ground truth
// comes with every frame.

#include <cstdint>
#include <string>
#include <vector>

#include "tempotrack/eval.hpp"

namespace tempotrack {

struct OcclusionEvent {
  int start = 0;
  int duration = 0;
  double coverage = 1.0;  // fraction of the target box hidden
};

struct BlurEvent {
  int start = 0;
  int duration = 0;
  double sigma = 1.5;
};

struct SyntheticSpec {
  std::string name = "seq";
  int frame_w = 320, frame_h = 240;
  int n_frames = 100;
  double target_w = 36, target_h = 28;
  int waypoints = 4;              // <=1 means a static target
  double jitter_amp = 1.0;        // per-frame uniform center jitter, px
  double scale_rate = 0.10;       // relative size oscillation amplitude
  double appearance_drift = 0.3;  // how far the target tint drifts over the run
  int distractors = 0;
  double distractor_similarity = 0.7;  // 1.0 = same texture as the target
  std::vector<BlurEvent> blur_events;
  std::vector<OcclusionEvent> occlusion_events;
  std::uint64_t seed = 1;

  void validate() const {
    if (target_w >= frame_w || target_h >= frame_h)
      throw ContractError("synthetic spec: target larger than frame");
    if (n_frames < 2) throw ContractError("synthetic spec: need at least 2 frames");
  }
};

// Per-frame boolean masks (frame_w*frame_h) of rendered target pixels before
// occluders are drawn; used by generator tests.
using TargetMasks = std::vector<std::vector<std::uint8_t>>;

Sequence generate_synthetic(const SyntheticSpec& spec, TargetMasks* masks = nullptr);

// The seeded 20x100 benchmark family: deterministic specs covering motion,
// scale change, distractors, blur, and occlusion.
std::vector<SyntheticSpec> default_benchmark_specs(std::uint64_t seed, int sequences = 20,
                                                   int frames = 100);

}  // namespace tempotrack
