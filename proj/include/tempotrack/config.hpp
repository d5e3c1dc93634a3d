#pragma once

#include <cstdint>
#include <string>

#include "tempotrack/common.hpp"
#include "tempotrack/transformer.hpp"

namespace tempotrack {

// Which parts of the pipeline run. The switches are structural bypasses so
// that disabled stages leave the data path bit-identical to not having them.
enum class Ablation { baseline, temcor, mt, no_encoder, no_filter, full };

inline const char* to_string(Ablation a) {
  switch (a) {
    case Ablation::baseline: return "baseline";
    case Ablation::temcor: return "temcor";
    case Ablation::mt: return "mt";
    case Ablation::no_encoder: return "no-encoder";
    case Ablation::no_filter: return "no-filter";
    case Ablation::full: return "full";
  }
  return "full";
}

inline Ablation ablation_from_string(const std::string& s) {
  if (s == "baseline") return Ablation::baseline;
  if (s == "temcor") return Ablation::temcor;
  if (s == "mt") return Ablation::mt;
  if (s == "no-encoder") return Ablation::no_encoder;
  if (s == "no-filter") return Ablation::no_filter;
  if (s == "full") return Ablation::full;
  throw ContractError("unknown ablation '" + s +
                      "' (expected baseline|temcor|mt|no-encoder|no-filter|full)");
}

struct AblationToggles {
  bool use_fusion = true;       // multi-template fusion of the correlation step
  bool use_transformer = true;  // refinement stage as a whole
  bool use_encoder = true;
  bool use_filter = true;
};

inline AblationToggles toggles_for(Ablation a) {
  switch (a) {
    case Ablation::baseline: return {false, false, false, false};
    case Ablation::temcor: return {true, false, false, false};
    case Ablation::mt: return {false, true, true, true};
    case Ablation::no_encoder: return {true, true, false, true};
    case Ablation::no_filter: return {true, true, true, false};
    case Ablation::full: return {true, true, true, true};
  }
  return {};
}

struct TrackerConfig {
  int search_size = 287;
  int template_size = 127;
  int stride = 8;
  int channels = 192;
  int n_hist = 3;       // memory capacity
  int train_hist = 3;   // historical frames per training sample
  int heads = 6;
  int enc_layers = 1;
  int dec_layers = 2;
  int reduction = 2;
  double tau = 3.0;
  double window_influence = 0.30;
  double smooth_factor = 0.7;       // box size damping toward the new estimate
  double template_context = 1.0;    // search context scales by size ratio
  std::uint64_t seed = 42;
  Ablation ablation = Ablation::full;

  // Backbone widths derive from the embedding width so one knob scales the
  // whole model.
  int bb1() const { return channels / 6; }
  int bb2() const { return channels / 3; }
  int bb3() const { return channels / 2; }
  int head_hidden() const { return channels / 2; }

  double search_context() const {
    return template_context * static_cast<double>(search_size) / template_size;
  }

  AttentionConfig attention() const {
    AttentionConfig a;
    a.heads = static_cast<std::size_t>(heads);
    a.model_dim = static_cast<std::size_t>(channels);
    a.encoder_layers = static_cast<std::size_t>(enc_layers);
    a.decoder_layers = static_cast<std::size_t>(dec_layers);
    a.reduction = static_cast<std::size_t>(reduction);
    return a;
  }

  void validate() const {
    if (search_size <= template_size)
      throw ContractError("config: search_size must exceed template_size");
    if ((search_size - template_size) % stride != 0)
      throw ContractError("config: (search_size - template_size) must be divisible by stride");
    if (channels % 6 != 0)
      throw ContractError("config: channels must be divisible by 6 (head count)");
    if (channels % (heads * 2) != 0)
      throw ContractError("config: channels must be divisible by heads and by 2");
    if (n_hist < 0 || train_hist < 1 || enc_layers < 0 || dec_layers < 1)
      throw ContractError("config: invalid layer/history counts");
    if (tau != tau) throw ContractError("config: tau must be a number");
    attention().validate();
  }

  // Feature-map side length produced by the stride-8 backbone for a square
  // input of the given size (three stride-2 stages with pad 1, kernel 3).
  static int feature_size(int input_size) {
    int s = input_size;
    for (int i = 0; i < 3; ++i) s = (s - 1) / 2 + 1;
    return s;
  }
  int search_feat_size() const { return feature_size(search_size); }
  int template_feat_size() const { return feature_size(template_size); }
  int corr_size() const { return search_feat_size() - template_feat_size() + 1; }
};

// Desk-scale profile: small enough to train and benchmark on a laptop CPU
// while keeping every architectural ratio of the default profile.
inline TrackerConfig toy_config() {
  TrackerConfig c;
  c.search_size = 159;
  c.template_size = 63;
  c.channels = 48;
  return c;
}

}  // namespace tempotrack
