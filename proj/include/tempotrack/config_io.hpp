#pragma once

#include <set>
#include <string>

#include <json.hpp>

#include "tempotrack/config.hpp"

namespace tempotrack {

inline nlohmann::json config_to_json(const TrackerConfig& c) {
  return nlohmann::json{{"search_size", c.search_size},
                        {"template_size", c.template_size},
                        {"stride", c.stride},
                        {"channels", c.channels},
                        {"n_hist", c.n_hist},
                        {"train_hist", c.train_hist},
                        {"heads", c.heads},
                        {"enc_layers", c.enc_layers},
                        {"dec_layers", c.dec_layers},
                        {"reduction", c.reduction},
                        {"tau", c.tau},
                        {"window_influence", c.window_influence},
                        {"smooth_factor", c.smooth_factor},
                        {"template_context", c.template_context},
                        {"seed", c.seed},
                        {"ablation", to_string(c.ablation)}};
}

// Applies keys from j onto base. Unknown keys are rejected by name so config
// typos fail loudly.
inline TrackerConfig config_from_json(const nlohmann::json& j, TrackerConfig base = {}) {
  static const std::set<std::string> known = {
      "search_size", "template_size", "stride",         "channels",
      "n_hist",      "train_hist",    "heads",          "enc_layers",
      "dec_layers",  "reduction",     "tau",            "window_influence",
      "smooth_factor", "template_context", "seed",      "ablation"};
  if (!j.is_object()) throw FormatError("config: expected a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw FormatError("config: unknown key '" + key + "'");
  TrackerConfig c = base;
  auto get = [&j](const char* k, auto& out) {
    if (j.contains(k)) out = j.at(k).template get<std::decay_t<decltype(out)>>();
  };
  get("search_size", c.search_size);
  get("template_size", c.template_size);
  get("stride", c.stride);
  get("channels", c.channels);
  get("n_hist", c.n_hist);
  get("train_hist", c.train_hist);
  get("heads", c.heads);
  get("enc_layers", c.enc_layers);
  get("dec_layers", c.dec_layers);
  get("reduction", c.reduction);
  get("tau", c.tau);
  get("window_influence", c.window_influence);
  get("smooth_factor", c.smooth_factor);
  get("template_context", c.template_context);
  get("seed", c.seed);
  if (j.contains("ablation")) c.ablation = ablation_from_string(j.at("ablation").get<std::string>());
  return c;
}

}  // namespace tempotrack
