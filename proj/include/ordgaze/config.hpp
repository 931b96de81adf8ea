#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ordgaze/checkpoint.hpp"
#include "ordgaze/train.hpp"

namespace ordgaze {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a run needs; every field is reachable through a flat key.
struct RunConfig {
  SynthConfig data;
  GazeNetConfig net;
  TatConfig train;
  std::string scheme = "tat";  // plain | tat | dwo | tat+dwo
  std::string dtype = "f32";

  RunConfig() { net.patch_size = data.patch_size; }
};

namespace config_detail {

struct Key {
  std::string name;
  std::string doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline std::size_t to_size(const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw std::invalid_argument("expected a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(std::stoull(v));
}

inline bool to_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("expected a boolean, got '" + v + "'");
}

template <class M>
Key size_key(std::string name, std::string doc, M RunConfig::*group, std::size_t M::*field) {
  return {std::move(name), std::move(doc),
          [=](const RunConfig& c) { return std::to_string(c.*group.*field); },
          [=](RunConfig& c, const std::string& v) { c.*group.*field = to_size(v); }};
}

template <class M>
Key real_key(std::string name, std::string doc, M RunConfig::*group, double M::*field) {
  return {std::move(name), std::move(doc), [=](const RunConfig& c) { return exact(c.*group.*field); },
          [=](RunConfig& c, const std::string& v) { c.*group.*field = parse_exact(v); }};
}

inline const std::vector<Key>& keys() {
  using C = RunConfig;
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    k.push_back({"scheme", "plain | tat | dwo | tat+dwo", [](const C& c) { return c.scheme; },
                 [](C& c, const std::string& v) {
                   if (v != "plain" && v != "tat" && v != "dwo" && v != "tat+dwo")
                     throw std::invalid_argument("unknown scheme '" + v + "'");
                   c.scheme = v;
                 }});
    k.push_back({"dtype", "f32 | f64", [](const C& c) { return c.dtype; },
                 [](C& c, const std::string& v) {
                   if (v != "f32" && v != "f64") throw std::invalid_argument("dtype must be f32 or f64");
                   c.dtype = v;
                 }});
    k.push_back({"seed", "master seed for data, init, shuffling, teachers, surgery, attacks",
                 [](const C& c) { return std::to_string(c.train.seed); },
                 [](C& c, const std::string& v) { c.train.seed = c.data.seed = to_size(v); }});

    k.push_back(size_key("data.train_subjects", "training subjects", &C::data, &SynthConfig::train_subjects));
    k.push_back(size_key("data.val_subjects", "validation subjects", &C::data, &SynthConfig::val_subjects));
    k.push_back(size_key("data.test_subjects", "test subjects", &C::data, &SynthConfig::test_subjects));
    k.push_back(size_key("data.samples_per_subject", "samples per subject", &C::data,
                         &SynthConfig::samples_per_subject));
    k.push_back(real_key("data.screen_width_cm", "x range (cm)", &C::data, &SynthConfig::screen_width_cm));
    k.push_back(real_key("data.screen_height_cm", "y range (cm)", &C::data, &SynthConfig::screen_height_cm));
    k.push_back({"patch_size", "square patch side (px) of face and eye crops",
                 [](const C& c) { return std::to_string(c.data.patch_size); },
                 [](C& c, const std::string& v) { c.data.patch_size = c.net.patch_size = to_size(v); }});
    k.push_back({"channels", "image channels of every patch",
                 [](const C& c) { return std::to_string(c.data.channels); },
                 [](C& c, const std::string& v) { c.data.channels = c.net.in_channels = to_size(v); }});
    k.push_back(real_key("data.noise_std", "pixel noise sigma, [0,255] units", &C::data, &SynthConfig::noise_std));
    k.push_back(real_key("data.label_noise_cm", "gt noise sigma on the train split", &C::data,
                         &SynthConfig::label_noise_cm));
    k.push_back(real_key("data.socket_radius", "eye socket radius / patch", &C::data, &SynthConfig::socket_radius));
    k.push_back(real_key("data.pupil_radius", "pupil radius / patch", &C::data, &SynthConfig::pupil_radius));
    k.push_back(real_key("data.pupil_gain", "pupil travel per unit gaze", &C::data, &SynthConfig::pupil_gain));
    k.push_back(real_key("data.head_coupling", "gaze offset per unit head shift", &C::data,
                         &SynthConfig::head_coupling));
    k.push_back(real_key("data.face_travel", "face blob travel per unit head shift", &C::data,
                         &SynthConfig::face_travel));
    k.push_back(real_key("data.intensity_contrast", "contrast multiplier", &C::data,
                         &SynthConfig::intensity_contrast));
    k.push_back(size_key("data.sequence_points", "fixation points per test subject", &C::data,
                         &SynthConfig::sequence_points));
    k.push_back(size_key("data.sequence_frames", "frames per fixation sequence", &C::data,
                         &SynthConfig::sequence_frames));
    k.push_back(real_key("data.sequence_noise_std", "pixel noise of sequence frames", &C::data,
                         &SynthConfig::sequence_noise_std));
    k.push_back(real_key("data.sequence_max_shift_px", "max translation of sequence frames", &C::data,
                         &SynthConfig::sequence_max_shift_px));

    k.push_back(size_key("net.branch_feature_dim", "per-branch feature width", &C::net,
                         &GazeNetConfig::branch_feature_dim));
    k.push_back(size_key("net.fusion_dim", "fused feature width", &C::net, &GazeNetConfig::fusion_dim));
    k.push_back(size_key("net.bins_x", "ordinal bins for x", &C::net, &GazeNetConfig::bins_x));
    k.push_back(size_key("net.bins_y", "ordinal bins for y", &C::net, &GazeNetConfig::bins_y));
    k.push_back({"net.conv_stack", "per-branch convs as CxKsS, comma separated",
                 [](const C& c) { return conv_stack_string(c.net.conv_stack); },
                 [](C& c, const std::string& v) { c.net.conv_stack = parse_conv_stack(v); }});

    k.push_back(size_key("tat.K", "mini-generations", &C::train, &TatConfig::mini_generations));
    k.push_back(size_key("tat.L", "epochs per mini-generation", &C::train, &TatConfig::epochs_per_generation));
    k.push_back(size_key("tat.warmup", "warmup epochs before the first mini-generation", &C::train,
                         &TatConfig::warmup_epochs));
    k.push_back(real_key("tat.p", "pruned fraction of all conv filters", &C::train, &TatConfig::prune_ratio));
    k.push_back(real_key("tat.p_max", "per-layer cap on the pruned fraction", &C::train,
                         &TatConfig::prune_layer_cap));
    k.push_back({"tat.lambda_hard", "weight of the hard-label loss",
                 [](const C& c) { return exact(c.train.weights.hard); },
                 [](C& c, const std::string& v) { c.train.weights.hard = parse_exact(v); }});
    k.push_back({"tat.lambda_mix", "weight of the feature-mixup loss",
                 [](const C& c) { return exact(c.train.weights.mix); },
                 [](C& c, const std::string& v) { c.train.weights.mix = parse_exact(v); }});
    k.push_back({"tat.lambda_teacher", "weight of the teacher loss",
                 [](const C& c) { return exact(c.train.weights.teacher); },
                 [](C& c, const std::string& v) { c.train.weights.teacher = parse_exact(v); }});
    k.push_back({"tat.strategy", "none | last_one | mean | best | random",
                 [](const C& c) { return std::string(strategy_name(c.train.strategy)); },
                 [](C& c, const std::string& v) { c.train.strategy = parse_strategy(v); }});
    k.push_back({"tat.sampling", "per_epoch | per_minigen",
                 [](const C& c) { return std::string(sampling_name(c.train.sampling)); },
                 [](C& c, const std::string& v) { c.train.sampling = parse_sampling(v); }});
    k.push_back(real_key("tat.quality_factor", "teacher admission threshold / first val error", &C::train,
                         &TatConfig::quality_factor));
    k.push_back({"tat.prune_metric", "signed | absolute",
                 [](const C& c) { return std::string(prune_metric_name(c.train.prune_metric)); },
                 [](C& c, const std::string& v) { c.train.prune_metric = parse_prune_metric(v); }});
    k.push_back({"tat.reinit", "aligned | orth_raw | uniform | scratch",
                 [](const C& c) { return std::string(reinit_name(c.train.reinit.mode)); },
                 [](C& c, const std::string& v) { c.train.reinit.mode = parse_reinit(v); }});
    k.push_back({"tat.per_filter_scalar", "draw one norm per re-initialized filter",
                 [](const C& c) { return std::string(c.train.reinit.per_filter_scalar ? "true" : "false"); },
                 [](C& c, const std::string& v) { c.train.reinit.per_filter_scalar = to_bool(v); }});
    k.push_back({"tat.bn_eps", "BN epsilon in the norm adjustment",
                 [](const C& c) { return exact(c.train.reinit.bn_eps); },
                 [](C& c, const std::string& v) { c.train.reinit.bn_eps = parse_exact(v); }});
    k.push_back({"tat.reset_momentum", "zero SGD momentum at each mini-generation",
                 [](const C& c) { return std::string(c.train.reset_momentum ? "true" : "false"); },
                 [](C& c, const std::string& v) { c.train.reset_momentum = to_bool(v); }});
    k.push_back(real_key("tat.divergence_factor", "abort when val error exceeds this x the first", &C::train,
                         &TatConfig::divergence_factor));
    k.push_back(size_key("tat.eval_batch", "evaluation batch size", &C::train, &TatConfig::eval_batch));

    k.push_back({"optim.lr", "SGD learning rate", [](const C& c) { return exact(c.train.optim.lr); },
                 [](C& c, const std::string& v) { c.train.optim.lr = parse_exact(v); }});
    k.push_back({"optim.momentum", "SGD momentum", [](const C& c) { return exact(c.train.optim.momentum); },
                 [](C& c, const std::string& v) { c.train.optim.momentum = parse_exact(v); }});
    k.push_back({"optim.weight_decay", "L2 weight decay",
                 [](const C& c) { return exact(c.train.optim.weight_decay); },
                 [](C& c, const std::string& v) { c.train.optim.weight_decay = parse_exact(v); }});
    k.push_back({"optim.decay_factor", "lr multiplier in the last epoch of each mini-generation",
                 [](const C& c) { return exact(c.train.optim.decay_factor); },
                 [](C& c, const std::string& v) { c.train.optim.decay_factor = parse_exact(v); }});
    k.push_back({"optim.batch_size", "mini-batch size",
                 [](const C& c) { return std::to_string(c.train.optim.batch_size); },
                 [](C& c, const std::string& v) { c.train.optim.batch_size = to_size(v); }});

    auto pgd_real = [](std::string name, std::string doc, double PgdConfig::*f) {
      return Key{std::move(name), std::move(doc), [=](const C& c) { return exact(c.train.pgd.*f); },
                 [=](C& c, const std::string& v) { c.train.pgd.*f = parse_exact(v); }};
    };
    k.push_back(pgd_real("pgd.epsilon", "L-inf budget, [0,255] units", &PgdConfig::epsilon));
    k.push_back(pgd_real("pgd.gamma", "step length, [0,255] units", &PgdConfig::gamma));
    k.push_back(pgd_real("pgd.org_percent", "percentage of clean samples per batch", &PgdConfig::org_percent));
    k.push_back({"pgd.T", "attack iterations", [](const C& c) { return std::to_string(c.train.pgd.iterations); },
                 [](C& c, const std::string& v) { c.train.pgd.iterations = to_size(v); }});
    k.push_back({"pgd.k", "center-bin half width (2k bins per coordinate)",
                 [](const C& c) { return std::to_string(c.train.pgd.half_width); },
                 [](C& c, const std::string& v) { c.train.pgd.half_width = to_size(v); }});
    const char* patch_names[3] = {"face", "left", "right"};
    for (int i = 0; i < 3; ++i)
      k.push_back({std::string("pgd.perturb_") + patch_names[i], "attack this patch",
                   [=](const C& c) { return std::string(c.train.pgd.perturb[i] ? "true" : "false"); },
                   [=](C& c, const std::string& v) { c.train.pgd.perturb[i] = to_bool(v); }});
    return k;
  }();
  return table;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace config_detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : config_detail::keys()) out.push_back(k.name);
  return out;
}

inline void set_config(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& keys = config_detail::keys();
  auto it = std::find_if(keys.begin(), keys.end(), [&](const auto& k) { return k.name == key; });
  if (it == keys.end()) throw ConfigError("unknown config key '" + key + "'");
  try {
    it->set(cfg, value);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(key + ": " + e.what());
  } catch (const std::out_of_range&) {
    throw ConfigError(key + ": value out of range");
  }
}

inline std::string get_config(const RunConfig& cfg, const std::string& key) {
  for (const auto& k : config_detail::keys())
    if (k.name == key) return k.get(cfg);
  throw ConfigError("unknown config key '" + key + "'");
}

/// "key=value" override, as given on the command line.
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set_config(cfg, config_detail::trim(assignment.substr(0, eq)), config_detail::trim(assignment.substr(eq + 1)));
}

inline void apply_config_text(RunConfig& cfg, std::istream& in, const std::string& origin = "config") {
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    try {
      apply_override(cfg, line);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(n) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError(path.string() + ": cannot open config file");
  apply_config_text(cfg, f, path.string());
}

/// Checks cross-field constraints; throws ConfigError with the first problem.
inline void validate(const RunConfig& cfg) {
  try {
    cfg.data.validate();
    cfg.net.validate();
    cfg.train.validate();
    if (cfg.scheme == "dwo" || cfg.scheme == "tat+dwo") cfg.train.pgd.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (cfg.net.patch_size != cfg.data.patch_size) throw ConfigError("net and data patch sizes differ");
  if (cfg.net.in_channels != cfg.data.channels) throw ConfigError("net and data channel counts differ");
}

inline std::string dump_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : config_detail::keys()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

/// One "key  default  doc" line per key.
inline std::string describe_config() {
  RunConfig def;
  std::string out;
  for (const auto& k : config_detail::keys())
    out += k.name + " = " + k.get(def) + "    # " + k.doc + "\n";
  return out;
}

}  // namespace ordgaze
