#include <cstring>
#include <optional>

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ordgaze/checkpoint.hpp"
#include "ordgaze/config.hpp"
#include "ordgaze/log.hpp"
#include "ordgaze/robustness.hpp"
#include "ordgaze/synth.hpp"
#include "ordgaze/train.hpp"

#ifndef ORDGAZE_GIT_DESCRIBE
#define ORDGAZE_GIT_DESCRIBE "unknown"
#endif

namespace fs = std::filesystem;
using namespace ordgaze;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string log_level;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_file, "key = value config file")->check(CLI::ExistingFile);
  app->add_option("--set", c.overrides, "override one config key (key=value), repeatable");
  app->add_option("--seed", c.seed, "master seed");
  app->add_option("--log-level", c.log_level, "trace|debug|info|warn|error|off");
}

void resolve(RunConfig& cfg, const Common& c) {
  try {
    if (!c.config_file.empty()) apply_config_file(cfg, c.config_file);
    for (const auto& o : c.overrides) apply_override(cfg, o);
    if (c.seed) set_config(cfg, "seed", std::to_string(*c.seed));
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  if (!c.log_level.empty()) logger()->set_level(spdlog::level::from_str(c.log_level));
}

Metadata config_meta(const RunConfig& cfg) {
  Metadata m;
  for (const auto& k : config_keys()) m["config." + k] = get_config(cfg, k);
  return m;
}

RunConfig config_from_meta(const Metadata& m) {
  RunConfig cfg;
  for (const auto& [k, v] : m)
    if (k.rfind("config.", 0) == 0) set_config(cfg, k.substr(7), v);
  return cfg;
}

Dataset load_data(const RunConfig& cfg, const std::string& dir) {
  if (!dir.empty()) {
    logger()->info("reading dataset from {}", dir);
    return read_dataset(dir);
  }
  return generate(cfg.data);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error(p.string() + ": cannot write");
  f << text;
}

std::string csv_path_list(const std::vector<std::string>& v) {
  std::string out;
  for (const auto& s : v) out += (out.empty() ? "" : " ") + s;
  return out;
}

// ------------------------------------------------------------------ synth-data

int cmd_synth(const Common& common, const std::string& out) {
  RunConfig cfg;
  resolve(cfg, common);
  validate(cfg);
  auto ds = generate(cfg.data);
  generate_sequences(ds, SequenceOptions{cfg.data.sequence_noise_std, cfg.data.sequence_max_shift_px,
                                         cfg.data.seed});
  write_dataset(out, ds);
  std::printf("wrote %zu records (%zu sequences) to %s\n", ds.records.size(), ds.sequences.size(),
              out.c_str());
  return 0;
}

// ------------------------------------------------------------------ train

template <class T>
int train_typed(const RunConfig& cfg, const std::string& data_dir, const fs::path& out,
                const std::string& command) {
  auto ds = load_data(cfg, data_dir);
  if (ds.config.patch_size != cfg.net.patch_size || ds.config.channels != cfg.net.in_channels)
    throw std::runtime_error("dataset patch shape does not match the network config");
  fs::create_directories(out / "teachers");
  write_text(out / "run.cfg", "# resolved configuration\n" + dump_config(cfg));

  auto meta = config_meta(cfg);
  meta["git_describe"] = ORDGAZE_GIT_DESCRIBE;
  if (!data_dir.empty()) meta["data_dir"] = fs::absolute(data_dir).string();

  std::ofstream teachers(out / "teachers.tsv");
  teachers << "mini_generation\tval_err_cm\tcheckpoint\n";
  TrainHooks<T> hooks;
  hooks.on_teacher = [&](const TeacherEntry<T>& e) {
    const auto name = "teachers/gen" + std::to_string(e.mini_generation) + ".ckpt";
    auto m = meta;
    m["role"] = "teacher";
    m["mini_generation"] = std::to_string(e.mini_generation);
    m["val_err_cm"] = exact(e.val_error);
    save_checkpoint(*e.model, m, out / name);
    teachers << e.mini_generation << '\t' << exact(e.val_error) << '\t' << name << '\n' << std::flush;
  };

  auto model = make_model<T>(cfg.net, ds.config, cfg.train.seed);
  auto tc = cfg.train;
  TrainResult<T> res = [&] {
    try {
      if (cfg.scheme == "plain") return run_plain(tc, ds, std::move(model), hooks);
      if (cfg.scheme == "dwo") return run_dwo(tc, ds, std::move(model), hooks);
      tc.adversarial = cfg.scheme == "tat+dwo";
      return run_tat(tc, ds, std::move(model), hooks);
    } catch (const TrainingDiverged& e) {
      std::ofstream csv(out / "metrics.csv");
      write_metrics_csv(csv, e.history);
      throw;
    }
  }();

  {
    std::ofstream csv(out / "metrics.csv");
    write_metrics_csv(csv, res.history);
    std::ofstream s(out / "surgeries.csv");
    s << "after_epoch,mini_generation,filters,shortfall,val_err_before,val_err_after,next_batch_loss\n";
    s.precision(10);
    for (const auto& g : res.history.surgeries)
      s << g.after_epoch << ',' << g.mini_generation << ',' << g.filters << ',' << g.shortfall << ','
        << g.val_err_before << ',' << g.val_err_after << ',' << g.next_batch_loss << '\n';
  }
  const auto& last = res.history.epochs.back();
  meta["role"] = "final";
  meta["scheme"] = cfg.scheme;
  meta["epoch"] = std::to_string(last.epoch);
  meta["mini_generation"] = std::to_string(last.mini_generation);
  meta["val_err_cm"] = exact(last.val_err_cm);
  save_checkpoint(res.model, meta, out / "model.ckpt");

  std::ostringstream man;
  man << "# run manifest\n"
      << "command = " << command << "\n"
      << "git_describe = " << ORDGAZE_GIT_DESCRIBE << "\n"
      << "scheme = " << cfg.scheme << "\n"
      << "seed = " << cfg.train.seed << "\n"
      << "data = " << (data_dir.empty() ? std::string("generated") : meta["data_dir"]) << "\n"
      << "final_val_err_cm = " << exact(last.val_err_cm) << "\n"
      << "files = " << csv_path_list({"run.cfg", "metrics.csv", "surgeries.csv", "teachers.tsv", "model.ckpt"})
      << "\n\n# resolved configuration\n"
      << dump_config(cfg);
  write_text(out / "manifest.txt", man.str());
  std::printf("final val error %s cm after %zu epochs; run written to %s\n", exact(last.val_err_cm).c_str(),
              last.epoch, out.c_str());
  return 0;
}

int cmd_train(const Common& common, const std::string& scheme, const std::string& data_dir,
              const std::string& out, const std::string& command) {
  RunConfig cfg;
  resolve(cfg, common);
  if (!scheme.empty()) {
    try {
      set_config(cfg, "scheme", scheme);
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
  }
  validate(cfg);
  const fs::path dir = out.empty() ? fs::path("runs") / (cfg.scheme + "-seed" + std::to_string(cfg.train.seed)) : fs::path(out);
  return cfg.dtype == "f64" ? train_typed<double>(cfg, data_dir, dir, command)
                            : train_typed<float>(cfg, data_dir, dir, command);
}

// ------------------------------------------------------------------ loading helpers

template <class T>
struct Loaded {
  LoadedCheckpoint<T> ckpt;
  RunConfig cfg;
  Dataset ds;
};

template <class T>
Loaded<T> load_for_eval(const Common& common, const std::string& checkpoint, std::string data_dir) {
  auto ck = load_checkpoint<T>(checkpoint);
  RunConfig cfg;
  try {
    cfg = config_from_meta(ck.meta);
  } catch (const ConfigError& e) {
    throw CheckpointError(checkpoint + ": " + e.what());
  }
  resolve(cfg, common);
  if (data_dir.empty() && ck.meta.count("data_dir")) data_dir = ck.meta.at("data_dir");
  auto ds = load_data(cfg, data_dir);
  return {std::move(ck), cfg, std::move(ds)};
}

bool checkpoint_is_f64(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  char head[16] = {};
  f.read(head, sizeof head);
  std::uint32_t dtype = 0;
  std::memcpy(&dtype, head + 12, 4);
  return dtype == 8;
}

template <template <class> class F, class... A>
int dispatch(const std::string& checkpoint, A&&... a) {
  return checkpoint_is_f64(checkpoint) ? F<double>::run(checkpoint, a...) : F<float>::run(checkpoint, a...);
}

// ------------------------------------------------------------------ eval

template <class T>
struct Eval {
  static int run(const std::string& ckpt, const Common& common, const std::string& data_dir,
                 const std::string& split, const std::string& dump) {
    auto l = load_for_eval<T>(common, ckpt, data_dir);
    const auto ids = l.ds.indices(parse_split(split));
    std::vector<std::array<double, 2>> pred;
    const double err = evaluate(l.ckpt.model, l.ds, std::span<const std::size_t>(ids), l.cfg.train.eval_batch,
                                &pred);
    if (!dump.empty()) {
      std::ofstream f(dump);
      f << "record,pred_x,pred_y,gt_x,gt_y\n";
      f.precision(17);
      for (std::size_t i = 0; i < ids.size(); ++i)
        f << ids[i] << ',' << pred[i][0] << ',' << pred[i][1] << ',' << l.ds.records[ids[i]].gt_x << ','
          << l.ds.records[ids[i]].gt_y << '\n';
    }
    std::printf("%s error %s cm over %zu samples\n", split.c_str(), exact(err).c_str(), ids.size());
    return 0;
  }
};

// ------------------------------------------------------------------ msd

template <class T>
struct Msd {
  static int run(const std::string& ckpt, const Common& common, const std::string& data_dir,
                 std::optional<double> noise, std::optional<double> shift, const std::string& dump) {
    auto l = load_for_eval<T>(common, ckpt, data_dir);
    if (noise || shift || l.ds.sequences.empty())
      generate_sequences(l.ds, SequenceOptions{noise.value_or(l.cfg.data.sequence_noise_std),
                                               shift.value_or(l.cfg.data.sequence_max_shift_px),
                                               l.cfg.data.seed});
    auto res = msd(l.ckpt.model, l.ds);
    if (!dump.empty()) {
      std::ofstream f(dump);
      f << "sequence,frame,pred_x,pred_y\n";
      f.precision(17);
      for (const auto& s : l.ds.sequences) {
        auto p = predict_records(l.ckpt.model, l.ds, s.frames);
        for (std::size_t i = 0; i < p.size(); ++i) f << s.id << ',' << i << ',' << p[i][0] << ',' << p[i][1] << '\n';
      }
    }
    std::printf("%-9s %-7s %-9s %-9s %s\n", "sequence", "frames", "mean_x", "mean_y", "sigma_cm");
    for (const auto& s : res.sequences)
      std::printf("%-9d %-7zu %-9.4f %-9.4f %.6f\n", s.id, s.frames, s.mean[0], s.mean[1], s.sigma);
    std::printf("MSD %.9f cm over %zu sequences\n", res.msd, res.sequences.size());
    return 0;
  }
};

// ------------------------------------------------------------------ attack

template <class T>
struct Attack {
  static int run(const std::string& ckpt, const Common& common, const std::string& data_dir,
                 const std::string& split, std::size_t limit, const std::string& out) {
    auto l = load_for_eval<T>(common, ckpt, data_dir);
    l.cfg.train.pgd.validate();
    auto ids = l.ds.indices(parse_split(split));
    if (limit && ids.size() > limit) ids.resize(limit);
    if (ids.empty()) throw std::runtime_error("no samples in split " + split);
    auto& model = l.ckpt.model;
    const auto& pgd = l.cfg.train.pgd;
    Dataset adv_ds;
    adv_ds.config = l.ds.config;
    double max_delta = 0, sum_abs = 0, changed = 0, total = 0;
    std::vector<std::array<double, 2>> clean_pred, adv_pred, gt;
    for (std::size_t start = 0; start < ids.size(); start += l.cfg.train.eval_batch) {
      std::span<const std::size_t> sub(ids.data() + start, std::min(l.cfg.train.eval_batch, ids.size() - start));
      auto b = make_batch<T>(l.ds, sub, model.x_codec(), model.y_codec());
      auto a = pgd_attack(model, InputTriple<T>{b.face, b.left, b.right}, std::span<const T>(b.labels), pgd);
      {
        NoGradGuard g;
        model.set_training(false);
        auto pc = model.predict_gaze(model.forward(b.face, b.left, b.right));
        auto pa = model.predict_gaze(model.forward(a.face, a.left, a.right));
        clean_pred.insert(clean_pred.end(), pc.begin(), pc.end());
        adv_pred.insert(adv_pred.end(), pa.begin(), pa.end());
      }
      gt.insert(gt.end(), b.gt.begin(), b.gt.end());
      const std::size_t pv = l.ds.patch_values();
      for (std::size_t i = 0; i < sub.size(); ++i) {
        Record r = l.ds.records[sub[i]];
        const Tensor<T>* src[3] = {&a.face, &a.left, &a.right};
        const Tensor<T>* org[3] = {&b.face, &b.left, &b.right};
        for (int k = 0; k < 3; ++k)
          for (std::size_t j = 0; j < pv; ++j) {
            const double x = static_cast<double>((*src[k])[i * pv + j]);
            const double d = 255.0 * std::abs(x - static_cast<double>((*org[k])[i * pv + j]));
            max_delta = std::max(max_delta, d);
            sum_abs += d;
            changed += d > 0;
            total += 1;
            r.pixels[k * pv + j] = static_cast<std::uint8_t>(std::lround(std::clamp(x, 0.0, 1.0) * 255.0));
          }
        adv_ds.records.push_back(std::move(r));
      }
    }
    if (!out.empty()) {
      write_dataset(out, adv_ds);
      std::ofstream f(fs::path(out) / "attack.csv");
      f << "record,clean_x,clean_y,adv_x,adv_y,gt_x,gt_y\n";
      f.precision(17);
      for (std::size_t i = 0; i < ids.size(); ++i)
        f << ids[i] << ',' << clean_pred[i][0] << ',' << clean_pred[i][1] << ',' << adv_pred[i][0] << ','
          << adv_pred[i][1] << ',' << gt[i][0] << ',' << gt[i][1] << '\n';
    }
    std::printf("attacked %zu samples: eps %g gamma %g T %zu 2k %zu\n", ids.size(), pgd.epsilon, pgd.gamma,
                pgd.iterations, 2 * pgd.half_width);
    std::printf("max |delta| %.6f  mean |delta| %.6f  changed pixels %.4f (pixel units)\n", max_delta,
                sum_abs / total, changed / total);
    std::printf("error clean %.6f cm  adversarial %.6f cm\n", mean_error(clean_pred, gt), mean_error(adv_pred, gt));
    return 0;
  }
};

// ------------------------------------------------------------------ prune-report

template <class T>
struct PruneReport {
  static int run(const std::string& ckpt, const Common& common) {
    auto ck = load_checkpoint<T>(ckpt);
    RunConfig cfg = config_from_meta(ck.meta);
    resolve(cfg, common);
    const auto scores = score_model(ck.model, cfg.train.prune_metric);
    const auto sel = select_prune_set(scores, cfg.train.prune_ratio, cfg.train.prune_layer_cap);
    const auto layers = ck.model.conv_layers();
    std::printf("metric %s  p %g  p_max %g  quota %zu  selected %zu  shortfall %zu\n",
                prune_metric_name(cfg.train.prune_metric), sel.p, sel.p_max, sel.quota, sel.selected.size(),
                sel.shortfall());
    std::printf("%-22s %-8s %-9s %-9s %-9s %-9s %s\n", "layer", "filters", "cap", "pruned", "min", "mean", "max");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& s = scores[i];
      double mean = 0;
      for (double v : s) mean += v;
      mean /= static_cast<double>(s.size());
      std::printf("%-22s %-8zu %-9zu %-9zu %-9.4f %-9.4f %.4f\n", layers[i].name.c_str(), s.size(),
                  floor_fraction(sel.p_max, s.size()), sel.per_layer[i].size(),
                  *std::min_element(s.begin(), s.end()), mean, *std::max_element(s.begin(), s.end()));
    }
    return 0;
  }
};

std::string joined(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ordinal gaze estimation: synthetic data, TAT / DwO training, evaluation"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "all subcommands' help");
  bool list_keys = false;
  app.add_flag("--list-config", list_keys, "print every config key with its default and exit");

  Common common;
  std::string out, data_dir, split = "test", scheme, checkpoint, dump;
  std::optional<double> noise, shift;
  std::size_t limit = 0;

  auto* synth = app.add_subcommand("synth-data", "generate and write a synthetic dataset");
  add_common(synth, common);
  synth->add_option("--out", out, "dataset directory")->required();

  auto* train = app.add_subcommand("train", "train a model and write a run directory");
  add_common(train, common);
  train->add_option("--scheme", scheme, "plain|tat|dwo|tat+dwo")
      ->check(CLI::IsMember({"plain", "tat", "dwo", "tat+dwo"}));
  train->add_option("--data", data_dir, "dataset directory (default: generate from config)");
  train->add_option("--out", out, "run directory (default runs/<scheme>-seed<seed>)");

  auto* eval = app.add_subcommand("eval", "mean Euclidean error of a checkpoint");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_dir);
  eval->add_option("--split", split, "train|val|test")->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--dump", dump, "write per-sample predictions as CSV");

  auto* msdc = app.add_subcommand("msd", "mean standard deviation over fixation sequences");
  add_common(msdc, common);
  msdc->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  msdc->add_option("--data", data_dir);
  msdc->add_option("--noise-std", noise, "pixel noise of the sequence frames")->check(CLI::NonNegativeNumber);
  msdc->add_option("--max-shift", shift, "max frame translation (px)")->check(CLI::NonNegativeNumber);
  msdc->add_option("--dump", dump, "write per-frame predictions as CSV");

  auto* attack = app.add_subcommand("attack", "PGD-attack a split; dump examples and delta stats");
  add_common(attack, common);
  attack->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  attack->add_option("--data", data_dir);
  attack->add_option("--split", split)->check(CLI::IsMember({"train", "val", "test", "seq"}));
  attack->add_option("--limit", limit, "attack at most this many samples (0 = all)");
  attack->add_option("--out", out, "directory for the adversarial dataset and attack.csv");

  auto* prune = app.add_subcommand("prune-report", "per-layer similarity scores and the prune selection");
  add_common(prune, common);
  prune->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);

  try {
    if (argc >= 2 && std::string(argv[1]) == "--list-config") {
      std::fputs(describe_config().c_str(), stdout);
      return 0;
    }
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*synth) return cmd_synth(common, out);
    if (*train) return cmd_train(common, scheme, data_dir, out, joined(argc, argv));
    if (*eval) return dispatch<Eval>(checkpoint, common, data_dir, split, dump);
    if (*msdc) return dispatch<Msd>(checkpoint, common, data_dir, noise, shift, dump);
    if (*attack) return dispatch<Attack>(checkpoint, common, data_dir, split, limit, out);
    if (*prune) return dispatch<PruneReport>(checkpoint, common);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
