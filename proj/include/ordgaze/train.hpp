#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ordgaze/distillation.hpp"
#include "ordgaze/gaze_net.hpp"
#include "ordgaze/log.hpp"
#include "ordgaze/optim.hpp"
#include "ordgaze/pruning.hpp"
#include "ordgaze/reinit.hpp"
#include "ordgaze/robustness.hpp"
#include "ordgaze/synth.hpp"

namespace ordgaze {

struct TatConfig {
  std::size_t mini_generations = 5;  // K
  std::size_t epochs_per_generation = 7;  // L
  std::size_t warmup_epochs = 1;
  double prune_ratio = 0.20;      // p
  double prune_layer_cap = 0.50;  // p_max
  LossWeights weights{};
  TeacherStrategy strategy = TeacherStrategy::Random;
  TeacherSampling sampling = TeacherSampling::PerEpoch;
  double quality_factor = 1.1;  // threshold = factor x first mini-generation val error
  PruneMetric prune_metric = PruneMetric::Signed;
  ReinitOptions reinit{};
  OptimConfig optim{};
  bool reset_momentum = true;  // at each mini-generation boundary
  double divergence_factor = 10.0;
  std::size_t eval_batch = 256;
  bool adversarial = false;
  PgdConfig pgd{};
  std::uint64_t seed = 1;

  std::size_t total_epochs() const {
    return warmup_epochs + mini_generations * epochs_per_generation;
  }

  void validate() const {
    if (mini_generations == 0 || epochs_per_generation == 0)
      throw std::invalid_argument("tat: K and L must be >= 1");
    if (prune_ratio < 0 || prune_ratio > 1 || prune_layer_cap < 0 || prune_layer_cap > 1)
      throw std::invalid_argument("tat: p and p_max must lie in [0, 1]");
    if (!(quality_factor > 0)) throw std::invalid_argument("tat: quality factor must be positive");
    weights.validate();
    optim.validate();
    if (adversarial) pgd.validate();
  }
};

/// Configuration of the single-generation baseline with the same epoch budget.
inline TatConfig plain_config(TatConfig cfg) {
  cfg.epochs_per_generation = cfg.mini_generations * cfg.epochs_per_generation;
  cfg.mini_generations = 1;
  cfg.weights = {1.0, 0.0, 0.0};
  cfg.strategy = TeacherStrategy::None;
  cfg.prune_ratio = 0.0;
  return cfg;
}

struct EpochRecord {
  std::size_t epoch = 0;            // 1-based, global
  std::size_t mini_generation = 0;  // 1-based
  bool warmup = false;
  bool after_surgery = false;       // first epoch following a prune + re-init
  double lr = 0.0;
  double train_loss = 0.0;
  double train_err_cm = 0.0;
  double val_err_cm = 0.0;
  int teacher = -1;  // pool index used this epoch, -1 if none
};

struct SurgeryRecord {
  std::size_t after_epoch = 0;
  std::size_t mini_generation = 0;
  std::size_t filters = 0;
  std::size_t shortfall = 0;
  double val_err_before = 0.0;
  double val_err_after = 0.0;  // eval directly after surgery, before any training
  double next_batch_loss = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::vector<SurgeryRecord> surgeries;
  std::vector<std::pair<std::size_t, double>> teachers;  // (mini-generation, val error) accepted
};

inline void write_metrics_csv(std::ostream& os, const TrainHistory& h) {
  os << "epoch,mini_generation,train_err_cm,val_err_cm,train_loss,lr,teacher,after_surgery\n";
  os.precision(10);
  for (const auto& e : h.epochs)
    os << e.epoch << ',' << e.mini_generation << ',' << e.train_err_cm << ',' << e.val_err_cm << ','
       << e.train_loss << ',' << e.lr << ',' << e.teacher << ',' << (e.after_surgery ? 1 : 0) << '\n';
}

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, TrainHistory h)
      : std::runtime_error(what), history(std::move(h)) {}
  TrainHistory history;
};

template <class T>
struct TrainResult {
  GazeNet<T> model;
  TrainHistory history;
  TeacherPool<T> pool;
};

template <class T>
struct TrainHooks {
  std::function<void(const EpochRecord&, GazeNet<T>&)> on_epoch;
  std::function<void(const TeacherEntry<T>&)> on_teacher;
};

/// Mean Euclidean distance between predictions and ground truth.
inline double mean_error(std::span<const std::array<double, 2>> pred,
                         std::span<const std::array<double, 2>> gt) {
  if (pred.empty() || pred.size() != gt.size())
    throw std::invalid_argument("mean_error: need equally many, non-zero predictions and targets");
  double err = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    err += std::hypot(pred[i][0] - gt[i][0], pred[i][1] - gt[i][1]);
  return err / static_cast<double>(pred.size());
}

/// Mean Euclidean error (cm) of eval-mode predictions over the listed records.
template <class T>
double evaluate(GazeNet<T>& model, const Dataset& ds, std::span<const std::size_t> ids,
                std::size_t batch = 256, std::vector<std::array<double, 2>>* dump = nullptr) {
  if (ids.empty()) throw std::invalid_argument("evaluate: empty split");
  auto pred = predict_records(model, ds, ids, batch);
  std::vector<std::array<double, 2>> gt;
  gt.reserve(ids.size());
  for (auto id : ids) gt.push_back({ds.records[id].gt_x, ds.records[id].gt_y});
  const double err = mean_error(pred, gt);
  if (dump) *dump = std::move(pred);
  return err;
}

template <class T>
double evaluate(GazeNet<T>& model, const Dataset& ds, Split split, std::size_t batch = 256) {
  const auto ids = ds.indices(split);
  return evaluate(model, ds, std::span<const std::size_t>(ids), batch);
}

/// Independent RNG streams derived from one seed.
inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(id), 0x6f7264u};
  return std::mt19937_64(seq);
}

template <class T>
GazeNet<T> make_model(const GazeNetConfig& net_cfg, const SynthConfig& data_cfg, std::uint64_t seed) {
  const auto [xc, yc] = codecs_for(data_cfg, net_cfg.bins_x, net_cfg.bins_y);
  GazeNet<T> model(net_cfg, xc, yc);
  auto rng = stream(seed, 0);
  model.initialize(rng);
  return model;
}

namespace train_detail {

template <class T, class Rng>
double train_step(GazeNet<T>& model, Sgd<T>& opt, Batch<T>& batch, const TatConfig& cfg,
                  const TeacherPool<T>* teacher, double lr, Rng& mix_rng) {
  model.set_training(true);
  opt.zero_grad();
  auto feat = model.extract_final_feature(batch.face, batch.left, batch.right);
  auto probs = model.head_probs(feat);
  std::span<const T> labels(batch.labels);
  auto hard = ordinal_loss(probs, labels);
  Tensor<T> mix, soft;
  if (cfg.weights.mix > 0) {
    std::vector<std::size_t> partner;
    std::vector<T> alpha;
    draw_mixup(batch.size(), mix_rng, partner, alpha);
    auto m = mixup_features(feat, labels, partner, alpha);
    mix = ordinal_loss(model.head_probs(m.features), std::span<const T>(m.labels));
  }
  if (teacher) {
    const auto y = teacher->targets(batch.face, batch.left, batch.right);
    soft = teacher_loss(probs, std::span<const T>(y));
  }
  auto loss = total_loss<T>(&hard, mix.defined() ? &mix : nullptr, soft.defined() ? &soft : nullptr,
                            cfg.weights);
  const double value = static_cast<double>(loss.item());
  if (!std::isfinite(value)) return value;
  backward(loss);
  opt.step(lr);
  return value;
}

}  // namespace train_detail

/// TAT training: K mini-generations of L epochs (plus warmup in the
/// first), teacher registration after each, prune + re-init between them.
template <class T>
TrainResult<T> run_tat(const TatConfig& cfg, const Dataset& ds, GazeNet<T> model,
                       const TrainHooks<T>& hooks = {}) {
  cfg.validate();
  auto train_ids = ds.indices(Split::Train);
  const auto val_ids = ds.indices(Split::Val);
  if (train_ids.empty() || val_ids.empty())
    throw std::invalid_argument("training needs non-empty train and val splits");

  auto shuffle_rng = stream(cfg.seed, 1);
  auto mix_rng = stream(cfg.seed, 2);
  auto teacher_rng = stream(cfg.seed, 3);
  auto surgery_rng = stream(cfg.seed, 4);
  auto adv_rng = stream(cfg.seed, 5);

  TrainResult<T> res{std::move(model), {}, TeacherPool<T>(cfg.strategy)};
  auto& net = res.model;
  auto& hist = res.history;
  Sgd<T> opt([&] {
               std::vector<Tensor<T>> ps;
               for (auto& p : net.parameters()) ps.push_back(p.tensor);
               return ps;
             }(),
             cfg.optim.momentum, cfg.optim.weight_decay);
  BatchSchedule sched(train_ids, cfg.optim.batch_size);
  const auto [xc, yc] = std::array{net.x_codec(), net.y_codec()};
  double first_val = -1;
  std::size_t epoch = 0;
  bool after_surgery = false;

  const bool use_teacher = cfg.strategy != TeacherStrategy::None && cfg.weights.teacher > 0;
  for (std::size_t k = 1; k <= cfg.mini_generations; ++k) {
    if (cfg.reset_momentum) opt.reset_momentum();
    if (use_teacher && cfg.sampling == TeacherSampling::PerMiniGeneration && !res.pool.empty())
      res.pool.resample(teacher_rng);
    const std::size_t warm = k == 1 ? cfg.warmup_epochs : 0;
    const std::size_t n_epochs = warm + cfg.epochs_per_generation;
    for (std::size_t e = 0; e < n_epochs; ++e) {
      ++epoch;
      EpochRecord rec;
      rec.epoch = epoch;
      rec.mini_generation = k;
      rec.warmup = e < warm;
      rec.after_surgery = after_surgery;
      after_surgery = false;
      const bool last = e + 1 == n_epochs;
      const double base_lr = cfg.optim.lr * (last ? cfg.optim.decay_factor : 1.0);
      const TeacherPool<T>* teacher = nullptr;
      if (use_teacher && !res.pool.empty() && !rec.warmup) {
        if (cfg.sampling == TeacherSampling::PerEpoch) res.pool.resample(teacher_rng);
        teacher = &res.pool;
        rec.teacher = static_cast<int>(res.pool.chosen());
      }
      sched.shuffle(shuffle_rng);
      double loss_sum = 0;
      const std::size_t nb = sched.batch_count();
      for (std::size_t b = 0; b < nb; ++b) {
        auto batch = make_batch<T>(ds, sched.batch(b), xc, yc);
        if (cfg.adversarial) {
          auto rows = adversarial_subset(batch.size(), cfg.pgd.org_percent, adv_rng);
          perturb_rows(net, batch, rows, cfg.pgd);
        }
        double lr = base_lr;
        if (rec.warmup) lr = cfg.optim.lr * static_cast<double>(b + 1) / static_cast<double>(nb);
        const double l = train_detail::train_step(net, opt, batch, cfg, teacher, lr, mix_rng);
        if (!std::isfinite(l)) {
          hist.epochs.push_back(rec);
          throw TrainingDiverged("non-finite training loss at epoch " + std::to_string(epoch), hist);
        }
        loss_sum += l;
        rec.lr = lr;
      }
      rec.train_loss = loss_sum / static_cast<double>(nb);
      rec.train_err_cm = evaluate(net, ds, std::span<const std::size_t>(train_ids), cfg.eval_batch);
      rec.val_err_cm = evaluate(net, ds, std::span<const std::size_t>(val_ids), cfg.eval_batch);
      if (first_val < 0) first_val = rec.val_err_cm;
      hist.epochs.push_back(rec);
      logger()->info("epoch {} (gen {}){} lr {:.4g} loss {:.4f} train {:.4f} cm val {:.4f} cm", epoch,
                     k, rec.warmup ? " warmup" : "", rec.lr, rec.train_loss, rec.train_err_cm,
                     rec.val_err_cm);
      if (hooks.on_epoch) hooks.on_epoch(rec, net);
      if (rec.val_err_cm > cfg.divergence_factor * first_val)
        throw TrainingDiverged("validation error " + std::to_string(rec.val_err_cm) +
                                   " exceeds " + std::to_string(cfg.divergence_factor) +
                                   "x the initial " + std::to_string(first_val),
                               hist);
    }

    const double val = hist.epochs.back().val_err_cm;
    if (use_teacher) {
      if (k == 1) res.pool.set_quality_threshold(cfg.quality_factor * val);
      if (res.pool.add(net, val, k)) {
        hist.teachers.emplace_back(k, val);
        if (hooks.on_teacher) hooks.on_teacher(res.pool.entries().back());
      }
    }
    if (k == cfg.mini_generations) break;  // the final model is returned untouched

    SurgeryRecord surg;
    surg.after_epoch = epoch;
    surg.mini_generation = k;
    surg.val_err_before = val;
    const auto scores = score_model(net, cfg.prune_metric);
    const auto sel = select_prune_set(scores, cfg.prune_ratio, cfg.prune_layer_cap);
    if (!sel.empty() || cfg.reinit.mode == ReinitMode::Scratch) {
      reinitialize(net, sel, surgery_rng, cfg.reinit);
      after_surgery = true;
    }
    surg.filters = sel.selected.size();
    surg.shortfall = sel.shortfall();
    surg.val_err_after = evaluate(net, ds, std::span<const std::size_t>(val_ids), cfg.eval_batch);
    {
      NoGradGuard g;
      auto probe = make_batch<T>(ds, sched.batch(0), xc, yc);
      const bool was = net.training();
      net.set_training(false);
      surg.next_batch_loss = static_cast<double>(
          ordinal_loss(net.forward(probe.face, probe.left, probe.right),
                       std::span<const T>(probe.labels))
              .item());
      net.set_training(was);
    }
    logger()->info("surgery after gen {}: {} filters re-initialized, val {:.4f} -> {:.4f} cm", k,
                   surg.filters, surg.val_err_before, surg.val_err_after);
    hist.surgeries.push_back(surg);
  }
  return res;
}

template <class T>
TrainResult<T> run_plain(const TatConfig& cfg, const Dataset& ds, GazeNet<T> model,
                         const TrainHooks<T>& hooks = {}) {
  return run_tat(plain_config(cfg), ds, std::move(model), hooks);
}

/// Single-generation adversarial training on mixed clean/PGD batches.
template <class T>
TrainResult<T> run_dwo(const TatConfig& cfg, const Dataset& ds, GazeNet<T> model,
                       const TrainHooks<T>& hooks = {}) {
  auto c = plain_config(cfg);
  c.adversarial = true;
  return run_tat(c, ds, std::move(model), hooks);
}

}  // namespace ordgaze
