#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ordgaze/gaze_net.hpp"
#include "ordgaze/log.hpp"
#include "ordgaze/ops.hpp"
#include "ordgaze/ordinal.hpp"

namespace ordgaze {

enum class TeacherStrategy { None, LastOne, Mean, Best, Random };
enum class TeacherSampling { PerEpoch, PerMiniGeneration };

inline const char* strategy_name(TeacherStrategy s) {
  switch (s) {
    case TeacherStrategy::None: return "none";
    case TeacherStrategy::LastOne: return "last_one";
    case TeacherStrategy::Mean: return "mean";
    case TeacherStrategy::Best: return "best";
    case TeacherStrategy::Random: return "random";
  }
  return "?";
}

inline TeacherStrategy parse_strategy(const std::string& s) {
  if (s == "none" || s == "finetune") return TeacherStrategy::None;
  if (s == "last_one") return TeacherStrategy::LastOne;
  if (s == "mean") return TeacherStrategy::Mean;
  if (s == "best") return TeacherStrategy::Best;
  if (s == "random") return TeacherStrategy::Random;
  throw std::invalid_argument("unknown teacher strategy '" + s + "'");
}

inline const char* sampling_name(TeacherSampling s) {
  return s == TeacherSampling::PerEpoch ? "per_epoch" : "per_minigen";
}

inline TeacherSampling parse_sampling(const std::string& s) {
  if (s == "per_epoch") return TeacherSampling::PerEpoch;
  if (s == "per_minigen") return TeacherSampling::PerMiniGeneration;
  throw std::invalid_argument("unknown teacher sampling '" + s + "'");
}

struct LossWeights {
  double hard = 0.2;
  double mix = 0.4;
  double teacher = 0.6;

  void validate() const {
    if (hard < 0 || mix < 0 || teacher < 0)
      throw std::invalid_argument("loss weights must be >= 0");
  }
};

template <class T>
struct TeacherEntry {
  std::shared_ptr<GazeNet<T>> model;  // frozen: eval mode, no grads
  double val_error = 0.0;
  std::size_t mini_generation = 0;
};

/// Append-only pool of frozen snapshots filtered by validation error.
template <class T>
class TeacherPool {
 public:
  explicit TeacherPool(TeacherStrategy strategy = TeacherStrategy::Random,
                       double quality_threshold = std::numeric_limits<double>::infinity())
      : strategy_(strategy), threshold_(quality_threshold) {}

  TeacherStrategy strategy() const { return strategy_; }
  double quality_threshold() const { return threshold_; }
  void set_quality_threshold(double t) { threshold_ = t; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<TeacherEntry<T>>& entries() const { return entries_; }

  /// Deep-copies `model` and appends it when val_error passes the threshold.
  bool add(const GazeNet<T>& model, double val_error, std::size_t mini_generation) {
    if (!(val_error <= threshold_)) {
      logger()->info("teacher from mini-generation {} rejected: val error {:.4f} > threshold {:.4f}",
                     mini_generation, val_error, threshold_);
      return false;
    }
    auto snap = std::make_shared<GazeNet<T>>(model.clone());
    snap->set_requires_grad(false);
    snap->set_training(false);
    entries_.push_back({std::move(snap), val_error, mini_generation});
    active_ = entries_.size() - 1;
    return true;
  }

  /// Draws the teacher used by the random strategy until the next call.
  template <class Rng>
  std::size_t resample(Rng& rng) {
    if (entries_.empty()) return 0;
    std::uniform_int_distribution<std::size_t> pick(0, entries_.size() - 1);
    active_ = pick(rng);
    return active_;
  }

  std::size_t active() const { return active_; }

  /// Index used for single-teacher strategies.
  std::size_t chosen() const {
    switch (strategy_) {
      case TeacherStrategy::LastOne: return entries_.size() - 1;
      case TeacherStrategy::Best: {
        std::size_t best = 0;
        for (std::size_t i = 1; i < entries_.size(); ++i)
          if (entries_[i].val_error < entries_[best].val_error) best = i;
        return best;
      }
      default: return active_;
    }
  }

  /// Soft targets y' [N * (bins_x + bins_y)] for a batch.
  std::vector<T> targets(const Tensor<T>& face, const Tensor<T>& left, const Tensor<T>& right) const {
    if (strategy_ == TeacherStrategy::None)
      throw std::logic_error("teacher targets requested with strategy none");
    if (entries_.empty()) throw std::logic_error("teacher targets requested from an empty pool");
    NoGradGuard guard;
    if (strategy_ == TeacherStrategy::Mean) {
      std::vector<T> acc;
      for (const auto& e : entries_) {
        auto p = e.model->forward(face, left, right);
        if (acc.empty()) acc.assign(p.numel(), T(0));
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
      }
      const T inv = T(1) / static_cast<T>(entries_.size());
      for (auto& v : acc) v *= inv;
      return acc;
    }
    auto p = entries_[chosen()].model->forward(face, left, right);
    return {p.values().begin(), p.values().end()};
  }

 private:
  TeacherStrategy strategy_;
  double threshold_;
  std::vector<TeacherEntry<T>> entries_;
  std::size_t active_ = 0;
};

/// Soft-target BCE against teacher probabilities; same form as the ordinal loss.
template <class T>
Tensor<T> teacher_loss(const Tensor<T>& student_probs, std::span<const T> y_prime) {
  return ordinal_loss(student_probs, y_prime);
}

/// Sum over entries of the Bernoulli entropy of y', averaged over rows.
template <class T>
double bernoulli_entropy(std::span<const T> y, std::size_t rows = 1) {
  double h = 0;
  for (T v : y) {
    const double p = std::clamp(static_cast<double>(v), ops::kLogClip, 1.0 - ops::kLogClip);
    h -= p * std::log(p) + (1 - p) * std::log(1 - p);
  }
  return h / static_cast<double>(rows);
}

template <class T>
struct Mixed {
  Tensor<T> features;
  std::vector<T> labels;
};

/// Row i of the result mixes row i with row partner[i]:
///   f = a_i f_i + (1 - a_i) f_partner,  y = a_i y_i + (1 - a_i) y_partner.
template <class T>
Mixed<T> mixup_features(const Tensor<T>& features, std::span<const T> labels,
                        const std::vector<std::size_t>& partner, const std::vector<T>& alpha) {
  if (features.rank() != 2)
    throw ShapeError("mixup", "features must be [N,F], got " + to_string(features.shape()));
  const std::size_t n = features.dim(0);
  if (partner.size() != n || alpha.size() != n || n == 0 || labels.size() % n != 0)
    throw ShapeError("mixup", "features " + to_string(features.shape()) + ", " +
                                  std::to_string(labels.size()) + " labels, " +
                                  std::to_string(partner.size()) + " partners, " +
                                  std::to_string(alpha.size()) + " alphas");
  std::vector<T> beta(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(alpha[i] >= T(0) && alpha[i] <= T(1)))
      throw std::invalid_argument("mixup: alpha outside [0,1]");
    beta[i] = T(1) - alpha[i];
  }
  Mixed<T> out;
  out.features = ops::add(ops::scale_rows(features, alpha),
                          ops::scale_rows(ops::gather_rows(features, partner), beta));
  const std::size_t width = labels.size() / n;
  out.labels.resize(labels.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t b = 0; b < width; ++b)
      out.labels[i * width + b] =
          alpha[i] * labels[i * width + b] + beta[i] * labels[partner[i] * width + b];
  return out;
}

/// Single-pair form.
template <class T>
Mixed<T> mixup_pair(const Tensor<T>& feat_i, const Tensor<T>& feat_j, std::span<const T> label_i,
                    std::span<const T> label_j, T alpha) {
  if (feat_i.shape() != feat_j.shape() || label_i.size() != label_j.size())
    throw ShapeError("mixup", "pair " + to_string(feat_i.shape()) + " vs " +
                                  to_string(feat_j.shape()));
  auto row = [](const Tensor<T>& f) { return f.rank() == 1 ? Shape{1, f.numel()} : f.shape(); };
  if (row(feat_i)[0] != 1) throw ShapeError("mixup", "pair form expects single rows");
  const Shape s = row(feat_i);
  std::vector<T> fv(feat_i.values().begin(), feat_i.values().end());
  fv.insert(fv.end(), feat_j.values().begin(), feat_j.values().end());
  std::vector<T> lv(label_i.begin(), label_i.end());
  lv.insert(lv.end(), label_j.begin(), label_j.end());
  auto both = Tensor<T>::from({2, s[1]}, std::move(fv));
  auto m = mixup_features(both, std::span<const T>(lv), {1, 0}, {alpha, T(1) - alpha});
  Mixed<T> out;
  out.features = Tensor<T>::from(s, {m.features.values().begin(), m.features.values().begin() + s[1]});
  out.labels.assign(m.labels.begin(), m.labels.begin() + label_i.size());
  return out;
}

/// Draws a shuffled partner and an alpha ~ U(0,1) per row.
template <class T, class Rng>
void draw_mixup(std::size_t n, Rng& rng, std::vector<std::size_t>& partner, std::vector<T>& alpha) {
  partner.resize(n);
  std::iota(partner.begin(), partner.end(), std::size_t{0});
  std::shuffle(partner.begin(), partner.end(), rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  alpha.resize(n);
  for (auto& a : alpha) a = static_cast<T>(u(rng));
}

/// w_hard * hard + w_mix * mix + w_teacher * teacher; null terms are skipped.
template <class T>
Tensor<T> total_loss(const Tensor<T>* hard, const Tensor<T>* mix, const Tensor<T>* teacher,
                     const LossWeights& w) {
  Tensor<T> acc = Tensor<T>::scalar(T(0));
  bool any = false;
  auto add_term = [&](const Tensor<T>* term, double weight) {
    if (!term || weight == 0.0) return;
    auto scaled = ops::scale(*term, static_cast<T>(weight));
    acc = any ? ops::add(acc, scaled) : scaled;
    any = true;
  };
  add_term(hard, w.hard);
  add_term(mix, w.mix);
  add_term(teacher, w.teacher);
  return acc;
}

inline double total_loss(double hard, double mix, double teacher, const LossWeights& w) {
  return w.hard * hard + w.mix * mix + w.teacher * teacher;
}

}  // namespace ordgaze
