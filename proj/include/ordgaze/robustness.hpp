#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ordgaze/gaze_net.hpp"
#include "ordgaze/log.hpp"
#include "ordgaze/ordinal.hpp"
#include "ordgaze/synth.hpp"

namespace ordgaze {

/// epsilon and gamma are in [0,255] pixel units; half_width is k (2k center bins).
struct PgdConfig {
  double epsilon = 3.0;
  double gamma = 1.0;
  std::size_t iterations = 1;
  std::size_t half_width = 4;
  double org_percent = 90.0;
  std::array<bool, 3> perturb{true, true, true};  // face, left, right

  void validate() const {
    if (epsilon < 0 || gamma < 0) throw std::invalid_argument("pgd: epsilon and gamma must be >= 0");
    if (iterations == 0) throw std::invalid_argument("pgd: iterations must be >= 1");
    if (half_width == 0) throw std::invalid_argument("pgd: k must be >= 1");
    if (org_percent < 0 || org_percent > 100)
      throw std::invalid_argument("pgd: org_percent must lie in [0, 100]");
    if (gamma > 2 * epsilon)
      logger()->warn("pgd: step gamma={} exceeds twice the budget epsilon={}", gamma, epsilon);
  }
};

template <class T>
struct InputTriple {
  Tensor<T> face, left, right;
};

/// Union of the per-coordinate center windows for each row of probs.
template <class T>
std::vector<std::uint8_t> center_mask_rows(const Tensor<T>& probs, std::size_t bins_x,
                                           std::size_t half_width) {
  const std::size_t width = probs.dim(1), rows = probs.dim(0);
  std::vector<std::uint8_t> mask(rows * width);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = probs.values().subspan(r * width, width);
    auto mx = center_bin_mask(row.first(bins_x), half_width);
    auto my = center_bin_mask(row.subspan(bins_x), half_width);
    std::copy(mx.begin(), mx.end(), mask.begin() + r * width);
    std::copy(my.begin(), my.end(), mask.begin() + r * width + bins_x);
  }
  return mask;
}

namespace pgd_detail {

// One projected sign step; the result never leaves [x0 - eps, x0 + eps] or [0, 1].
template <class T>
T project(T x0, T candidate, T eps) {
  T v = std::clamp(candidate, x0 - eps, x0 + eps);
  while (v - x0 > eps) v = std::nextafter(v, x0);
  while (x0 - v > eps) v = std::nextafter(v, x0);
  return std::clamp(v, T(0), T(1));
}

}  // namespace pgd_detail

/// T ascent steps of the center-bin-masked ordinal loss on hard labels.
/// The model is run in eval mode and its parameters are not differentiated.
template <class T>
InputTriple<T> pgd_attack(GazeNet<T>& model, const InputTriple<T>& x, std::span<const T> labels,
                          const PgdConfig& cfg) {
  const bool was_training = model.training();
  model.set_training(false);
  model.set_requires_grad(false);
  struct Restore {
    GazeNet<T>& m;
    bool training;
    ~Restore() {
      m.set_training(training);
      m.set_requires_grad(true);
    }
  } restore{model, was_training};

  const T eps = static_cast<T>(cfg.epsilon / 255.0);
  const T step = static_cast<T>(cfg.gamma / 255.0);
  std::array<const Tensor<T>*, 3> orig{&x.face, &x.left, &x.right};
  std::array<Tensor<T>, 3> cur;
  for (int i = 0; i < 3; ++i) cur[i] = orig[i]->detach();

  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    for (auto& c : cur) {
      c.set_requires_grad(true);
      c.zero_grad();
    }
    auto probs = model.forward(cur[0], cur[1], cur[2]);
    const auto mask = center_mask_rows(probs, model.config().bins_x, cfg.half_width);
    auto loss = ordinal_loss(probs, labels, mask);
    backward(loss);
    bool finite = true;
    for (int i = 0; i < 3; ++i)
      if (cfg.perturb[i] && cur[i].has_grad())
        for (T g : cur[i].grad()) finite = finite && std::isfinite(g);
    if (!finite) {
      logger()->warn("pgd: non-finite input gradient, returning the clean input");
      return {x.face.detach(), x.left.detach(), x.right.detach()};
    }
    for (int i = 0; i < 3; ++i) {
      std::vector<T> grad;
      if (cur[i].has_grad()) grad.assign(cur[i].grad().begin(), cur[i].grad().end());
      auto& v = cur[i].storage();
      const auto x0 = orig[i]->values();
      if (cfg.perturb[i] && !grad.empty())
        for (std::size_t j = 0; j < v.size(); ++j) {
          const T s = grad[j] > T(0) ? T(1) : (grad[j] < T(0) ? T(-1) : T(0));
          v[j] = pgd_detail::project(x0[j], v[j] + step * s, eps);
        }
      cur[i] = Tensor<T>::from(cur[i].shape(), std::move(v));
    }
  }
  return {cur[0], cur[1], cur[2]};
}

/// Row indices [0, n) to perturb: floor(n * (1 - org/100)) drawn without replacement.
template <class Rng>
std::vector<std::size_t> adversarial_subset(std::size_t n, double org_percent, Rng& rng) {
  const auto k = static_cast<std::size_t>(
      std::floor(static_cast<double>(n) * (1.0 - org_percent / 100.0) + 1e-9));
  if (k == 0) return {};
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace pgd_detail {

template <class T>
Tensor<T> take_rows(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  const std::size_t per = x.numel() / x.dim(0);
  std::vector<T> out(rows.size() * per);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.values().begin() + rows[i] * per, per, out.begin() + i * per);
  Shape s = x.shape();
  s[0] = rows.size();
  return Tensor<T>::from(s, std::move(out));
}

template <class T>
void put_rows(Tensor<T>& x, const Tensor<T>& src, const std::vector<std::size_t>& rows) {
  const std::size_t per = x.numel() / x.dim(0);
  auto& v = x.storage();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(src.values().begin() + i * per, per, v.begin() + rows[i] * per);
}

}  // namespace pgd_detail

/// Replaces the chosen rows of a batch by their adversarial versions.
template <class T>
void perturb_rows(GazeNet<T>& model, Batch<T>& batch, const std::vector<std::size_t>& rows,
                  const PgdConfig& cfg) {
  if (rows.empty()) return;
  const std::size_t width = batch.labels.size() / batch.size();
  InputTriple<T> sub{pgd_detail::take_rows(batch.face, rows), pgd_detail::take_rows(batch.left, rows),
                     pgd_detail::take_rows(batch.right, rows)};
  std::vector<T> labels;
  for (auto r : rows)
    labels.insert(labels.end(), batch.labels.begin() + r * width,
                  batch.labels.begin() + (r + 1) * width);
  auto adv = pgd_attack(model, sub, std::span<const T>(labels), cfg);
  pgd_detail::put_rows(batch.face, adv.face, rows);
  pgd_detail::put_rows(batch.left, adv.left, rows);
  pgd_detail::put_rows(batch.right, adv.right, rows);
}

// ------------------------------------------------------------------ MSD

struct SequenceSpread {
  std::int32_t id = 0;
  std::size_t frames = 0;
  std::array<double, 2> mean{};
  double sigma = 0.0;
};

struct MsdResult {
  double msd = 0.0;
  std::vector<SequenceSpread> sequences;
};

/// sigma_j = sqrt(mean ||g - mu||^2) per sequence, MSD = mean sigma_j.
/// Sums run over a canonical (sorted) order so the result is exactly
/// invariant to frame and sequence order.
inline MsdResult msd(const std::vector<std::vector<std::array<double, 2>>>& predictions,
                     const std::vector<std::int32_t>& ids = {}) {
  if (predictions.empty()) throw std::invalid_argument("msd: empty sequence set");
  MsdResult out;
  for (std::size_t s = 0; s < predictions.size(); ++s) {
    auto p = predictions[s];
    if (p.size() < 2)
      throw std::invalid_argument("msd: sequence " + std::to_string(s) + " has fewer than 2 frames");
    std::sort(p.begin(), p.end());
    SequenceSpread sp;
    sp.id = ids.empty() ? static_cast<std::int32_t>(s) : ids.at(s);
    sp.frames = p.size();
    for (const auto& g : p) {
      sp.mean[0] += g[0];
      sp.mean[1] += g[1];
    }
    const double m = static_cast<double>(p.size());
    sp.mean[0] /= m;
    sp.mean[1] /= m;
    std::vector<double> sq;
    for (const auto& g : p) {
      const double dx = g[0] - sp.mean[0], dy = g[1] - sp.mean[1];
      sq.push_back(dx * dx + dy * dy);
    }
    std::sort(sq.begin(), sq.end());
    double acc = 0;
    for (double v : sq) acc += v;
    sp.sigma = std::sqrt(acc / m);
    out.sequences.push_back(sp);
  }
  std::vector<double> sig;
  for (const auto& s : out.sequences) sig.push_back(s.sigma);
  std::sort(sig.begin(), sig.end());
  for (double v : sig) out.msd += v;
  out.msd /= static_cast<double>(sig.size());
  return out;
}

/// Eval-mode predictions for the given records, batched.
template <class T>
std::vector<std::array<double, 2>> predict_records(GazeNet<T>& model, const Dataset& ds,
                                                   std::span<const std::size_t> ids,
                                                   std::size_t batch = 256) {
  const bool was = model.training();
  model.set_training(false);
  NoGradGuard guard;
  std::vector<std::array<double, 2>> out;
  out.reserve(ids.size());
  for (std::size_t start = 0; start < ids.size(); start += batch) {
    auto sub = ids.subspan(start, std::min(batch, ids.size() - start));
    auto b = make_batch<T>(ds, sub, model.x_codec(), model.y_codec());
    auto pred = model.predict_gaze(model.forward(b.face, b.left, b.right));
    out.insert(out.end(), pred.begin(), pred.end());
  }
  model.set_training(was);
  return out;
}

template <class T>
MsdResult msd(GazeNet<T>& model, const Dataset& ds) {
  if (ds.sequences.empty()) throw std::invalid_argument("msd: dataset has no sequences");
  std::vector<std::vector<std::array<double, 2>>> preds;
  std::vector<std::int32_t> ids;
  for (const auto& s : ds.sequences) {
    preds.push_back(predict_records(model, ds, s.frames));
    ids.push_back(s.id);
  }
  return msd(preds, ids);
}

}  // namespace ordgaze
