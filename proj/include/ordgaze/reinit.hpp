#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ordgaze/gaze_net.hpp"
#include "ordgaze/log.hpp"
#include "ordgaze/pruning.hpp"

namespace ordgaze {

enum class ReinitMode { Aligned, OrthRaw, Uniform, Scratch };

inline const char* reinit_name(ReinitMode m) {
  switch (m) {
    case ReinitMode::Aligned: return "aligned";
    case ReinitMode::OrthRaw: return "orth_raw";
    case ReinitMode::Uniform: return "uniform";
    case ReinitMode::Scratch: return "scratch";
  }
  return "?";
}

inline ReinitMode parse_reinit(const std::string& s) {
  if (s == "aligned" || s == "aoi") return ReinitMode::Aligned;
  if (s == "orth_raw" || s == "orth") return ReinitMode::OrthRaw;
  if (s == "uniform") return ReinitMode::Uniform;
  if (s == "scratch") return ReinitMode::Scratch;
  throw std::invalid_argument("unknown reinit mode '" + s + "'");
}

struct ReinitOptions {
  ReinitMode mode = ReinitMode::Aligned;
  bool per_filter_scalar = false;
  double bn_eps = 1e-5;
};

/// ||W_fi * scale_fi / sqrt(var_fi + eps)||_2 for each listed filter.
template <class T>
std::vector<double> bn_adjusted_norms(std::span<const T> weights, std::size_t n_out,
                                      std::span<const T> bn_scale, std::span<const T> bn_var,
                                      const std::vector<std::size_t>& filters, double eps = 1e-5) {
  if (n_out == 0 || weights.size() % n_out != 0 || bn_scale.size() != n_out ||
      bn_var.size() != n_out)
    throw ShapeError("bn_adjusted_norms", std::to_string(weights.size()) + " weights, " +
                                              std::to_string(bn_scale.size()) + " scales, " +
                                              std::to_string(bn_var.size()) + " variances for " +
                                              std::to_string(n_out) + " filters");
  const std::size_t d = weights.size() / n_out;
  std::vector<double> out;
  for (auto f : filters) {
    if (f >= n_out) throw std::out_of_range("bn_adjusted_norms: filter index out of range");
    if (!(bn_var[f] > T(0)))
      throw std::invalid_argument("bn_adjusted_norms: non-positive variance for filter " +
                                  std::to_string(f));
    double sq = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = weights[f * d + j];
      sq += v * v;
    }
    out.push_back(std::sqrt(sq) * std::abs(static_cast<double>(bn_scale[f])) /
                  std::sqrt(static_cast<double>(bn_var[f]) + eps));
  }
  return out;
}

/// n_pruned orthonormal rows of length d. When the kept filters leave room,
/// the rows span the orthogonal complement of the kept filters (QR of
/// [W_kept^T | Gaussian]); otherwise they come from the QR of a Gaussian block.
/// Beyond d rows the extras are normalized Gaussian vectors.
template <class T, class Rng>
Eigen::MatrixXd orthogonal_basis(std::span<const T> weights, std::size_t n_out,
                                 const std::vector<std::size_t>& pruned, Rng& rng) {
  if (n_out == 0 || weights.size() % n_out != 0)
    throw ShapeError("orthogonal_basis", std::to_string(weights.size()) + " values for " +
                                             std::to_string(n_out) + " filters");
  const auto d = static_cast<Eigen::Index>(weights.size() / n_out);
  const auto n = static_cast<Eigen::Index>(pruned.size());
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd rows(n, d);
  if (n == 0) return rows;

  std::vector<bool> is_pruned(n_out, false);
  for (auto f : pruned) is_pruned.at(f) = true;
  std::vector<std::size_t> kept;
  for (std::size_t f = 0; f < n_out; ++f)
    if (!is_pruned[f]) kept.push_back(f);

  const Eigen::Index n_orth = std::min(n, d);
  const auto n_kept = static_cast<Eigen::Index>(kept.size());
  const Eigen::Index lead = n_kept + n_orth <= d ? n_kept : 0;
  Eigen::MatrixXd seed(d, lead + n_orth);
  for (Eigen::Index c = 0; c < lead; ++c)
    for (Eigen::Index j = 0; j < d; ++j)
      seed(j, c) = static_cast<double>(weights[kept[c] * d + j]);
  for (Eigen::Index c = lead; c < seed.cols(); ++c)
    for (Eigen::Index j = 0; j < d; ++j) seed(j, c) = g(rng);

  Eigen::HouseholderQR<Eigen::MatrixXd> qr(seed);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, seed.cols());
  const Eigen::MatrixXd r = qr.matrixQR().template triangularView<Eigen::Upper>();
  for (Eigen::Index c = 0; c < n_orth; ++c) {
    const Eigen::Index col = lead + c;
    const double sign = r(col, col) < 0 ? -1.0 : 1.0;
    rows.row(c) = sign * q.col(col).transpose();
  }
  if (n > d) {
    logger()->warn("orthogonal_basis: {} rows requested in a {}-dim space, extras are random", n, d);
    for (Eigen::Index c = d; c < n; ++c) {
      for (Eigen::Index j = 0; j < d; ++j) rows(c, j) = g(rng);
      rows.row(c).normalize();
    }
  }
  return rows;
}

struct LayerReinit {
  std::size_t layer_id = 0;
  std::string name;
  std::vector<std::size_t> pruned;
  Eigen::MatrixXd basis;  // unit rows before scaling
  double norm_min = 0.0, norm_max = 0.0;
  std::vector<double> scalars;  // one per pruned filter (all equal unless per_filter_scalar)
};

struct ReinitReport {
  ReinitMode mode = ReinitMode::Aligned;
  std::vector<LayerReinit> layers;
  std::size_t filters() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.pruned.size();
    return n;
  }
};

namespace reinit_detail {

template <class T>
void reset_bn(ConvBnLayer<T>& c, std::size_t f) {
  c.bn_scale.storage()[f] = T(1);
  c.bn_shift.storage()[f] = T(0);
  c.bn_state.running_mean[f] = T(0);
  c.bn_state.running_var[f] = T(1);
}

}  // namespace reinit_detail

/// Re-initializes the selected conv filters in place. Aligned: orthonormal rows
/// scaled by a scalar drawn from the BN-adjusted norm range of the pruned
/// filters. OrthRaw: unit rows. Uniform: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
/// Scratch: every parameter is re-initialized. BN entries of touched filters
/// are reset to scale 1, shift 0, mean 0, var 1.
template <class T, class Rng>
ReinitReport reinitialize(GazeNet<T>& model, const PruneSelection& sel, Rng& rng,
                          const ReinitOptions& opt = {}) {
  ReinitReport report;
  report.mode = opt.mode;
  if (opt.mode == ReinitMode::Scratch) {
    model.initialize(rng);
    return report;
  }
  auto layers = model.conv_layers();
  if (sel.per_layer.size() > layers.size())
    throw std::invalid_argument("reinitialize: selection has more layers than the model");
  for (std::size_t l = 0; l < sel.per_layer.size(); ++l) {
    const auto& pruned = sel.per_layer[l];
    if (pruned.empty()) continue;
    auto& c = *layers[l].layer;
    const std::size_t n_out = c.filters();
    const std::size_t d = c.weight.numel() / n_out;
    auto& w = c.weight.storage();
    LayerReinit info;
    info.layer_id = l;
    info.name = layers[l].name;
    info.pruned = pruned;

    if (opt.mode == ReinitMode::Uniform) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(c.fan_in()));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto f : pruned)
        for (std::size_t j = 0; j < d; ++j) w[f * d + j] = static_cast<T>(u(rng));
    } else {
      const auto norms = bn_adjusted_norms<T>(c.weight.values(), n_out, c.bn_scale.values(),
                                              c.bn_state.running_var, pruned, opt.bn_eps);
      info.norm_min = *std::min_element(norms.begin(), norms.end());
      info.norm_max = *std::max_element(norms.begin(), norms.end());
      info.basis = orthogonal_basis<T>(c.weight.values(), n_out, pruned, rng);
      std::uniform_real_distribution<double> u(info.norm_min, info.norm_max);
      const double shared = info.norm_max > info.norm_min ? u(rng) : info.norm_min;
      for (std::size_t i = 0; i < pruned.size(); ++i) {
        double s = 1.0;
        if (opt.mode == ReinitMode::Aligned)
          s = opt.per_filter_scalar && info.norm_max > info.norm_min ? u(rng) : shared;
        info.scalars.push_back(s);
        for (std::size_t j = 0; j < d; ++j)
          w[pruned[i] * d + j] = static_cast<T>(info.basis(static_cast<Eigen::Index>(i),
                                                           static_cast<Eigen::Index>(j)) * s);
      }
    }
    for (auto f : pruned) reinit_detail::reset_bn(c, f);
    report.layers.push_back(std::move(info));
  }
  return report;
}

/// Flattened conv filter `f` of a layer.
template <class T>
std::vector<double> filter_values(const ConvBnLayer<T>& c, std::size_t f) {
  const std::size_t d = c.weight.numel() / c.filters();
  auto v = c.weight.values().subspan(f * d, d);
  return {v.begin(), v.end()};
}

}  // namespace ordgaze
