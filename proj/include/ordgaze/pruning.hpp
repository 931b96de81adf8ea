#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ordgaze/gaze_net.hpp"
#include "ordgaze/log.hpp"

namespace ordgaze {

enum class PruneMetric { Signed, Absolute };

inline const char* prune_metric_name(PruneMetric m) {
  return m == PruneMetric::Signed ? "signed" : "absolute";
}

inline PruneMetric parse_prune_metric(const std::string& s) {
  if (s == "signed" || s == "csp") return PruneMetric::Signed;
  if (s == "absolute" || s == "repr") return PruneMetric::Absolute;
  throw std::invalid_argument("unknown prune metric '" + s + "'");
}

/// Sim_fi = (sum_j cos(W_fi, W_j) - 1) / N_out over the flattened filters of a
/// [N_out, C, Kh, Kw] weight. Absolute sums |cos|. Zero-norm filters score +1.
template <class T>
std::vector<double> cosine_scores(std::span<const T> weights, std::size_t n_out,
                                  PruneMetric metric = PruneMetric::Signed) {
  if (n_out < 2) throw std::invalid_argument("cosine_scores: need at least 2 filters");
  if (weights.size() % n_out != 0)
    throw ShapeError("cosine_scores", std::to_string(weights.size()) + " values for " +
                                          std::to_string(n_out) + " filters");
  const auto d = static_cast<Eigen::Index>(weights.size() / n_out);
  Eigen::MatrixXd w(static_cast<Eigen::Index>(n_out), d);
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < d; ++j) w(i, j) = static_cast<double>(weights[i * d + j]);
  std::vector<bool> dead(n_out, false);
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    const double nrm = w.row(i).norm();
    if (nrm > 0 && std::isfinite(nrm)) {
      w.row(i) /= nrm;
    } else {
      w.row(i).setZero();
      dead[i] = true;
    }
  }
  Eigen::MatrixXd gram = w * w.transpose();
  std::vector<double> scores(n_out);
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    if (dead[i]) {
      scores[i] = 1.0;
      continue;
    }
    double s = 0;
    for (Eigen::Index j = 0; j < w.rows(); ++j) {
      if (j == i) continue;
      s += metric == PruneMetric::Absolute ? std::abs(gram(i, j)) : gram(i, j);
    }
    scores[i] = s / static_cast<double>(n_out);
  }
  return scores;
}

template <class T>
std::vector<double> cosine_scores(const Tensor<T>& weight, PruneMetric metric = PruneMetric::Signed) {
  if (weight.rank() < 2) throw ShapeError("cosine_scores", "weight " + to_string(weight.shape()));
  return cosine_scores(weight.values(), weight.dim(0), metric);
}

template <class T>
std::vector<double> repr_scores(const Tensor<T>& weight) {
  return cosine_scores(weight, PruneMetric::Absolute);
}

struct FilterScore {
  std::size_t layer_id = 0;
  std::size_t filter_index = 0;
  double score = 0.0;
};

struct PruneSelection {
  double p = 0.20;
  double p_max = 0.50;
  std::size_t quota = 0;
  std::vector<std::pair<std::size_t, std::size_t>> selected;  // (layer, filter), admission order
  std::vector<std::vector<std::size_t>> per_layer;             // sorted filter indices

  std::size_t shortfall() const { return quota - selected.size(); }
  bool empty() const { return selected.empty(); }
};

/// floor(fraction * n), robust to representation error such as 0.29 * 100.
inline std::size_t floor_fraction(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

/// Global descending ranking with a per-layer cap of floor(p_max * N_out).
/// Ties go to the lower layer id, then the lower filter index.
inline PruneSelection select_prune_set(const std::vector<std::vector<double>>& scores, double p,
                                       double p_max) {
  if (!(p >= 0 && p <= 1 && p_max >= 0 && p_max <= 1))
    throw std::invalid_argument("select_prune_set: p and p_max must lie in [0, 1]");
  PruneSelection sel;
  sel.p = p;
  sel.p_max = p_max;
  sel.per_layer.resize(scores.size());
  std::vector<FilterScore> all;
  std::vector<std::size_t> cap(scores.size());
  for (std::size_t l = 0; l < scores.size(); ++l) {
    cap[l] = floor_fraction(p_max, scores[l].size());
    for (std::size_t f = 0; f < scores[l].size(); ++f) all.push_back({l, f, scores[l][f]});
  }
  sel.quota = floor_fraction(p, all.size());
  std::stable_sort(all.begin(), all.end(), [](const FilterScore& a, const FilterScore& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.layer_id != b.layer_id) return a.layer_id < b.layer_id;
    return a.filter_index < b.filter_index;
  });
  std::vector<std::size_t> taken(scores.size(), 0);
  for (const auto& c : all) {
    if (sel.selected.size() >= sel.quota) break;
    if (taken[c.layer_id] >= cap[c.layer_id]) continue;
    ++taken[c.layer_id];
    sel.selected.emplace_back(c.layer_id, c.filter_index);
    sel.per_layer[c.layer_id].push_back(c.filter_index);
  }
  for (auto& v : sel.per_layer) std::sort(v.begin(), v.end());
  if (sel.shortfall() > 0)
    logger()->info("prune: per-layer caps limit selection to {} of {} filters", sel.selected.size(),
                   sel.quota);
  return sel;
}

/// Scores for every conv layer of a model, in conv_layers() order.
template <class T>
std::vector<std::vector<double>> score_model(GazeNet<T>& model,
                                             PruneMetric metric = PruneMetric::Signed) {
  std::vector<std::vector<double>> out;
  for (auto& c : model.conv_layers()) out.push_back(cosine_scores(c.layer->weight, metric));
  return out;
}

}  // namespace ordgaze
