#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ordgaze/tensor.hpp"

// Primitive op set. Every op validates its operand shapes, records itself on
// the graph when an input requires grad, and carries an exact local gradient
// rule. Image tensors are NCHW, matrices are row-major [rows, cols].

namespace ordgaze::ops {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// Records the active/inactive pattern of piecewise-linear ops while enabled.
// Finite-difference checks use it to reject probes that straddle a kink.
struct KinkMonitor {
  std::uint64_t hash = 1469598103934665603ull;
  void mix(std::uint64_t v) {
    hash ^= v + 0x9e3779b97f4a7c15ull + (hash << 6) + (hash >> 2);
  }
};

namespace detail {
inline KinkMonitor*& kink_monitor() {
  thread_local KinkMonitor* m = nullptr;
  return m;
}

inline void require(bool ok, const char* op, const std::string& what) {
  if (!ok) throw ShapeError(op, what);
}

template <class T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), op,
          "operand shapes differ: " + to_string(a.shape()) + " vs " +
              to_string(b.shape()));
}

template <class T>
void accumulate(Node<T>& input, const std::vector<T>& delta) {
  if (!input.requires_grad) return;
  auto& g = input.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}
}  // namespace detail

class KinkScope {
 public:
  explicit KinkScope(KinkMonitor& m) : prev_(detail::kink_monitor()) {
    detail::kink_monitor() = &m;
  }
  ~KinkScope() { detail::kink_monitor() = prev_; }
  KinkScope(const KinkScope&) = delete;
  KinkScope& operator=(const KinkScope&) = delete;

 private:
  KinkMonitor* prev_;
};

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_result<T>("add", a.shape(), std::move(out), {a, b},
                        [](Node<T>& self) {
                          detail::accumulate(*self.inputs[0], self.grad);
                          detail::accumulate(*self.inputs[1], self.grad);
                        });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_result<T>("sub", a.shape(), std::move(out), {a, b},
                        [](Node<T>& self) {
                          detail::accumulate(*self.inputs[0], self.grad);
                          Node<T>& rhs = *self.inputs[1];
                          if (!rhs.requires_grad) return;
                          auto& g = rhs.ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i)
                            g[i] -= self.grad[i];
                        });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b},
                        [](Node<T>& self) {
                          Node<T>& x = *self.inputs[0];
                          Node<T>& y = *self.inputs[1];
                          if (x.requires_grad) {
                            auto& g = x.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += self.grad[i] * y.value[i];
                          }
                          if (y.requires_grad) {
                            auto& g = y.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += self.grad[i] * x.value[i];
                          }
                        });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return make_result<T>("scale", a.shape(), std::move(out), {a},
                        [factor](Node<T>& self) {
                          Node<T>& x = *self.inputs[0];
                          auto& g = x.ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i)
                            g[i] += self.grad[i] * factor;
                        });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  KinkMonitor* monitor = detail::kink_monitor();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a[i] > T(0) ? a[i] : T(0);
    if (monitor) monitor->mix(a[i] > T(0) ? 2 * i + 1 : 2 * i);
  }
  return make_result<T>("relu", a.shape(), std::move(out), {a},
                        [](Node<T>& self) {
                          Node<T>& x = *self.inputs[0];
                          auto& g = x.ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i)
                            if (x.value[i] > T(0)) g[i] += self.grad[i];
                        });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = a[i];
    // Branch keeps exp() from overflowing for large |v|.
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  return make_result<T>("sigmoid", a.shape(), std::move(out), {a},
                        [](Node<T>& self) {
                          auto& g = self.inputs[0]->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const T y = self.value[i];
                            g[i] += self.grad[i] * y * (T(1) - y);
                          }
                        });
}

// ----------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.values()) total += v;
  return make_result<T>("sum", {1}, {total}, {a}, [](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.values()) total += v;
  const T n = static_cast<T>(a.numel());
  return make_result<T>("mean", {1}, {total / n}, {a}, [n](Node<T>& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0] / n;
  });
}

/// Global average pool over the spatial dims: [N,C,H,W] -> [N,C].
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require(x.rank() == 4, "global_avg_pool",
                  "expects [N,C,H,W], got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(n * c);
  const auto v = x.values();
  for (std::size_t i = 0; i < n * c; ++i) {
    T s = T(0);
    for (std::size_t q = 0; q < hw; ++q) s += v[i * hw + q];
    out[i] = s / static_cast<T>(hw);
  }
  return make_result<T>("global_avg_pool", {n, c}, std::move(out), {x},
                        [hw](Node<T>& self) {
                          auto& g = self.inputs[0]->ensure_grad();
                          const T inv = T(1) / static_cast<T>(hw);
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            for (std::size_t q = 0; q < hw; ++q)
                              g[i * hw + q] += self.grad[i] * inv;
                        });
}

// -------------------------------------------------------------------- shaping

/// Concatenates matrices along the column axis: [N,a] ++ [N,b] -> [N,a+b].
template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat", "no operands");
  const std::size_t n = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require(p.rank() == 2 && p.dim(0) == n, "concat",
                    "operand " + to_string(p.shape()) +
                        " incompatible with row count " + std::to_string(n));
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  std::vector<T> out(n * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto v = parts[k].values();
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(v.begin() + r * widths[k], widths[k],
                  out.begin() + r * total + offset);
    offset += widths[k];
  }
  return make_result<T>(
      "concat", {n, total}, std::move(out), parts,
      [widths, n, total](Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
          Node<T>& in = *self.inputs[k];
          if (in.requires_grad) {
            auto& g = in.ensure_grad();
            for (std::size_t r = 0; r < n; ++r)
              for (std::size_t c = 0; c < widths[k]; ++c)
                g[r * widths[k] + c] += self.grad[r * total + off + c];
          }
          off += widths[k];
        }
      });
}

/// Selects rows of a matrix (repeats allowed): out[i] = x[index[i]].
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& index) {
  detail::require(x.rank() == 2, "gather_rows",
                  "expects a matrix, got " + to_string(x.shape()));
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<T> out(index.size() * cols);
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(index[i] < rows, "gather_rows",
                    "row " + std::to_string(index[i]) + " out of " +
                        std::to_string(rows));
    std::copy_n(x.values().begin() + index[i] * cols, cols,
                out.begin() + i * cols);
  }
  return make_result<T>("gather_rows", {index.size(), cols}, std::move(out),
                        {x}, [index, cols](Node<T>& self) {
                          auto& g = self.inputs[0]->ensure_grad();
                          for (std::size_t i = 0; i < index.size(); ++i)
                            for (std::size_t c = 0; c < cols; ++c)
                              g[index[i] * cols + c] += self.grad[i * cols + c];
                        });
}

/// Multiplies row i of x by the constant weights[i].
template <class T>
Tensor<T> scale_rows(const Tensor<T>& x, std::vector<T> weights) {
  detail::require(x.rank() == 2 && weights.size() == x.dim(0), "scale_rows",
                  "matrix " + to_string(x.shape()) + " with " +
                      std::to_string(weights.size()) + " row weights");
  const std::size_t cols = x.dim(1);
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < weights.size(); ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = x[r * cols + c] * weights[r];
  return make_result<T>("scale_rows", x.shape(), std::move(out), {x},
                        [w = std::move(weights), cols](Node<T>& self) {
                          auto& g = self.inputs[0]->ensure_grad();
                          for (std::size_t r = 0; r < w.size(); ++r)
                            for (std::size_t c = 0; c < cols; ++c)
                              g[r * cols + c] += self.grad[r * cols + c] * w[r];
                        });
}

// --------------------------------------------------------------------- layers

/// y = x W^T + b with x [N,in], W [out,in], b [out] (optional).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b) {
  detail::require(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(1),
                  "linear",
                  "input " + to_string(x.shape()) + " vs weight " +
                      to_string(w.shape()));
  if (b) {
    detail::require(b->numel() == w.dim(0), "linear",
                    "bias " + to_string(b->shape()) + " vs " +
                        std::to_string(w.dim(0)) + " outputs");
  }
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  std::vector<T> out(n * out_dim);
  MapMat<T> y(out.data(), n, out_dim);
  CMapMat<T> xm(x.values().data(), n, in);
  CMapMat<T> wm(w.values().data(), out_dim, in);
  y.noalias() = xm * wm.transpose();
  if (b) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < out_dim; ++c) out[r * out_dim + c] += (*b)[c];
  }
  std::vector<Tensor<T>> inputs{x, w};
  if (b) inputs.push_back(*b);
  return make_result<T>(
      "linear", {n, out_dim}, std::move(out), inputs,
      [n, in, out_dim](Node<T>& self) {
        CMapMat<T> gy(self.grad.data(), n, out_dim);
        Node<T>& xn = *self.inputs[0];
        Node<T>& wn = *self.inputs[1];
        if (xn.requires_grad) {
          MapMat<T> gx(xn.ensure_grad().data(), n, in);
          gx.noalias() += gy * CMapMat<T>(wn.value.data(), out_dim, in);
        }
        if (wn.requires_grad) {
          MapMat<T> gw(wn.ensure_grad().data(), out_dim, in);
          gw.noalias() += gy.transpose() * CMapMat<T>(xn.value.data(), n, in);
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
          auto& gb = self.inputs[2]->ensure_grad();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < out_dim; ++c)
              gb[c] += self.grad[r * out_dim + c];
        }
      });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  return linear(x, w, static_cast<const Tensor<T>*>(nullptr));
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return linear(x, w, &b);
}

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

inline std::size_t conv_out_size(std::size_t in, std::size_t k,
                                 std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

/// 2-D cross-correlation. x [N,C,H,W], w [O,C,KH,KW] -> [N,O,Ho,Wo].
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, Conv2dParams p = {}) {
  detail::require(x.rank() == 4 && w.rank() == 4, "conv2d",
                  "input " + to_string(x.shape()) + ", weight " +
                      to_string(w.shape()) + " must both be rank 4");
  detail::require(x.dim(1) == w.dim(1), "conv2d",
                  "input channels " + std::to_string(x.dim(1)) +
                      " vs weight channels " + std::to_string(w.dim(1)));
  detail::require(p.stride >= 1, "conv2d", "stride must be >= 1");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  detail::require(h + 2 * p.padding >= kh && wd + 2 * p.padding >= kw,
                  "conv2d",
                  "kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                      " larger than padded input " + to_string(x.shape()));
  const std::size_t ho = conv_out_size(h, kh, p.stride, p.padding);
  const std::size_t wo = conv_out_size(wd, kw, p.stride, p.padding);
  const std::size_t plane = ho * wo;
  const std::size_t ckk = c * kh * kw;
  const std::size_t cols_n = n * plane;

  // im2col: rows index (channel, ki, kj), columns index (sample, oy, ox).
  std::vector<T> cols(ckk * cols_n, T(0));
  const auto xv = x.values();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        T* row = cols.data() + ((ch * kh + i) * kw + j) * cols_n;
        for (std::size_t s = 0; s < n; ++s) {
          const T* src = xv.data() + (s * c + ch) * h * wd;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * p.stride + i) -
                                      static_cast<std::ptrdiff_t>(p.padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * p.stride + j) -
                  static_cast<std::ptrdiff_t>(p.padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
              row[s * plane + oy * wo + ox] = src[iy * wd + ix];
            }
          }
        }
      }

  std::vector<T> tmp(o * cols_n);
  MapMat<T>(tmp.data(), o, cols_n).noalias() =
      CMapMat<T>(w.values().data(), o, ckk) * CMapMat<T>(cols.data(), ckk, cols_n);
  std::vector<T> out(n * o * plane);
  for (std::size_t oc = 0; oc < o; ++oc)
    for (std::size_t s = 0; s < n; ++s)
      std::copy_n(tmp.begin() + oc * cols_n + s * plane, plane,
                  out.begin() + (s * o + oc) * plane);

  const bool keep_cols = grad_enabled() && w.requires_grad();
  if (!keep_cols) {
    cols.clear();
    cols.shrink_to_fit();
  }
  return make_result<T>(
      "conv2d", {n, o, ho, wo}, std::move(out), {x, w},
      [=, cols = std::move(cols)](Node<T>& self) {
        Node<T>& xn = *self.inputs[0];
        Node<T>& wn = *self.inputs[1];
        std::vector<T> gy(o * cols_n);
        for (std::size_t oc = 0; oc < o; ++oc)
          for (std::size_t s = 0; s < n; ++s)
            std::copy_n(self.grad.begin() + (s * o + oc) * plane, plane,
                        gy.begin() + oc * cols_n + s * plane);
        CMapMat<T> gym(gy.data(), o, cols_n);
        if (wn.requires_grad) {
          MapMat<T>(wn.ensure_grad().data(), o, ckk).noalias() +=
              gym * CMapMat<T>(cols.data(), ckk, cols_n).transpose();
        }
        if (!xn.requires_grad) return;
        std::vector<T> gcols(ckk * cols_n);
        MapMat<T>(gcols.data(), ckk, cols_n).noalias() =
            CMapMat<T>(wn.value.data(), o, ckk).transpose() * gym;
        auto& gx = xn.ensure_grad();
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j) {
              const T* row = gcols.data() + ((ch * kh + i) * kw + j) * cols_n;
              for (std::size_t s = 0; s < n; ++s) {
                T* dst = gx.data() + (s * c + ch) * h * wd;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  const std::ptrdiff_t iy =
                      static_cast<std::ptrdiff_t>(oy * p.stride + i) -
                      static_cast<std::ptrdiff_t>(p.padding);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t ox = 0; ox < wo; ++ox) {
                    const std::ptrdiff_t ix =
                        static_cast<std::ptrdiff_t>(ox * p.stride + j) -
                        static_cast<std::ptrdiff_t>(p.padding);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                    dst[iy * wd + ix] += row[s * plane + oy * wo + ox];
                  }
                }
              }
            }
      });
}

/// Running statistics owned by a batch-norm layer (not differentiated).
template <class T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

struct BatchNormParams {
  bool training = true;
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
  double eps = 1e-5;
};

/// Per-channel batch normalization for [N,C,H,W] or [N,C] inputs. Training
/// mode normalizes with batch statistics and updates the running stats;
/// eval mode uses the running stats.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& scale_t,
                     const Tensor<T>& shift_t, BatchNormState<T>& state,
                     BatchNormParams p = {}) {
  detail::require(x.rank() == 4 || x.rank() == 2, "batch_norm",
                  "expects [N,C,H,W] or [N,C], got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t plane = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  detail::require(scale_t.numel() == c && shift_t.numel() == c &&
                      state.running_mean.size() == c &&
                      state.running_var.size() == c,
                  "batch_norm",
                  "parameter length does not match " + std::to_string(c) +
                      " channels");
  const std::size_t m = n * plane;
  detail::require(!p.training || m > 1, "batch_norm",
                  "training mode needs more than one value per channel");
  const auto xv = x.values();
  std::vector<T> mean(c), inv_std(c), xhat(x.numel()), out(x.numel());
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (p.training) {
      T s = T(0);
      for (std::size_t s_i = 0; s_i < n; ++s_i)
        for (std::size_t q = 0; q < plane; ++q) s += xv[(s_i * c + ch) * plane + q];
      mu = s / static_cast<T>(m);
      T ss = T(0);
      for (std::size_t s_i = 0; s_i < n; ++s_i)
        for (std::size_t q = 0; q < plane; ++q) {
          const T d = xv[(s_i * c + ch) * plane + q] - mu;
          ss += d * d;
        }
      var = ss / static_cast<T>(m);
      const T mom = static_cast<T>(p.momentum);
      state.running_mean[ch] = mom * state.running_mean[ch] + (T(1) - mom) * mu;
      state.running_var[ch] =
          mom * state.running_var[ch] +
          (T(1) - mom) * var * static_cast<T>(m) / static_cast<T>(m - 1);
    } else {
      mu = state.running_mean[ch];
      var = state.running_var[ch];
    }
    mean[ch] = mu;
    inv_std[ch] = T(1) / std::sqrt(var + static_cast<T>(p.eps));
    const T g = scale_t[ch], b = shift_t[ch];
    for (std::size_t s_i = 0; s_i < n; ++s_i)
      for (std::size_t q = 0; q < plane; ++q) {
        const std::size_t idx = (s_i * c + ch) * plane + q;
        xhat[idx] = (xv[idx] - mu) * inv_std[ch];
        out[idx] = g * xhat[idx] + b;
      }
  }
  const bool training = p.training;
  return make_result<T>(
      "batch_norm", x.shape(), std::move(out), {x, scale_t, shift_t},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        Node<T>& xn = *self.inputs[0];
        Node<T>& gn = *self.inputs[1];
        Node<T>& bn = *self.inputs[2];
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sum_dy = T(0), sum_dy_xhat = T(0);
          for (std::size_t s_i = 0; s_i < n; ++s_i)
            for (std::size_t q = 0; q < plane; ++q) {
              const std::size_t idx = (s_i * c + ch) * plane + q;
              sum_dy += self.grad[idx];
              sum_dy_xhat += self.grad[idx] * xhat[idx];
            }
          if (gn.requires_grad) gn.ensure_grad()[ch] += sum_dy_xhat;
          if (bn.requires_grad) bn.ensure_grad()[ch] += sum_dy;
          if (!xn.requires_grad) continue;
          auto& gx = xn.ensure_grad();
          const T g = gn.value[ch];
          const T k = g * inv_std[ch];
          if (training) {
            const T inv_m = T(1) / static_cast<T>(m);
            for (std::size_t s_i = 0; s_i < n; ++s_i)
              for (std::size_t q = 0; q < plane; ++q) {
                const std::size_t idx = (s_i * c + ch) * plane + q;
                gx[idx] += k * (self.grad[idx] - inv_m * sum_dy -
                                xhat[idx] * inv_m * sum_dy_xhat);
              }
          } else {
            for (std::size_t s_i = 0; s_i < n; ++s_i)
              for (std::size_t q = 0; q < plane; ++q) {
                const std::size_t idx = (s_i * c + ch) * plane + q;
                gx[idx] += k * self.grad[idx];
              }
          }
        }
      });
}

// --------------------------------------------------------------------- losses

inline constexpr double kLogClip = 1e-7;

/// Summed-over-bins, batch-averaged binary cross-entropy on probabilities:
///   (1/N) sum_n sum_b mask * -(y log p + (1-y) log(1-p)),
/// with p clipped to [clip, 1-clip]. The target (and mask) are constants.
/// Clipped entries pass no gradient.
template <class T>
Tensor<T> binary_cross_entropy(const Tensor<T>& probs, std::span<const T> target,
                               std::span<const std::uint8_t> mask = {},
                               double clip = kLogClip) {
  detail::require(probs.rank() == 2, "binary_cross_entropy",
                  "probs must be [N,B], got " + to_string(probs.shape()));
  detail::require(target.size() == probs.numel(), "binary_cross_entropy",
                  "target length " + std::to_string(target.size()) +
                      " vs probs " + to_string(probs.shape()));
  detail::require(mask.empty() || mask.size() == probs.numel(),
                  "binary_cross_entropy",
                  "mask length " + std::to_string(mask.size()) + " vs probs " +
                      to_string(probs.shape()));
  const T lo = static_cast<T>(clip), hi = T(1) - static_cast<T>(clip);
  const T inv_n = T(1) / static_cast<T>(probs.dim(0));
  KinkMonitor* monitor = detail::kink_monitor();
  T total = T(0);
  const auto pv = probs.values();
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    const T p = std::clamp(pv[i], lo, hi);
    if (monitor) monitor->mix(pv[i] < lo ? 3 * i : (pv[i] > hi ? 3 * i + 1 : 3 * i + 2));
    total -= target[i] * std::log(p) + (T(1) - target[i]) * std::log(T(1) - p);
  }
  std::vector<T> y(target.begin(), target.end());
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return make_result<T>(
      "binary_cross_entropy", {1}, {total * inv_n}, {probs},
      [y = std::move(y), m = std::move(m), lo, hi, inv_n](Node<T>& self) {
        Node<T>& pn = *self.inputs[0];
        auto& g = pn.ensure_grad();
        const T up = self.grad[0] * inv_n;
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!m.empty() && !m[i]) continue;
          const T p = pn.value[i];
          if (p < lo || p > hi) continue;
          g[i] += up * (-y[i] / p + (T(1) - y[i]) / (T(1) - p));
        }
      });
}

}  // namespace ordgaze::ops
