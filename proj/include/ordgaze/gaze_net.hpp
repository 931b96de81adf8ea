#pragma once

#include <array>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ordgaze/ops.hpp"
#include "ordgaze/ordinal.hpp"
#include "ordgaze/tensor.hpp"

namespace ordgaze {

struct ConvSpec {
  std::size_t channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  bool operator==(const ConvSpec&) const = default;
};

struct GazeNetConfig {
  std::size_t patch_size = 64;
  std::size_t in_channels = 3;
  std::size_t branch_feature_dim = 128;
  std::size_t fusion_dim = 128;
  std::size_t bins_x = 72;
  std::size_t bins_y = 98;
  std::vector<ConvSpec> conv_stack{{16, 3, 2}, {32, 3, 2}, {64, 3, 2}, {64, 3, 1}};

  std::size_t fusion_input_dim() const { return 3 * branch_feature_dim; }
  std::size_t output_dim() const { return bins_x + bins_y; }

  void validate() const {
    if (patch_size == 0 || in_channels == 0)
      throw std::invalid_argument("gaze_net: patch size and channels must be positive");
    if (bins_x < 2 || bins_y < 2)
      throw std::invalid_argument("gaze_net: bins_x and bins_y must be >= 2");
    if (conv_stack.empty()) throw std::invalid_argument("gaze_net: empty conv stack");
    std::size_t size = patch_size;
    for (const auto& c : conv_stack) {
      if (c.channels == 0 || c.kernel == 0 || c.stride == 0)
        throw std::invalid_argument("gaze_net: conv spec fields must be positive");
      if (size + 2 * (c.kernel / 2) < c.kernel)
        throw std::invalid_argument("gaze_net: conv stack shrinks the patch below the kernel");
      size = ops::conv_out_size(size, c.kernel, c.stride, c.kernel / 2);
    }
  }

  bool operator==(const GazeNetConfig&) const = default;
};

/// conv (no bias) -> batch norm -> relu. Pruning and re-initialization
/// operate on `weight` rows and the matching BN entries.
template <class T>
struct ConvBnLayer {
  ConvSpec spec;
  std::size_t in_channels = 0;
  Tensor<T> weight;  // [O, C, K, K]
  Tensor<T> bn_scale;
  Tensor<T> bn_shift;
  ops::BatchNormState<T> bn_state;

  std::size_t filters() const { return spec.channels; }
  std::size_t fan_in() const { return in_channels * spec.kernel * spec.kernel; }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    auto y = ops::conv2d(x, weight, {spec.stride, spec.kernel / 2});
    y = ops::batch_norm(y, bn_scale, bn_shift, bn_state, {training, 0.9, 1e-5});
    return ops::relu(y);
  }
};

template <class T>
struct LinearLayer {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]
  Tensor<T> forward(const Tensor<T>& x) const { return ops::linear(x, weight, bias); }
};

template <class T>
struct Branch {
  std::vector<ConvBnLayer<T>> convs;
  LinearLayer<T> fc;
};

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
struct ConvLayerRef {
  std::size_t layer_id;
  std::string name;
  ConvBnLayer<T>* layer;
};

namespace init {

template <class T, class Rng>
void normal(Tensor<T>& t, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
}

template <class T, class Rng>
void uniform(Tensor<T>& t, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
}

}  // namespace init

/// Three-branch (face, left eye, right eye) ordinal gaze regressor.
///   branch: [conv-BN-ReLU]* -> global average pool -> FC -> ReLU
///   fusion: concat(3 x branch) -> FC -> ReLU  (final feature)
///   head:   FC -> sigmoid, bins_x horizontal then bins_y vertical outputs
template <class T>
class GazeNet {
 public:
  static constexpr std::array<const char*, 3> kBranchNames{"face", "left", "right"};

  GazeNet() = default;

  GazeNet(GazeNetConfig cfg, OrdinalConfig x_codec, OrdinalConfig y_codec)
      : cfg_(std::move(cfg)), codecs_{x_codec, y_codec} {
    cfg_.validate();
    x_codec.validate();
    y_codec.validate();
    if (x_codec.bins != cfg_.bins_x || y_codec.bins != cfg_.bins_y)
      throw std::invalid_argument("gaze_net: codec bins do not match bins_x/bins_y");
    build();
  }

  const GazeNetConfig& config() const { return cfg_; }
  const OrdinalConfig& x_codec() const { return codecs_[0]; }
  const OrdinalConfig& y_codec() const { return codecs_[1]; }

  bool training() const { return training_; }
  void set_training(bool on) { training_ = on; }

  /// Kaiming-normal convs, unit BN, fan-in uniform linear layers.
  template <class Rng>
  void initialize(Rng& rng) {
    for (auto& b : branches_) {
      for (auto& c : b.convs) reset_conv(c, rng);
      reset_linear(b.fc, rng);
    }
    reset_linear(fusion_, rng);
    reset_linear(head_, rng);
  }

  template <class Rng>
  static void reset_conv(ConvBnLayer<T>& c, Rng& rng) {
    init::normal(c.weight, std::sqrt(2.0 / static_cast<double>(c.fan_in())), rng);
    std::fill(c.bn_scale.storage().begin(), c.bn_scale.storage().end(), T(1));
    std::fill(c.bn_shift.storage().begin(), c.bn_shift.storage().end(), T(0));
    c.bn_state = ops::BatchNormState<T>(c.filters());
  }

  template <class Rng>
  static void reset_linear(LinearLayer<T>& l, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.weight.dim(1)));
    init::uniform(l.weight, bound, rng);
    init::uniform(l.bias, bound, rng);
  }

  void zero_head() {
    std::fill(head_.weight.storage().begin(), head_.weight.storage().end(), T(0));
    std::fill(head_.bias.storage().begin(), head_.bias.storage().end(), T(0));
  }

  Tensor<T> extract_final_feature(const Tensor<T>& face, const Tensor<T>& left,
                                  const Tensor<T>& right) {
    const std::array<const Tensor<T>*, 3> inputs{&face, &left, &right};
    std::vector<Tensor<T>> features;
    const std::size_t n = face.rank() ? face.dim(0) : 0;
    for (std::size_t i = 0; i < 3; ++i) {
      check_patch(*inputs[i], kBranchNames[i], n);
      Tensor<T> h = *inputs[i];
      for (auto& c : branches_[i].convs) h = c.forward(h, training_);
      h = ops::global_avg_pool(h);
      features.push_back(ops::relu(branches_[i].fc.forward(h)));
    }
    return ops::relu(fusion_.forward(ops::concat_cols(features)));
  }

  Tensor<T> head_logits(const Tensor<T>& feature) const { return head_.forward(feature); }
  Tensor<T> head_probs(const Tensor<T>& feature) const {
    return ops::sigmoid(head_logits(feature));
  }

  /// Per-bin probabilities [N, bins_x + bins_y].
  Tensor<T> forward(const Tensor<T>& face, const Tensor<T>& left, const Tensor<T>& right) {
    return head_probs(extract_final_feature(face, left, right));
  }

  /// Decodes each row of probs into an (x, y) point in dataset units.
  std::vector<std::array<double, 2>> predict_gaze(const Tensor<T>& probs) const {
    if (probs.rank() != 2 || probs.dim(1) != cfg_.output_dim())
      throw ShapeError("predict_gaze", "probs " + to_string(probs.shape()) + " vs " +
                                           std::to_string(cfg_.output_dim()) + " bins");
    std::vector<std::array<double, 2>> out(probs.dim(0));
    const std::size_t width = cfg_.output_dim();
    for (std::size_t r = 0; r < out.size(); ++r) {
      std::span<const T> row = probs.values().subspan(r * width, width);
      out[r][0] = decode(row.first(cfg_.bins_x), codecs_[0]);
      out[r][1] = decode(row.subspan(cfg_.bins_x), codecs_[1]);
    }
    return out;
  }

  std::vector<NamedParam<T>> parameters() const {
    std::vector<NamedParam<T>> out;
    for (std::size_t b = 0; b < 3; ++b) {
      const std::string prefix = kBranchNames[b];
      const auto& br = branches_[b];
      for (std::size_t i = 0; i < br.convs.size(); ++i) {
        const std::string p = prefix + ".conv" + std::to_string(i);
        out.push_back({p + ".weight", br.convs[i].weight});
        out.push_back({p + ".bn_scale", br.convs[i].bn_scale});
        out.push_back({p + ".bn_shift", br.convs[i].bn_shift});
      }
      out.push_back({prefix + ".fc.weight", br.fc.weight});
      out.push_back({prefix + ".fc.bias", br.fc.bias});
    }
    out.push_back({"fusion.weight", fusion_.weight});
    out.push_back({"fusion.bias", fusion_.bias});
    out.push_back({"head.weight", head_.weight});
    out.push_back({"head.bias", head_.bias});
    return out;
  }

  /// Running statistics by name ("<conv>.running_mean" / ".running_var").
  std::vector<std::pair<std::string, std::vector<T>*>> buffers() {
    std::vector<std::pair<std::string, std::vector<T>*>> out;
    for (auto& c : conv_layers()) {
      out.emplace_back(c.name + ".running_mean", &c.layer->bn_state.running_mean);
      out.emplace_back(c.name + ".running_var", &c.layer->bn_state.running_var);
    }
    return out;
  }

  /// Every conv layer in a fixed global order (face, left, right; shallow first).
  std::vector<ConvLayerRef<T>> conv_layers() {
    std::vector<ConvLayerRef<T>> out;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t i = 0; i < branches_[b].convs.size(); ++i)
        out.push_back({out.size(), std::string(kBranchNames[b]) + ".conv" + std::to_string(i),
                       &branches_[b].convs[i]});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }

  void set_requires_grad(bool on) {
    for (auto& p : parameters()) p.tensor.set_requires_grad(on);
  }

  void zero_grad() {
    for (auto& p : parameters()) p.tensor.zero_grad();
  }

  /// Deep copy: parameters and running stats are independent of this model.
  GazeNet clone() const {
    GazeNet copy;
    copy.cfg_ = cfg_;
    copy.codecs_ = codecs_;
    copy.training_ = training_;
    copy.branches_ = branches_;
    for (auto& b : copy.branches_) {
      for (auto& c : b.convs) {
        c.weight = c.weight.clone();
        c.bn_scale = c.bn_scale.clone();
        c.bn_shift = c.bn_shift.clone();
      }
      b.fc = clone_linear(b.fc);
    }
    copy.fusion_ = clone_linear(fusion_);
    copy.head_ = clone_linear(head_);
    return copy;
  }

  Branch<T>& branch(std::size_t i) { return branches_.at(i); }
  LinearLayer<T>& fusion() { return fusion_; }
  LinearLayer<T>& head() { return head_; }

 private:
  static LinearLayer<T> clone_linear(const LinearLayer<T>& l) {
    return {l.weight.clone(), l.bias.clone()};
  }

  void build() {
    for (auto& b : branches_) {
      b.convs.clear();
      std::size_t in = cfg_.in_channels;
      for (const auto& spec : cfg_.conv_stack) {
        ConvBnLayer<T> c;
        c.spec = spec;
        c.in_channels = in;
        c.weight = Tensor<T>::zeros({spec.channels, in, spec.kernel, spec.kernel}, true);
        c.bn_scale = Tensor<T>::full({spec.channels}, T(1), true);
        c.bn_shift = Tensor<T>::zeros({spec.channels}, true);
        c.bn_state = ops::BatchNormState<T>(spec.channels);
        b.convs.push_back(std::move(c));
        in = spec.channels;
      }
      b.fc = {Tensor<T>::zeros({cfg_.branch_feature_dim, in}, true),
              Tensor<T>::zeros({cfg_.branch_feature_dim}, true)};
    }
    fusion_ = {Tensor<T>::zeros({cfg_.fusion_dim, cfg_.fusion_input_dim()}, true),
               Tensor<T>::zeros({cfg_.fusion_dim}, true)};
    head_ = {Tensor<T>::zeros({cfg_.output_dim(), cfg_.fusion_dim}, true),
             Tensor<T>::zeros({cfg_.output_dim()}, true)};
  }

  void check_patch(const Tensor<T>& x, const char* which, std::size_t n) const {
    const Shape expected{n, cfg_.in_channels, cfg_.patch_size, cfg_.patch_size};
    if (x.shape() != expected || n == 0)
      throw ShapeError("gaze_net", std::string(which) + " patch " + to_string(x.shape()) +
                                       ", expected " + to_string(expected));
  }

  GazeNetConfig cfg_;
  std::array<OrdinalConfig, 2> codecs_{};
  std::array<Branch<T>, 3> branches_;
  LinearLayer<T> fusion_;
  LinearLayer<T> head_;
  bool training_ = true;
};

}  // namespace ordgaze
