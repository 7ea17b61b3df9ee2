/*
 * Copyright 2026 The mriseq Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

// 3D DenseNet and 3D ResNet classifiers.
//
// Parameter and buffer names follow the usual torchvision/MONAI layout
// ("features.denseblock1.denselayer2.conv1.weight", "layer1.0.bn2.running_var")
// and are part of the checkpoint contract.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mriseq/autodiff/ops.hpp"
#include "mriseq/autodiff/tensor.hpp"
#include "mriseq/error.hpp"
#include "mriseq/labels.hpp"
#include "mriseq/seeding.hpp"
#include "mriseq/volume.hpp"

namespace mriseq {

enum class Arch { DenseNet3D, ResNet3D };

inline std::string arch_name(Arch a) { return a == Arch::DenseNet3D ? "densenet3d" : "resnet3d"; }

inline Arch parse_arch(const std::string& s) {
  if (s == "densenet3d") return Arch::DenseNet3D;
  if (s == "resnet3d") return Arch::ResNet3D;
  throw UsageError("unknown architecture '" + s + "' (expected densenet3d or resnet3d)");
}

struct ModelConfig {
  Arch arch = Arch::DenseNet3D;
  int in_channels = 1;
  int num_classes = kNumClasses;

  // Stem: conv(stem_kernel, stride stem_stride, same padding) -> BN -> ReLU
  // -> optional max-pool(3, 2, pad 1).
  int stem_kernel = 7;
  int stem_stride = 2;
  bool stem_pool = true;

  int growth_rate = 32;
  std::vector<int> block_layers{6, 12, 24, 16};
  int init_features = 64;
  int bn_size = 4;
  double compression = 0.5;

  std::vector<int> resnet_blocks{3, 4, 6, 3};
  int base_width = 64;
  bool bottleneck = true;

  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  static ModelConfig densenet121() { return {}; }

  static ModelConfig resnet50() {
    ModelConfig c;
    c.arch = Arch::ResNet3D;
    return c;
  }

  static ModelConfig toy_densenet() {
    ModelConfig c;
    c.stem_kernel = 3;
    c.growth_rate = 8;
    c.block_layers = {2, 2};
    c.init_features = 16;
    return c;
  }

  static ModelConfig toy_resnet() {
    ModelConfig c;
    c.arch = Arch::ResNet3D;
    c.stem_kernel = 3;
    c.resnet_blocks = {1, 1};
    c.base_width = 8;
    return c;
  }

  static ModelConfig toy(Arch a) { return a == Arch::DenseNet3D ? toy_densenet() : toy_resnet(); }

  void validate() const {
    auto fail = [](const std::string& m) { throw UsageError("invalid model config: " + m); };
    if (num_classes != kNumClasses) fail("num_classes must be " + std::to_string(kNumClasses));
    if (in_channels < 1) fail("in_channels must be >= 1");
    if (stem_kernel < 1 || stem_stride < 1) fail("stem kernel/stride must be >= 1");
    if (arch == Arch::DenseNet3D) {
      if (growth_rate < 1 || init_features < 1 || bn_size < 1) fail("densenet widths must be >= 1");
      if (block_layers.empty()) fail("densenet needs at least one block");
      for (int b : block_layers)
        if (b < 1) fail("densenet block layer counts must be >= 1");
      if (!(compression > 0.0 && compression <= 1.0)) fail("compression must be in (0, 1]");
    } else {
      if (base_width < 1) fail("resnet base width must be >= 1");
      if (resnet_blocks.empty()) fail("resnet needs at least one stage");
      for (int b : resnet_blocks)
        if (b < 1) fail("resnet block counts must be >= 1");
    }
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"arch", arch_name(c.arch)},
                     {"in_channels", c.in_channels},
                     {"num_classes", c.num_classes},
                     {"stem_kernel", c.stem_kernel},
                     {"stem_stride", c.stem_stride},
                     {"stem_pool", c.stem_pool},
                     {"growth_rate", c.growth_rate},
                     {"block_layers", c.block_layers},
                     {"init_features", c.init_features},
                     {"bn_size", c.bn_size},
                     {"compression", c.compression},
                     {"resnet_blocks", c.resnet_blocks},
                     {"base_width", c.base_width},
                     {"bottleneck", c.bottleneck},
                     {"bn_momentum", c.bn_momentum},
                     {"bn_eps", c.bn_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  if (j.contains("arch")) c.arch = parse_arch(j.at("arch").get<std::string>());
  c.in_channels = j.value("in_channels", c.in_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.stem_kernel = j.value("stem_kernel", c.stem_kernel);
  c.stem_stride = j.value("stem_stride", c.stem_stride);
  c.stem_pool = j.value("stem_pool", c.stem_pool);
  c.growth_rate = j.value("growth_rate", c.growth_rate);
  c.block_layers = j.value("block_layers", c.block_layers);
  c.init_features = j.value("init_features", c.init_features);
  c.bn_size = j.value("bn_size", c.bn_size);
  c.compression = j.value("compression", c.compression);
  c.resnet_blocks = j.value("resnet_blocks", c.resnet_blocks);
  c.base_width = j.value("base_width", c.base_width);
  c.bottleneck = j.value("bottleneck", c.bottleneck);
  c.bn_momentum = j.value("bn_momentum", c.bn_momentum);
  c.bn_eps = j.value("bn_eps", c.bn_eps);
}

/// Named intermediate activations recorded during a forward pass.
template <typename T>
struct FeatureTaps {
  std::vector<std::pair<std::string, ad::Tensor<T>>> entries;

  void put(std::string name, const ad::Tensor<T>& t) { entries.emplace_back(std::move(name), t); }
  const ad::Tensor<T>* find(const std::string& name) const {
    for (const auto& [n, t] : entries)
      if (n == name) return &t;
    return nullptr;
  }
};

template <typename T>
class Model {
 public:
  using Tensor = ad::Tensor<T>;

  struct Param {
    std::string name;
    Tensor tensor;
  };
  struct Buffer {
    std::string name;  // prefix; running_mean / running_var appended on save
    ad::BatchNormStats<T> stats;
  };

  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
    cfg_.validate();
    if (cfg_.arch == Arch::DenseNet3D)
      build_densenet();
    else
      build_resnet();
  }

  Model(const Model& o) : cfg_(o.cfg_), seed_(o.seed_), layout_(o.layout_), buffers_(o.buffers_) {
    for (const auto& p : o.params_)
      params_.push_back({p.name, Tensor::from(p.tensor.shape(),
                                              std::vector<T>(p.tensor.data().begin(), p.tensor.data().end()),
                                              true)});
  }
  Model& operator=(const Model& o) {
    if (this != &o) *this = Model(o);
    return *this;
  }
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }
  std::vector<Param>& parameters() { return params_; }
  const std::vector<Param>& parameters() const { return params_; }
  std::vector<Buffer>& buffers() { return buffers_; }
  const std::vector<Buffer>& buffers() const { return buffers_; }

  std::vector<Tensor> parameter_tensors() const {
    std::vector<Tensor> out;
    for (const auto& p : params_) out.push_back(p.tensor);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// Same architecture and values in another precision.
  template <typename U>
  Model<U> cast() const {
    Model<U> out(cfg_, seed_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto src = params_[i].tensor.data();
      auto dst = out.parameters()[i].tensor.data();
      for (std::size_t k = 0; k < src.size(); ++k) dst[k] = static_cast<U>(src[k]);
    }
    for (std::size_t i = 0; i < buffers_.size(); ++i) {
      const auto& s = buffers_[i].stats;
      auto& d = out.buffers()[i].stats;
      for (std::size_t k = 0; k < s.running_mean.size(); ++k) {
        d.running_mean[k] = static_cast<U>(s.running_mean[k]);
        d.running_var[k] = static_cast<U>(s.running_var[k]);
      }
    }
    return out;
  }

  /// Smallest spatial extent per axis the pooling stack accepts.
  std::size_t min_input_extent() const {
    for (std::size_t n = 1; n < 4096; ++n)
      if (spatial_ok(n)) return n;
    return 4096;
  }

  /// Logits [N, num_classes] for input [N, in_channels, X, Y, Z].
  Tensor forward(const Tensor& x, bool training, FeatureTaps<T>* taps = nullptr) {
    if (x.rank() != 5 || x.dim(1) != static_cast<std::size_t>(cfg_.in_channels))
      throw ShapeError("model input must be [N," + std::to_string(cfg_.in_channels) + ",X,Y,Z], got " +
                       ad::shape_str(x.shape()));
    for (std::size_t a = 2; a < 5; ++a)
      if (!spatial_ok(x.dim(a)))
        throw ShapeError("input " + ad::shape_str(x.shape()) +
                         " too small for the pooling stack; minimum supported size is " +
                         std::to_string(min_input_extent()) + " per spatial axis");
    return cfg_.arch == Arch::DenseNet3D ? forward_densenet(x, training, taps)
                                         : forward_resnet(x, training, taps);
  }

  /// Name of the last spatial feature map before global pooling.
  static constexpr const char* kFinalFeatureLayer = "final";

 private:
  struct Conv {
    std::size_t weight;
    std::optional<std::size_t> bias;
    std::size_t stride, pad;
  };
  struct Norm {
    std::size_t gamma, beta, stats;
  };
  struct DenseLayer {
    Norm norm1;
    Conv conv1;
    Norm norm2;
    Conv conv2;
  };
  struct Transition {
    Norm norm;
    Conv conv;
  };
  struct ResBlock {
    Conv conv1;
    Norm bn1;
    Conv conv2;
    Norm bn2;
    std::optional<Conv> conv3;
    std::optional<Norm> bn3;
    std::optional<Conv> down_conv;
    std::optional<Norm> down_bn;
  };
  struct Layout {
    Conv stem_conv;
    Norm stem_norm;
    std::vector<std::vector<DenseLayer>> blocks;
    std::vector<Transition> transitions;
    std::optional<Norm> final_norm;
    std::vector<std::vector<ResBlock>> stages;
    std::size_t head_weight = 0, head_bias = 0;
  };

  std::size_t add_param(std::string name, ad::Shape shape, double stddev, double fill = 0.0) {
    const std::size_t idx = params_.size();
    std::vector<T> v(ad::numel(shape));
    if (stddev > 0.0) {
      std::mt19937_64 rng(derive_seed(seed_, "param", {idx}));
      std::normal_distribution<double> nd(0.0, stddev);
      for (auto& x : v) x = static_cast<T>(nd(rng));
    } else {
      std::fill(v.begin(), v.end(), static_cast<T>(fill));
    }
    params_.push_back({std::move(name), Tensor::from(std::move(shape), std::move(v), true)});
    return idx;
  }

  Conv add_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k,
                std::size_t stride, std::size_t pad, bool bias = false) {
    const double fan_in = static_cast<double>(in * k * k * k);
    Conv c{add_param(name + ".weight", {out, in, k, k, k}, std::sqrt(2.0 / fan_in)), std::nullopt, stride, pad};
    if (bias) c.bias = add_param(name + ".bias", {out}, 0.0);
    return c;
  }

  Norm add_norm(const std::string& name, std::size_t channels) {
    Norm n{add_param(name + ".weight", {channels}, 0.0, 1.0), add_param(name + ".bias", {channels}, 0.0),
           buffers_.size()};
    buffers_.push_back({name, ad::BatchNormStats<T>(channels)});
    return n;
  }

  void build_stem(const std::string& conv_name, const std::string& norm_name, std::size_t width) {
    const auto k = static_cast<std::size_t>(cfg_.stem_kernel);
    layout_.stem_conv = add_conv(conv_name, static_cast<std::size_t>(cfg_.in_channels), width, k,
                                 static_cast<std::size_t>(cfg_.stem_stride), k / 2);
    layout_.stem_norm = add_norm(norm_name, width);
  }

  void build_head(const std::string& name, std::size_t features) {
    const auto classes = static_cast<std::size_t>(cfg_.num_classes);
    layout_.head_weight = add_param(name + ".weight", {classes, features}, std::sqrt(2.0 / static_cast<double>(features)));
    layout_.head_bias = add_param(name + ".bias", {classes}, 0.0);
  }

  void build_densenet() {
    auto ch = static_cast<std::size_t>(cfg_.init_features);
    const auto growth = static_cast<std::size_t>(cfg_.growth_rate);
    const auto inner = static_cast<std::size_t>(cfg_.bn_size) * growth;
    build_stem("features.conv0", "features.norm0", ch);
    for (std::size_t b = 0; b < cfg_.block_layers.size(); ++b) {
      std::vector<DenseLayer> layers;
      for (int l = 0; l < cfg_.block_layers[b]; ++l) {
        const std::string p =
            "features.denseblock" + std::to_string(b + 1) + ".denselayer" + std::to_string(l + 1);
        DenseLayer dl{add_norm(p + ".norm1", ch), add_conv(p + ".conv1", ch, inner, 1, 1, 0),
                      add_norm(p + ".norm2", inner), add_conv(p + ".conv2", inner, growth, 3, 1, 1)};
        layers.push_back(dl);
        ch += growth;
      }
      layout_.blocks.push_back(std::move(layers));
      if (b + 1 < cfg_.block_layers.size()) {
        const auto out = static_cast<std::size_t>(std::floor(static_cast<double>(ch) * cfg_.compression));
        const std::string p = "features.transition" + std::to_string(b + 1);
        layout_.transitions.push_back({add_norm(p + ".norm", ch), add_conv(p + ".conv", ch, out, 1, 1, 0)});
        ch = out;
      }
    }
    layout_.final_norm = add_norm("features.norm5", ch);
    build_head("class_layers.out", ch);
  }

  void build_resnet() {
    const std::size_t expansion = cfg_.bottleneck ? 4 : 1;
    std::size_t in = static_cast<std::size_t>(cfg_.base_width);
    build_stem("conv1", "bn1", in);
    for (std::size_t s = 0; s < cfg_.resnet_blocks.size(); ++s) {
      const std::size_t width = static_cast<std::size_t>(cfg_.base_width) << s;
      const std::size_t out = width * expansion;
      std::vector<ResBlock> blocks;
      for (int j = 0; j < cfg_.resnet_blocks[s]; ++j) {
        const std::size_t stride = (s > 0 && j == 0) ? 2 : 1;
        const std::string p = "layer" + std::to_string(s + 1) + "." + std::to_string(j);
        ResBlock rb;
        if (cfg_.bottleneck) {
          rb.conv1 = add_conv(p + ".conv1", in, width, 1, 1, 0);
          rb.bn1 = add_norm(p + ".bn1", width);
          rb.conv2 = add_conv(p + ".conv2", width, width, 3, stride, 1);
          rb.bn2 = add_norm(p + ".bn2", width);
          rb.conv3 = add_conv(p + ".conv3", width, out, 1, 1, 0);
          rb.bn3 = add_norm(p + ".bn3", out);
        } else {
          rb.conv1 = add_conv(p + ".conv1", in, width, 3, stride, 1);
          rb.bn1 = add_norm(p + ".bn1", width);
          rb.conv2 = add_conv(p + ".conv2", width, width, 3, 1, 1);
          rb.bn2 = add_norm(p + ".bn2", width);
        }
        if (stride != 1 || in != out) {
          rb.down_conv = add_conv(p + ".downsample.0", in, out, 1, stride, 0);
          rb.down_bn = add_norm(p + ".downsample.1", out);
        }
        blocks.push_back(rb);
        in = out;
      }
      layout_.stages.push_back(std::move(blocks));
    }
    build_head("fc", in);
  }

  static std::size_t conv_extent(std::size_t n, std::size_t k, std::size_t s, std::size_t p) {
    return ad::detail::out_extent(n, k, s, p);
  }

  bool spatial_ok(std::size_t n) const {
    const auto k = static_cast<std::size_t>(cfg_.stem_kernel);
    n = conv_extent(n, k, static_cast<std::size_t>(cfg_.stem_stride), k / 2);
    if (n == 0) return false;
    if (cfg_.stem_pool) {
      n = conv_extent(n, 3, 2, 1);
      if (n == 0) return false;
    }
    if (cfg_.arch == Arch::DenseNet3D) {
      for (std::size_t t = 0; t + 1 < cfg_.block_layers.size(); ++t) {
        n = conv_extent(n, 2, 2, 0);
        if (n == 0) return false;
      }
    } else {
      for (std::size_t s = 1; s < cfg_.resnet_blocks.size(); ++s) n = conv_extent(n, 3, 2, 1);
    }
    return n >= 1;
  }

  Tensor conv(const Tensor& x, const Conv& c) const {
    return ad::conv3d(x, params_[c.weight].tensor, c.bias ? params_[*c.bias].tensor : Tensor(), c.stride, c.pad);
  }
  Tensor norm(const Tensor& x, const Norm& n, bool training) {
    return ad::batchnorm3d(x, params_[n.gamma].tensor, params_[n.beta].tensor, buffers_[n.stats].stats, training,
                           cfg_.bn_momentum, cfg_.bn_eps);
  }

  Tensor stem(const Tensor& x, bool training, FeatureTaps<T>* taps) {
    auto h = ad::relu(norm(conv(x, layout_.stem_conv), layout_.stem_norm, training));
    if (cfg_.stem_pool) h = ad::maxpool3d(h, 3, 2, 1);
    if (taps) taps->put("stem", h);
    return h;
  }

  Tensor head(const Tensor& features) {
    return ad::linear(ad::global_avg_pool(features), params_[layout_.head_weight].tensor,
                      params_[layout_.head_bias].tensor);
  }

  Tensor forward_densenet(const Tensor& x, bool training, FeatureTaps<T>* taps) {
    auto h = stem(x, training, taps);
    for (std::size_t b = 0; b < layout_.blocks.size(); ++b) {
      std::vector<Tensor> feats{h};
      for (const auto& dl : layout_.blocks[b]) {
        const Tensor in = feats.size() == 1 ? feats.front() : ad::concat_channels(feats);
        auto y = conv(ad::relu(norm(in, dl.norm1, training)), dl.conv1);
        y = conv(ad::relu(norm(y, dl.norm2, training)), dl.conv2);
        feats.push_back(y);
      }
      h = ad::concat_channels(feats);
      if (taps) taps->put("denseblock" + std::to_string(b + 1), h);
      if (b < layout_.transitions.size()) {
        const auto& tr = layout_.transitions[b];
        h = ad::avgpool3d(conv(ad::relu(norm(h, tr.norm, training)), tr.conv), 2, 2);
        if (taps) taps->put("transition" + std::to_string(b + 1), h);
      }
    }
    h = ad::relu(norm(h, *layout_.final_norm, training));
    if (taps) taps->put(kFinalFeatureLayer, h);
    return head(h);
  }

  Tensor forward_resnet(const Tensor& x, bool training, FeatureTaps<T>* taps) {
    auto h = stem(x, training, taps);
    for (std::size_t s = 0; s < layout_.stages.size(); ++s) {
      for (std::size_t j = 0; j < layout_.stages[s].size(); ++j) {
        const auto& rb = layout_.stages[s][j];
        auto y = ad::relu(norm(conv(h, rb.conv1), rb.bn1, training));
        y = norm(conv(y, rb.conv2), rb.bn2, training);
        if (rb.conv3) y = norm(conv(ad::relu(y), *rb.conv3), *rb.bn3, training);
        const Tensor shortcut = rb.down_conv ? norm(conv(h, *rb.down_conv), *rb.down_bn, training) : h;
        h = ad::relu(ad::add(y, shortcut));
        if (taps) taps->put("layer" + std::to_string(s + 1) + "." + std::to_string(j), h);
      }
    }
    if (taps) taps->put(kFinalFeatureLayer, h);
    return head(h);
  }

  ModelConfig cfg_;
  std::uint64_t seed_;
  Layout layout_;
  std::vector<Param> params_;
  std::vector<Buffer> buffers_;
};

/// Copies a volume (x fastest) into a [1, 1, X, Y, Z] tensor (z fastest).
template <typename T>
std::vector<T> volume_to_tensor_data(const Volume3D& v) {
  const auto& d = v.dims();
  std::vector<T> out(v.size());
  auto in = v.data();
  for (std::size_t z = 0; z < d[2]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[0]; ++x)
        out[(x * d[1] + y) * d[2] + z] = static_cast<T>(in[x + d[0] * (y + d[1] * z)]);
  return out;
}

}  // namespace mriseq
