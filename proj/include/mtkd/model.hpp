#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "mtkd/error.hpp"
#include "mtkd/mask.hpp"
#include "mtkd/ops.hpp"
#include "mtkd/rng.hpp"
#include "mtkd/tensor.hpp"

namespace mtkd {

enum class Arch { fcef_mini, fcsiam_diff_mini };

inline std::string to_string(Arch arch) {
  return arch == Arch::fcef_mini ? "fcef-mini" : "fcsiam-diff-mini";
}

inline Arch parse_arch(const std::string& s) {
  if (s == "fcef-mini") return Arch::fcef_mini;
  if (s == "fcsiam-diff-mini") return Arch::fcsiam_diff_mini;
  throw ConfigError("unknown architecture '" + s + "' (expected fcef-mini or fcsiam-diff-mini)");
}

struct LayerSpec {
  std::string name;
  std::size_t in_channels;
  std::size_t out_channels;
  std::size_t kernel;
};

/// Convolution layers of the miniature U-shaped networks, in forward order.
///
///   encoder  enc1: in -> w -> w      (3x3, relu), pool
///            enc2: w -> 2w -> 2w     (3x3, relu), pool
///   bottleneck:    2w -> 4w -> 4w    (3x3, relu)
///   decoder  dec2: up, concat stage-2 skip, 6w -> 2w (3x3, relu)
///            dec1: up, concat stage-1 skip, 3w -> w  (3x3, relu)
///   head:          w -> 1 (1x1), sigmoid
///
/// fcef-mini stacks both images into 6 input channels. fcsiam-diff-mini runs
/// a shared 3-channel encoder on each image and feeds only |f1 - f2| forward.
inline std::vector<LayerSpec> layer_table(Arch arch, std::size_t w) {
  const std::size_t in = arch == Arch::fcef_mini ? 6 : 3;
  return {
      {"enc1.conv1", in, w, 3},
      {"enc1.conv2", w, w, 3},
      {"enc2.conv1", w, 2 * w, 3},
      {"enc2.conv2", 2 * w, 2 * w, 3},
      {"bottleneck.conv1", 2 * w, 4 * w, 3},
      {"bottleneck.conv2", 4 * w, 4 * w, 3},
      {"dec2.conv", 4 * w + 2 * w, 2 * w, 3},
      {"dec1.conv", 2 * w + w, w, 3},
      {"head.conv", w, 1, 1},
  };
}

inline constexpr std::size_t kMinWidth = 4;

/// Named parameter tensors of one network. Copies are deep.
template <typename T>
struct ModelParams {
  Arch arch = Arch::fcef_mini;
  std::size_t width = 8;
  std::map<std::string, Tensor<T>> tensors;

  ModelParams() = default;
  ModelParams(Arch a, std::size_t w) : arch(a), width(w) {}
  ModelParams(const ModelParams& other) : arch(other.arch), width(other.width) {
    for (const auto& [name, t] : other.tensors) tensors.emplace(name, t.clone());
  }
  ModelParams& operator=(const ModelParams& other) {
    if (this != &other) {
      ModelParams copy(other);
      *this = std::move(copy);
    }
    return *this;
  }
  ModelParams(ModelParams&&) noexcept = default;
  ModelParams& operator=(ModelParams&&) noexcept = default;

  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw Error("model has no parameter '" + name + "'");
    return it->second;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors) n += t.size();
    return n;
  }

  void set_requires_grad(bool flag) {
    for (auto& [name, t] : tensors) t.set_requires_grad(flag);
  }

  void zero_grad() {
    for (auto& [name, t] : tensors) t.zero_grad();
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out(arch, width);
    for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.template cast<U>());
    return out;
  }
};

/// Bitwise comparison of architecture, names, shapes and values.
template <typename T>
bool bit_equal(const ModelParams<T>& a, const ModelParams<T>& b) {
  if (a.arch != b.arch || a.width != b.width || a.tensors.size() != b.tensors.size()) return false;
  for (auto ia = a.tensors.begin(), ib = b.tensors.begin(); ia != a.tensors.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.shape() != ib->second.shape()) return false;
    const auto da = ia->second.data();
    const auto db = ib->second.data();
    if (!std::equal(da.begin(), da.end(), db.begin(), [](T x, T y) {
          return std::memcmp(&x, &y, sizeof(T)) == 0;
        })) {
      return false;
    }
  }
  return true;
}

/// Closed-form parameter count from the layer table.
inline std::size_t expected_parameter_count(Arch arch, std::size_t width) {
  std::size_t n = 0;
  for (const auto& l : layer_table(arch, width)) {
    n += l.out_channels * l.in_channels * l.kernel * l.kernel + l.out_channels;
  }
  return n;
}

/// He-uniform weights (bound sqrt(6 / fan_in)), zero biases. Each layer draws
/// from its own stream derived from `seed`, so float and double builds of the
/// same seed agree up to rounding.
template <typename T = float>
ModelParams<T> build_model(Arch arch, std::size_t width, std::uint64_t seed) {
  if (width < kMinWidth) {
    throw ConfigError("model width " + std::to_string(width) + " is below the minimum of " +
                      std::to_string(kMinWidth));
  }
  ModelParams<T> params(arch, width);
  const auto layers = layer_table(arch, width);
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& l = layers[li];
    const std::size_t fan_in = l.in_channels * l.kernel * l.kernel;
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Rng rng(derive_seed(seed, "init", li));
    std::vector<T> w(l.out_channels * fan_in);
    for (auto& x : w) x = static_cast<T>(rng.uniform(-bound, bound));
    params.tensors.emplace(l.name + ".weight",
                           Tensor<T>({l.out_channels, l.in_channels, l.kernel, l.kernel},
                                     std::move(w)));
    params.tensors.emplace(l.name + ".bias", Tensor<T>::zeros({l.out_channels}));
  }
  return params;
}

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // [1,1,H,W]
  Tensor<T> prob;    // sigmoid(logits)
  // Skip features handed to the decoder (difference features for the
  // siamese network), recorded only when requested.
  std::vector<std::pair<std::string, Tensor<T>>> features;
};

namespace detail {

template <typename T>
Tensor<T> conv_layer(const ModelParams<T>& p, const std::string& name, const Tensor<T>& x) {
  const auto& w = p.at(name + ".weight");
  return conv2d(x, w, p.at(name + ".bias"), 1, w.dim(2) / 2);
}

template <typename T>
Tensor<T> conv_relu(const ModelParams<T>& p, const std::string& name, const Tensor<T>& x) {
  return relu(conv_layer(p, name, x));
}

template <typename T>
Tensor<T> as_batch(const Tensor<T>& x, const char* which) {
  if (x.ndim() == 3) return x.reshape({1, x.dim(0), x.dim(1), x.dim(2)});
  if (x.ndim() == 4 && x.dim(0) == 1) return x;
  throw ShapeError(std::string("forward: ") + which + " must be [3,H,W], got " +
                   shape_str(x.shape()));
}

}  // namespace detail

template <typename T>
ForwardResult<T> forward(const ModelParams<T>& model, const Tensor<T>& image_a,
                         const Tensor<T>& image_b, bool keep_features = false) {
  const Tensor<T> x1 = detail::as_batch(image_a, "image_a");
  const Tensor<T> x2 = detail::as_batch(image_b, "image_b");
  if (x1.shape() != x2.shape()) {
    throw ShapeError("forward: image shapes " + shape_str(x1.shape()) + " and " +
                     shape_str(x2.shape()) + " differ");
  }
  if (x1.dim(1) != 3) throw ShapeError("forward: images must have 3 channels");
  const std::size_t H = x1.dim(2), W = x1.dim(3);
  if (H == 0 || W == 0 || H % 4 != 0 || W % 4 != 0) {
    throw ShapeError("forward: spatial size " + std::to_string(H) + "x" + std::to_string(W) +
                     " must be a positive multiple of 4");
  }

  auto encode = [&](const Tensor<T>& x) {
    Tensor<T> s1 = detail::conv_relu(model, "enc1.conv2", detail::conv_relu(model, "enc1.conv1", x));
    Tensor<T> s2 = detail::conv_relu(
        model, "enc2.conv2", detail::conv_relu(model, "enc2.conv1", maxpool2x2(s1)));
    return std::pair{s1, s2};
  };

  Tensor<T> skip1, skip2;
  if (model.arch == Arch::fcef_mini) {
    std::tie(skip1, skip2) = encode(concat_channels(x1, x2));
  } else {
    auto [a1, a2] = encode(x1);
    auto [b1, b2] = encode(x2);
    skip1 = abs_diff(a1, b1);
    skip2 = abs_diff(a2, b2);
  }

  Tensor<T> bottom = detail::conv_relu(
      model, "bottleneck.conv2", detail::conv_relu(model, "bottleneck.conv1", maxpool2x2(skip2)));
  Tensor<T> d2 = detail::conv_relu(model, "dec2.conv",
                                   concat_channels(upsample2x_nearest(bottom), skip2));
  Tensor<T> d1 =
      detail::conv_relu(model, "dec1.conv", concat_channels(upsample2x_nearest(d2), skip1));

  ForwardResult<T> out;
  out.logits = detail::conv_layer(model, "head.conv", d1);
  out.prob = sigmoid(out.logits);
  if (keep_features) {
    out.features = {{"skip1", skip1}, {"skip2", skip2}};
  }
  return out;
}

/// Image stored as a float [3,H,W] buffer.
inline Tensor<float> image_tensor(const std::vector<float>& chw, std::size_t h, std::size_t w) {
  return Tensor<float>({3, h, w}, chw);
}

/// Inference without graph recording.
template <typename T>
ChangeMap change_map(const ModelParams<T>& model, const Tensor<T>& x1, const Tensor<T>& x2) {
  NoGradGuard guard;
  const auto out = forward(model, x1, x2);
  ChangeMap cm;
  cm.height = out.prob.dim(2);
  cm.width = out.prob.dim(3);
  cm.values.assign(out.prob.data().begin(), out.prob.data().end());
  return cm;
}

}  // namespace mtkd
