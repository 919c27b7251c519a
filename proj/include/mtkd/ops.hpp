#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mtkd/error.hpp"
#include "mtkd/tensor.hpp"

namespace mtkd {

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape " + shape_str(a.shape()) +
                     " does not match " + shape_str(b.shape()));
  }
}

template <typename T>
void require_4d(const Tensor<T>& t, const char* op, const char* name) {
  if (t.ndim() != 4) {
    throw ShapeError(std::string(op) + ": " + name + " must be [N,C,H,W], got " +
                     shape_str(t.shape()));
  }
}

/// Fingerprint of the branch taken at every non-smooth point (relu sign,
/// abs_diff sign, pooling argmax, loss clamping) while a trace is installed.
/// Two evaluations with equal fingerprints lie on the same smooth piece.
struct BranchTrace {
  std::uint64_t hash = 1469598103934665603ULL;
  void mix(std::uint64_t v) {
    hash ^= v + 0x9e3779b97f4a7c15ULL;
    hash *= 1099511628211ULL;
  }
};

inline thread_local BranchTrace* branch_trace = nullptr;

class BranchTraceScope {
 public:
  explicit BranchTraceScope(BranchTrace& t) : prev_(branch_trace) { branch_trace = &t; }
  ~BranchTraceScope() { branch_trace = prev_; }
  BranchTraceScope(const BranchTraceScope&) = delete;
  BranchTraceScope& operator=(const BranchTraceScope&) = delete;

 private:
  BranchTrace* prev_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic and reductions

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto na = a.node(), nb = b.node();
  return detail::make_result<T>("add", a.shape(), std::move(out), {a, b},
                                [na, nb](const auto& o) {
                                  for (auto* p : {na.get(), nb.get()}) {
                                    if (!p->requires_grad) continue;
                                    for (std::size_t i = 0; i < o.grad.size(); ++i)
                                      p->grad[i] += o.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto na = a.node(), nb = b.node();
  return detail::make_result<T>("sub", a.shape(), std::move(out), {a, b},
                                [na, nb](const auto& o) {
                                  if (na->requires_grad)
                                    for (std::size_t i = 0; i < o.grad.size(); ++i)
                                      na->grad[i] += o.grad[i];
                                  if (nb->requires_grad)
                                    for (std::size_t i = 0; i < o.grad.size(); ++i)
                                      nb->grad[i] -= o.grad[i];
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto na = a.node(), nb = b.node();
  return detail::make_result<T>("mul", a.shape(), std::move(out), {a, b},
                                [na, nb](const auto& o) {
                                  if (na->requires_grad)
                                    for (std::size_t i = 0; i < o.grad.size(); ++i)
                                      na->grad[i] += o.grad[i] * nb->data[i];
                                  if (nb->requires_grad)
                                    for (std::size_t i = 0; i < o.grad.size(); ++i)
                                      nb->grad[i] += o.grad[i] * na->data[i];
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  auto na = a.node();
  return detail::make_result<T>("scale", a.shape(), std::move(out), {a},
                                [na, factor](const auto& o) {
                                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                                    na->grad[i] += o.grad[i] * factor;
                                });
}

/// |a - b| elementwise; the subgradient at a == b is taken as 0.
template <typename T>
Tensor<T> abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "abs_diff");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(a[i] - b[i]);
  if (auto* t = detail::branch_trace) {
    for (std::size_t i = 0; i < out.size(); ++i) t->mix(a[i] > b[i] ? 2 : a[i] < b[i] ? 0 : 1);
  }
  auto na = a.node(), nb = b.node();
  return detail::make_result<T>(
      "abs_diff", a.shape(), std::move(out), {a, b}, [na, nb](const auto& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
          const T d = na->data[i] - nb->data[i];
          const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
          if (na->requires_grad) na->grad[i] += s * o.grad[i];
          if (nb->requires_grad) nb->grad[i] -= s * o.grad[i];
        }
      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (const T v : a.data()) total += v;
  auto na = a.node();
  return detail::make_result<T>("sum", {1}, {total}, {a}, [na](const auto& o) {
    for (auto& g : na->grad) g += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { relu, sigmoid };

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  if (auto* t = detail::branch_trace) {
    for (std::size_t i = 0; i < out.size(); ++i) t->mix(x[i] > T(0) ? 2 : x[i] < T(0) ? 0 : 1);
  }
  auto nx = x.node();
  return detail::make_result<T>("relu", x.shape(), std::move(out), {x}, [nx](const auto& o) {
    for (std::size_t i = 0; i < o.grad.size(); ++i)
      if (nx->data[i] > T(0)) nx->grad[i] += o.grad[i];
  });
}

template <typename T>
T sigmoid_scalar(T x) {
  // Branches keep exp() from overflowing for large |x|.
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(x[i]);
  auto nx = x.node();
  return detail::make_result<T>("sigmoid", x.shape(), std::move(out), {x},
                                [nx](const auto& o) {
                                  for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                    const T s = o.data[i];
                                    nx->grad[i] += o.grad[i] * s * (T(1) - s);
                                  }
                                });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  return kind == Activation::relu ? relu(x) : sigmoid(x);
}

// ---------------------------------------------------------------------------
// Convolution and resampling

/// 2-D cross-correlation. input [N,C,H,W], weight [F,C,kh,kw], bias [F].
/// Lowered to im2col + GEMM per batch item.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0) {
  detail::require_4d(input, "conv2d", "input");
  detail::require_4d(weight, "conv2d", "weight");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t F = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != C) {
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                     " input channels, input has " + std::to_string(C));
  }
  if (bias.ndim() != 1 || bias.dim(0) != F) {
    throw ShapeError("conv2d: bias must be [" + std::to_string(F) + "], got " +
                     shape_str(bias.shape()));
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " must have odd sides");
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t Hp = H + 2 * padding, Wp = W + 2 * padding;
  if (Hp < kh || Wp < kw || (Hp - kh) % stride != 0 || (Wp - kw) % stride != 0) {
    throw ShapeError("conv2d: output size for input " + shape_str(input.shape()) +
                     ", kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     ", stride " + std::to_string(stride) + ", padding " +
                     std::to_string(padding) + " is not integral");
  }
  const std::size_t Ho = (Hp - kh) / stride + 1, Wo = (Wp - kw) / stride + 1;
  const std::size_t K = C * kh * kw, P = Ho * Wo;

  // Output columns ox whose input column ox*stride + kx - padding lies in [0, W).
  std::vector<std::pair<std::size_t, std::size_t>> valid_x(kw), valid_y(kh);
  auto valid_range = [stride, padding](std::size_t k, std::size_t extent, std::size_t out) {
    const std::size_t lo = k >= padding ? 0 : (padding - k + stride - 1) / stride;
    const std::size_t hi =
        extent + padding > k ? std::min(out, (extent + padding - k + stride - 1) / stride) : 0;
    return std::pair{std::min(lo, hi), hi};
  };
  for (std::size_t kx = 0; kx < kw; ++kx) valid_x[kx] = valid_range(kx, W, Wo);
  for (std::size_t ky = 0; ky < kh; ++ky) valid_y[ky] = valid_range(ky, H, Ho);

  using Mat = detail::RowMatrix<T>;
  auto cols = std::make_shared<std::vector<Mat>>(N, Mat::Zero(K, P));
  const T* in = input.raw();
  for (std::size_t n = 0; n < N; ++n) {
    T* col = (*cols)[n].data();
    for (std::size_t c = 0; c < C; ++c) {
      const T* plane = in + (n * C + c) * H * W;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          T* row = col + ((c * kh + ky) * kw + kx) * P;
          const auto [x0, x1] = valid_x[kx];
          for (std::size_t oy = valid_y[ky].first; oy < valid_y[ky].second; ++oy) {
            const T* src = plane + (oy * stride + ky - padding) * W;
            T* dst = row + oy * Wo;
            for (std::size_t ox = x0; ox < x1; ++ox) dst[ox] = src[ox * stride + kx - padding];
          }
        }
      }
    }
  }

  std::vector<T> out(N * F * P);
  const Mat wmat = Eigen::Map<const Mat>(weight.raw(), F, K);
  const T* bias_data = bias.raw();
  Mat prod(F, P);
  for (std::size_t n = 0; n < N; ++n) {
    prod.noalias() = wmat * (*cols)[n];
    T* o = out.data() + n * F * P;
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t p = 0; p < P; ++p) o[f * P + p] = prod(f, p) + bias_data[f];
    }
  }

  auto ni = input.node(), nw = weight.node(), nb = bias.node();
  return detail::make_result<T>(
      "conv2d", {N, F, Ho, Wo}, std::move(out), {input, weight, bias},
      [=](const auto& o) {
        const Mat wt = Eigen::Map<const Mat>(nw->data.data(), F, K).transpose();
        Mat dcol(K, P), dw(F, K);
        for (std::size_t n = 0; n < N; ++n) {
          const Mat g = Eigen::Map<const Mat>(o.grad.data() + n * F * P, F, P);
          if (nw->requires_grad) {
            dw.noalias() = g * (*cols)[n].transpose();
            for (std::size_t i = 0; i < F * K; ++i) nw->grad[i] += dw.data()[i];
          }
          if (nb->requires_grad) {
            for (std::size_t f = 0; f < F; ++f) {
              T s = 0;
              for (std::size_t p = 0; p < P; ++p) s += g(f, p);
              nb->grad[f] += s;
            }
          }
          if (ni->requires_grad) {
            dcol.noalias() = wt * g;
            T* dplane_base = ni->grad.data() + n * C * H * W;
            for (std::size_t c = 0; c < C; ++c) {
              T* dplane = dplane_base + c * H * W;
              for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const T* row = dcol.data() + ((c * kh + ky) * kw + kx) * P;
                  const auto [x0, x1] = valid_x[kx];
                  for (std::size_t oy = valid_y[ky].first; oy < valid_y[ky].second; ++oy) {
                    T* dst = dplane + (oy * stride + ky - padding) * W;
                    const T* src = row + oy * Wo;
                    for (std::size_t ox = x0; ox < x1; ++ox) dst[ox * stride + kx - padding] += src[ox];
                  }
                }
              }
            }
          }
        }
      });
}

/// 2x2 max pooling with stride 2. Ties route the gradient to the first
/// maximal element in row-major window order.
template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& input) {
  detail::require_4d(input, "maxpool2x2", "input");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw ShapeError("maxpool2x2: spatial size " + std::to_string(H) + "x" +
                     std::to_string(W) + " must be even");
  }
  const std::size_t Ho = H / 2, Wo = W / 2;
  std::vector<T> out(N * C * Ho * Wo);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const T* in = input.raw();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = nc * H * W + (2 * oy) * W + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = nc * H * W + (2 * oy + dy) * W + 2 * ox + dx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (nc * Ho + oy) * Wo + ox;
        out[o] = in[best];
        (*argmax)[o] = best;
      }
    }
  }
  if (auto* t = detail::branch_trace) {
    for (const auto a : *argmax) t->mix(a);
  }
  auto ni = input.node();
  return detail::make_result<T>("maxpool2x2", {N, C, Ho, Wo}, std::move(out), {input},
                                [ni, argmax](const auto& o) {
                                  for (std::size_t i = 0; i < o.grad.size(); ++i)
                                    ni->grad[(*argmax)[i]] += o.grad[i];
                                });
}

/// Nearest-neighbour 2x upsampling; each pixel becomes a 2x2 block.
template <typename T>
Tensor<T> upsample2x_nearest(const Tensor<T>& input) {
  detail::require_4d(input, "upsample2x_nearest", "input");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Ho = 2 * H, Wo = 2 * W;
  std::vector<T> out(N * C * Ho * Wo);
  const T* in = input.raw();
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t x = 0; x < Wo; ++x)
        out[(nc * Ho + y) * Wo + x] = in[(nc * H + y / 2) * W + x / 2];
  auto ni = input.node();
  return detail::make_result<T>("upsample2x_nearest", {N, C, Ho, Wo}, std::move(out), {input},
                                [=](const auto& o) {
                                  for (std::size_t nc = 0; nc < N * C; ++nc)
                                    for (std::size_t y = 0; y < Ho; ++y)
                                      for (std::size_t x = 0; x < Wo; ++x)
                                        ni->grad[(nc * H + y / 2) * W + x / 2] +=
                                            o.grad[(nc * Ho + y) * Wo + x];
                                });
}

/// Channel-axis concatenation of [N,Ca,H,W] and [N,Cb,H,W].
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_4d(a, "concat_channels", "a");
  detail::require_4d(b, "concat_channels", "b");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ outside the channel axis");
  }
  const std::size_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  const std::size_t plane = a.dim(2) * a.dim(3);
  const std::size_t sa = Ca * plane, sb = Cb * plane;
  std::vector<T> out(N * (sa + sb));
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(a.raw() + n * sa, sa, out.begin() + n * (sa + sb));
    std::copy_n(b.raw() + n * sb, sb, out.begin() + n * (sa + sb) + sa);
  }
  auto na = a.node(), nb = b.node();
  return detail::make_result<T>(
      "concat_channels", {N, Ca + Cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
      [=](const auto& o) {
        for (std::size_t n = 0; n < N; ++n) {
          const T* g = o.grad.data() + n * (sa + sb);
          if (na->requires_grad)
            for (std::size_t i = 0; i < sa; ++i) na->grad[n * sa + i] += g[i];
          if (nb->requires_grad)
            for (std::size_t i = 0; i < sb; ++i) nb->grad[n * sb + i] += g[sa + i];
        }
      });
}

// ---------------------------------------------------------------------------
// Losses

inline constexpr double kProbabilityClamp = 1e-7;

/// Mean binary cross-entropy over all N elements, accumulated in extended
/// precision. Predictions are clamped to
/// [1e-7, 1 - 1e-7] before the logarithm; targets must be exactly 0 or 1.
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& pred_prob, const Tensor<T>& target) {
  detail::require_same_shape(pred_prob, target, "bce_loss");
  if (pred_prob.size() == 0) throw ShapeError("bce_loss: empty input");
  const T lo = static_cast<T>(kProbabilityClamp);
  const T hi = T(1) - lo;
  long double total = 0.0L;
  for (std::size_t i = 0; i < pred_prob.size(); ++i) {
    const T y = target[i];
    if (y != T(0) && y != T(1)) {
      throw Error("bce_loss: target value " + std::to_string(static_cast<double>(y)) +
                  " at index " + std::to_string(i) + " is not 0 or 1");
    }
    const T p = std::clamp(pred_prob[i], lo, hi);
    if (auto* t = detail::branch_trace) t->mix(p != pred_prob[i]);
    total += y == T(1) ? -std::log(static_cast<long double>(p))
                       : -std::log1p(-static_cast<long double>(p));
  }
  const auto n = static_cast<long double>(pred_prob.size());
  auto np = pred_prob.node(), nt = target.node();
  return detail::make_result<T>(
      "bce_loss", {1}, {static_cast<T>(total / n)}, {pred_prob},
      [np, nt, lo, hi, n](const auto& o) {
        const T scale = o.grad[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < np->data.size(); ++i) {
          const T p = np->data[i];
          if (p < lo || p > hi) continue;  // clamped: flat
          const T y = nt->data[i];
          np->grad[i] += scale * (y == T(1) ? -T(1) / p : T(1) / (T(1) - p));
        }
      });
}

/// Mean squared error over all N elements. Gradient flows into `a` only;
/// `b` (the teacher side) is treated as a constant.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mse_loss");
  if (a.size() == 0) throw ShapeError("mse_loss: empty input");
  long double total = 0.0L;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const long double d = static_cast<long double>(a[i]) - static_cast<long double>(b[i]);
    total += d * d;
  }
  const auto n = static_cast<long double>(a.size());
  auto na = a.node();
  auto teacher = std::make_shared<std::vector<T>>(b.data().begin(), b.data().end());
  return detail::make_result<T>(
      "mse_loss", {1}, {static_cast<T>(total / n)}, {a}, [na, teacher, n](const auto& o) {
        const T scale = T(2) * o.grad[0] / static_cast<T>(n);
        for (std::size_t i = 0; i < na->data.size(); ++i)
          na->grad[i] += scale * (na->data[i] - (*teacher)[i]);
      });
}

}  // namespace mtkd
