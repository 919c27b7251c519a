#pragma once

// Finite-difference checks of every differentiable operation and of the full
// networks with their training losses, in double precision.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mtkd/grad_check.hpp"
#include "mtkd/model.hpp"
#include "mtkd/ops.hpp"
#include "mtkd/rng.hpp"

namespace mtkd {

struct GradCase {
  std::string name;
  std::uint64_t seed = 0;
  GradCheckResult result;
};

inline constexpr double kGradTolerance = 1e-4;

namespace detail {

using GradFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

// Values at least `margin` away from zero, either sign.
inline Tensor<double> away_from_zero(Rng& rng, Shape shape, double margin = 0.1) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(margin, 1.0);
  return Tensor<double>(std::move(shape), std::move(v));
}

// Reduces a tensor-valued op to a scalar through a fixed random weighting.
inline GradFn projected(std::function<Tensor<double>(const std::vector<Tensor<double>>&)> op,
                        Tensor<double> weights) {
  return [op, weights](const std::vector<Tensor<double>>& in) { return sum(mul(op(in), weights)); };
}

inline Tensor<double> weights_like(Rng& rng, const Shape& shape) { return random_tensor(rng, shape); }

inline ModelParams<double> bind_params(const ModelParams<double>& layout,
                                       const std::vector<Tensor<double>>& values, std::size_t offset) {
  ModelParams<double> p(layout.arch, layout.width);
  std::size_t k = offset;
  for (const auto& [name, t] : layout.tensors) p.tensors.emplace(name, values[k++]);
  return p;
}

}  // namespace detail

/// Every op case for one seed.
inline std::vector<GradCase> op_grad_cases(std::uint64_t seed, double eps = 1e-5) {
  using namespace detail;
  Rng rng(derive_seed(seed, "grad-ops"));
  std::vector<GradCase> out;
  auto check = [&](const std::string& name, const GradFn& fn, std::vector<Tensor<double>> inputs) {
    out.push_back({name, seed, grad_check(fn, std::move(inputs), eps)});
  };
  const Shape s4 = {2, 3, 4, 4};

  check("add", projected([](const auto& in) { return add(in[0], in[1]); }, weights_like(rng, s4)),
        {random_tensor(rng, s4), random_tensor(rng, s4)});
  check("sub", projected([](const auto& in) { return sub(in[0], in[1]); }, weights_like(rng, s4)),
        {random_tensor(rng, s4), random_tensor(rng, s4)});
  check("mul", projected([](const auto& in) { return mul(in[0], in[1]); }, weights_like(rng, s4)),
        {random_tensor(rng, s4), random_tensor(rng, s4)});
  check("scale", projected([](const auto& in) { return scale(in[0], 0.7); }, weights_like(rng, s4)),
        {random_tensor(rng, s4)});
  {
    Tensor<double> a = random_tensor(rng, s4);
    Tensor<double> gap = away_from_zero(rng, s4);
    std::vector<double> bv(a.size());
    for (std::size_t i = 0; i < bv.size(); ++i) bv[i] = a[i] + gap[i];
    check("abs_diff",
          projected([](const auto& in) { return abs_diff(in[0], in[1]); }, weights_like(rng, s4)),
          {a, Tensor<double>(s4, bv)});
  }
  check("sum", [](const auto& in) { return sum(mul(in[0], in[0])); }, {random_tensor(rng, s4)});
  check("mean", [](const auto& in) { return mean(mul(in[0], in[0])); }, {random_tensor(rng, s4)});
  check("relu", projected([](const auto& in) { return relu(in[0]); }, weights_like(rng, s4)),
        {away_from_zero(rng, s4)});
  check("sigmoid", projected([](const auto& in) { return sigmoid(in[0]); }, weights_like(rng, s4)),
        {random_tensor(rng, s4, -3.0, 3.0)});

  struct ConvCase {
    std::size_t c, f, k, stride, pad, h, w;
  };
  for (const ConvCase& cc : {ConvCase{2, 3, 3, 1, 1, 5, 5}, ConvCase{3, 2, 1, 1, 0, 4, 4},
                             ConvCase{2, 2, 3, 2, 1, 5, 7}, ConvCase{1, 2, 3, 1, 0, 5, 4},
                             ConvCase{2, 1, 5, 1, 2, 4, 5}}) {
    const Shape xs = {2, cc.c, cc.h, cc.w};
    const std::size_t oh = (cc.h + 2 * cc.pad - cc.k) / cc.stride + 1;
    const std::size_t ow = (cc.w + 2 * cc.pad - cc.k) / cc.stride + 1;
    const std::string name = "conv2d k" + std::to_string(cc.k) + " s" + std::to_string(cc.stride) +
                             " p" + std::to_string(cc.pad);
    const std::size_t stride = cc.stride, pad = cc.pad;
    check(name,
          projected([stride, pad](const auto& in) { return conv2d(in[0], in[1], in[2], stride, pad); },
                    weights_like(rng, {2, cc.f, oh, ow})),
          {random_tensor(rng, xs), random_tensor(rng, {cc.f, cc.c, cc.k, cc.k}),
           random_tensor(rng, {cc.f})});
  }
  {
    // Distinct values spaced far beyond eps so no pooling window has a tie.
    std::vector<double> v(numel(s4));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i) * 0.01 - 0.5;
    rng.shuffle(v);
    check("maxpool2x2",
          projected([](const auto& in) { return maxpool2x2(in[0]); }, weights_like(rng, {2, 3, 2, 2})),
          {Tensor<double>(s4, v)});
  }
  check("upsample2x_nearest",
        projected([](const auto& in) { return upsample2x_nearest(in[0]); },
                  weights_like(rng, {2, 3, 8, 8})),
        {random_tensor(rng, s4)});
  check("concat_channels",
        projected([](const auto& in) { return concat_channels(in[0], in[1]); },
                  weights_like(rng, {2, 5, 4, 4})),
        {random_tensor(rng, s4), random_tensor(rng, {2, 2, 4, 4})});
  {
    std::vector<double> t(numel(s4));
    for (auto& x : t) x = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const Tensor<double> target(s4, t);
    check("bce_loss", [target](const auto& in) { return bce_loss(in[0], target); },
          {random_tensor(rng, s4, 0.05, 0.95)});
  }
  {
    // The second argument is a constant target.
    const Tensor<double> target = random_tensor(rng, s4);
    check("mse_loss", [target](const auto& in) { return mse_loss(in[0], target); },
          {random_tensor(rng, s4)});
  }
  return out;
}

/// Whole-network checks on 8x8 inputs: gradients of the BCE loss and of the
/// BCE plus weighted MSE distillation loss with respect to both images and a
/// strided subset of every parameter tensor.
inline std::vector<GradCase> model_grad_cases(std::uint64_t seed, double eps = 1e-5,
                                              std::size_t params_per_tensor = 24) {
  using namespace detail;
  std::vector<GradCase> out;
  for (Arch arch : {Arch::fcef_mini, Arch::fcsiam_diff_mini}) {
    Rng rng(derive_seed(seed, "grad-model", static_cast<std::uint64_t>(arch)));
    // Biases are randomised: with zero biases, dead units feed exact zeros to
    // the next relu and put the check point on a kink.
    ModelParams<double> model = build_model<double>(arch, kMinWidth, derive_seed(seed, "init"));
    for (auto& [name, p] : model.tensors) {
      if (p.ndim() == 1) p = random_tensor(rng, p.shape(), -0.1, 0.1);
    }
    ModelParams<double> teacher = build_model<double>(arch, kMinWidth, derive_seed(seed, "teacher"));
    const Tensor<double> xa = random_tensor(rng, {1, 3, 8, 8}, 0.0, 1.0);
    const Tensor<double> xb = random_tensor(rng, {1, 3, 8, 8}, 0.0, 1.0);
    std::vector<double> t(64);
    for (auto& x : t) x = rng.bernoulli(0.3) ? 1.0 : 0.0;
    const Tensor<double> target({1, 1, 8, 8}, t);
    Tensor<double> teacher_prob, teacher_logits;
    {
      NoGradGuard frozen;
      const auto r = forward(teacher, xa, xb);
      teacher_prob = r.prob;
      teacher_logits = r.logits;
    }

    std::vector<Tensor<double>> inputs = {xa.clone(), xb.clone()};
    for (const auto& [name, p] : model.tensors) inputs.push_back(p.clone());

    const std::string tag = to_string(arch);
    using Loss = std::function<Tensor<double>(const ForwardResult<double>&)>;
    const std::vector<std::pair<std::string, Loss>> losses = {
        {"bce", [target](const auto& r) { return bce_loss(r.prob, target); }},
        {"bce+kd(prob)",
         [target, teacher_prob](const auto& r) {
           return add(bce_loss(r.prob, target), scale(mse_loss(r.prob, teacher_prob), 0.5));
         }},
        {"bce+kd(logits)",
         [target, teacher_logits](const auto& r) {
           return add(bce_loss(r.prob, target), scale(mse_loss(r.logits, teacher_logits), 0.5));
         }},
    };
    for (const auto& [lname, loss] : losses) {
      auto fn = [&model, loss](const std::vector<Tensor<double>>& in) {
        return loss(forward(bind_params(model, in, 2), in[0], in[1]));
      };
      std::vector<Tensor<double>> fresh;
      for (const auto& x : inputs) fresh.push_back(x.clone());
      // Image gradients are checked in full; parameters by strided subset.
      GradCheckResult images = grad_check(
          [&](const std::vector<Tensor<double>>& in) {
            std::vector<Tensor<double>> all = in;
            all.insert(all.end(), fresh.begin() + 2, fresh.end());
            return fn(all);
          },
          {fresh[0], fresh[1]}, eps);
      out.push_back({tag + " " + lname + " wrt images", seed, images});
      std::vector<Tensor<double>> params(fresh.begin() + 2, fresh.end());
      GradCheckResult weights = grad_check(
          [&](const std::vector<Tensor<double>>& in) {
            std::vector<Tensor<double>> all = {fresh[0].detach(), fresh[1].detach()};
            all.insert(all.end(), in.begin(), in.end());
            return fn(all);
          },
          params, eps, params_per_tensor);
      out.push_back({tag + " " + lname + " wrt parameters", seed, weights});
    }
  }
  return out;
}

inline std::vector<GradCase> grad_suite(const std::vector<std::uint64_t>& seeds, double eps = 1e-5) {
  std::vector<GradCase> out;
  for (auto seed : seeds) {
    auto ops = op_grad_cases(seed, eps);
    auto models = model_grad_cases(seed, eps);
    out.insert(out.end(), ops.begin(), ops.end());
    out.insert(out.end(), models.begin(), models.end());
  }
  return out;
}

/// Case with the largest error beyond the finite-difference resolution.
inline const GradCase& worst_case(const std::vector<GradCase>& cases) {
  if (cases.empty()) throw Error("worst_case: no gradient checks");
  return *std::max_element(cases.begin(), cases.end(), [](const GradCase& a, const GradCase& b) {
    return a.result.max_resolved_error < b.result.max_resolved_error;
  });
}

inline double max_raw_error(const std::vector<GradCase>& cases) {
  double m = 0.0;
  for (const auto& c : cases) m = std::max(m, c.result.max_rel_error);
  return m;
}

}  // namespace mtkd
