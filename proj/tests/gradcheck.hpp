#pragma once

// Central-difference gradient checks shared by the unit and acceptance tests.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "glab/diffusion.hpp"
#include "glab/guidance.hpp"
#include "glab/segmentation.hpp"
#include "glab/tensor.hpp"

namespace glab::testing {

using Fn = std::function<Tensor(const std::vector<Tensor>&)>;

/// ||analytic - numeric|| / max(||analytic||, ||numeric||) for the scalar
/// objective sum(f(inputs) * probe), over every input element.
inline double gradient_error(const Fn& f, std::vector<Tensor> inputs, std::mt19937_64& rng,
                             double h = 1e-5) {
  for (auto& in : inputs) in = Tensor(in.shape(), {in.data().begin(), in.data().end()}, true);
  const auto out = f(inputs);
  const auto probe = Tensor::randn(out.shape(), rng);
  const auto objective = [&](const std::vector<Tensor>& xs) {
    NoGradGuard no_grad;
    return sum(f(xs) * probe).item();
  };
  const auto analytic = grad(sum(out * probe), inputs);
  double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<Tensor> xs;
    for (const auto& in : inputs) xs.emplace_back(in.shape(), std::vector<double>(in.data().begin(), in.data().end()));
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      auto& v = xs[k].mutable_data();
      const double orig = v[i];
      v[i] = orig + h;
      const double up = objective(xs);
      v[i] = orig - h;
      const double down = objective(xs);
      v[i] = orig;
      const double num = (up - down) / (2.0 * h);
      const double an = analytic[k][i];
      diff2 += (an - num) * (an - num);
      a2 += an * an;
      n2 += num * num;
    }
  }
  const double denom = std::max({std::sqrt(a2), std::sqrt(n2), 1e-12});
  return std::sqrt(diff2) / denom;
}

struct OpCase {
  std::string name;
  /// Draws a random instance: the function and its inputs.
  std::function<std::pair<Fn, std::vector<Tensor>>(std::mt19937_64&)> make;
};

inline Shape random_shape(std::mt19937_64& rng, std::size_t min_rank = 1, std::size_t max_rank = 4) {
  std::uniform_int_distribution<std::size_t> rank(min_rank, max_rank);
  std::uniform_int_distribution<std::size_t> extent(1, 4);
  Shape s(rank(rng));
  for (auto& d : s) d = extent(rng);
  return s;
}

/// Uniform values in [lo, hi] kept at least `gap` away from `kink`.
inline Tensor uniform(const Shape& s, std::mt19937_64& rng, double lo, double hi,
                      double kink = std::nan(""), double gap = 1e-3) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) {
    do {
      x = u(rng);
    } while (!std::isnan(kink) && std::abs(x - kink) < gap);
  }
  return Tensor(s, std::move(v));
}

/// Trailing-suffix shape of `s` with some extents set to 1, for broadcasting.
inline Shape broadcast_partner(const Shape& s, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> drop(0, s.size());
  Shape out(s.begin() + static_cast<long>(drop(rng)), s.end());
  std::bernoulli_distribution one(0.3);
  for (auto& d : out) {
    if (one(rng)) d = 1;
  }
  return out;
}

inline std::vector<OpCase> differentiable_ops() {
  using V = std::vector<Tensor>;
  using R = std::pair<Fn, V>;
  auto binary = [](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op,
                   double lo, double hi) {
    return OpCase{name, [op, lo, hi](std::mt19937_64& rng) -> R {
                    const auto s = random_shape(rng);
                    std::bernoulli_distribution bc(0.5);
                    const auto t = bc(rng) ? broadcast_partner(s, rng) : s;
                    const bool swap = bc(rng);
                    auto a = uniform(swap ? t : s, rng, lo, hi);
                    auto b = uniform(swap ? s : t, rng, lo, hi);
                    return {[op](const V& x) { return op(x[0], x[1]); }, {a, b}};
                  }};
  };
  auto unary = [](std::string name, std::function<Tensor(const Tensor&)> op, double lo, double hi,
                  double kink = std::nan("")) {
    return OpCase{name, [op, lo, hi, kink](std::mt19937_64& rng) -> R {
                    return {[op](const V& x) { return op(x[0]); },
                            {uniform(random_shape(rng), rng, lo, hi, kink)}};
                  }};
  };
  std::vector<OpCase> ops{
      binary("add", [](auto& a, auto& b) { return add(a, b); }, -2, 2),
      binary("sub", [](auto& a, auto& b) { return sub(a, b); }, -2, 2),
      binary("mul", [](auto& a, auto& b) { return mul(a, b); }, -2, 2),
      binary("div", [](auto& a, auto& b) { return div(a, b); }, 0.5, 2),
      unary("neg", [](auto& a) { return neg(a); }, -2, 2),
      unary("exp", [](auto& a) { return exp(a); }, -2, 2),
      unary("log", [](auto& a) { return log(a); }, 0.2, 3),
      unary("sqrt", [](auto& a) { return sqrt(a); }, 0.2, 3),
      unary("clamp_min", [](auto& a) { return clamp_min(a, 0.1); }, -1, 1, 0.1),
      OpCase{"clamp",
             [](std::mt19937_64& rng) -> R {
               auto a = uniform(random_shape(rng), rng, -2, 2, -1.0);
               auto& v = a.mutable_data();
               for (auto& x : v) {
                 if (std::abs(x - 1.0) < 1e-3) x += 0.01;
               }
               return {[](const V& x) { return clamp(x[0], -1.0, 1.0); }, {a}};
             }},
      unary("square", [](auto& a) { return square(a); }, -2, 2),
      unary("scale", [](auto& a) { return scale(a, -1.7); }, -2, 2),
      unary("add_scalar", [](auto& a) { return add_scalar(a, 0.3); }, -2, 2),
      unary("relu", [](auto& a) { return relu(a); }, -2, 2, 0.0),
      unary("silu", [](auto& a) { return silu(a); }, -3, 3),
      OpCase{"matmul",
             [](std::mt19937_64& rng) -> R {
               std::uniform_int_distribution<std::size_t> d(1, 5);
               const auto m = d(rng), k = d(rng), n = d(rng);
               return {[](const V& x) { return matmul(x[0], x[1]); },
                       {uniform({m, k}, rng, -1, 1), uniform({k, n}, rng, -1, 1)}};
             }},
      OpCase{"conv2d",
             [](std::mt19937_64& rng) -> R {
               std::uniform_int_distribution<std::size_t> c(1, 3), hw(3, 6), kk(0, 1), dil(1, 2),
                   pad(0, 2), batch(0, 2);
               const auto cin = c(rng), cout = c(rng), kh = 2 * kk(rng) + 1, kw = 2 * kk(rng) + 1;
               const auto d = dil(rng), p = pad(rng), b = batch(rng);
               const auto h = std::max(hw(rng), d * (kh - 1) + 1);
               const auto w = std::max(hw(rng), d * (kw - 1) + 1);
               Shape in = b ? Shape{b, cin, h, w} : Shape{cin, h, w};
               return {[p, d](const V& x) { return conv2d(x[0], x[1], p, d); },
                       {uniform(in, rng, -1, 1), uniform({cout, cin, kh, kw}, rng, -1, 1)}};
             }},
      OpCase{"softmax",
             [](std::mt19937_64& rng) -> R {
               const auto s = random_shape(rng);
               const auto axis = std::uniform_int_distribution<std::size_t>(0, s.size() - 1)(rng);
               return {[axis](const V& x) { return softmax(x[0], axis); }, {uniform(s, rng, -2, 2)}};
             }},
      OpCase{"log_softmax",
             [](std::mt19937_64& rng) -> R {
               const auto s = random_shape(rng);
               const auto axis = std::uniform_int_distribution<std::size_t>(0, s.size() - 1)(rng);
               return {[axis](const V& x) { return log_softmax(x[0], axis); },
                       {uniform(s, rng, -2, 2)}};
             }},
      unary("sum", [](auto& a) { return sum(a); }, -2, 2),
      unary("mean", [](auto& a) { return mean(a); }, -2, 2),
      OpCase{"sum_axis",
             [](std::mt19937_64& rng) -> R {
               const auto s = random_shape(rng);
               const auto axis = std::uniform_int_distribution<std::size_t>(0, s.size() - 1)(rng);
               const bool keep = std::bernoulli_distribution(0.5)(rng);
               return {[axis, keep](const V& x) { return sum(x[0], axis, keep); },
                       {uniform(s, rng, -2, 2)}};
             }},
      OpCase{"mean_axis",
             [](std::mt19937_64& rng) -> R {
               const auto s = random_shape(rng);
               const auto axis = std::uniform_int_distribution<std::size_t>(0, s.size() - 1)(rng);
               const bool keep = std::bernoulli_distribution(0.5)(rng);
               return {[axis, keep](const V& x) { return mean(x[0], axis, keep); },
                       {uniform(s, rng, -2, 2)}};
             }},
      OpCase{"masked_mean",
             [](std::mt19937_64& rng) -> R {
               const auto s = random_shape(rng);
               std::vector<double> m(shape_numel(s), 0.0);
               std::bernoulli_distribution on(0.5);
               for (auto& x : m) x = on(rng) ? 1.0 : 0.0;
               m[std::uniform_int_distribution<std::size_t>(0, m.size() - 1)(rng)] = 1.0;
               const Tensor mask(s, std::move(m));
               return {[mask](const V& x) { return masked_mean(x[0], mask); },
                       {uniform(s, rng, -2, 2)}};
             }},
      OpCase{"reshape",
             [](std::mt19937_64& rng) -> R {
               const auto s = random_shape(rng);
               const auto n = shape_numel(s);
               return {[n](const V& x) { return reshape(x[0], {n}); }, {uniform(s, rng, -2, 2)}};
             }},
      OpCase{"dropout",
             [](std::mt19937_64& rng) -> R {
               const auto seed = rng();
               return {[seed](const V& x) {
                         std::mt19937_64 local(seed);
                         return dropout(x[0], 0.3, local);
                       },
                       {uniform(random_shape(rng), rng, -2, 2)}};
             }},
  };
  return ops;
}

/// The guidance score as a function of x_t with the noise estimate held
/// fixed: loss(scorer(clamp(estimate_clean(x_t, eps)))). MC-dropout masks are
/// redrawn from the same seed on every call.
inline Fn guidance_objective(const SegmentationModel& scorer, const Tensor& eps, std::size_t t,
                             const NoiseSchedule& s, LossKind loss, const Tensor& region,
                             const LabelMap& gt, std::size_t mc_n = 4) {
  return [&scorer, eps, t, &s, loss, region, gt, mc_n](const std::vector<Tensor>& x) {
    const auto x0 = clamp(estimate_clean(x[0], eps, t, s), -1.0, 1.0);
    switch (loss) {
      case LossKind::entropy:
        return loss_entropy(predict_probs(scorer, x0, DropoutMode::off), region);
      case LossKind::ce:
        return loss_ce(predict_probs(scorer, x0, DropoutMode::off), gt, region);
      case LossKind::mcd: {
        std::mt19937_64 rng(77);
        std::vector<Tensor> passes;
        for (std::size_t i = 0; i < mc_n; ++i) {
          passes.push_back(predict_probs(scorer, x0, DropoutMode::on, &rng));
        }
        return loss_mcd(passes, region);
      }
      case LossKind::none:
        break;
    }
    throw std::invalid_argument("guidance_objective: no loss");
  };
}

}  // namespace glab::testing
