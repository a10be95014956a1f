#include "glab/diffusion.hpp"

#include <cmath>
#include <random>
#include <string>

#include "glab/optim.hpp"
#include "glab/rng.hpp"

namespace glab {

namespace {

void check_step(std::size_t t, const NoiseSchedule& s) {
  if (t >= s.steps) {
    throw std::out_of_range("diffusion: step " + std::to_string(t) + " outside [0," +
                            std::to_string(s.steps) + ")");
  }
}

}  // namespace

NoiseSchedule build_schedule(std::size_t steps, double beta_start, double beta_end) {
  if (steps < 2) throw std::invalid_argument("build_schedule: need at least 2 steps");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("build_schedule: need 0 < beta_start < beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  double running = 1.0;
  for (std::size_t t = 0; t < steps; ++t) {
    const double b = beta_start + (beta_end - beta_start) * static_cast<double>(t) /
                                      static_cast<double>(steps - 1);
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    running *= 1.0 - b;
    s.alpha_bar.push_back(running);
  }
  return s;
}

Tensor forward_diffuse(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& s) {
  check_step(t, s);
  if (x0.shape() != eps.shape()) throw ShapeError("forward_diffuse: x0 and eps differ in shape");
  const double ab = s.alpha_bar[t];
  return scale(x0, std::sqrt(ab)) + scale(eps, std::sqrt(1.0 - ab));
}

Tensor estimate_clean(const Tensor& x_t, const Tensor& eps_hat, std::size_t t,
                      const NoiseSchedule& s) {
  check_step(t, s);
  if (x_t.shape() != eps_hat.shape()) throw ShapeError("estimate_clean: shape mismatch");
  const double ab = s.alpha_bar[t];
  if (ab < 1e-8) throw NumericError("estimate_clean: alpha_bar too small for a stable estimate");
  return scale(x_t - scale(eps_hat, std::sqrt(1.0 - ab)), 1.0 / std::sqrt(ab));
}

Tensor ddim_step(const Tensor& x_t, const Tensor& eps_hat, std::size_t t, long t_prev,
                 const NoiseSchedule& s) {
  check_step(t, s);
  if (t_prev < -1 || t_prev >= static_cast<long>(t)) {
    throw std::out_of_range("ddim_step: need -1 <= t_prev < t");
  }
  const auto x0 = estimate_clean(x_t, eps_hat, t, s);
  if (t_prev < 0) return x0;
  const double ab_prev = s.alpha_bar[static_cast<std::size_t>(t_prev)];
  return scale(x0, std::sqrt(ab_prev)) + scale(eps_hat, std::sqrt(1.0 - ab_prev));
}

Tensor cfg_mix(const Tensor& eps_cond, const Tensor& eps_uncond, double w) {
  if (eps_cond.shape() != eps_uncond.shape()) throw ShapeError("cfg_mix: shape mismatch");
  if (w < 0.0) throw std::invalid_argument("cfg_mix: weight must be non-negative");
  return eps_uncond + scale(eps_cond - eps_uncond, w);
}

// ---------------------------------------------------------------------------

ConditionalDenoiser::ConditionalDenoiser(const DenoiserConfig& config, std::size_t num_steps,
                                         std::uint64_t seed)
    : config_(config), num_steps_(num_steps) {
  if (config.time_features < 2 || config.time_features % 2) {
    throw std::invalid_argument("denoiser: time_features must be even and >= 2");
  }
  auto rng = make_rng(seed, 0);
  const auto F = config.width;
  const auto TF = config.time_features;
  auto conv = [&](std::size_t out, std::size_t in, std::size_t k, double gain) {
    return Tensor::randn({out, in, k, k}, rng, gain / std::sqrt(double(in * k * k)), true);
  };
  auto bias = [&](std::size_t c) { return Tensor::zeros({1, c, 1, 1}, true); };
  params_ = {
      {"time.w1", Tensor::randn({TF, F}, rng, 1.0 / std::sqrt(double(TF)), true)},
      {"time.b1", Tensor::zeros({1, F}, true)},
      {"time.w2", Tensor::randn({F, F}, rng, 1.0 / std::sqrt(double(F)), true)},
      {"time.b2", Tensor::zeros({1, F}, true)},
      {"in.w", conv(F, 1, 3, 1.4)},
      {"in.b", bias(F)},
      {"ctrl.in.w", conv(F, ControlCondition::kChannels, 3, 1.4)},
      {"ctrl.in.b", bias(F)},
      {"ctrl.zero1.w", Tensor::zeros({F, F, 1, 1}, true)},
      {"ctrl.zero1.b", bias(F)},
      {"ctrl.mid.w", conv(F, F, 3, 1.4)},
      {"ctrl.mid.b", bias(F)},
      {"ctrl.zero2.w", Tensor::zeros({F, F, 1, 1}, true)},
      {"ctrl.zero2.b", bias(F)},
      {"mid1.w", conv(F, F, 3, 1.4)},
      {"mid1.b", bias(F)},
      {"mid2.w", conv(F, F, 3, 1.4)},
      {"mid2.b", bias(F)},
      {"mid3.w", conv(F, F, 3, 1.4)},
      {"mid3.b", bias(F)},
      {"out.w", conv(1, F, 3, 0.1)},
      {"out.b", bias(1)},
  };
}

Tensor ConditionalDenoiser::time_embedding(std::span<const std::size_t> t) const {
  const auto half = config_.time_features / 2;
  std::vector<double> feats(t.size() * config_.time_features);
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(1000.0) * double(k) / double(half));
      const double arg = double(t[b]) * freq;
      feats[b * config_.time_features + k] = std::sin(arg);
      feats[b * config_.time_features + half + k] = std::cos(arg);
    }
  }
  const Tensor f({t.size(), config_.time_features}, std::move(feats));
  const auto h = silu(matmul(f, p("time.w1")) + p("time.b1"));
  const auto e = matmul(h, p("time.w2")) + p("time.b2");
  return reshape(e, {t.size(), config_.width, 1, 1});
}

Tensor ConditionalDenoiser::predict_eps(const Tensor& x_t, std::span<const std::size_t> t,
                                        const Tensor& control) const {
  const auto& xs = x_t.shape();
  if (xs.size() != 4 || xs[1] != 1) throw ShapeError("denoiser: expected x_t of shape [B,1,H,W]");
  if (t.size() != xs[0]) throw ShapeError("denoiser: need one step index per batch item");
  for (auto step : t) {
    if (step >= num_steps_) throw std::out_of_range("denoiser: step index out of range");
  }
  const Tensor ctrl = control.defined()
                          ? control
                          : Tensor::zeros({xs[0], ControlCondition::kChannels, xs[2], xs[3]});
  if (ctrl.shape() != Shape{xs[0], ControlCondition::kChannels, xs[2], xs[3]}) {
    throw ShapeError("denoiser: control must be [B,4,H,W], got " + shape_str(ctrl.shape()));
  }
  auto h1 = silu(conv2d(x_t, p("in.w"), 1) + p("in.b") + time_embedding(t));
  const auto c1 = silu(conv2d(ctrl, p("ctrl.in.w"), 1) + p("ctrl.in.b"));
  h1 = h1 + (conv2d(c1, p("ctrl.zero1.w"), 0) + p("ctrl.zero1.b"));
  auto h2 = silu(conv2d(h1, p("mid1.w"), 2, 2) + p("mid1.b"));
  const auto c2 = silu(conv2d(c1, p("ctrl.mid.w"), 2, 2) + p("ctrl.mid.b"));
  h2 = h2 + (conv2d(c2, p("ctrl.zero2.w"), 0) + p("ctrl.zero2.b"));
  const auto h3 = silu(conv2d(h2, p("mid2.w"), 4, 4) + p("mid2.b"));
  const auto h4 = silu(conv2d(h3, p("mid3.w"), 1) + p("mid3.b")) + h2;
  return conv2d(h4, p("out.w"), 1) + p("out.b");
}

std::vector<Tensor> ConditionalDenoiser::parameters() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params_) out.push_back(t);
  return out;
}

NamedTensors ConditionalDenoiser::named_parameters() const { return params_; }

void ConditionalDenoiser::load(const NamedTensors& tensors) {
  for (auto& [name, param] : params_) {
    const auto& src = find_tensor(tensors, name);
    if (src.shape() != param.shape()) {
      throw ShapeError("denoiser: checkpoint shape mismatch for " + name);
    }
    param.mutable_data().assign(src.data().begin(), src.data().end());
  }
}

ConditionalDenoiser ConditionalDenoiser::clone() const {
  ConditionalDenoiser copy = *this;
  for (auto& [name, t] : copy.params_) t = t.clone();
  return copy;
}

Tensor predict_noise(const ConditionalDenoiser& model, const Tensor& x_t,
                     std::span<const std::size_t> t, const Tensor& control, double w) {
  const auto cond = model.predict_eps(x_t, t, control);
  if (w == 1.0) return cond;
  return cfg_mix(cond, model.predict_eps(x_t, t, Tensor()), w);
}

Tensor stack_conditions(std::span<const ControlCondition> conds) {
  if (conds.empty()) throw std::invalid_argument("stack_conditions: empty batch");
  std::vector<double> v;
  Shape one;
  for (const auto& c : conds) {
    const auto s = c.stacked();
    if (one.empty()) one = s.shape();
    if (s.shape() != one) throw ShapeError("stack_conditions: mixed condition shapes");
    v.insert(v.end(), s.data().begin(), s.data().end());
  }
  return Tensor({conds.size(), one[0], one[1], one[2]}, std::move(v));
}

ConditionalDenoiser train_denoiser(const std::vector<SceneSample>& dataset, const NoiseSchedule& s,
                                   const DenoiserConfig& model_config,
                                   const DenoiserTrainConfig& train_config, std::uint64_t seed,
                                   std::vector<double>* loss_log, ConditionalDenoiser* last_good) {
  if (dataset.empty()) throw std::invalid_argument("train_denoiser: empty dataset");
  if (train_config.cond_drop_prob < 0.0 || train_config.cond_drop_prob > 1.0) {
    throw std::invalid_argument("train_denoiser: cond_drop_prob must be in [0,1]");
  }
  if (!(train_config.object_weight >= 1.0)) {
    throw std::invalid_argument("train_denoiser: object_weight must be >= 1");
  }
  ConditionalDenoiser model(model_config, s.steps, mix_seed(seed, 0));
  if (train_config.steps == 0) return model;

  std::vector<std::vector<Tensor>> controls(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    for (const auto& inst : dataset[i].instances) {
      controls[i].push_back(make_condition(dataset[i], inst, train_config.num_classes).stacked());
    }
  }

  Adam opt(model.parameters(), AdamConfig{});
  auto rng = make_rng(seed, 1);
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  std::uniform_int_distribution<std::size_t> step_dist(0, s.steps - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  const auto& shape = dataset.front().image.shape();
  const auto H = shape[1];
  const auto W = shape[2];
  const auto B = train_config.batch;
  const auto CH = ControlCondition::kChannels;
  ConditionalDenoiser good = model.clone();
  for (std::size_t step = 0; step < train_config.steps; ++step) {
    std::vector<double> xt(B * H * W), eps(B * H * W), ctrl(B * CH * H * W, 0.0), weight(B * H * W);
    std::vector<std::size_t> ts(B);
    for (std::size_t b = 0; b < B; ++b) {
      const auto idx = pick(rng);
      const auto& sample = dataset[idx];
      std::uniform_int_distribution<std::size_t> inst_pick(0, controls[idx].size() - 1);
      const auto& control = controls[idx][inst_pick(rng)];
      ts[b] = step_dist(rng);
      const double ab = s.alpha_bar[ts[b]];
      const auto px = sample.image.data();
      for (std::size_t i = 0; i < H * W; ++i) {
        eps[b * H * W + i] = normal(rng);
        xt[b * H * W + i] = std::sqrt(ab) * px[i] + std::sqrt(1.0 - ab) * eps[b * H * W + i];
      }
      const auto mask = control.data().subspan(H * W, H * W);
      for (std::size_t i = 0; i < H * W; ++i) {
        weight[b * H * W + i] = mask[i] > 0.0 ? train_config.object_weight : 1.0;
      }
      if (coin(rng) >= train_config.cond_drop_prob) {
        std::copy(control.data().begin(), control.data().end(), ctrl.begin() + b * CH * H * W);
      }
    }
    double loss_value = 0.0;
    try {
      const auto pred = model.predict_eps(Tensor({B, 1, H, W}, std::move(xt)), ts,
                                          Tensor({B, CH, H, W}, std::move(ctrl)));
      double total_weight = 0.0;
      for (double v : weight) total_weight += v;
      const auto loss = scale(sum(square(pred - Tensor({B, 1, H, W}, std::move(eps))) *
                                  Tensor({B, 1, H, W}, std::move(weight))),
                              1.0 / total_weight);
      loss_value = loss.item();
      opt.zero_grad();
      backward(loss);
      opt.step(train_config.lr * std::pow(1.0 - double(step) / double(train_config.steps), 0.9));
    } catch (const NumericError& e) {
      if (last_good) *last_good = good;
      throw TrainingDiverged(std::string("train_denoiser: diverged: ") + e.what(), step);
    }
    if (loss_log) loss_log->push_back(loss_value);
    if (last_good) good = model.clone();
  }
  return model;
}

Tensor initial_noise(const Shape& image_shape, std::uint64_t seed) {
  auto rng = make_rng(seed, 0x5eed);
  return Tensor::randn(image_shape, rng);
}

Tensor sample_batch(const ConditionalDenoiser& model, std::span<const ControlCondition> conds,
                    const NoiseSchedule& s, double w, std::span<const std::uint64_t> seeds) {
  if (conds.size() != seeds.size()) throw std::invalid_argument("sample: one seed per chain");
  NoGradGuard no_grad;
  const auto control = stack_conditions(conds);
  const auto& cs = control.shape();
  const Shape image{1, cs[2], cs[3]};
  std::vector<double> x0;
  for (auto seed : seeds) {
    const auto n = initial_noise(image, seed);
    x0.insert(x0.end(), n.data().begin(), n.data().end());
  }
  Tensor x({cs[0], 1, cs[2], cs[3]}, std::move(x0));
  for (std::size_t t = s.steps; t-- > 0;) {
    const std::vector<std::size_t> ts(cs[0], t);
    const auto eps = predict_noise(model, x, ts, control, w);
    x = ddim_step(x, eps, t, static_cast<long>(t) - 1, s);
  }
  return clamp(x, -1.0, 1.0);
}

Tensor sample(const ConditionalDenoiser& model, const ControlCondition& cond,
              const NoiseSchedule& s, double w, std::uint64_t seed) {
  const std::uint64_t seeds[] = {seed};
  const auto out = sample_batch(model, std::span(&cond, 1), s, w, seeds);
  return reshape(out, {1, out.shape()[2], out.shape()[3]});
}

}  // namespace glab
