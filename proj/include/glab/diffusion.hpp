#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "glab/checkpoint.hpp"
#include "glab/scenes.hpp"
#include "glab/tensor.hpp"

namespace glab {

struct NoiseSchedule {
  std::size_t steps = 0;  // T
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
};

/// Linear beta ramp over T steps; alpha = 1 - beta, alpha_bar its running product.
NoiseSchedule build_schedule(std::size_t steps, double beta_start, double beta_end);

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
Tensor forward_diffuse(const Tensor& x0, std::size_t t, const Tensor& eps, const NoiseSchedule& s);

/// Single-step clean estimate (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t).
/// Built from tensor ops, so it is differentiable in both arguments.
Tensor estimate_clean(const Tensor& x_t, const Tensor& eps_hat, std::size_t t,
                      const NoiseSchedule& s);

/// Deterministic DDIM update to t_prev; t_prev = -1 is the terminal step
/// (abar = 1) and returns the clean estimate.
Tensor ddim_step(const Tensor& x_t, const Tensor& eps_hat, std::size_t t, long t_prev,
                 const NoiseSchedule& s);

/// eps_uncond + w (eps_cond - eps_uncond)
Tensor cfg_mix(const Tensor& eps_cond, const Tensor& eps_uncond, double w);

struct DenoiserConfig {
  std::size_t width = 16;
  std::size_t time_features = 16;
};

/// Epsilon-prediction conv net with a ControlNet-style side branch. The
/// branch reads the stacked ControlCondition and is added into the backbone
/// at two depths through 1x1 convolutions that start at zero.
class ConditionalDenoiser {
 public:
  ConditionalDenoiser(const DenoiserConfig& config, std::size_t num_steps, std::uint64_t seed);

  /// x_t: [B,1,H,W]; t: one step index per batch item; control: [B,4,H,W] or
  /// an undefined tensor for the unconditional prediction.
  Tensor predict_eps(const Tensor& x_t, std::span<const std::size_t> t,
                     const Tensor& control) const;

  const DenoiserConfig& config() const { return config_; }
  std::size_t num_steps() const { return num_steps_; }
  std::vector<Tensor> parameters() const;
  NamedTensors named_parameters() const;
  void load(const NamedTensors& tensors);
  ConditionalDenoiser clone() const;

 private:
  Tensor time_embedding(std::span<const std::size_t> t) const;

  DenoiserConfig config_;
  std::size_t num_steps_;
  NamedTensors params_;
  const Tensor& p(const char* name) const { return find_tensor(params_, name); }
};

/// Conditional noise prediction mixed with the unconditional one by weight w
/// (w = 1 skips the unconditional pass).
Tensor predict_noise(const ConditionalDenoiser& model, const Tensor& x_t,
                     std::span<const std::size_t> t, const Tensor& control, double w);

/// Stacks conditions into a [B,4,H,W] control batch.
Tensor stack_conditions(std::span<const ControlCondition> conds);

struct DenoiserTrainConfig {
  std::size_t steps = 3000;
  std::size_t batch = 8;
  double lr = 2e-3;
  double cond_drop_prob = 0.1;
  double object_weight = 1.0;  // loss weight of the conditioning instance's pixels
  std::size_t num_classes = 5;  // scales the class channel of the control
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::size_t step)
      : std::runtime_error(what), step(step) {}
  std::size_t step;
};

/// Minimises the weighted mean of (eps - eps_hat)^2 on real scenes, each
/// draw conditioned on one random instance whose pixels carry object_weight.
/// With probability cond_drop_prob the control input is
/// replaced by zeros. On a non-finite loss the model is rolled back to the
/// last finite step and TrainingDiverged is thrown.
ConditionalDenoiser train_denoiser(const std::vector<SceneSample>& dataset, const NoiseSchedule& s,
                                   const DenoiserConfig& model_config,
                                   const DenoiserTrainConfig& train_config, std::uint64_t seed,
                                   std::vector<double>* loss_log = nullptr,
                                   ConditionalDenoiser* last_good = nullptr);

/// Initial noise x_T for a chain; one independent stream per seed.
Tensor initial_noise(const Shape& image_shape, std::uint64_t seed);

/// Unguided DDIM chain over all T steps for a batch of conditions, chain i
/// starting from initial_noise(seeds[i]). Output clamped to [-1,1], [B,1,H,W].
Tensor sample_batch(const ConditionalDenoiser& model, std::span<const ControlCondition> conds,
                    const NoiseSchedule& s, double w, std::span<const std::uint64_t> seeds);

/// Single-chain convenience wrapper; returns [1,H,W].
Tensor sample(const ConditionalDenoiser& model, const ControlCondition& cond,
              const NoiseSchedule& s, double w, std::uint64_t seed);

}  // namespace glab
