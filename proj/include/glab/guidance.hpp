#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "glab/diffusion.hpp"
#include "glab/scenes.hpp"
#include "glab/segmentation.hpp"
#include "glab/tensor.hpp"

namespace glab {

enum class LossKind { none, entropy, ce, mcd };
enum class ScheduleKind { constant, early, late };

std::string to_string(LossKind k);
std::string to_string(ScheduleKind k);
LossKind parse_loss(const std::string& s);
ScheduleKind parse_schedule(const std::string& s);

/// How a backward-diffusion chain is steered. The loss is restricted to the
/// instance being redrawn (the condition's mask) and maximised: the applied
/// update descends on the negated score.
struct GuidanceSpec {
  LossKind loss = LossKind::none;
  double eta = 0.0;
  ScheduleKind schedule = ScheduleKind::constant;
  std::size_t mc_n = 4;
  bool backprop_through_denoiser = false;

  void validate() const;
  bool active() const { return loss != LossKind::none && eta != 0.0; }
};

// Informativeness scores. Maps are [C,H,W] (region [1,H,W]) or batched
// [B,C,H,W] (region [B,1,H,W]); the batched result is the sum over items of
// each item's region mean, so per-item gradients stay independent.

/// Mean over region pixels of -sum_c p_c log p_c, probabilities clamped at 1e-12.
Tensor loss_entropy(const Tensor& probs, const Tensor& region);

/// Mean over region pixels of -log p_y for the ground-truth class y.
Tensor loss_ce(const Tensor& probs, const Tensor& gt_onehot, const Tensor& region);
Tensor loss_ce(const Tensor& probs, const LabelMap& gt, const Tensor& region);

/// Population variance across the N passes, averaged over classes and region pixels.
Tensor loss_mcd(const std::vector<Tensor>& passes, const Tensor& region);

/// One-hot [C,H,W] encoding of a label map.
Tensor one_hot(const LabelMap& labels, std::size_t num_classes);

/// constant: 1, early: abar_t, late: sqrt(1 - abar_t).
double schedule_factor(ScheduleKind kind, std::size_t t, const NoiseSchedule& s);

/// One chain of a guided batch: what to draw and what the scorer should see.
struct GuidanceTarget {
  ControlCondition condition;
  LabelMap ground_truth;  // used by the CE loss
};

struct StepTrace {
  std::size_t step = 0;  // 0 for the first (noisiest) denoising step
  std::size_t t = 0;
  double eta_t = 0.0;
  double loss = 0.0;       // score of the pre-update clean estimate
  double grad_norm = 0.0;  // L2 norm of the applied gradient
  bool skipped = false;    // guidance dropped this step (non-finite gradient)
};

/// Batch of chains advanced together; all chains share the denoiser and
/// scorer weights read-only.
struct GuidedBatch {
  std::vector<GuidanceTarget> targets;
  Tensor control;   // [B,4,H,W]
  Tensor region;    // [B,1,H,W]
  Tensor gt_onehot; // [B,C,H,W], defined for the CE loss only

  GuidedBatch(std::vector<GuidanceTarget> targets, std::size_t num_classes);
  std::size_t size() const { return targets.size(); }
};

/// One step of the guided sampler on a batch x_t [B,1,H,W]:
///   eps = cfg-mixed noise prediction at x_t
///   x0  = clamp(estimate_clean(x_t, eps), -1, 1)
///   g   = d/dx_t [-score(scorer(x0))]   (eps frozen unless backprop_through_denoiser)
///   x_t' = x_t - eta_t g
///   return ddim_step(x_t', eps, t, t_prev)  (the same eps, not re-predicted)
/// `rng` draws the MC-dropout masks. `trace`, when given, receives one entry per chain.
Tensor guided_step(const Tensor& x_t, std::size_t t, long t_prev,
                   const ConditionalDenoiser& denoiser, const SegmentationModel& scorer,
                   const GuidedBatch& batch, const GuidanceSpec& spec, const NoiseSchedule& s,
                   double w, std::mt19937_64& rng, std::vector<StepTrace>* trace = nullptr);

struct GuidedResult {
  Tensor images;                             // [B,1,H,W], clamped to [-1,1]
  std::vector<std::vector<StepTrace>> trace; // per chain, one entry per step
};

/// Full guided chain from initial_noise(seeds[i]) for every chain. With an
/// inactive spec this is exactly sample_batch().
GuidedResult generate_guided(const ConditionalDenoiser& denoiser, const SegmentationModel& scorer,
                             const GuidedBatch& batch, const GuidanceSpec& spec,
                             const NoiseSchedule& s, double w,
                             std::span<const std::uint64_t> seeds, std::uint64_t mask_seed);

/// Score of `spec.loss` for one image, measured the way the sweep reports
/// uncertainty: entropy/CE with dropout off, MCD over `mc_n` passes from `seed`.
double measure_uncertainty(LossKind kind, const SegmentationModel& scorer, const Tensor& image,
                           const LabelMap& gt, const BinaryMask& region, std::size_t mc_n,
                           std::uint64_t seed);

/// Line-delimited trace records: {"chain","step","t","eta_t","loss","grad_norm","skipped"}.
std::string trace_jsonl(const std::vector<std::vector<StepTrace>>& trace);

}  // namespace glab
