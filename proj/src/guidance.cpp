#include "glab/guidance.hpp"

#include "json.hpp"

#include <cmath>
#include <sstream>

#include "glab/rng.hpp"

namespace glab {

namespace {

std::size_t class_axis(const Tensor& probs) {
  if (probs.dim() == 3) return 0;
  if (probs.dim() == 4) return 1;
  throw ShapeError("guidance: probability maps must be [C,H,W] or [B,C,H,W], got " +
                   shape_str(probs.shape()));
}

/// Per-item averaging weights: region / |region| for each batch item.
Tensor region_weights(const Tensor& region, const Shape& map_shape) {
  if (region.shape() != map_shape) {
    throw ShapeError("guidance: region " + shape_str(region.shape()) + " must match " +
                     shape_str(map_shape));
  }
  const std::size_t items = map_shape.size() == 4 ? map_shape[0] : 1;
  const std::size_t per = region.numel() / items;
  std::vector<double> w(region.data().begin(), region.data().end());
  for (std::size_t b = 0; b < items; ++b) {
    double count = 0.0;
    for (std::size_t i = 0; i < per; ++i) {
      const double v = w[b * per + i];
      if (v != 0.0 && v != 1.0) throw std::invalid_argument("guidance: region must be binary");
      count += v;
    }
    if (count == 0.0) throw std::invalid_argument("guidance: empty region");
    for (std::size_t i = 0; i < per; ++i) w[b * per + i] /= count;
  }
  return Tensor(map_shape, std::move(w));
}

Tensor entropy_map(const Tensor& probs) {
  const auto axis = class_axis(probs);
  return neg(sum(probs * log(clamp_min(probs, 1e-12)), axis, true));
}

Tensor ce_map(const Tensor& probs, const Tensor& gt_onehot) {
  if (gt_onehot.shape() != probs.shape()) throw ShapeError("loss_ce: ground truth shape mismatch");
  const auto axis = class_axis(probs);
  return neg(sum(gt_onehot * log(clamp_min(probs, 1e-12)), axis, true));
}

Tensor mcd_map(const std::vector<Tensor>& passes) {
  if (passes.size() < 2) throw std::invalid_argument("loss_mcd: need at least 2 passes");
  for (const auto& p : passes) {
    if (p.shape() != passes.front().shape()) throw ShapeError("loss_mcd: pass shapes differ");
  }
  const double inv_n = 1.0 / static_cast<double>(passes.size());
  Tensor total = passes.front();
  for (std::size_t i = 1; i < passes.size(); ++i) total = total + passes[i];
  const auto avg = scale(total, inv_n);
  Tensor var = square(passes.front() - avg);
  for (std::size_t i = 1; i < passes.size(); ++i) var = var + square(passes[i] - avg);
  var = scale(var, inv_n);
  return mean(var, class_axis(passes.front()), true);
}

Tensor reduce_region(const Tensor& map, const Tensor& region) {
  return sum(map * region_weights(region, map.shape()));
}

/// Per-pixel score map [B,1,H,W] of the clean estimate for the spec's loss.
Tensor score_map(const Tensor& x0, const SegmentationModel& scorer, const GuidedBatch& batch,
                 const GuidanceSpec& spec, std::mt19937_64& rng) {
  switch (spec.loss) {
    case LossKind::entropy:
      return entropy_map(predict_probs(scorer, x0, DropoutMode::off));
    case LossKind::ce:
      return ce_map(predict_probs(scorer, x0, DropoutMode::off), batch.gt_onehot);
    case LossKind::mcd: {
      std::vector<Tensor> passes;
      for (std::size_t n = 0; n < spec.mc_n; ++n) {
        passes.push_back(predict_probs(scorer, x0, DropoutMode::on, &rng));
      }
      return mcd_map(passes);
    }
    case LossKind::none:
      break;
  }
  throw std::logic_error("score_map: no loss");
}

}  // namespace

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::none: return "none";
    case LossKind::entropy: return "entropy";
    case LossKind::ce: return "ce";
    case LossKind::mcd: return "mcd";
  }
  return "?";
}

std::string to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::constant: return "constant";
    case ScheduleKind::early: return "early";
    case ScheduleKind::late: return "late";
  }
  return "?";
}

LossKind parse_loss(const std::string& s) {
  if (s == "none") return LossKind::none;
  if (s == "entropy") return LossKind::entropy;
  if (s == "ce") return LossKind::ce;
  if (s == "mcd") return LossKind::mcd;
  throw std::invalid_argument("unknown guidance loss: " + s);
}

ScheduleKind parse_schedule(const std::string& s) {
  if (s == "constant") return ScheduleKind::constant;
  if (s == "early") return ScheduleKind::early;
  if (s == "late") return ScheduleKind::late;
  throw std::invalid_argument("unknown guidance schedule: " + s);
}

void GuidanceSpec::validate() const {
  if (!(eta >= 0.0) || !std::isfinite(eta)) {
    throw std::invalid_argument("guidance: eta must be finite and >= 0");
  }
  if (loss == LossKind::mcd && mc_n < 2) {
    throw std::invalid_argument("guidance: MCD needs at least 2 passes");
  }
}

Tensor loss_entropy(const Tensor& probs, const Tensor& region) {
  return reduce_region(entropy_map(probs), region);
}

Tensor loss_ce(const Tensor& probs, const Tensor& gt_onehot, const Tensor& region) {
  return reduce_region(ce_map(probs, gt_onehot), region);
}

Tensor loss_ce(const Tensor& probs, const LabelMap& gt, const Tensor& region) {
  if (probs.dim() != 3) throw ShapeError("loss_ce: label-map overload takes a [C,H,W] map");
  return loss_ce(probs, one_hot(gt, probs.shape()[0]), region);
}

Tensor loss_mcd(const std::vector<Tensor>& passes, const Tensor& region) {
  return reduce_region(mcd_map(passes), region);
}

Tensor one_hot(const LabelMap& labels, std::size_t num_classes) {
  const auto n = labels.size();
  std::vector<double> v(num_classes * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int c = labels.values[i];
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes) {
      throw std::invalid_argument("one_hot: class index out of range");
    }
    v[static_cast<std::size_t>(c) * n + i] = 1.0;
  }
  return Tensor({num_classes, labels.height, labels.width}, std::move(v));
}

double schedule_factor(ScheduleKind kind, std::size_t t, const NoiseSchedule& s) {
  if (t >= s.steps) throw std::out_of_range("schedule_factor: step out of range");
  switch (kind) {
    case ScheduleKind::constant: return 1.0;
    case ScheduleKind::early: return s.alpha_bar[t];
    case ScheduleKind::late: return std::sqrt(1.0 - s.alpha_bar[t]);
  }
  throw std::invalid_argument("schedule_factor: unknown schedule");
}

GuidedBatch::GuidedBatch(std::vector<GuidanceTarget> t, std::size_t num_classes)
    : targets(std::move(t)) {
  if (targets.empty()) throw std::invalid_argument("GuidedBatch: no chains");
  std::vector<ControlCondition> conds;
  std::vector<double> mask;
  std::vector<double> onehot;
  for (const auto& target : targets) {
    conds.push_back(target.condition);
    const auto r = target.condition.region();
    mask.insert(mask.end(), r.data().begin(), r.data().end());
    if (!target.ground_truth.values.empty()) {
      const auto oh = one_hot(target.ground_truth, num_classes);
      onehot.insert(onehot.end(), oh.data().begin(), oh.data().end());
    }
  }
  control = stack_conditions(conds);
  const auto& cs = control.shape();
  region = Tensor({cs[0], 1, cs[2], cs[3]}, std::move(mask));
  if (onehot.size() == cs[0] * num_classes * cs[2] * cs[3]) {
    gt_onehot = Tensor({cs[0], num_classes, cs[2], cs[3]}, std::move(onehot));
  }
}

Tensor guided_step(const Tensor& x_t, std::size_t t, long t_prev,
                   const ConditionalDenoiser& denoiser, const SegmentationModel& scorer,
                   const GuidedBatch& batch, const GuidanceSpec& spec, const NoiseSchedule& s,
                   double w, std::mt19937_64& rng, std::vector<StepTrace>* trace) {
  spec.validate();
  const auto B = x_t.shape().at(0);
  if (B != batch.size()) throw ShapeError("guided_step: batch size mismatch");
  const std::vector<std::size_t> ts(B, t);
  Tensor eps;
  {
    NoGradGuard no_grad;
    eps = predict_noise(denoiser, x_t, ts, batch.control, w);
  }
  const double eta_t = spec.eta * schedule_factor(spec.schedule, t, s);
  std::vector<StepTrace> entries(B);
  for (auto& e : entries) {
    e.t = t;
    e.eta_t = spec.active() ? eta_t : 0.0;
  }
  Tensor moved = x_t;
  if (spec.active() && eta_t != 0.0) {
    if (spec.loss == LossKind::ce && !batch.gt_onehot.defined()) {
      throw std::invalid_argument("guided_step: CE guidance needs ground truth for every chain");
    }
    const Tensor x(x_t.shape(), {x_t.data().begin(), x_t.data().end()}, true);
    std::vector<double> g(x_t.numel(), 0.0);
    std::vector<double> item_loss(B, 0.0);
    bool failed = false;
    try {
      const Tensor eps_used =
          spec.backprop_through_denoiser ? predict_noise(denoiser, x, ts, batch.control, w) : eps;
      const auto x0 = clamp(estimate_clean(x, eps_used, t, s), -1.0, 1.0);
      const auto map = score_map(x0, scorer, batch, spec, rng);
      const auto weights = region_weights(batch.region, map.shape());
      const auto score = sum(map * weights);
      const auto per = map.numel() / B;
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < per; ++i) {
          item_loss[b] += map[b * per + i] * weights[b * per + i];
        }
      }
      const auto gx = grad(neg(score), {x})[0];
      g.assign(gx.data().begin(), gx.data().end());
    } catch (const NumericError&) {
      failed = true;
    }
    const auto per = x_t.numel() / B;
    std::vector<double> next(x_t.data().begin(), x_t.data().end());
    for (std::size_t b = 0; b < B; ++b) {
      double norm2 = 0.0;
      bool finite = !failed && std::isfinite(item_loss[b]);
      for (std::size_t i = 0; i < per && finite; ++i) {
        finite = std::isfinite(g[b * per + i]);
        norm2 += g[b * per + i] * g[b * per + i];
      }
      entries[b].loss = finite ? item_loss[b] : 0.0;
      entries[b].grad_norm = finite ? std::sqrt(norm2) : 0.0;
      entries[b].skipped = !finite;
      if (!finite) continue;
      for (std::size_t i = 0; i < per; ++i) next[b * per + i] -= eta_t * g[b * per + i];
    }
    moved = Tensor(x_t.shape(), std::move(next));
  }
  if (trace) *trace = std::move(entries);
  NoGradGuard no_grad;
  return ddim_step(moved, eps, t, t_prev, s);
}

GuidedResult generate_guided(const ConditionalDenoiser& denoiser, const SegmentationModel& scorer,
                             const GuidedBatch& batch, const GuidanceSpec& spec,
                             const NoiseSchedule& s, double w,
                             std::span<const std::uint64_t> seeds, std::uint64_t mask_seed) {
  if (seeds.size() != batch.size()) throw std::invalid_argument("generate_guided: one seed per chain");
  const auto& cs = batch.control.shape();
  const Shape image{1, cs[2], cs[3]};
  std::vector<double> xt;
  for (auto seed : seeds) {
    const auto n = initial_noise(image, seed);
    xt.insert(xt.end(), n.data().begin(), n.data().end());
  }
  Tensor x({cs[0], 1, cs[2], cs[3]}, std::move(xt));
  auto rng = make_rng(mask_seed, 0x6d);
  GuidedResult result;
  result.trace.resize(batch.size());
  std::size_t step = 0;
  for (std::size_t t = s.steps; t-- > 0; ++step) {
    std::vector<StepTrace> entries;
    x = guided_step(x, t, static_cast<long>(t) - 1, denoiser, scorer, batch, spec, s, w, rng,
                    &entries);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      entries[b].step = step;
      result.trace[b].push_back(entries[b]);
    }
  }
  NoGradGuard no_grad;
  result.images = clamp(x, -1.0, 1.0);
  return result;
}

double measure_uncertainty(LossKind kind, const SegmentationModel& scorer, const Tensor& image,
                           const LabelMap& gt, const BinaryMask& region, std::size_t mc_n,
                           std::uint64_t seed) {
  NoGradGuard no_grad;
  const auto r = mask_tensor(region);
  switch (kind) {
    case LossKind::entropy:
      return loss_entropy(predict_probs(scorer, image, DropoutMode::off), r).item();
    case LossKind::ce:
      return loss_ce(predict_probs(scorer, image, DropoutMode::off), gt, r).item();
    case LossKind::mcd:
      return loss_mcd(mc_passes(scorer, image, mc_n, seed), r).item();
    case LossKind::none:
      break;
  }
  throw std::invalid_argument("measure_uncertainty: no metric for loss 'none'");
}

std::string trace_jsonl(const std::vector<std::vector<StepTrace>>& trace) {
  std::ostringstream os;
  for (std::size_t c = 0; c < trace.size(); ++c) {
    for (const auto& e : trace[c]) {
      nlohmann::json j{{"chain", c},          {"step", e.step}, {"t", e.t},
                       {"eta_t", e.eta_t},    {"loss", e.loss}, {"grad_norm", e.grad_norm},
                       {"skipped", e.skipped}};
      os << j.dump() << '\n';
    }
  }
  return os.str();
}

}  // namespace glab
