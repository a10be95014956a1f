#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "glab/guidance.hpp"
#include "gradcheck.hpp"

using namespace glab;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

/// Every pixel holds the same distribution.
Tensor constant_probs(const std::vector<double>& p, std::size_t h, std::size_t w) {
  std::vector<double> v;
  for (double q : p) v.insert(v.end(), h * w, q);
  return Tensor({p.size(), h, w}, v);
}

struct Fixture {
  NoiseSchedule s = build_schedule(40, 1e-3, 0.25);
  std::vector<SceneSample> scenes;
  ConditionalDenoiser denoiser{{8, 8}, 40, 1};
  SegmentationModel scorer{{5, 6, 0.25}, 2};

  Fixture() {
    SceneConfig sc;
    sc.seed = 5;
    scenes = gen_dataset(sc, 3);
  }

  GuidedBatch batch() const {
    std::vector<GuidanceTarget> targets;
    for (const auto& sc : scenes) {
      targets.push_back({make_condition(sc, sc.instances.front(), 5), sc.class_mask});
    }
    return GuidedBatch(std::move(targets), 5);
  }
};

}  // namespace

TEST_CASE("losses on hand-worked distributions") {
  const auto region = Tensor::ones({1, 2, 3});
  const auto p = constant_probs({0.7, 0.2, 0.1}, 2, 3);
  CHECK(loss_entropy(p, region).item() == doctest::Approx(0.8018185525433372).epsilon(1e-13));
  LabelMap gt(2, 3, 1);
  CHECK(loss_ce(p, gt, region).item() == doctest::Approx(1.6094379124341003).epsilon(1e-13));
  const auto q = constant_probs({0.5, 0.3, 0.2}, 2, 3);
  CHECK(loss_mcd({p, q}, region).item() == doctest::Approx(0.005).epsilon(1e-12));
  CHECK(loss_mcd({p, p, p}, region).item() == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(loss_entropy(constant_probs({0.25, 0.25, 0.25, 0.25}, 2, 3), region).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("losses only see the region") {
  std::mt19937_64 rng(41);
  auto rand_probs = [&] { return softmax(Tensor::randn({4, 5, 5}, rng), 0); };
  const auto a = rand_probs(), b = rand_probs(), b2 = rand_probs();
  std::vector<double> r(25, 0.0);
  for (std::size_t i : {6, 7, 12, 18}) r[i] = 1.0;
  const Tensor region({1, 5, 5}, r);
  std::vector<double> mixed(a.data().begin(), a.data().end());
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < 25; ++i) {
      if (r[i] == 0.0) mixed[c * 25 + i] = b[c * 25 + i];
    }
  }
  const Tensor m({4, 5, 5}, mixed);
  CHECK(loss_entropy(m, region).item() == doctest::Approx(loss_entropy(a, region).item()).epsilon(1e-14));
  LabelMap gt(5, 5, 2);
  CHECK(loss_ce(m, gt, region).item() == doctest::Approx(loss_ce(a, gt, region).item()).epsilon(1e-14));
  CHECK(loss_mcd({m, b2}, region).item() != doctest::Approx(loss_mcd({b, b2}, region).item()));
  CHECK_THROWS(loss_entropy(a, Tensor::zeros({1, 5, 5})));
  CHECK_THROWS(loss_entropy(a, Tensor::full({1, 5, 5}, 0.5)));
}

TEST_CASE("losses ignore pixels beyond the scorer's receptive field of the region") {
  const SegmentationModel scorer({5, 6, 0.25}, 12);
  std::mt19937_64 rng(46);
  const auto image = Tensor::randn({1, 32, 32}, rng, 0.5);
  std::vector<double> r(32 * 32, 0.0);
  for (std::size_t y = 14; y < 17; ++y) {
    for (std::size_t x = 10; x < 13; ++x) r[y * 32 + x] = 1.0;
  }
  const Tensor region({1, 32, 32}, r);
  LabelMap gt(32, 32, 2);
  const auto x = Tensor(image.shape(), {image.data().begin(), image.data().end()}, true);
  for (int which = 0; which < 3; ++which) {
    Tensor loss;
    if (which == 0) loss = loss_entropy(predict_probs(scorer, x, DropoutMode::off), region);
    if (which == 1) loss = loss_ce(predict_probs(scorer, x, DropoutMode::off), gt, region);
    if (which == 2) loss = loss_mcd(mc_passes(scorer, x, 2, 5), region);
    const auto g = grad(loss, {x})[0];
    std::size_t inside_nonzero = 0;
    for (std::size_t y = 0; y < 32; ++y) {
      for (std::size_t xx = 0; xx < 32; ++xx) {
        const long dy = std::max<long>({14 - static_cast<long>(y), static_cast<long>(y) - 16, 0});
        const long dx = std::max<long>({10 - static_cast<long>(xx), static_cast<long>(xx) - 12, 0});
        const double v = g[y * 32 + xx];
        if (std::max(dy, dx) > 9) {
          CHECK(v == 0.0);
        } else {
          inside_nonzero += v != 0.0;
        }
      }
    }
    CHECK(inside_nonzero > 100);
  }
}

TEST_CASE("batched losses are sums of per-item losses") {
  std::mt19937_64 rng(42);
  const auto p0 = softmax(Tensor::randn({3, 4, 4}, rng), 0);
  const auto p1 = softmax(Tensor::randn({3, 4, 4}, rng), 0);
  std::vector<double> pv(p0.data().begin(), p0.data().end());
  pv.insert(pv.end(), p1.data().begin(), p1.data().end());
  std::vector<double> r0(16, 1.0), r1(16, 0.0);
  r1[5] = r1[6] = 1.0;
  std::vector<double> rv = r0;
  rv.insert(rv.end(), r1.begin(), r1.end());
  const Tensor pb({2, 3, 4, 4}, pv), rb({2, 1, 4, 4}, rv);
  const Tensor reg0({1, 4, 4}, r0), reg1({1, 4, 4}, r1);
  CHECK(loss_entropy(pb, rb).item() ==
        doctest::Approx(loss_entropy(p0, reg0).item() + loss_entropy(p1, reg1).item()).epsilon(1e-13));
  LabelMap g(4, 4, 1);
  const auto oh = one_hot(g, 3);
  std::vector<double> ohv(oh.data().begin(), oh.data().end());
  ohv.insert(ohv.end(), oh.data().begin(), oh.data().end());
  CHECK(loss_ce(pb, Tensor({2, 3, 4, 4}, ohv), rb).item() ==
        doctest::Approx(loss_ce(p0, g, reg0).item() + loss_ce(p1, g, reg1).item()).epsilon(1e-13));
}

TEST_CASE("loss gradients") {
  std::mt19937_64 rng(43);
  const auto region = Tensor::ones({1, 3, 3});
  LabelMap gt(3, 3, 2);
  for (int trial = 0; trial < 5; ++trial) {
    const auto logits = Tensor::randn({4, 3, 3}, rng);
    CHECK(testing::gradient_error([&](const auto& x) { return loss_entropy(softmax(x[0], 0), region); },
                                  {logits}, rng) < 1e-6);
    CHECK(testing::gradient_error([&](const auto& x) { return loss_ce(softmax(x[0], 0), gt, region); },
                                  {logits}, rng) < 1e-6);
    const auto other = Tensor::randn({4, 3, 3}, rng);
    CHECK(testing::gradient_error(
              [&](const auto& x) { return loss_mcd({softmax(x[0], 0), softmax(x[1], 0)}, region); },
              {logits, other}, rng) < 1e-6);
  }
}

TEST_CASE("schedules") {
  const auto s = build_schedule(40, 1e-3, 0.25);
  for (std::size_t t = 0; t < s.steps; ++t) {
    const double early = schedule_factor(ScheduleKind::early, t, s);
    const double late = schedule_factor(ScheduleKind::late, t, s);
    CHECK(std::abs(early + late * late - 1.0) <= 1e-12);
    CHECK(schedule_factor(ScheduleKind::constant, t, s) == 1.0);
  }
  CHECK(schedule_factor(ScheduleKind::early, 0, s) > schedule_factor(ScheduleKind::early, 39, s));
  CHECK_THROWS(schedule_factor(ScheduleKind::late, 40, s));
  CHECK(parse_schedule(to_string(ScheduleKind::late)) == ScheduleKind::late);
  CHECK(parse_loss(to_string(LossKind::mcd)) == LossKind::mcd);
  CHECK_THROWS(parse_loss("kl"));
  GuidanceSpec spec{LossKind::mcd, 1.0, ScheduleKind::constant, 1};
  CHECK_THROWS(spec.validate());
  spec = {LossKind::entropy, -1.0};
  CHECK_THROWS(spec.validate());
}

TEST_CASE("end-to-end guidance gradient with the noise estimate frozen") {
  Fixture f;
  std::mt19937_64 rng(44);
  for (auto loss : {LossKind::entropy, LossKind::ce, LossKind::mcd}) {
    for (std::size_t t : {5, 20, 35}) {
      const auto x0 = testing::uniform({1, 8, 8}, rng, -0.8, 0.8);
      const auto eps = Tensor::randn({1, 8, 8}, rng);
      std::vector<double> r(64, 0.0);
      for (std::size_t i = 18; i < 46; ++i) r[i] = 1.0;
      LabelMap gt(8, 8, 0);
      for (std::size_t i = 0; i < 64; ++i) gt.values[i] = r[i] > 0 ? 3 : 0;
      const auto obj = testing::guidance_objective(f.scorer, eps, t, f.s, loss, Tensor({1, 8, 8}, r), gt);
      CHECK(testing::gradient_error(obj, {forward_diffuse(x0, t, eps, f.s)}, rng) < 1e-3);
    }
  }
}

TEST_CASE("guided step applies the negated score gradient then a DDIM step") {
  Fixture f;
  const auto batch = f.batch();
  std::mt19937_64 rng(45);
  const auto x = Tensor::randn({3, 1, 32, 32}, rng);
  const std::size_t t = 25;
  const GuidanceSpec spec{LossKind::entropy, 7.0, ScheduleKind::late};
  std::mt19937_64 mask_rng(1);
  std::vector<StepTrace> trace;
  const auto got = guided_step(x, t, 24, f.denoiser, f.scorer, batch, spec, f.s, 1.0, mask_rng, &trace);

  const std::vector<std::size_t> ts(3, t);
  Tensor eps;
  {
    NoGradGuard ng;
    eps = predict_noise(f.denoiser, x, ts, batch.control, 1.0);
  }
  const auto xg = Tensor(x.shape(), {x.data().begin(), x.data().end()}, true);
  const auto x0 = clamp(estimate_clean(xg, eps, t, f.s), -1.0, 1.0);
  const auto score = loss_entropy(predict_probs(f.scorer, x0, DropoutMode::off), batch.region);
  const auto g = grad(neg(score), {xg})[0];
  const double eta_t = 7.0 * schedule_factor(ScheduleKind::late, t, f.s);
  const auto want = ddim_step(sub(x, scale(g, eta_t)), eps, t, 24, f.s);
  CHECK(max_abs_diff(got, want) < 1e-12);
  REQUIRE(trace.size() == 3);
  for (const auto& tr : trace) {
    CHECK(tr.t == t);
    CHECK(tr.eta_t == doctest::Approx(eta_t));
    CHECK(!tr.skipped);
    CHECK(tr.grad_norm > 0.0);
  }
}

TEST_CASE("zero strength reproduces the unguided sampler bit for bit") {
  Fixture f;
  const auto batch = f.batch();
  const std::uint64_t seeds[] = {1, 2, 3};
  std::vector<ControlCondition> conds;
  for (const auto& tg : batch.targets) conds.push_back(tg.condition);
  const auto plain = sample_batch(f.denoiser, conds, f.s, 1.0, seeds);
  for (auto loss : {LossKind::entropy, LossKind::ce, LossKind::mcd}) {
    for (auto sched : {ScheduleKind::constant, ScheduleKind::early, ScheduleKind::late}) {
      const GuidanceSpec spec{loss, 0.0, sched};
      const auto r = generate_guided(f.denoiser, f.scorer, batch, spec, f.s, 1.0, seeds, 9);
      CHECK(bit_identical(r.images, plain));
    }
  }
}

TEST_CASE("guided generation: traces, reproducibility and effect") {
  Fixture f;
  const auto batch = f.batch();
  const std::uint64_t seeds[] = {4, 5, 6};
  const GuidanceSpec spec{LossKind::mcd, 30.0, ScheduleKind::early, 3};
  const auto a = generate_guided(f.denoiser, f.scorer, batch, spec, f.s, 1.0, seeds, 9);
  const auto b = generate_guided(f.denoiser, f.scorer, batch, spec, f.s, 1.0, seeds, 9);
  CHECK(bit_identical(a.images, b.images));
  REQUIRE(a.trace.size() == 3);
  for (const auto& chain : a.trace) {
    REQUIRE(chain.size() == 40);
    CHECK(chain.front().t == 39);
    CHECK(chain.back().t == 0);
  }
  const auto plain = generate_guided(f.denoiser, f.scorer, batch, {}, f.s, 1.0, seeds, 9);
  CHECK(max_abs_diff(a.images, plain.images) > 0.0);
  for (auto v : a.images.data()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  std::istringstream lines(trace_jsonl(a.trace));
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) ++n;
  CHECK(n == 120);
}

TEST_CASE("uncertainty measurement matches the losses") {
  Fixture f;
  const auto& sc = f.scenes.front();
  const auto& inst = sc.instances.front();
  const auto r = mask_tensor(inst.mask);
  CHECK(measure_uncertainty(LossKind::entropy, f.scorer, sc.image, sc.class_mask, inst.mask, 4, 1) ==
        loss_entropy(predict_probs(f.scorer, sc.image, DropoutMode::off), r).item());
  CHECK(measure_uncertainty(LossKind::ce, f.scorer, sc.image, sc.class_mask, inst.mask, 4, 1) ==
        loss_ce(predict_probs(f.scorer, sc.image, DropoutMode::off), sc.class_mask, r).item());
  const double m1 = measure_uncertainty(LossKind::mcd, f.scorer, sc.image, sc.class_mask, inst.mask, 4, 1);
  CHECK(m1 == measure_uncertainty(LossKind::mcd, f.scorer, sc.image, sc.class_mask, inst.mask, 4, 1));
  CHECK(m1 > 0.0);
  CHECK_THROWS(measure_uncertainty(LossKind::none, f.scorer, sc.image, sc.class_mask, inst.mask, 4, 1));
}

TEST_CASE("one guided entropy step raises the region entropy of the clean estimate") {
  Fixture f;
  const auto batch = f.batch();
  std::mt19937_64 rng(47);
  std::uniform_int_distribution<std::size_t> pick_t(5, 35), pick_item(0, 2);
  int raised = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto t = pick_t(rng);
    const auto item = pick_item(rng);
    GuidedBatch one({batch.targets[item]}, 5);
    const auto x = Tensor::randn({1, 1, 32, 32}, rng);
    const std::size_t ts[] = {t};
    Tensor eps;
    {
      NoGradGuard ng;
      eps = predict_noise(f.denoiser, x, ts, one.control, 1.0);
    }
    auto region_entropy = [&](const Tensor& xt) {
      NoGradGuard ng;
      const auto x0 = clamp(estimate_clean(xt, eps, t, f.s), -1.0, 1.0);
      return loss_entropy(predict_probs(f.scorer, x0, DropoutMode::off), one.region).item();
    };
    const auto xg = Tensor(x.shape(), {x.data().begin(), x.data().end()}, true);
    const auto x0 = clamp(estimate_clean(xg, eps, t, f.s), -1.0, 1.0);
    const auto g = grad(neg(loss_entropy(predict_probs(f.scorer, x0, DropoutMode::off), one.region)), {xg})[0];
    const auto moved = sub(x, scale(g, 1.0));
    raised += region_entropy(moved) >= region_entropy(x);
  }
  CHECK(raised >= 18);
}

TEST_CASE("stronger entropy guidance yields more uncertain objects") {
  Fixture f;
  const auto batch = f.batch();
  std::vector<double> gains;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::uint64_t seeds[] = {3 * seed + 100, 3 * seed + 101, 3 * seed + 102};
    auto final_entropy = [&](double eta) {
      const auto r = generate_guided(f.denoiser, f.scorer, batch, {LossKind::entropy, eta, ScheduleKind::early},
                                     f.s, 1.0, seeds, seed);
      NoGradGuard ng;
      return loss_entropy(predict_probs(f.scorer, r.images, DropoutMode::off), batch.region).item();
    };
    gains.push_back(final_entropy(20.0) - final_entropy(0.0));
  }
  std::nth_element(gains.begin(), gains.begin() + 5, gains.end());
  CHECK(gains[5] > 0.0);
}
