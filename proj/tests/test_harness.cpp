#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "glab/harness.hpp"

using namespace glab;

namespace {

ExperimentConfig tiny_config() {
  auto c = ExperimentConfig::parse(R"(
    # small enough for a unit test
    data.train_size = 3
    data.test_size = 3
    data.pretrain_size = 4
    diffusion.steps = 6
    diffusion.width = 4
    diffusion.time_features = 4
    diffusion.train_steps = 4
    diffusion.batch = 2
    seg.width = 4
    seg.steps = 6
    seg.batch = 2
    guidance.losses = entropy, mcd
    guidance.etas = 5
    guidance.mc_n = 2
    curves.losses = entropy
    curves.etas = 0, 5
    curves.images = 2
    run.seeds = 1, 2
  )");
  return c;
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "glab");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli(static_cast<int>(argv.size()), argv.data());
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("glab_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("config text round trip, hashing and validation") {
  const ExperimentConfig def;
  CHECK_NOTHROW(def.validate());
  const auto again = ExperimentConfig::parse(def.dump());
  CHECK(again.dump() == def.dump());
  CHECK(again.hash() == def.hash());

  auto c = def;
  c.set("guidance.etas", "5, 10.5");
  CHECK(c.etas == std::vector<double>{5.0, 10.5});
  CHECK(c.hash() != def.hash());
  c.set("scene.num_classes", "4");
  CHECK(ExperimentConfig::parse(c.dump()).dump() == c.dump());

  CHECK_THROWS(c.set("no.such.key", "1"));
  CHECK_THROWS(c.set("seg.steps", "-3"));
  CHECK_THROWS(c.set("guidance.losses", "entropy,kl"));
  CHECK_THROWS(c.set("ablation.selection", "maybe"));
  CHECK_THROWS(ExperimentConfig::parse("seg.steps 10"));
  auto bad = def;
  bad.set("seg.p_aug", "1.5");
  CHECK_THROWS(bad.validate());
  bad = def;
  bad.set("run.seeds", "1,1");
  CHECK_THROWS(bad.validate());
  bad = def;
  bad.set("guidance.etas", "0");
  CHECK_THROWS(bad.validate());
  CHECK_THROWS(ExperimentConfig::load("/nonexistent/config.txt"));
  for (const auto& k : def.keys()) CHECK(def.dump().find(k + " = ") != std::string::npos);
}

TEST_CASE("median, rank correlation and isotonic residuals") {
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
  CHECK_THROWS(median({}));
  CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
  CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
  // ranks with ties: y -> 1, 2.5, 2.5, 4
  CHECK(spearman({1, 2, 3, 4}, {1, 5, 5, 9}) == doctest::Approx(4.5 / std::sqrt(22.5)));
  CHECK(spearman({1, 2, 3, 4, 5}, {2, 1, 4, 3, 5}) == doctest::Approx(0.8));
  CHECK_THROWS(spearman({1}, {1}));

  const auto fit = isotonic_fit({1, 3, 2, 4});
  CHECK(fit == std::vector<double>{1, 2.5, 2.5, 4});
  CHECK(isotonic_fit({3, 2, 1}) == std::vector<double>{2, 2, 2});
  CHECK(isotonic_residual_fraction({1, 3, 2, 4}) == doctest::Approx(0.1));
  CHECK(isotonic_residual_fraction({1, 2, 2, 7}) == 0.0);
  CHECK(isotonic_residual_fraction({2, 2, 2}) == 0.0);
  CHECK(isotonic_residual_fraction({3, 2, 1}) == doctest::Approx(1.0));
}

TEST_CASE("isotonic fit is monotone and never worse than any constant") {
  std::mt19937_64 rng(51);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> y(1 + trial % 9);
    for (auto& v : y) v = n(rng);
    const auto f = isotonic_fit(y);
    REQUIRE(f.size() == y.size());
    for (std::size_t i = 1; i < f.size(); ++i) CHECK(f[i - 1] <= f[i] + 1e-12);
    const double frac = isotonic_residual_fraction(y);
    CHECK(frac >= 0.0);
    CHECK(frac <= 1.0 + 1e-12);
  }
}

TEST_CASE("arms") {
  ExperimentConfig c;
  CHECK(baseline_arm().label() == "baseline");
  CHECK(baseline_arm().key() == "baseline");
  CHECK(unguided_arm(c).key() == "unguided|largest|k1");
  const auto g = guided_arm(c, LossKind::ce, 12.5, ScheduleKind::late);
  CHECK(g.label() == "guided:ce:12.5:late");
  CHECK(g.spec.active());

  const auto arms = sweep_arms(c);
  std::set<std::string> keys;
  for (const auto& a : arms) CHECK(keys.insert(a.key()).second);
  CHECK(arms[0].kind == ArmKind::baseline);
  CHECK(arms[1].kind == ArmKind::unguided);
  CHECK(keys.count("guided:mcd:10:early|largest|k1"));
  CHECK(keys.count("guided:entropy:20:early|most_certain|k1"));
  CHECK(keys.count("guided:entropy:20:early|largest|k3"));
  CHECK(keys.count("guided:entropy:10:late|largest|k1"));
  CHECK(arms.size() == 2 + 3 * 2 + 1 + 1 + 2);
}

TEST_CASE("records round trip through JSON lines") {
  RunRecord r;
  r.config_hash = "abc";
  r.seed = 4;
  r.arm = "guided:entropy:5:early";
  r.selection = "most_certain";
  r.k = 3;
  r.ok = true;
  r.metrics = Metrics{0.5, 0.6, {0.9, std::nan("")}, {0.8, std::nan("")}, {10, 0}};
  r.wall_time = 1.25;
  r.trace = {6, 1, 0.3, 0.02};
  const auto back = record_from_json(to_jsonl(r));
  CHECK(back.arm == r.arm);
  CHECK(back.k == 3);
  CHECK(back.selection == "most_certain");
  REQUIRE(back.metrics);
  CHECK(back.metrics->miou == 0.5);
  CHECK(std::isnan(back.metrics->per_class_iou[1]));
  CHECK(back.trace.skipped_steps == 1);
  CHECK(to_jsonl(back) == to_jsonl(r));

  RunRecord failed;
  failed.arm = "unguided";
  failed.error = "boom";
  const auto fb = record_from_json(to_jsonl(failed));
  CHECK(!fb.ok);
  CHECK(!fb.metrics);
  CHECK(fb.error == "boom");
}

TEST_CASE("tiny pipeline: zero-strength guidance equals the unguided arm") {
  Lab lab(tiny_config());
  const auto base = run_pipeline(lab, baseline_arm(), 1);
  REQUIRE(base.ok);
  const auto plain = run_pipeline(lab, unguided_arm(lab.config()), 1);
  const auto zero = run_pipeline(lab, guided_arm(lab.config(), LossKind::entropy, 0.0, ScheduleKind::early), 1);
  REQUIRE(plain.ok);
  REQUIRE(zero.ok);
  CHECK(plain.metrics->miou == zero.metrics->miou);
  CHECK(plain.metrics->per_class_iou.size() == 5);
  CHECK(zero.trace.mean_grad_norm == 0.0);
  const auto guided = run_pipeline(lab, guided_arm(lab.config(), LossKind::entropy, 5.0, ScheduleKind::early), 1);
  REQUIRE(guided.ok);
  CHECK(guided.trace.chains == 3);
  CHECK(guided.trace.mean_grad_norm > 0.0);

  SceneConfig sc;
  auto data = gen_dataset(sc, 2);
  data[0].class_mask.values[0] = 9;
  lab.set_seed_data(7, {data, data, std::nullopt});
  const auto failed = run_pipeline(lab, baseline_arm(), 7);
  CHECK(!failed.ok);
  CHECK(!failed.error.empty());
}

TEST_CASE("tiny sweep: records, report and plots") {
  Lab lab(tiny_config());
  const auto log = scratch("sweep_log.jsonl");
  const auto rep = sweep(lab, &log);
  const auto arms = sweep_arms(lab.config());
  CHECK(rep.records.size() == 2 * arms.size());
  for (const auto& r : rep.records) CHECK(r.ok);
  std::ifstream in(log);
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  CHECK(lines == rep.records.size());
  std::filesystem::remove(log);
  CHECK(rep.curves.size() == 2 * 2);

  const auto text = render_report(rep);
  CHECK(text.find("baseline") != std::string::npos);
  CHECK(text.find("| strategy |") != std::string::npos);
  CHECK(text.find("Spearman") != std::string::npos);
  // Two seeds are too few for ordering claims.
  CHECK(text.find("ordering claims are withheld") != std::string::npos);

  const auto back = report_from_json(report_json(rep));
  CHECK(report_json(back) == report_json(rep));
  CHECK(render_report(back) == text);

  const auto dir = scratch("plots");
  const auto files = emit_plots(rep, dir);
  CHECK(!files.empty());
  for (const auto& f : files) CHECK(std::filesystem::file_size(f) > 0);
  for (const auto& p : rep.plots) {
    CHECK(plot_svg(p) == plot_svg(p));
    CHECK(plot_csv(p).rfind("series,x,y\n", 0) == 0);
  }
  std::filesystem::remove_all(dir);

  Report empty;
  CHECK_THROWS(emit_plots(empty, scratch("none")));
  auto hollow = rep;
  hollow.plots.front().series.front().points.clear();
  CHECK_THROWS(emit_plots(hollow, scratch("none")));
}

TEST_CASE("command line exit codes") {
  CHECK(run_cli({"--help"}) == 0);
  CHECK(run_cli({}) == 1);
  CHECK(run_cli({"frobnicate"}) == 1);
  CHECK(run_cli({"evaluate"}) == 1);
  CHECK(run_cli({"gen-data", "--out", scratch("x").string(), "--set", "nonsense"}) == 1);
  CHECK(run_cli({"gen-data", "--out", scratch("x").string(), "--set", "seg.steps=abc"}) == 1);
  CHECK(run_cli({"evaluate", "--model", "/nonexistent/m", "--data", "/nonexistent/d"}) == 2);

  const auto dir = scratch("cli");
  CHECK(run_cli({"gen-data", "--out", dir.string(), "--set", "data.train_size=2", "--set",
                 "data.test_size=2", "--seed", "3"}) == 0);
  CHECK(std::filesystem::exists(dir / "train" / "manifest.json"));
  CHECK(std::filesystem::exists(dir / "config.txt"));
  CHECK(run_cli({"train-seg", "--data", (dir / "train").string(), "--out", (dir / "seg.ckpt").string(),
                 "--set", "seg.steps=2", "--set", "seg.width=4"}) == 0);
  CHECK(run_cli({"evaluate", "--model", (dir / "seg.ckpt").string(), "--data", (dir / "test").string()}) ==
        0);
  std::filesystem::remove_all(dir);
}
