#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "glab/harness.hpp"
#include "glab/rng.hpp"

namespace glab {

namespace {

namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config = "default";
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool seed = true) {
  cmd->add_option("--config", c.config, "config file, or 'default'");
  cmd->add_option("--set", c.sets, "override, key=value (repeatable)");
  if (seed) cmd->add_option("--seed", c.seed, "seed for all randomness of this command");
}

ExperimentConfig load_config(const Common& c) {
  auto cfg = ExperimentConfig::load(c.config);
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    try {
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  cfg.seg.num_classes = cfg.scene.num_classes;
  cfg.denoiser_train.num_classes = cfg.scene.num_classes;
  return cfg;
}

SegmentationModel load_seg(const fs::path& path, const ExperimentConfig& cfg) {
  const auto tensors = load_checkpoint(path);
  SegModelConfig mc = cfg.seg;
  mc.width = find_tensor(tensors, "block0.weight").shape().at(0);
  mc.num_classes = find_tensor(tensors, "head.weight").shape().at(0);
  SegmentationModel model(mc, 0);
  model.load(tensors);
  return model;
}

ConditionalDenoiser load_denoiser(const fs::path& path, const ExperimentConfig& cfg) {
  const auto tensors = load_checkpoint(path);
  DenoiserConfig dc;
  dc.width = find_tensor(tensors, "in.w").shape().at(0);
  dc.time_features = find_tensor(tensors, "time.w1").shape().at(0);
  ConditionalDenoiser model(dc, cfg.diffusion_steps, 0);
  model.load(tensors);
  return model;
}

std::string metrics_json(const Metrics& m) {
  nlohmann::json j{{"miou", m.miou}, {"macc", m.macc}, {"support", m.support}};
  for (const auto* name : {"per_class_iou", "per_class_acc"}) {
    const auto& v = std::string(name) == "per_class_iou" ? m.per_class_iou : m.per_class_acc;
    auto arr = nlohmann::json::array();
    for (double x : v) arr.push_back(std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr));
    j[name] = arr;
  }
  return j.dump();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

/// Train/test splits exactly as a sweep builds them for `seed`.
std::pair<std::vector<SceneSample>, std::vector<SceneSample>> make_splits(const ExperimentConfig& cfg,
                                                                          std::uint64_t seed) {
  auto scene = cfg.scene;
  scene.seed = mix_seed(seed, 0xda7a);
  auto all = gen_dataset(scene, cfg.train_size + cfg.test_size);
  std::vector<SceneSample> test(std::make_move_iterator(all.begin() + long(cfg.train_size)),
                                std::make_move_iterator(all.end()));
  all.resize(cfg.train_size);
  return {std::move(all), std::move(test)};
}

}  // namespace

int cli(int argc, const char* const* argv) {
  CLI::App app{"glab: active-learning-guided diffusion lab"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  Common gen_c, diff_c, seg_c, generate_c, eval_c, sweep_c, plot_c;

  auto* gen = app.add_subcommand("gen-data", "generate train/test scene datasets");
  add_common(gen, gen_c);
  gen->add_option("--out", gen_c.out, "output directory")->required();

  std::string diff_data;
  auto* diff = app.add_subcommand("train-diff", "train the conditional denoiser");
  add_common(diff, diff_c);
  diff->add_option("--data", diff_data, "dataset directory (default: a fresh pretraining split)");
  diff->add_option("--out", diff_c.out, "checkpoint path")->required();

  std::string seg_data, seg_synth, seg_test;
  auto* seg = app.add_subcommand("train-seg", "train a segmentation model from scratch");
  add_common(seg, seg_c);
  seg->add_option("--data", seg_data, "training dataset directory")->required();
  seg->add_option("--synthetic", seg_synth, "synthetic counterparts, aligned with --data");
  seg->add_option("--test", seg_test, "dataset to evaluate on after training");
  seg->add_option("--out", seg_c.out, "checkpoint path")->required();

  std::string g_loss, g_schedule, g_data, g_denoiser, g_scorer, g_selection;
  std::optional<double> g_eta;
  std::optional<std::size_t> g_k;
  auto* generate = app.add_subcommand("generate", "write one augmented dataset");
  add_common(generate, generate_c);
  generate->add_option("--loss", g_loss, "none|entropy|ce|mcd");
  generate->add_option("--eta", g_eta, "guidance strength");
  generate->add_option("--schedule", g_schedule, "constant|early|late");
  generate->add_option("--selection", g_selection, "largest|most_certain");
  generate->add_option("--k", g_k, "objects redrawn per image");
  generate->add_option("--data", g_data, "real dataset directory (default: generated from --seed)");
  generate->add_option("--denoiser", g_denoiser, "denoiser checkpoint (default: trained now)");
  generate->add_option("--scorer", g_scorer, "segmentation checkpoint (default: trained now)");
  generate->add_option("--out", generate_c.out, "output dataset directory")->default_val("augmented");

  std::string e_model, e_data;
  auto* eval = app.add_subcommand("evaluate", "evaluate a segmentation checkpoint");
  add_common(eval, eval_c, false);
  eval->add_option("--model", e_model, "segmentation checkpoint")->required();
  eval->add_option("--data", e_data, "dataset directory")->required();

  auto* sw = app.add_subcommand("sweep", "run all arms over all seeds and write the report");
  add_common(sw, sweep_c);
  sw->add_option("--out", sweep_c.out, "output directory")->default_val("sweep_out");
  std::string sw_denoiser;
  sw->add_option("--denoiser", sw_denoiser, "denoiser checkpoint (default: trained now and saved)");

  std::string p_report;
  auto* plot = app.add_subcommand("plot", "redraw plots from a report");
  plot->add_option("--report", p_report, "report.json written by sweep")->required();
  plot->add_option("--out", plot_c.out, "plot directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* scope = &app;
    for (auto* sub : app.get_subcommands()) scope = sub;
    std::cerr << scope->help();
    return 1;
  }

  try {
    if (gen->parsed()) {
      auto cfg = load_config(gen_c);
      const auto seed = gen_c.seed.value_or(0);
      auto [train, test] = make_splits(cfg, seed);
      const fs::path out = gen_c.out;
      save_dataset(out / "train", train, "train split, seed " + std::to_string(seed));
      save_dataset(out / "test", test, "test split, seed " + std::to_string(seed));
      write_text(out / "config.txt", cfg.dump());
      std::cout << "wrote " << train.size() << " train and " << test.size() << " test scenes to "
                << out << "\n";
    } else if (diff->parsed()) {
      auto cfg = load_config(diff_c);
      if (diff_c.seed) cfg.seed = *diff_c.seed;
      Lab lab(cfg);
      std::vector<SceneSample> data;
      if (!diff_data.empty()) {
        data = load_dataset(diff_data);
      } else {
        auto scene = cfg.scene;
        scene.seed = mix_seed(cfg.seed, 0x9e7);
        data = gen_dataset(scene, cfg.pretrain_size);
      }
      std::vector<double> losses;
      const auto model = train_denoiser(data, lab.schedule(), cfg.denoiser, cfg.denoiser_train,
                                        mix_seed(cfg.seed, 0xd1f), &losses);
      if (fs::path(diff_c.out).has_parent_path()) fs::create_directories(fs::path(diff_c.out).parent_path());
      save_checkpoint(diff_c.out, model.named_parameters());
      std::cout << "denoiser trained on " << data.size() << " scenes, final loss "
                << (losses.empty() ? 0.0 : losses.back()) << "\n";
    } else if (seg->parsed()) {
      auto cfg = load_config(seg_c);
      const auto data = load_dataset(seg_data);
      std::optional<std::vector<SceneSample>> synth;
      if (!seg_synth.empty()) synth = load_dataset(seg_synth);
      const auto model = train_seg(cfg.seg, data, synth ? &*synth : nullptr, cfg.seg_train,
                                   mix_seed(seg_c.seed.value_or(0), 0x5e9));
      if (fs::path(seg_c.out).has_parent_path()) fs::create_directories(fs::path(seg_c.out).parent_path());
      save_checkpoint(seg_c.out, model.named_parameters());
      if (!seg_test.empty()) std::cout << metrics_json(evaluate(model, load_dataset(seg_test))) << "\n";
    } else if (generate->parsed()) {
      auto cfg = load_config(generate_c);
      const auto seed = generate_c.seed.value_or(0);
      if (!g_loss.empty()) cfg.loss = parse_loss(g_loss);
      if (g_eta) cfg.eta = *g_eta;
      if (!g_schedule.empty()) cfg.schedule = parse_schedule(g_schedule);
      if (!g_selection.empty()) cfg.selection = parse_selection(g_selection);
      if (g_k) cfg.k = *g_k;
      Lab lab(cfg);
      if (!g_denoiser.empty()) lab.set_denoiser(load_denoiser(g_denoiser, cfg));
      if (!g_data.empty() || !g_scorer.empty()) {
        Lab::SeedData sd;
        if (!g_data.empty()) {
          sd.train = load_dataset(g_data);
        } else {
          sd.train = make_splits(cfg, seed).first;
        }
        if (!g_scorer.empty()) sd.baseline = load_seg(g_scorer, cfg);
        lab.set_seed_data(seed, std::move(sd));
      }
      Arm arm = cfg.loss == LossKind::none || cfg.eta == 0.0
                    ? unguided_arm(cfg)
                    : guided_arm(cfg, cfg.loss, cfg.eta, cfg.schedule);
      std::vector<std::string> trace;
      const auto aug = lab.augment(arm, seed, &trace);
      const fs::path out = generate_c.out;
      save_dataset(out, aug.samples, arm.key() + ", seed " + std::to_string(seed));
      std::string lines;
      for (const auto& l : trace) lines += l + "\n";
      write_text(out / "trace.jsonl", lines);
      std::cout << "wrote " << aug.samples.size() << " augmented scenes (" << arm.label() << ") to "
                << out << "\n";
    } else if (eval->parsed()) {
      auto cfg = load_config(eval_c);
      const auto model = load_seg(e_model, cfg);
      std::cout << metrics_json(evaluate(model, load_dataset(e_data))) << "\n";
    } else if (sw->parsed()) {
      auto cfg = load_config(sweep_c);
      if (sweep_c.seed) cfg.seed = *sweep_c.seed;
      Lab lab(cfg);
      const fs::path out = sweep_c.out;
      fs::create_directories(out);
      write_text(out / "config.txt", cfg.dump());
      if (!sw_denoiser.empty()) {
        lab.set_denoiser(load_denoiser(sw_denoiser, cfg));
      } else {
        save_checkpoint(out / "denoiser.ckpt", lab.denoiser().named_parameters());
      }
      const auto log = out / "results.jsonl";
      fs::remove(log);
      const auto report = sweep(lab, &log);
      write_text(out / "report.json", report_json(report));
      write_text(out / "report.md", render_report(report));
      emit_plots(report, out / "plots");
      std::cout << render_report(report);
    } else if (plot->parsed()) {
      std::ifstream in(p_report);
      if (!in) throw std::runtime_error("cannot open " + p_report);
      std::stringstream ss;
      ss << in.rdbuf();
      for (const auto& p : emit_plots(report_from_json(ss.str()), plot_c.out)) {
        std::cout << p.string() << "\n";
      }
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace glab
