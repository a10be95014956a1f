#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "glab/diffusion.hpp"
#include "glab/guidance.hpp"
#include "glab/scenes.hpp"
#include "glab/segmentation.hpp"

namespace glab {

/// Everything a sweep needs. Text form is flat `key = value` lines with
/// dotted keys; list values are comma separated.
struct ExperimentConfig {
  // data
  SceneConfig scene;
  std::size_t train_size = 600;
  std::size_t test_size = 200;
  std::size_t pretrain_size = 600;  // separate split the denoiser learns from

  // diffusion
  std::size_t diffusion_steps = 40;
  double beta_start = 1e-3;
  double beta_end = 0.25;
  DenoiserConfig denoiser{.width = 32, .time_features = 16};
  DenoiserTrainConfig denoiser_train{.steps = 6000, .object_weight = 10.0};
  double cfg_weight = 1.0;
  std::size_t gen_batch = 16;

  // segmentation
  SegModelConfig seg;
  SegTrainConfig seg_train;

  // guidance; loss and eta drive single `generate` runs, the lists drive sweeps
  LossKind loss = LossKind::entropy;
  double eta = 20.0;
  std::vector<LossKind> losses{LossKind::entropy, LossKind::ce, LossKind::mcd};
  std::vector<double> etas{10.0, 20.0};
  ScheduleKind schedule = ScheduleKind::early;
  std::vector<ScheduleKind> schedules{ScheduleKind::early, ScheduleKind::late};
  std::size_t mc_n = 4;
  bool backprop_through_denoiser = false;

  // selection
  SelectionStrategy selection = SelectionStrategy::largest;
  std::size_t k = 1;

  // ablations (loss entropy unless stated)
  double ablation_eta = 20.0;
  bool ablate_selection = true;
  std::size_t ablation_k = 3;  // 0 disables the object-count ablation
  bool ablate_schedule = true;

  // uncertainty-vs-strength curves
  std::vector<LossKind> curve_losses{LossKind::entropy, LossKind::ce, LossKind::mcd};
  std::vector<double> curve_etas{0.0, 5.0, 10.0, 20.0, 40.0};
  std::size_t curve_images = 16;

  // run control
  std::uint64_t seed = 0;  // denoiser and its pretraining split
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::size_t workers = 1;

  void set(const std::string& key, const std::string& value);
  void validate() const;
  /// Canonical text form; parse(dump()) round-trips.
  std::string dump() const;
  std::string hash() const;
  std::vector<std::string> keys() const;

  static ExperimentConfig parse(const std::string& text);
  /// "default" yields the built-in defaults; anything else is a file path.
  static ExperimentConfig load(const std::string& source);
};

enum class ArmKind { baseline, unguided, guided };

struct Arm {
  ArmKind kind = ArmKind::baseline;
  GuidanceSpec spec;  // used by guided arms
  SelectionStrategy selection = SelectionStrategy::largest;
  std::size_t k = 1;

  /// baseline | unguided | guided:loss:eta:schedule
  std::string label() const;
  /// label plus selection and object count; unique within a sweep.
  std::string key() const;
};

Arm baseline_arm();
Arm unguided_arm(const ExperimentConfig& cfg);
Arm guided_arm(const ExperimentConfig& cfg, LossKind loss, double eta, ScheduleKind schedule);

struct TraceSummary {
  std::size_t chains = 0;
  std::size_t skipped_steps = 0;
  double mean_final_loss = 0.0;  // guidance loss at the last step, mean over chains
  double mean_grad_norm = 0.0;   // over all guided steps
};

struct RunRecord {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string arm;  // label
  std::string selection;
  std::size_t k = 1;
  bool ok = false;
  std::string error;
  std::optional<Metrics> metrics;  // empty when the run failed
  double wall_time = 0.0;
  TraceSummary trace;
};

std::string to_jsonl(const RunRecord& r);
RunRecord record_from_json(const std::string& line);

/// Shared state for a sweep: the pretrained denoiser plus per-seed data and
/// real-data models, built lazily.
class Lab {
 public:
  explicit Lab(ExperimentConfig cfg);

  const ExperimentConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const ConditionalDenoiser& denoiser();
  void set_denoiser(ConditionalDenoiser d);

  struct SeedData {
    std::vector<SceneSample> train;
    std::vector<SceneSample> test;
    std::optional<SegmentationModel> baseline;  // trained on real data only; also the scorer
  };
  SeedData& seed_data(std::uint64_t seed);
  /// Replaces the generated data (and optionally the scorer) for one seed.
  void set_seed_data(std::uint64_t seed, SeedData data);

  /// One synthetic counterpart per training image: the selected instances
  /// redrawn by the (guided) sampler and composited back.
  struct Augmentation {
    std::vector<SceneSample> samples;
    TraceSummary trace;
  };
  Augmentation augment(const Arm& arm, std::uint64_t seed, std::vector<std::string>* trace_lines = nullptr);

 private:
  ExperimentConfig cfg_;
  NoiseSchedule schedule_;
  std::optional<ConditionalDenoiser> denoiser_;
  std::map<std::uint64_t, SeedData> seeds_;
  std::mutex mutex_;
};

/// Train scorer, generate, retrain from scratch, evaluate. Stage failures
/// are captured in the record (ok = false, no metrics).
RunRecord run_pipeline(Lab& lab, const Arm& arm, std::uint64_t seed);
RunRecord run_pipeline(const ExperimentConfig& cfg, const Arm& arm, std::uint64_t seed);

/// Arms a sweep runs for every seed, in execution order.
std::vector<Arm> sweep_arms(const ExperimentConfig& cfg);

struct CurvePoint {
  LossKind loss;
  std::uint64_t seed;
  double eta;
  double uncertainty;  // mean over curve images of the loss's own metric
};

/// Uncertainty of generated objects against guidance strength for one seed.
std::vector<CurvePoint> uncertainty_curves(Lab& lab, std::uint64_t seed);

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

struct PlotSpec {
  std::string id;  // file stem
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
};

struct Report {
  std::string config_hash;
  std::vector<std::uint64_t> seeds;
  std::vector<RunRecord> records;
  std::vector<CurvePoint> curves;
  std::vector<PlotSpec> plots;
};

/// Runs every arm for every seed plus the curves. `log_path`, when set,
/// receives one line per record as runs finish.
Report sweep(Lab& lab, const std::filesystem::path* log_path = nullptr);

// statistics used by the report
double median(std::vector<double> v);
double spearman(const std::vector<double>& x, const std::vector<double>& y);
/// Pool-adjacent-violators fit of a non-decreasing sequence.
std::vector<double> isotonic_fit(const std::vector<double>& y);
/// Residual sum of squares around the isotonic fit divided by the total
/// sum of squares about the mean; 0 for a constant sequence.
double isotonic_residual_fraction(const std::vector<double>& y);

/// Per-seed Spearman rho of (eta, uncertainty) for one loss.
std::vector<double> curve_spearman(const Report& r, LossKind loss);
std::vector<double> curve_residuals(const Report& r, LossKind loss);

/// Best eta per guided loss (by median mIoU over seeds) among main-grid arms.
std::optional<double> best_eta(const Report& r, LossKind loss, ScheduleKind schedule,
                               SelectionStrategy selection, std::size_t k);
/// Median mIoU over seeds of one arm key; nullopt if any seed failed or is missing.
std::optional<double> median_miou(const Report& r, const std::string& arm_key);

constexpr std::size_t kMinSeedsForClaims = 5;

/// Markdown tables for the main comparison and every ablation.
std::string render_report(const Report& r);
std::string report_json(const Report& r);
Report report_from_json(const std::string& text);

/// Writes <id>.csv and <id>.svg per plot; the SVG is drawn from the same
/// points as the CSV. Throws on an empty report or empty series.
std::vector<std::filesystem::path> emit_plots(const Report& r, const std::filesystem::path& dir);
std::string plot_csv(const PlotSpec& p);
std::string plot_svg(const PlotSpec& p);

/// Command-line entry; returns the process exit code.
int cli(int argc, const char* const* argv);

}  // namespace glab
