#include "glab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "glab/rng.hpp"

namespace glab {

using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fixed(double v, int digits) {
  if (!std::isfinite(v)) return "n/a";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, digits);
  return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(trim(cur));
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  auto res = std::from_chars(v.data(), end, out);
  if (res.ec != std::errc() || res.ptr != end || v.empty()) {
    throw std::invalid_argument("config: " + key + " expects a number, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto res = std::from_chars(v.data(), end, out);
  if (res.ec != std::errc() || res.ptr != end || v.empty()) {
    throw std::invalid_argument("config: " + key + " expects a non-negative integer, got '" + v +
                                "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: " + key + " expects true or false, got '" + v + "'");
}

template <typename T, typename F>
std::string join(const std::vector<T>& v, F&& f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += f(v[i]);
  }
  return out;
}

template <typename T, typename F>
std::vector<T> parse_list(const std::string& v, F&& f) {
  std::vector<T> out;
  if (trim(v).empty()) return out;
  for (const auto& item : split(v, ',')) out.push_back(f(item));
  return out;
}

struct Field {
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

std::vector<Field> fields(ExperimentConfig& c) {
  std::vector<Field> f;
  auto sz = [&f](const std::string& key, std::size_t& ref) {
    f.push_back({key, [&ref] { return std::to_string(ref); },
                 [&ref, key](const std::string& v) { ref = to_uint(key, v); }});
  };
  auto u64 = [&f](const std::string& key, std::uint64_t& ref) {
    f.push_back({key, [&ref] { return std::to_string(ref); },
                 [&ref, key](const std::string& v) { ref = to_uint(key, v); }});
  };
  auto num = [&f](const std::string& key, double& ref) {
    f.push_back({key, [&ref] { return fmt(ref); },
                 [&ref, key](const std::string& v) { ref = to_double(key, v); }});
  };
  auto flag = [&f](const std::string& key, bool& ref) {
    f.push_back({key, [&ref] { return std::string(ref ? "true" : "false"); },
                 [&ref, key](const std::string& v) { ref = to_bool(key, v); }});
  };
  auto losses = [&f](const std::string& key, std::vector<LossKind>& ref) {
    f.push_back({key, [&ref] { return join(ref, [](LossKind k) { return to_string(k); }); },
                 [&ref](const std::string& v) { ref = parse_list<LossKind>(v, parse_loss); }});
  };
  auto numbers = [&f](const std::string& key, std::vector<double>& ref) {
    f.push_back({key, [&ref] { return join(ref, [](double x) { return fmt(x); }); },
                 [&ref, key](const std::string& v) {
                   ref = parse_list<double>(v, [&](const std::string& s) { return to_double(key, s); });
                 }});
  };

  sz("scene.num_classes", c.scene.num_classes);
  sz("scene.image_size", c.scene.image_size);
  sz("scene.min_objects", c.scene.min_objects);
  sz("scene.max_objects", c.scene.max_objects);
  num("scene.min_radius", c.scene.min_radius);
  num("scene.max_radius", c.scene.max_radius);
  num("scene.min_contrast", c.scene.min_contrast);
  num("scene.max_contrast", c.scene.max_contrast);
  num("scene.contrast_margin", c.scene.contrast_margin);
  num("scene.texture", c.scene.texture_amplitude);
  num("scene.noise", c.scene.noise_std);
  sz("data.train_size", c.train_size);
  sz("data.test_size", c.test_size);
  sz("data.pretrain_size", c.pretrain_size);
  sz("diffusion.steps", c.diffusion_steps);
  num("diffusion.beta_start", c.beta_start);
  num("diffusion.beta_end", c.beta_end);
  sz("diffusion.width", c.denoiser.width);
  sz("diffusion.time_features", c.denoiser.time_features);
  sz("diffusion.train_steps", c.denoiser_train.steps);
  sz("diffusion.batch", c.denoiser_train.batch);
  num("diffusion.lr", c.denoiser_train.lr);
  num("diffusion.cond_drop_prob", c.denoiser_train.cond_drop_prob);
  num("diffusion.object_weight", c.denoiser_train.object_weight);
  num("diffusion.w", c.cfg_weight);
  sz("diffusion.gen_batch", c.gen_batch);
  sz("seg.width", c.seg.width);
  num("seg.dropout", c.seg.dropout);
  sz("seg.steps", c.seg_train.steps);
  sz("seg.batch", c.seg_train.batch);
  num("seg.lr", c.seg_train.lr);
  num("seg.weight_decay", c.seg_train.weight_decay);
  num("seg.p_aug", c.seg_train.p_aug);
  num("seg.background_weight", c.seg_train.background_weight);
  f.push_back({"guidance.loss", [&c] { return to_string(c.loss); },
               [&c](const std::string& v) { c.loss = parse_loss(v); }});
  num("guidance.eta", c.eta);
  losses("guidance.losses", c.losses);
  numbers("guidance.etas", c.etas);
  f.push_back({"guidance.schedule", [&c] { return to_string(c.schedule); },
               [&c](const std::string& v) { c.schedule = parse_schedule(v); }});
  f.push_back({"guidance.schedules",
               [&c] { return join(c.schedules, [](ScheduleKind k) { return to_string(k); }); },
               [&c](const std::string& v) {
                 c.schedules = parse_list<ScheduleKind>(v, parse_schedule);
               }});
  sz("guidance.mc_n", c.mc_n);
  flag("guidance.backprop_through_denoiser", c.backprop_through_denoiser);
  f.push_back({"selection.strategy", [&c] { return to_string(c.selection); },
               [&c](const std::string& v) { c.selection = parse_selection(v); }});
  sz("selection.k", c.k);
  num("ablation.eta", c.ablation_eta);
  flag("ablation.selection", c.ablate_selection);
  sz("ablation.k", c.ablation_k);
  flag("ablation.schedule", c.ablate_schedule);
  losses("curves.losses", c.curve_losses);
  numbers("curves.etas", c.curve_etas);
  sz("curves.images", c.curve_images);
  u64("run.seed", c.seed);
  f.push_back({"run.seeds", [&c] { return join(c.seeds, [](std::uint64_t s) { return std::to_string(s); }); },
               [&c](const std::string& v) {
                 c.seeds = parse_list<std::uint64_t>(v, [](const std::string& s) {
                   return to_uint("run.seeds", s);
                 });
               }});
  sz("run.workers", c.workers);
  return f;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// config

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  for (auto& f : fields(*this)) {
    if (f.key == key) {
      f.set(trim(value));
      return;
    }
  }
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

std::vector<std::string> ExperimentConfig::keys() const {
  auto copy = *this;
  std::vector<std::string> out;
  for (auto& f : fields(copy)) out.push_back(f.key);
  return out;
}

void ExperimentConfig::validate() const {
  scene.validate();
  if (train_size == 0 || test_size == 0) throw std::invalid_argument("config: empty data split");
  if (pretrain_size == 0) throw std::invalid_argument("config: data.pretrain_size must be >= 1");
  if (diffusion_steps == 0) throw std::invalid_argument("config: diffusion.steps must be >= 1");
  if (gen_batch == 0) throw std::invalid_argument("config: diffusion.gen_batch must be >= 1");
  if (seg.num_classes != scene.num_classes) {
    throw std::invalid_argument("config: segmentation and scene class counts differ");
  }
  if (losses.empty() || etas.empty() || schedules.empty() || seeds.empty()) {
    throw std::invalid_argument("config: guidance.losses, guidance.etas, guidance.schedules and "
                                "run.seeds must be nonempty");
  }
  if (curve_losses.empty() || curve_etas.empty() || curve_images == 0) {
    throw std::invalid_argument("config: curve grids must be nonempty");
  }
  for (auto l : losses) {
    if (l == LossKind::none) throw std::invalid_argument("config: 'none' is not a guided loss");
  }
  for (auto l : curve_losses) {
    if (l == LossKind::none) throw std::invalid_argument("config: 'none' is not a guided loss");
  }
  for (double e : etas) {
    if (!(e > 0.0) || !std::isfinite(e)) {
      throw std::invalid_argument("config: guidance.etas must be finite and > 0");
    }
  }
  for (double e : curve_etas) {
    if (!(e >= 0.0) || !std::isfinite(e)) {
      throw std::invalid_argument("config: curves.etas must be finite and >= 0");
    }
  }
  if (!(eta >= 0.0) || !(ablation_eta > 0.0)) {
    throw std::invalid_argument("config: guidance.eta must be >= 0 and ablation.eta > 0");
  }
  if (mc_n < 2) throw std::invalid_argument("config: guidance.mc_n must be >= 2");
  if (k == 0) throw std::invalid_argument("config: selection.k must be >= 1");
  if (workers == 0) throw std::invalid_argument("config: run.workers must be >= 1");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw std::invalid_argument("config: run.seeds must be distinct");
  }
  if (seg_train.p_aug < 0.0 || seg_train.p_aug > 1.0) {
    throw std::invalid_argument("config: seg.p_aug must be in [0,1]");
  }
  if (denoiser_train.cond_drop_prob < 0.0 || denoiser_train.cond_drop_prob > 1.0) {
    throw std::invalid_argument("config: diffusion.cond_drop_prob must be in [0,1]");
  }
  if (!(denoiser_train.object_weight >= 1.0)) {
    throw std::invalid_argument("config: diffusion.object_weight must be >= 1");
  }
}

std::string ExperimentConfig::dump() const {
  auto copy = *this;
  std::string out;
  for (auto& f : fields(copy)) out += f.key + " = " + f.get() + "\n";
  return out;
}

std::string ExperimentConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(dump())));
  return buf;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  cfg.seg.num_classes = cfg.scene.num_classes;
  cfg.denoiser_train.num_classes = cfg.scene.num_classes;
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& source) {
  if (source == "default") return ExperimentConfig{};
  std::ifstream in(source);
  if (!in) throw std::runtime_error("config: cannot open " + source);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

// ---------------------------------------------------------------------------
// arms and records

std::string Arm::label() const {
  switch (kind) {
    case ArmKind::baseline: return "baseline";
    case ArmKind::unguided: return "unguided";
    case ArmKind::guided:
      return "guided:" + to_string(spec.loss) + ":" + fmt(spec.eta) + ":" +
             to_string(spec.schedule);
  }
  return "?";
}

std::string Arm::key() const {
  if (kind == ArmKind::baseline) return label();
  return label() + "|" + to_string(selection) + "|k" + std::to_string(k);
}

Arm baseline_arm() { return Arm{}; }

Arm unguided_arm(const ExperimentConfig& cfg) {
  Arm a;
  a.kind = ArmKind::unguided;
  a.selection = cfg.selection;
  a.k = cfg.k;
  return a;
}

Arm guided_arm(const ExperimentConfig& cfg, LossKind loss, double eta, ScheduleKind schedule) {
  Arm a = unguided_arm(cfg);
  a.kind = ArmKind::guided;
  a.spec.loss = loss;
  a.spec.eta = eta;
  a.spec.schedule = schedule;
  a.spec.mc_n = cfg.mc_n;
  a.spec.backprop_through_denoiser = cfg.backprop_through_denoiser;
  return a;
}

namespace {

json nan_to_null(const std::vector<double>& v) {
  json out = json::array();
  for (double x : v) out.push_back(std::isfinite(x) ? json(x) : json(nullptr));
  return out;
}

std::vector<double> null_to_nan(const json& j) {
  std::vector<double> out;
  for (const auto& x : j) {
    out.push_back(x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>());
  }
  return out;
}

json record_json(const RunRecord& r) {
  json j{{"config_hash", r.config_hash}, {"seed", r.seed},   {"arm", r.arm},
         {"selection", r.selection},     {"k", r.k},         {"ok", r.ok},
         {"error", r.error},             {"wall_time", r.wall_time},
         {"trace",
          {{"chains", r.trace.chains},
           {"skipped_steps", r.trace.skipped_steps},
           {"mean_final_loss", r.trace.mean_final_loss},
           {"mean_grad_norm", r.trace.mean_grad_norm}}}};
  if (r.metrics) {
    j["metrics"] = {{"miou", r.metrics->miou},
                    {"macc", r.metrics->macc},
                    {"per_class_iou", nan_to_null(r.metrics->per_class_iou)},
                    {"per_class_acc", nan_to_null(r.metrics->per_class_acc)},
                    {"support", r.metrics->support}};
  } else {
    j["metrics"] = nullptr;
  }
  return j;
}

RunRecord record_from(const json& j) {
  RunRecord r;
  r.config_hash = j.at("config_hash").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.arm = j.at("arm").get<std::string>();
  r.selection = j.at("selection").get<std::string>();
  r.k = j.at("k").get<std::size_t>();
  r.ok = j.at("ok").get<bool>();
  r.error = j.at("error").get<std::string>();
  r.wall_time = j.at("wall_time").get<double>();
  const auto& t = j.at("trace");
  r.trace.chains = t.at("chains").get<std::size_t>();
  r.trace.skipped_steps = t.at("skipped_steps").get<std::size_t>();
  r.trace.mean_final_loss = t.at("mean_final_loss").get<double>();
  r.trace.mean_grad_norm = t.at("mean_grad_norm").get<double>();
  if (!j.at("metrics").is_null()) {
    const auto& m = j.at("metrics");
    Metrics met;
    met.miou = m.at("miou").get<double>();
    met.macc = m.at("macc").get<double>();
    met.per_class_iou = null_to_nan(m.at("per_class_iou"));
    met.per_class_acc = null_to_nan(m.at("per_class_acc"));
    met.support = m.at("support").get<std::vector<std::size_t>>();
    r.metrics = met;
  }
  return r;
}

std::string record_key(const RunRecord& r) {
  if (r.arm == "baseline") return r.arm;
  return r.arm + "|" + r.selection + "|k" + std::to_string(r.k);
}

}  // namespace

std::string to_jsonl(const RunRecord& r) { return record_json(r).dump(); }

RunRecord record_from_json(const std::string& line) { return record_from(json::parse(line)); }

// ---------------------------------------------------------------------------
// lab

Lab::Lab(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.seg.num_classes = cfg_.scene.num_classes;
  cfg_.denoiser_train.num_classes = cfg_.scene.num_classes;
  cfg_.validate();
  schedule_ = build_schedule(cfg_.diffusion_steps, cfg_.beta_start, cfg_.beta_end);
}

const ConditionalDenoiser& Lab::denoiser() {
  std::lock_guard lock(mutex_);
  if (!denoiser_) {
    auto scene = cfg_.scene;
    scene.seed = mix_seed(cfg_.seed, 0x9e7);
    const auto data = gen_dataset(scene, cfg_.pretrain_size);
    denoiser_ = train_denoiser(data, schedule_, cfg_.denoiser, cfg_.denoiser_train,
                               mix_seed(cfg_.seed, 0xd1f));
  }
  return *denoiser_;
}

void Lab::set_denoiser(ConditionalDenoiser d) {
  std::lock_guard lock(mutex_);
  if (d.num_steps() != cfg_.diffusion_steps) {
    throw std::invalid_argument("denoiser was trained for a different number of steps");
  }
  denoiser_ = std::move(d);
}

Lab::SeedData& Lab::seed_data(std::uint64_t seed) {
  SeedData* sd = nullptr;
  {
    std::lock_guard lock(mutex_);
    sd = &seeds_[seed];
  }
  if (sd->train.empty()) {
    auto scene = cfg_.scene;
    scene.seed = mix_seed(seed, 0xda7a);
    auto all = gen_dataset(scene, cfg_.train_size + cfg_.test_size);
    sd->test.assign(std::make_move_iterator(all.begin() + static_cast<long>(cfg_.train_size)),
                    std::make_move_iterator(all.end()));
    all.resize(cfg_.train_size);
    sd->train = std::move(all);
  }
  if (!sd->baseline) {
    sd->baseline = train_seg(cfg_.seg, sd->train, nullptr, cfg_.seg_train, mix_seed(seed, 0x5e9));
  }
  return *sd;
}

void Lab::set_seed_data(std::uint64_t seed, SeedData data) {
  if (data.train.empty()) throw std::invalid_argument("set_seed_data: empty training set");
  std::lock_guard lock(mutex_);
  seeds_[seed] = std::move(data);
}

namespace {

struct ChainPlan {
  std::size_t image;
  Instance instance;
  std::uint64_t seed;
};

/// Runs the planned chains in batches and returns one generated image per chain.
std::vector<Tensor> run_chains(const ConditionalDenoiser& denoiser, const SegmentationModel& scorer,
                               const std::vector<SceneSample>& samples,
                               const std::vector<ChainPlan>& plan, const GuidanceSpec& spec,
                               const NoiseSchedule& s, double w, std::size_t batch,
                               std::size_t num_classes, std::uint64_t mask_seed,
                               std::vector<std::vector<StepTrace>>* trace) {
  std::vector<Tensor> out;
  for (std::size_t start = 0, chunk = 0; start < plan.size(); start += batch, ++chunk) {
    const auto end = std::min(plan.size(), start + batch);
    std::vector<GuidanceTarget> targets;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = start; i < end; ++i) {
      const auto& sample = samples[plan[i].image];
      targets.push_back({make_condition(sample, plan[i].instance, num_classes), sample.class_mask});
      seeds.push_back(plan[i].seed);
    }
    const GuidedBatch gb(std::move(targets), num_classes);
    auto result = generate_guided(denoiser, scorer, gb, spec, s, w, seeds,
                                  mix_seed(mask_seed, chunk));
    const auto& shape = result.images.shape();
    const auto per = shape[1] * shape[2] * shape[3];
    for (std::size_t b = 0; b < gb.size(); ++b) {
      const auto d = result.images.data().subspan(b * per, per);
      out.emplace_back(Shape{shape[1], shape[2], shape[3]}, std::vector<double>(d.begin(), d.end()));
    }
    if (trace) {
      for (auto& t : result.trace) trace->push_back(std::move(t));
    }
  }
  return out;
}

std::uint64_t chain_seed(std::uint64_t seed, std::size_t image, std::size_t slot) {
  return mix_seed(mix_seed(seed, 0xc4a1), (static_cast<std::uint64_t>(image) << 8) | slot);
}

TraceSummary summarize(const std::vector<std::vector<StepTrace>>& trace) {
  TraceSummary t;
  t.chains = trace.size();
  double final_loss = 0.0, grad_norm = 0.0;
  std::size_t guided = 0;
  for (const auto& chain : trace) {
    if (!chain.empty()) final_loss += chain.back().loss;
    for (const auto& e : chain) {
      if (e.skipped) ++t.skipped_steps;
      if (e.eta_t > 0.0 && !e.skipped) {
        grad_norm += e.grad_norm;
        ++guided;
      }
    }
  }
  t.mean_final_loss = trace.empty() ? 0.0 : final_loss / static_cast<double>(trace.size());
  t.mean_grad_norm = guided ? grad_norm / static_cast<double>(guided) : 0.0;
  return t;
}

}  // namespace

Lab::Augmentation Lab::augment(const Arm& arm, std::uint64_t seed,
                               std::vector<std::string>* trace_lines) {
  if (arm.kind == ArmKind::baseline) throw std::invalid_argument("augment: baseline has no synthetic data");
  const auto& den = denoiser();
  auto& sd = seed_data(seed);
  const auto& scorer = *sd.baseline;
  std::vector<ChainPlan> plan;
  for (std::size_t i = 0; i < sd.train.size(); ++i) {
    const auto chosen = select_instances(sd.train[i], &scorer, arm.selection, arm.k);
    for (std::size_t j = 0; j < chosen.size(); ++j) plan.push_back({i, chosen[j], chain_seed(seed, i, j)});
  }
  const GuidanceSpec spec = arm.kind == ArmKind::guided ? arm.spec : GuidanceSpec{};
  std::vector<std::vector<StepTrace>> trace;
  const auto images = run_chains(den, scorer, sd.train, plan, spec, schedule_, cfg_.cfg_weight,
                                 cfg_.gen_batch, cfg_.scene.num_classes, mix_seed(seed, 0x3a5c),
                                 &trace);
  Augmentation aug;
  aug.samples.reserve(sd.train.size());
  for (const auto& s : sd.train) aug.samples.push_back({s.image, s.class_mask, s.instances});
  for (std::size_t c = 0; c < plan.size(); ++c) {
    auto& target = aug.samples[plan[c].image];
    target.image = composite(target.image, images[c], plan[c].instance.mask);
  }
  aug.trace = summarize(trace);
  if (trace_lines) {
    std::istringstream is(trace_jsonl(trace));
    std::string line;
    while (std::getline(is, line)) trace_lines->push_back(line);
  }
  return aug;
}

RunRecord run_pipeline(Lab& lab, const Arm& arm, std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  RunRecord r;
  r.config_hash = lab.config().hash();
  r.seed = seed;
  r.arm = arm.label();
  r.selection = to_string(arm.selection);
  r.k = arm.k;
  try {
    auto& sd = lab.seed_data(seed);
    if (arm.kind == ArmKind::baseline) {
      r.metrics = evaluate(*sd.baseline, sd.test);
    } else {
      const auto aug = lab.augment(arm, seed);
      const auto& cfg = lab.config();
      const auto model =
          train_seg(cfg.seg, sd.train, &aug.samples, cfg.seg_train, mix_seed(seed, 0x5e9));
      r.trace = aug.trace;
      r.metrics = evaluate(model, sd.test);
    }
    r.ok = true;
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
    r.metrics.reset();
  }
  r.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

RunRecord run_pipeline(const ExperimentConfig& cfg, const Arm& arm, std::uint64_t seed) {
  Lab lab(cfg);
  return run_pipeline(lab, arm, seed);
}

std::vector<Arm> sweep_arms(const ExperimentConfig& cfg) {
  std::vector<Arm> arms{baseline_arm(), unguided_arm(cfg)};
  std::set<std::string> seen{arms[0].key(), arms[1].key()};
  auto add = [&](Arm a) {
    if (seen.insert(a.key()).second) arms.push_back(std::move(a));
  };
  for (auto loss : cfg.losses) {
    for (double eta : cfg.etas) add(guided_arm(cfg, loss, eta, cfg.schedule));
  }
  if (cfg.ablate_selection) {
    for (auto strategy : {SelectionStrategy::largest, SelectionStrategy::most_certain}) {
      auto a = guided_arm(cfg, LossKind::entropy, cfg.ablation_eta, cfg.schedule);
      a.selection = strategy;
      add(std::move(a));
    }
  }
  if (cfg.ablation_k > 0) {
    for (std::size_t k : {cfg.k, cfg.ablation_k}) {
      auto a = guided_arm(cfg, LossKind::entropy, cfg.ablation_eta, cfg.schedule);
      a.k = k;
      add(std::move(a));
    }
  }
  if (cfg.ablate_schedule) {
    for (auto s : cfg.schedules) {
      for (double eta : cfg.etas) add(guided_arm(cfg, LossKind::entropy, eta, s));
    }
  }
  return arms;
}

std::vector<CurvePoint> uncertainty_curves(Lab& lab, std::uint64_t seed) {
  const auto& cfg = lab.config();
  const auto& den = lab.denoiser();
  auto& sd = lab.seed_data(seed);
  const auto& scorer = *sd.baseline;
  const auto n = std::min(cfg.curve_images, sd.train.size());
  std::vector<ChainPlan> plan;
  for (std::size_t i = 0; i < n; ++i) {
    const auto chosen = select_instances(sd.train[i], &scorer, SelectionStrategy::largest, 1);
    plan.push_back({i, chosen.front(), chain_seed(seed, i, 0)});
  }
  const auto C = cfg.scene.num_classes;
  std::map<double, std::vector<Tensor>> unguided;
  std::vector<CurvePoint> out;
  for (auto loss : cfg.curve_losses) {
    for (double eta : cfg.curve_etas) {
      GuidanceSpec spec{loss, eta, cfg.schedule, cfg.mc_n, cfg.backprop_through_denoiser};
      std::vector<Tensor> images;
      if (!spec.active() && unguided.count(0.0)) {
        images = unguided[0.0];
      } else {
        images = run_chains(den, scorer, sd.train, plan, spec, lab.schedule(), cfg.cfg_weight,
                            cfg.gen_batch, C, mix_seed(seed, 0xc0de), nullptr);
        if (!spec.active()) unguided[0.0] = images;
      }
      double total = 0.0;
      for (std::size_t i = 0; i < plan.size(); ++i) {
        const auto& sample = sd.train[plan[i].image];
        const auto img = composite(sample.image, images[i], plan[i].instance.mask);
        total += measure_uncertainty(loss, scorer, img, sample.class_mask, plan[i].instance.mask,
                                     cfg.mc_n, mix_seed(seed, 0x3ea5 + i));
      }
      out.push_back({loss, seed, eta, total / static_cast<double>(plan.size())});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// statistics

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty input");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t m = i; m <= j; ++m) r[idx[m]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) {
    throw std::invalid_argument("spearman: need two equal-length samples of size >= 2");
  }
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::vector<double> isotonic_fit(const std::vector<double>& y) {
  struct Block {
    double sum;
    std::size_t n;
  };
  std::vector<Block> blocks;
  for (double v : y) {
    blocks.push_back({v, 1});
    while (blocks.size() > 1) {
      auto& b = blocks[blocks.size() - 1];
      auto& a = blocks[blocks.size() - 2];
      if (a.sum / double(a.n) <= b.sum / double(b.n)) break;
      a.sum += b.sum;
      a.n += b.n;
      blocks.pop_back();
    }
  }
  std::vector<double> out;
  for (const auto& b : blocks) out.insert(out.end(), b.n, b.sum / double(b.n));
  return out;
}

double isotonic_residual_fraction(const std::vector<double>& y) {
  if (y.empty()) throw std::invalid_argument("isotonic_residual_fraction: empty input");
  const auto fit = isotonic_fit(y);
  const double m = std::accumulate(y.begin(), y.end(), 0.0) / double(y.size());
  double res = 0.0, tot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    res += (y[i] - fit[i]) * (y[i] - fit[i]);
    tot += (y[i] - m) * (y[i] - m);
  }
  return tot == 0.0 ? 0.0 : res / tot;
}

namespace {

/// Per-seed (eta-sorted) uncertainty series of one loss.
std::map<std::uint64_t, std::vector<std::pair<double, double>>> curve_by_seed(const Report& r,
                                                                              LossKind loss) {
  std::map<std::uint64_t, std::vector<std::pair<double, double>>> out;
  for (const auto& p : r.curves) {
    if (p.loss == loss) out[p.seed].emplace_back(p.eta, p.uncertainty);
  }
  for (auto& [_, v] : out) std::sort(v.begin(), v.end());
  return out;
}

}  // namespace

std::vector<double> curve_spearman(const Report& r, LossKind loss) {
  std::vector<double> out;
  for (const auto& [_, v] : curve_by_seed(r, loss)) {
    std::vector<double> x, y;
    for (const auto& [e, u] : v) {
      x.push_back(e);
      y.push_back(u);
    }
    out.push_back(spearman(x, y));
  }
  return out;
}

std::vector<double> curve_residuals(const Report& r, LossKind loss) {
  std::vector<double> out;
  for (const auto& [_, v] : curve_by_seed(r, loss)) {
    std::vector<double> y;
    for (const auto& p : v) y.push_back(p.second);
    out.push_back(isotonic_residual_fraction(y));
  }
  return out;
}

namespace {

std::optional<double> median_metric(const Report& r, const std::string& key,
                                    double Metrics::*field) {
  std::vector<double> v;
  for (auto seed : r.seeds) {
    bool found = false;
    for (const auto& rec : r.records) {
      if (rec.seed == seed && record_key(rec) == key) {
        if (!rec.ok || !rec.metrics) return std::nullopt;
        v.push_back((*rec.metrics).*field);
        found = true;
        break;
      }
    }
    if (!found) return std::nullopt;
  }
  if (v.empty()) return std::nullopt;
  return median(v);
}

std::string guided_key(LossKind loss, double eta, ScheduleKind schedule,
                       SelectionStrategy selection, std::size_t k) {
  return "guided:" + to_string(loss) + ":" + fmt(eta) + ":" + to_string(schedule) + "|" +
         to_string(selection) + "|k" + std::to_string(k);
}

/// Etas present in the records for a guided configuration, ascending.
std::vector<double> recorded_etas(const Report& r, LossKind loss, ScheduleKind schedule,
                                  SelectionStrategy selection, std::size_t k) {
  std::set<double> etas;
  const auto prefix = "guided:" + to_string(loss) + ":";
  const auto suffix = ":" + to_string(schedule);
  for (const auto& rec : r.records) {
    if (rec.arm.rfind(prefix, 0) != 0 || rec.selection != to_string(selection) || rec.k != k) continue;
    const auto rest = rec.arm.substr(prefix.size());
    const auto colon = rest.find(':');
    if (colon == std::string::npos || rest.substr(colon) != suffix) continue;
    etas.insert(to_double("eta", rest.substr(0, colon)));
  }
  return {etas.begin(), etas.end()};
}

}  // namespace

std::optional<double> median_miou(const Report& r, const std::string& arm_key) {
  return median_metric(r, arm_key, &Metrics::miou);
}

std::optional<double> best_eta(const Report& r, LossKind loss, ScheduleKind schedule,
                               SelectionStrategy selection, std::size_t k) {
  std::optional<double> best;
  double best_value = -1.0;
  for (double eta : recorded_etas(r, loss, schedule, selection, k)) {
    const auto m = median_miou(r, guided_key(loss, eta, schedule, selection, k));
    if (m && *m > best_value) {
      best_value = *m;
      best = eta;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// sweep

namespace {

std::vector<PlotSpec> build_plots(const Report& r) {
  std::vector<PlotSpec> plots;
  std::set<LossKind> losses;
  for (const auto& p : r.curves) losses.insert(p.loss);
  for (auto loss : losses) {
    PlotSpec p;
    p.id = "uncertainty_vs_eta_" + to_string(loss);
    p.title = "Generated-object uncertainty vs guidance strength (" + to_string(loss) + ")";
    p.x_label = "eta";
    p.y_label = "mean " + to_string(loss) + " over region";
    std::map<double, std::vector<double>> by_eta;
    for (const auto& [seed, v] : curve_by_seed(r, loss)) {
      Series s{"seed " + std::to_string(seed), {}};
      for (const auto& pt : v) {
        s.points.push_back(pt);
        by_eta[pt.first].push_back(pt.second);
      }
      p.series.push_back(std::move(s));
    }
    Series med{"median", {}};
    for (const auto& [eta, v] : by_eta) med.points.emplace_back(eta, median(v));
    p.series.push_back(std::move(med));
    plots.push_back(std::move(p));
  }

  // Scheduler comparison: median mIoU of entropy guidance per eta.
  PlotSpec sched;
  sched.id = "scheduler_miou";
  sched.title = "Entropy guidance: early vs late scheduler";
  sched.x_label = "eta";
  sched.y_label = "median mIoU";
  std::set<std::string> schedules;
  for (const auto& rec : r.records) {
    if (rec.arm.rfind("guided:entropy:", 0) == 0) schedules.insert(rec.arm.substr(rec.arm.rfind(':') + 1));
  }
  std::optional<RunRecord> any;
  for (const auto& rec : r.records) {
    if (rec.arm == "unguided") any = rec;
  }
  if (any) {
    for (const auto& name : schedules) {
      const auto kind = parse_schedule(name);
      const auto sel = parse_selection(any->selection);
      Series s{name, {}};
      for (double eta : recorded_etas(r, LossKind::entropy, kind, sel, any->k)) {
        if (auto m = median_miou(r, guided_key(LossKind::entropy, eta, kind, sel, any->k))) {
          s.points.emplace_back(eta, *m);
        }
      }
      if (!s.points.empty()) sched.series.push_back(std::move(s));
    }
  }
  if (!sched.series.empty()) plots.push_back(std::move(sched));
  return plots;
}

}  // namespace

Report sweep(Lab& lab, const std::filesystem::path* log_path) {
  const auto& cfg = lab.config();
  const auto arms = sweep_arms(cfg);
  lab.denoiser();
  Report report;
  report.config_hash = cfg.hash();
  report.seeds = cfg.seeds;

  std::vector<std::vector<RunRecord>> records(cfg.seeds.size());
  std::vector<std::vector<CurvePoint>> curves(cfg.seeds.size());
  std::mutex log_mutex;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < cfg.seeds.size();) {
      const auto seed = cfg.seeds[i];
      for (const auto& arm : arms) {
        auto rec = run_pipeline(lab, arm, seed);
        if (log_path) {
          std::lock_guard lock(log_mutex);
          std::ofstream out(*log_path, std::ios::app);
          out << to_jsonl(rec) << '\n';
        }
        records[i].push_back(std::move(rec));
      }
      try {
        curves[i] = uncertainty_curves(lab, seed);
      } catch (const std::exception&) {
        curves[i].clear();  // the report shows the curve as missing for this seed
      }
    }
  };
  const auto n_workers = std::min(cfg.workers, cfg.seeds.size());
  if (n_workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& v : records) {
    for (auto& rec : v) report.records.push_back(std::move(rec));
  }
  for (auto& v : curves) report.curves.insert(report.curves.end(), v.begin(), v.end());
  report.plots = build_plots(report);
  return report;
}

// ---------------------------------------------------------------------------
// report

namespace {

std::string cell(const std::optional<double>& v, int digits = 4) {
  return v ? fixed(*v, digits) : "n/a";
}

std::string verdict(bool ok) { return ok ? "reproduced" : "not reproduced"; }

}  // namespace

std::string render_report(const Report& r) {
  std::ostringstream os;
  const bool enough = r.seeds.size() >= kMinSeedsForClaims;
  std::size_t failed = 0;
  for (const auto& rec : r.records) failed += rec.ok ? 0 : 1;
  os << "# Sweep report\n\n";
  os << "config " << r.config_hash << ", " << r.seeds.size() << " seeds, " << r.records.size()
     << " runs (" << failed << " failed). Values are medians over seeds.\n\n";
  if (!enough) {
    os << "Fewer than " << kMinSeedsForClaims
       << " seeds: ordering claims are withheld; tables are informational.\n\n";
  }

  // The default selection and object count are those of the unguided arm.
  std::string sel_name = "largest";
  std::size_t k = 1;
  for (const auto& rec : r.records) {
    if (rec.arm == "unguided") {
      sel_name = rec.selection;
      k = rec.k;
      break;
    }
  }
  const auto sel = parse_selection(sel_name);
  ScheduleKind main_schedule = ScheduleKind::early;
  for (const auto& rec : r.records) {
    if (rec.arm.rfind("guided:", 0) == 0 && rec.selection == sel_name && rec.k == k) {
      main_schedule = parse_schedule(rec.arm.substr(rec.arm.rfind(':') + 1));
      break;
    }
  }
  const auto macc = [&](const std::string& key) { return median_metric(r, key, &Metrics::macc); };
  const auto unguided_key = "unguided|" + sel_name + "|k" + std::to_string(k);

  os << "## Main comparison\n\n| arm | eta | mIoU | mAcc |\n|---|---|---|---|\n";
  const auto base = median_miou(r, "baseline");
  const auto ung = median_miou(r, unguided_key);
  os << "| baseline | - | " << cell(base) << " | " << cell(macc("baseline")) << " |\n";
  os << "| unguided | 0 | " << cell(ung) << " | " << cell(macc(unguided_key)) << " |\n";
  std::map<LossKind, std::optional<double>> loss_best;
  for (auto loss : {LossKind::entropy, LossKind::ce, LossKind::mcd}) {
    const auto eta = best_eta(r, loss, main_schedule, sel, k);
    if (!eta) continue;
    const auto key = guided_key(loss, *eta, main_schedule, sel, k);
    loss_best[loss] = median_miou(r, key);
    os << "| guided " << to_string(loss) << " (" << to_string(main_schedule) << ") | " << fmt(*eta)
       << " | " << cell(loss_best[loss]) << " | " << cell(macc(key)) << " |\n";
  }
  os << "\n";
  if (enough && base && ung && loss_best.count(LossKind::entropy) && loss_best[LossKind::entropy]) {
    const double g = *loss_best[LossKind::entropy];
    os << "guided entropy >= unguided >= baseline: " << verdict(g >= *ung && *ung >= *base)
       << "; guided entropy > baseline: " << verdict(g > *base) << "\n\n";
  }

  os << "## Guidance loss\n\n| loss | best eta | mIoU |\n|---|---|---|\n";
  for (auto loss : {LossKind::entropy, LossKind::ce, LossKind::mcd}) {
    if (!loss_best.count(loss)) continue;
    os << "| " << to_string(loss) << " | " << cell(best_eta(r, loss, main_schedule, sel, k), 1)
       << " | " << cell(loss_best[loss]) << " |\n";
  }
  if (enough && loss_best.size() == 3) {
    bool entropy_best = loss_best[LossKind::entropy].has_value();
    for (auto& [loss, v] : loss_best) {
      if (!v || (entropy_best && *v > *loss_best[LossKind::entropy])) entropy_best = false;
    }
    os << "\nentropy best: " << verdict(entropy_best) << "\n";
  }
  os << "\n";

  // Ablations share one guided configuration and differ in a single factor.
  std::optional<double> abl_eta;
  for (const auto& rec : r.records) {
    if (rec.arm.rfind("guided:entropy:", 0) == 0 && rec.selection == "most_certain") {
      const auto rest = rec.arm.substr(std::string("guided:entropy:").size());
      abl_eta = to_double("eta", rest.substr(0, rest.find(':')));
      break;
    }
  }
  if (abl_eta) {
    const auto largest = median_miou(r, guided_key(LossKind::entropy, *abl_eta, main_schedule,
                                                   SelectionStrategy::largest, k));
    const auto certain = median_miou(r, guided_key(LossKind::entropy, *abl_eta, main_schedule,
                                                   SelectionStrategy::most_certain, k));
    os << "## Object selection (entropy, eta " << fmt(*abl_eta) << ")\n\n"
       << "| strategy | mIoU |\n|---|---|\n| largest | " << cell(largest) << " |\n| most_certain | "
       << cell(certain) << " |\n";
    if (enough && largest && certain) os << "\nlargest best: " << verdict(*largest >= *certain) << "\n";
    os << "\n";
  }
  std::set<std::size_t> ks;
  std::optional<double> count_eta;
  for (const auto& rec : r.records) {
    if (rec.arm.rfind("guided:entropy:", 0) == 0 && rec.selection == sel_name && rec.k != k) {
      ks.insert(rec.k);
      const auto rest = rec.arm.substr(std::string("guided:entropy:").size());
      count_eta = to_double("eta", rest.substr(0, rest.find(':')));
    }
  }
  if (count_eta) {
    ks.insert(k);
    os << "## Object count (entropy, eta " << fmt(*count_eta) << ")\n\n| objects | mIoU |\n|---|---|\n";
    std::map<std::size_t, std::optional<double>> by_k;
    for (auto kk : ks) {
      by_k[kk] = median_miou(r, guided_key(LossKind::entropy, *count_eta, main_schedule, sel, kk));
      os << "| " << kk << " | " << cell(by_k[kk]) << " |\n";
    }
    if (enough && ks.size() >= 2) {
      const auto most = *ks.rbegin();
      bool ok = by_k[most].has_value();
      for (auto& [kk, v] : by_k) {
        if (!v || (ok && *v > *by_k[most])) ok = false;
      }
      os << "\n" << most << " objects best: " << verdict(ok) << "\n";
    }
    os << "\n";
  }

  std::set<std::string> schedules;
  for (const auto& rec : r.records) {
    if (rec.arm.rfind("guided:entropy:", 0) == 0 && rec.selection == sel_name && rec.k == k) {
      schedules.insert(rec.arm.substr(rec.arm.rfind(':') + 1));
    }
  }
  if (schedules.size() > 1) {
    os << "## Scheduler (entropy)\n\n| schedule | eta | mIoU |\n|---|---|---|\n";
    for (const auto& name : schedules) {
      const auto kind = parse_schedule(name);
      for (double eta : recorded_etas(r, LossKind::entropy, kind, sel, k)) {
        os << "| " << name << " | " << fmt(eta) << " | "
           << cell(median_miou(r, guided_key(LossKind::entropy, eta, kind, sel, k))) << " |\n";
      }
    }
    os << "\n";
  }

  std::set<LossKind> curve_losses;
  for (const auto& p : r.curves) curve_losses.insert(p.loss);
  if (!curve_losses.empty()) {
    os << "## Uncertainty vs guidance strength\n\n"
       << "| loss | eta | uncertainty |\n|---|---|---|\n";
    for (auto loss : curve_losses) {
      std::map<double, std::vector<double>> by_eta;
      for (const auto& p : r.curves) {
        if (p.loss == loss) by_eta[p.eta].push_back(p.uncertainty);
      }
      for (const auto& [eta, v] : by_eta) {
        os << "| " << to_string(loss) << " | " << fmt(eta) << " | " << fixed(median(v), 6) << " |\n";
      }
    }
    os << "\n| loss | Spearman rho | isotonic residual fraction |\n|---|---|---|\n";
    for (auto loss : curve_losses) {
      os << "| " << to_string(loss) << " | " << fixed(median(curve_spearman(r, loss)), 3) << " | "
         << fixed(median(curve_residuals(r, loss)), 4) << " |\n";
    }
    os << "\n";
  }

  os << "## Runs\n\n| arm | selection | k | seed | mIoU | mAcc | seconds | status |\n"
     << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& rec : r.records) {
    os << "| " << rec.arm << " | " << rec.selection << " | " << rec.k << " | " << rec.seed << " | "
       << (rec.metrics ? fixed(rec.metrics->miou, 4) : "n/a") << " | "
       << (rec.metrics ? fixed(rec.metrics->macc, 4) : "n/a") << " | " << fixed(rec.wall_time, 1)
       << " | " << (rec.ok ? "ok" : "failed: " + rec.error) << " |\n";
  }
  return os.str();
}

std::string report_json(const Report& r) {
  json j;
  j["config_hash"] = r.config_hash;
  j["seeds"] = r.seeds;
  j["records"] = json::array();
  for (const auto& rec : r.records) j["records"].push_back(record_json(rec));
  j["curves"] = json::array();
  for (const auto& p : r.curves) {
    j["curves"].push_back(
        {{"loss", to_string(p.loss)}, {"seed", p.seed}, {"eta", p.eta}, {"uncertainty", p.uncertainty}});
  }
  return j.dump(2) + "\n";
}

Report report_from_json(const std::string& text) {
  const auto j = json::parse(text);
  Report r;
  r.config_hash = j.at("config_hash").get<std::string>();
  r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  for (const auto& rec : j.at("records")) r.records.push_back(record_from(rec));
  for (const auto& p : j.at("curves")) {
    r.curves.push_back({parse_loss(p.at("loss").get<std::string>()), p.at("seed").get<std::uint64_t>(),
                        p.at("eta").get<double>(), p.at("uncertainty").get<double>()});
  }
  r.plots = build_plots(r);
  return r;
}

// ---------------------------------------------------------------------------
// plots

std::string plot_csv(const PlotSpec& p) {
  std::string out = "series,x,y\n";
  for (const auto& s : p.series) {
    for (const auto& [x, y] : s.points) out += s.name + "," + fmt(x) + "," + fmt(y) + "\n";
  }
  return out;
}

std::string plot_svg(const PlotSpec& p) {
  constexpr double W = 560, H = 360, L = 70, R = 150, T = 40, B = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : p.series) {
    for (const auto& [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x1 == x0) x1 = x0 + 1.0;
  if (y1 == y0) y1 = y0 + 1.0;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  const auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  static const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" << p.title
     << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0;
    const double yv = y0 + (y1 - y0) * i / 4.0;
    os << "<text x=\"" << fixed(px(xv), 1) << "\" y=\"" << H - B + 16
       << "\" text-anchor=\"middle\">" << fixed(xv, 2) << "</text>\n";
    os << "<text x=\"" << L - 6 << "\" y=\"" << fixed(py(yv) + 4, 1) << "\" text-anchor=\"end\">"
       << fixed(yv, 4) << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">"
     << p.x_label << "</text>\n";
  os << "<text x=\"14\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
     << (T + H - B) / 2 << ")\">" << p.y_label << "</text>\n";
  for (std::size_t i = 0; i < p.series.size(); ++i) {
    const auto& s = p.series[i];
    const char* color = kColors[i % 10];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t j = 0; j < s.points.size(); ++j) {
      os << (j ? " " : "") << fixed(px(s.points[j].first), 1) << "," << fixed(py(s.points[j].second), 1);
    }
    os << "\"/>\n";
    for (const auto& [x, y] : s.points) {
      os << "<circle cx=\"" << fixed(px(x), 1) << "\" cy=\"" << fixed(py(y), 1) << "\" r=\"2.5\" fill=\""
         << color << "\"/>\n";
    }
    const double ly = T + 14.0 * static_cast<double>(i);
    os << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 28 << "\" y2=\""
       << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << W - R + 32 << "\" y=\"" << ly + 4 << "\">" << s.name << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::vector<std::filesystem::path> emit_plots(const Report& r, const std::filesystem::path& dir) {
  if (r.plots.empty()) throw std::invalid_argument("emit_plots: report has no plots");
  for (const auto& p : r.plots) {
    if (p.series.empty()) throw std::invalid_argument("emit_plots: plot '" + p.id + "' has no series");
    for (const auto& s : p.series) {
      if (s.points.empty()) {
        throw std::invalid_argument("emit_plots: series '" + s.name + "' of '" + p.id + "' is empty");
      }
    }
  }
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  for (const auto& p : r.plots) {
    for (const auto& [ext, body] : {std::pair{".csv", plot_csv(p)}, std::pair{".svg", plot_svg(p)}}) {
      const auto path = dir / (p.id + ext);
      std::ofstream out(path, std::ios::binary);
      out << body;
      if (!out) throw std::runtime_error("emit_plots: cannot write " + path.string());
      written.push_back(path);
    }
  }
  return written;
}

}  // namespace glab
