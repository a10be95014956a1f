#include "glab/scenes.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <numbers>
#include <random>

#include "glab/checkpoint.hpp"
#include "glab/rng.hpp"
#include "glab/segmentation.hpp"

namespace glab {

namespace {

constexpr ShapeKind kKinds[] = {ShapeKind::disk, ShapeKind::square, ShapeKind::triangle,
                                ShapeKind::ring};

bool single_component(const BinaryMask& mask) {
  LabelMap labels(mask.height, mask.width, 0);
  for (std::size_t i = 0; i < mask.size(); ++i) labels.values[i] = mask.values[i] ? 1 : 0;
  return connected_components(labels).size() == 1;
}

bool touches(const BinaryMask& mask, const LabelMap& occupied) {
  const auto h = mask.height;
  const auto w = mask.width;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (!mask(y, x)) continue;
      if (occupied(y, x)) return true;
      if (y > 0 && occupied(y - 1, x)) return true;
      if (y + 1 < h && occupied(y + 1, x)) return true;
      if (x > 0 && occupied(y, x - 1)) return true;
      if (x + 1 < w && occupied(y, x + 1)) return true;
    }
  }
  return false;
}

std::vector<std::size_t> ring_pixels(const SceneSample& sample, const Instance& inst,
                                     std::size_t reach) {
  const auto h = sample.class_mask.height;
  const auto w = sample.class_mask.width;
  BinaryMask grown = inst.mask;
  for (std::size_t r = 0; r < reach; ++r) {
    BinaryMask next = grown;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        if (!grown(y, x)) continue;
        if (y > 0) next(y - 1, x) = 1;
        if (y + 1 < h) next(y + 1, x) = 1;
        if (x > 0) next(y, x - 1) = 1;
        if (x + 1 < w) next(y, x + 1) = 1;
      }
    }
    grown = std::move(next);
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < grown.size(); ++i) {
    if (grown.values[i] && sample.class_mask.values[i] == 0) out.push_back(i);
  }
  return out;
}

// Renders one scene attempt; returns false when an instance ends up below
// the contrast margin so the caller can redraw.
bool render_scene(const SceneConfig& cfg, std::mt19937_64& rng, SceneSample& out) {
  const auto S = cfg.image_size;
  const double Sd = static_cast<double>(S);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  std::uniform_int_distribution<std::size_t> count_dist(cfg.min_objects, cfg.max_objects);
  std::uniform_int_distribution<int> class_dist(1, static_cast<int>(cfg.num_classes) - 1);
  std::normal_distribution<double> noise(0.0, cfg.noise_std);

  const double bg = uniform(-0.2, 0.0);
  const double gx = uniform(-0.1, 0.1);
  const double gy = uniform(-0.1, 0.1);
  std::vector<double> img(S * S);
  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) {
      img[y * S + x] = bg + gx * (static_cast<double>(x) / Sd - 0.5) +
                       gy * (static_cast<double>(y) / Sd - 0.5);
    }
  }

  LabelMap labels(S, S, 0);
  const std::size_t wanted = count_dist(rng);
  for (std::size_t obj = 0; obj < wanted; ++obj) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const int cls = class_dist(rng);
      const double r = uniform(cfg.min_radius, cfg.max_radius);
      const double angle = uniform(0.0, 2.0 * std::numbers::pi);
      const double margin = std::ceil(1.25 * r) + 1.0;
      if (2.0 * margin >= Sd) continue;
      const double cy = uniform(margin, Sd - 1.0 - margin);
      const double cx = uniform(margin, Sd - 1.0 - margin);
      BinaryMask mask = rasterize(cfg.kind_for_class(cls), S, cy, cx, r, angle);
      if (mask_count(mask) < 9 || !single_component(mask) || touches(mask, labels)) continue;

      double level = 0.0;
      for (std::size_t i = 0; i < mask.size(); ++i) level += mask.values[i] ? img[i] : 0.0;
      level /= static_cast<double>(mask_count(mask));
      const double contrast = uniform(cfg.min_contrast, cfg.max_contrast);
      double sign = unit(rng) < 0.5 ? -1.0 : 1.0;
      if (std::abs(level + sign * contrast) > 0.95) sign = -sign;
      const double freq = cfg.texture_frequency(cls) + uniform(-0.15, 0.15);
      const double theta = uniform(0.0, std::numbers::pi);
      const double phase = uniform(0.0, 2.0 * std::numbers::pi);
      for (std::size_t y = 0; y < S; ++y) {
        for (std::size_t x = 0; x < S; ++x) {
          if (!mask(y, x)) continue;
          const double u = static_cast<double>(x) * std::cos(theta) +
                           static_cast<double>(y) * std::sin(theta);
          img[y * S + x] = level + sign * contrast +
                           cfg.texture_amplitude * std::sin(freq * u + phase);
          labels(y, x) = cls;
        }
      }
      break;
    }
  }
  for (auto& v : img) v = std::clamp(v + noise(rng), -1.0, 1.0);

  out.image = Tensor({1, S, S}, std::move(img));
  out.class_mask = std::move(labels);
  out.instances = connected_components(out.class_mask);
  if (out.instances.empty()) return false;
  for (const auto& inst : out.instances) {
    if (std::abs(instance_contrast(out, inst)) < cfg.contrast_margin) return false;
  }
  return true;
}

}  // namespace

Tensor mask_tensor(const BinaryMask& mask) {
  std::vector<double> v(mask.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = mask.values[i] ? 1.0 : 0.0;
  return Tensor({1, mask.height, mask.width}, std::move(v));
}

std::size_t mask_count(const BinaryMask& mask) {
  return static_cast<std::size_t>(std::count_if(mask.values.begin(), mask.values.end(),
                                                [](std::uint8_t v) { return v != 0; }));
}

ShapeKind SceneConfig::kind_for_class(int class_id) const {
  if (class_id < 1 || static_cast<std::size_t>(class_id) >= num_classes) {
    throw std::invalid_argument("scene: class id out of range");
  }
  return kKinds[(class_id - 1) % 4];
}

void SceneConfig::validate() const {
  if (num_classes < 2 || num_classes > 5) {
    throw std::invalid_argument("scene config: num_classes must be in [2,5]");
  }
  if (min_objects < 1 || max_objects < min_objects) {
    throw std::invalid_argument("scene config: need 1 <= min_objects <= max_objects");
  }
  if (image_size < 16) throw std::invalid_argument("scene config: image_size must be >= 16");
  if (!(min_radius >= 2.0) || max_radius < min_radius) {
    throw std::invalid_argument("scene config: need 2 <= min_radius <= max_radius");
  }
  if (min_contrast <= contrast_margin || max_contrast < min_contrast) {
    throw std::invalid_argument("scene config: contrast range must exceed the margin");
  }
  if (noise_std < 0.0) throw std::invalid_argument("scene config: negative noise");
}

BinaryMask rasterize(ShapeKind kind, std::size_t size, double cy, double cx, double radius,
                     double angle) {
  BinaryMask mask(size, size, 0);
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  // Triangle vertices on a circumcircle of 1.25 r.
  double vx[3];
  double vy[3];
  for (int k = 0; k < 3; ++k) {
    const double a = angle + std::numbers::pi / 2.0 + 2.0 * std::numbers::pi * k / 3.0;
    vx[k] = 1.25 * radius * std::cos(a);
    vy[k] = 1.25 * radius * std::sin(a);
  }
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) - cx;
      const double dy = static_cast<double>(y) - cy;
      bool inside = false;
      switch (kind) {
        case ShapeKind::disk:
          inside = dx * dx + dy * dy <= radius * radius;
          break;
        case ShapeKind::square: {
          const double u = c * dx + s * dy;
          const double v = -s * dx + c * dy;
          const double half = 0.85 * radius;
          inside = std::abs(u) <= half && std::abs(v) <= half;
          break;
        }
        case ShapeKind::triangle: {
          inside = true;
          for (int k = 0; k < 3; ++k) {
            const int j = (k + 1) % 3;
            const double cross = (vx[j] - vx[k]) * (dy - vy[k]) - (vy[j] - vy[k]) * (dx - vx[k]);
            inside = inside && cross >= 0.0;
          }
          break;
        }
        case ShapeKind::ring: {
          const double outer = 1.1 * radius;
          const double inner = 0.55 * outer;
          const double d2 = dx * dx + dy * dy;
          inside = d2 <= outer * outer && d2 > inner * inner;
          break;
        }
      }
      mask(y, x) = inside ? 1 : 0;
    }
  }
  return mask;
}

std::vector<SceneSample> gen_dataset(const SceneConfig& cfg, std::size_t n) {
  cfg.validate();
  if (n == 0) throw std::invalid_argument("gen_dataset: n must be >= 1");
  std::vector<SceneSample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = make_rng(cfg.seed, i);
    int attempts = 0;
    while (!render_scene(cfg, rng, out[i])) {
      if (++attempts > 1000) throw std::runtime_error("gen_dataset: cannot satisfy config");
    }
  }
  return out;
}

std::vector<Instance> connected_components(const LabelMap& class_mask) {
  const auto h = class_mask.height;
  const auto w = class_mask.width;
  std::vector<std::uint8_t> visited(h * w, 0);
  std::vector<Instance> out;
  std::deque<std::size_t> queue;
  for (std::size_t start = 0; start < h * w; ++start) {
    const int cls = class_mask.values[start];
    if (cls == 0 || visited[start]) continue;
    Instance inst;
    inst.class_id = cls;
    inst.mask = BinaryMask(h, w, 0);
    inst.first_pixel = start;
    visited[start] = 1;
    queue.push_back(start);
    while (!queue.empty()) {
      const auto p = queue.front();
      queue.pop_front();
      inst.mask.values[p] = 1;
      ++inst.pixel_count;
      const auto y = p / w;
      const auto x = p % w;
      auto visit = [&](std::size_t q) {
        if (!visited[q] && class_mask.values[q] == cls) {
          visited[q] = 1;
          queue.push_back(q);
        }
      };
      if (y > 0) visit(p - w);
      if (y + 1 < h) visit(p + w);
      if (x > 0) visit(p - 1);
      if (x + 1 < w) visit(p + 1);
    }
    out.push_back(std::move(inst));
  }
  std::stable_sort(out.begin(), out.end(), [](const Instance& a, const Instance& b) {
    if (a.pixel_count != b.pixel_count) return a.pixel_count > b.pixel_count;
    return a.first_pixel < b.first_pixel;
  });
  return out;
}

std::string to_string(SelectionStrategy s) {
  return s == SelectionStrategy::largest ? "largest" : "most_certain";
}

SelectionStrategy parse_selection(const std::string& s) {
  if (s == "largest") return SelectionStrategy::largest;
  if (s == "most_certain") return SelectionStrategy::most_certain;
  throw std::invalid_argument("unknown selection strategy: " + s);
}

std::vector<Instance> select_instances(const SceneSample& sample, const SegmentationModel* model,
                                       SelectionStrategy strategy, std::size_t k) {
  if (sample.instances.empty()) throw std::invalid_argument("select_instances: no instances");
  struct Ranked {
    const Instance* inst;
    long long entropy_key;
  };
  std::vector<Ranked> ranked;
  for (const auto& inst : sample.instances) ranked.push_back({&inst, 0});
  if (strategy == SelectionStrategy::most_certain) {
    if (!model) throw std::invalid_argument("select_instances: most_certain needs a model");
    const auto probs = predict_probs(*model, sample.image, DropoutMode::off);
    const auto ent = pixel_entropy(probs);
    for (auto& r : ranked) {
      double total = 0.0;
      for (std::size_t i = 0; i < r.inst->mask.size(); ++i) {
        if (r.inst->mask.values[i]) total += ent[i];
      }
      // Quantised so equal-entropy instances tie exactly.
      r.entropy_key = std::llround(total / static_cast<double>(r.inst->pixel_count) * 1e10);
    }
  }
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.entropy_key != b.entropy_key) return a.entropy_key < b.entropy_key;
    if (a.inst->pixel_count != b.inst->pixel_count) return a.inst->pixel_count > b.inst->pixel_count;
    return a.inst->first_pixel < b.inst->first_pixel;
  });
  std::vector<Instance> out;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) out.push_back(*ranked[i].inst);
  return out;
}

Tensor ControlCondition::stacked() const {
  const auto h = instance_mask.height;
  const auto w = instance_mask.width;
  const auto n = h * w;
  std::vector<double> v(kChannels * n);
  const auto edges = edge_map.data();
  const auto ctx = context.data();
  const double cls = static_cast<double>(class_id) / static_cast<double>(num_classes);
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = edges[i];
    v[n + i] = instance_mask.values[i] ? 1.0 : 0.0;
    v[2 * n + i] = cls;
    v[3 * n + i] = ctx[i];
  }
  return Tensor({kChannels, h, w}, std::move(v));
}

Tensor sobel_magnitude(const Tensor& image) {
  const auto& s = image.shape();
  if (s.size() != 3 || s[0] != 1) throw ShapeError("sobel: expected [1,H,W] image");
  const auto h = s[1];
  const auto w = s[2];
  const auto px = image.data();
  auto at = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
    y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(h) - 1);
    x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(w) - 1);
    return px[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
  };
  std::vector<double> mag(h * w);
  double peak = 0.0;
  for (std::ptrdiff_t y = 0; y < static_cast<std::ptrdiff_t>(h); ++y) {
    for (std::ptrdiff_t x = 0; x < static_cast<std::ptrdiff_t>(w); ++x) {
      const double gx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
      const double gy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
      const double m = std::sqrt(gx * gx + gy * gy);
      mag[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = m;
      peak = std::max(peak, m);
    }
  }
  if (peak > 0.0) {
    for (auto& m : mag) m /= peak;
  }
  return Tensor({1, h, w}, std::move(mag));
}

ControlCondition make_condition(const SceneSample& sample, const Instance& instance,
                                std::size_t num_classes) {
  if (instance.mask.height != sample.class_mask.height ||
      instance.mask.width != sample.class_mask.width) {
    throw std::invalid_argument("make_condition: instance does not match sample");
  }
  ControlCondition cond;
  cond.edge_map = sobel_magnitude(sample.image);
  cond.instance_mask = instance.mask;
  cond.class_id = instance.class_id;
  cond.num_classes = num_classes;
  std::vector<double> ctx(sample.image.data().begin(), sample.image.data().end());
  for (std::size_t i = 0; i < ctx.size(); ++i) {
    if (instance.mask.values[i]) ctx[i] = 0.0;
  }
  cond.context = Tensor(sample.image.shape(), std::move(ctx));
  return cond;
}

Tensor composite(const Tensor& real, const Tensor& generated, const BinaryMask& mask) {
  if (real.shape() != generated.shape() || real.numel() != mask.size()) {
    throw ShapeError("composite: shape mismatch");
  }
  std::vector<double> out(real.numel());
  const auto r = real.data();
  const auto g = generated.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mask.values[i] ? g[i] : r[i];
  return Tensor(real.shape(), std::move(out));
}

double instance_contrast(const SceneSample& sample, const Instance& instance, std::size_t reach) {
  const auto px = sample.image.data();
  double inside = 0.0;
  for (std::size_t i = 0; i < instance.mask.size(); ++i) {
    if (instance.mask.values[i]) inside += px[i];
  }
  inside /= static_cast<double>(instance.pixel_count);
  const auto ring = ring_pixels(sample, instance, reach);
  if (ring.empty()) return inside;
  double outside = 0.0;
  for (auto i : ring) outside += px[i];
  outside /= static_cast<double>(ring.size());
  return inside - outside;
}

void save_dataset(const std::filesystem::path& dir, const std::vector<SceneSample>& samples,
                  const std::string& description) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "glab-dataset-1";
  manifest["description"] = description;
  manifest["samples"] = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%05zu.glab", i);
    const auto& s = samples[i];
    std::vector<double> labels(s.class_mask.values.begin(), s.class_mask.values.end());
    save_checkpoint(dir / name,
                    {{"image", s.image},
                     {"class_mask", Tensor({s.class_mask.height, s.class_mask.width}, labels)}});
    manifest["samples"].push_back(name);
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

std::vector<SceneSample> load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("load_dataset: no manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(is);
  std::vector<SceneSample> out;
  for (const auto& name : manifest.at("samples")) {
    const auto tensors = load_checkpoint(dir / name.get<std::string>());
    SceneSample s;
    s.image = find_tensor(tensors, "image");
    const auto& lm = find_tensor(tensors, "class_mask");
    s.class_mask = LabelMap(lm.shape().at(0), lm.shape().at(1), 0);
    for (std::size_t i = 0; i < lm.numel(); ++i) s.class_mask.values[i] = static_cast<int>(lm[i]);
    s.instances = connected_components(s.class_mask);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace glab
