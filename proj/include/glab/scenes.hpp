#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "glab/tensor.hpp"

namespace glab {

class SegmentationModel;

/// Row-major 2-D grid of labels or mask bits.
template <typename T>
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<T> values;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, T fill = T{}) : height(h), width(w), values(h * w, fill) {}

  T& operator()(std::size_t y, std::size_t x) { return values[y * width + x]; }
  const T& operator()(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  std::size_t size() const { return values.size(); }
  bool operator==(const Grid&) const = default;
};

using LabelMap = Grid<int>;
using BinaryMask = Grid<std::uint8_t>;

/// Binary mask as a [1,H,W] tensor of 0/1.
Tensor mask_tensor(const BinaryMask& mask);
std::size_t mask_count(const BinaryMask& mask);

struct Instance {
  int class_id = 0;
  BinaryMask mask;
  std::size_t pixel_count = 0;
  std::size_t first_pixel = 0;  // row-major index of the top-left-most pixel
};

struct SceneSample {
  Tensor image;  // [1,H,W] in [-1,1]
  LabelMap class_mask;
  std::vector<Instance> instances;
};

enum class ShapeKind { disk, square, triangle, ring };

struct SceneConfig {
  std::size_t num_classes = 5;  // background + one class per shape kind
  std::size_t image_size = 32;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  double min_radius = 3.0;
  double max_radius = 6.0;
  double min_contrast = 0.3;
  double max_contrast = 0.8;
  double contrast_margin = 0.2;
  double texture_amplitude = 0.2;
  double noise_std = 0.08;
  std::uint64_t seed = 1;

  /// Shape kind drawn for class c (1-based); classes map to kinds in order.
  ShapeKind kind_for_class(int class_id) const;
  /// Stripe frequency (radians per pixel) of a class's texture: 0 for class 1,
  /// rising by 0.9 per class.
  double texture_frequency(int class_id) const { return class_id <= 1 ? 0.0 : 0.6 + 0.8 * (class_id - 1); }
  void validate() const;
};

/// Pixels whose centres fall inside the shape centred at (cy, cx).
BinaryMask rasterize(ShapeKind kind, std::size_t size, double cy, double cx, double radius,
                     double angle);

std::vector<SceneSample> gen_dataset(const SceneConfig& cfg, std::size_t n);

/// 4-connected components per class, largest first; ties go to the instance
/// whose top-left-most pixel comes first in row-major order.
std::vector<Instance> connected_components(const LabelMap& class_mask);

enum class SelectionStrategy { largest, most_certain };

/// Picks up to k instances. `most_certain` ranks by lowest mean prediction
/// entropy of `model` over each instance (ties: pixel count, then position)
/// and needs a model.
std::vector<Instance> select_instances(const SceneSample& sample, const SegmentationModel* model,
                                       SelectionStrategy strategy, std::size_t k);

std::string to_string(SelectionStrategy s);
SelectionStrategy parse_selection(const std::string& s);

/// Control input for the denoiser. Channels of `stacked()`: Sobel edge
/// magnitude in [0,1], instance mask, constant class_id/num_classes, and the
/// real image with the instance blanked out (inpainting context).
struct ControlCondition {
  Tensor edge_map;  // [1,H,W]
  BinaryMask instance_mask;
  int class_id = 0;
  std::size_t num_classes = 1;
  Tensor context;  // [1,H,W]

  static constexpr std::size_t kChannels = 4;
  Tensor stacked() const;  // [4,H,W]
  Tensor region() const { return mask_tensor(instance_mask); }
};

Tensor sobel_magnitude(const Tensor& image);
ControlCondition make_condition(const SceneSample& sample, const Instance& instance,
                                std::size_t num_classes);

/// mask * generated + (1 - mask) * real.
Tensor composite(const Tensor& real, const Tensor& generated, const BinaryMask& mask);

/// Mean intensity of instance pixels minus that of the surrounding
/// background ring (pixels within `reach` steps that belong to no object).
double instance_contrast(const SceneSample& sample, const Instance& instance,
                         std::size_t reach = 2);

// Dataset directory: manifest.json plus one GLAB1 file per sample holding
// "image" [1,H,W] and "class_mask" [H,W].
void save_dataset(const std::filesystem::path& dir, const std::vector<SceneSample>& samples,
                  const std::string& description);
std::vector<SceneSample> load_dataset(const std::filesystem::path& dir);

}  // namespace glab
