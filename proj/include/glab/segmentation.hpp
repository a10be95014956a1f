#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "glab/checkpoint.hpp"
#include "glab/scenes.hpp"
#include "glab/tensor.hpp"

namespace glab {

enum class DropoutMode { off, on };

struct SegModelConfig {
  std::size_t num_classes = 5;
  std::size_t width = 16;
  double dropout = 0.25;
};

/// Per-pixel classifier: four dilated 3x3 conv blocks with ReLU, dropout on
/// the last features, then a 1x1 head producing class logits. Receptive field
/// radius is 9 pixels.
class SegmentationModel {
 public:
  SegmentationModel(const SegModelConfig& config, std::uint64_t seed);

  /// image: [1,H,W] or [B,1,H,W]. Returns logits [C,H,W] / [B,C,H,W]. `rng`
  /// drives the dropout masks and must be given when mode is on.
  Tensor logits(const Tensor& image, DropoutMode mode, std::mt19937_64* rng = nullptr) const;

  const SegModelConfig& config() const { return config_; }
  std::vector<Tensor> parameters() const;
  NamedTensors named_parameters() const;
  void load(const NamedTensors& tensors);
  SegmentationModel clone() const;

 private:
  struct Block {
    Tensor weight;
    Tensor bias;
    std::size_t dilation;
  };
  SegModelConfig config_;
  std::vector<Block> blocks_;
  Tensor head_weight_;
  Tensor head_bias_;
};

/// Softmax class probabilities; differentiable w.r.t. the image.
Tensor predict_probs(const SegmentationModel& model, const Tensor& image, DropoutMode mode,
                     std::mt19937_64* rng = nullptr);

/// N stochastic passes with dropout on; reproducible given seed.
std::vector<Tensor> mc_passes(const SegmentationModel& model, const Tensor& image, std::size_t n,
                              std::uint64_t seed);

/// Per-pixel entropy (natural log) of a [C,H,W] probability map.
std::vector<double> pixel_entropy(const Tensor& probs);

/// Per-pixel argmax of a [C,H,W] map.
LabelMap argmax_labels(const Tensor& probs);

struct SegTrainConfig {
  std::size_t steps = 1500;
  std::size_t batch = 8;
  double lr = 1e-2;
  double weight_decay = 1e-4;
  double p_aug = 0.5;
  double background_weight = 0.2;  // class-0 weight in the cross-entropy
};

/// Trains from scratch on class-weighted cross-entropy (weighted mean over
/// pixels). Each draw picks a real index; with probability p_aug
/// the aligned synthetic counterpart replaces it. Index draws, augmentation
/// coin flips and dropout masks use separate streams so p_aug = 0 reproduces
/// the real-only run exactly.
SegmentationModel train_seg(const SegModelConfig& model_config, const std::vector<SceneSample>& real,
                            const std::vector<SceneSample>* synthetic,
                            const SegTrainConfig& train_config, std::uint64_t seed,
                            std::vector<double>* loss_log = nullptr);

struct Metrics {
  double miou = 0.0;
  double macc = 0.0;
  std::vector<double> per_class_iou;  // NaN for classes with empty union
  std::vector<double> per_class_acc;  // NaN for classes without ground truth
  std::vector<std::size_t> support;   // ground-truth pixels per class
};

/// IoU_c = TP/(TP+FP+FN) over all pixels of all pairs; mIoU averages classes
/// with a nonempty union, mAcc averages recall over classes with support.
Metrics compute_metrics(const std::vector<LabelMap>& predictions,
                        const std::vector<LabelMap>& ground_truth, std::size_t num_classes);

Metrics evaluate(const SegmentationModel& model, const std::vector<SceneSample>& test);

}  // namespace glab
