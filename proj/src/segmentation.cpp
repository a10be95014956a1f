#include "glab/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "glab/optim.hpp"
#include "glab/rng.hpp"

namespace glab {

namespace {

constexpr std::size_t kDilations[] = {1, 2, 4, 2};

Tensor he_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)), true);
}

Tensor stack_images(const std::vector<const Tensor*>& images) {
  const auto& s = images.front()->shape();
  std::vector<double> v;
  v.reserve(images.size() * images.front()->numel());
  for (const auto* im : images) v.insert(v.end(), im->data().begin(), im->data().end());
  return Tensor({images.size(), s[0], s[1], s[2]}, std::move(v));
}

}  // namespace

SegmentationModel::SegmentationModel(const SegModelConfig& config, std::uint64_t seed)
    : config_(config) {
  if (config.num_classes < 2) throw std::invalid_argument("segmentation: need >= 2 classes");
  if (config.dropout < 0.0 || config.dropout >= 1.0) {
    throw std::invalid_argument("segmentation: dropout must be in [0,1)");
  }
  auto rng = make_rng(seed, 0);
  std::size_t in = 1;
  for (auto d : kDilations) {
    blocks_.push_back({he_init({config.width, in, 3, 3}, in * 9, rng),
                       Tensor::zeros({1, config.width, 1, 1}, true), d});
    in = config.width;
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(config.width));
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> head(config.num_classes * config.width);
  for (auto& w : head) w = u(rng);
  head_weight_ = Tensor({config.num_classes, config.width, 1, 1}, std::move(head), true);
  head_bias_ = Tensor::zeros({1, config.num_classes, 1, 1}, true);
}

Tensor SegmentationModel::logits(const Tensor& image, DropoutMode mode,
                                 std::mt19937_64* rng) const {
  const bool batched = image.dim() == 4;
  Tensor h = batched ? image : reshape(image, {1, image.shape()[0], image.shape()[1],
                                               image.shape()[2]});
  if (h.shape()[1] != 1) throw ShapeError("segmentation: expected a single-channel image");
  if (mode == DropoutMode::on && config_.dropout > 0.0 && !rng) {
    throw std::invalid_argument("segmentation: dropout on needs a generator");
  }
  for (const auto& b : blocks_) {
    h = relu(conv2d(h, b.weight, b.dilation, b.dilation) + b.bias);
  }
  if (mode == DropoutMode::on) h = dropout(h, config_.dropout, *rng);
  Tensor out = conv2d(h, head_weight_, 0) + head_bias_;
  if (!batched) {
    const auto& s = out.shape();
    out = reshape(out, {s[1], s[2], s[3]});
  }
  return out;
}

std::vector<Tensor> SegmentationModel::parameters() const {
  std::vector<Tensor> out;
  for (const auto& b : blocks_) {
    out.push_back(b.weight);
    out.push_back(b.bias);
  }
  out.push_back(head_weight_);
  out.push_back(head_bias_);
  return out;
}

NamedTensors SegmentationModel::named_parameters() const {
  NamedTensors out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    out.emplace_back("block" + std::to_string(i) + ".weight", blocks_[i].weight);
    out.emplace_back("block" + std::to_string(i) + ".bias", blocks_[i].bias);
  }
  out.emplace_back("head.weight", head_weight_);
  out.emplace_back("head.bias", head_bias_);
  return out;
}

void SegmentationModel::load(const NamedTensors& tensors) {
  for (auto& [name, param] : named_parameters()) {
    const auto& src = find_tensor(tensors, name);
    if (src.shape() != param.shape()) {
      throw ShapeError("segmentation: checkpoint shape mismatch for " + name);
    }
    auto p = param;
    p.mutable_data().assign(src.data().begin(), src.data().end());
  }
}

SegmentationModel SegmentationModel::clone() const {
  SegmentationModel copy = *this;
  for (auto& b : copy.blocks_) {
    b.weight = b.weight.clone();
    b.bias = b.bias.clone();
  }
  copy.head_weight_ = head_weight_.clone();
  copy.head_bias_ = head_bias_.clone();
  return copy;
}

Tensor predict_probs(const SegmentationModel& model, const Tensor& image, DropoutMode mode,
                     std::mt19937_64* rng) {
  const auto logits = model.logits(image, mode, rng);
  return softmax(logits, logits.dim() == 4 ? 1 : 0);
}

std::vector<Tensor> mc_passes(const SegmentationModel& model, const Tensor& image, std::size_t n,
                              std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("mc_passes: need at least 2 passes");
  auto rng = make_rng(seed, 0x3cd);
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(predict_probs(model, image, DropoutMode::on, &rng));
  }
  return out;
}

std::vector<double> pixel_entropy(const Tensor& probs) {
  const auto& s = probs.shape();
  if (s.size() != 3) throw ShapeError("pixel_entropy: expected [C,H,W]");
  const auto c = s[0];
  const auto n = s[1] * s[2];
  const auto p = probs.data();
  std::vector<double> out(n, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      const double q = std::max(p[k * n + i], 1e-12);
      out[i] -= q * std::log(q);
    }
  }
  return out;
}

LabelMap argmax_labels(const Tensor& probs) {
  const auto& s = probs.shape();
  if (s.size() != 3) throw ShapeError("argmax_labels: expected [C,H,W]");
  const auto n = s[1] * s[2];
  const auto p = probs.data();
  LabelMap out(s[1], s[2], 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < s[0]; ++k) {
      if (p[k * n + i] > p[best * n + i]) best = k;
    }
    out.values[i] = static_cast<int>(best);
  }
  return out;
}

SegmentationModel train_seg(const SegModelConfig& model_config, const std::vector<SceneSample>& real,
                            const std::vector<SceneSample>* synthetic,
                            const SegTrainConfig& train_config, std::uint64_t seed,
                            std::vector<double>* loss_log) {
  if (real.empty()) throw std::invalid_argument("train_seg: empty training set");
  if (train_config.p_aug < 0.0 || train_config.p_aug > 1.0) {
    throw std::invalid_argument("train_seg: p_aug must be in [0,1]");
  }
  if (!(train_config.background_weight > 0.0)) {
    throw std::invalid_argument("train_seg: background_weight must be > 0");
  }
  if (synthetic && synthetic->size() != real.size()) {
    throw std::invalid_argument("train_seg: synthetic set must align 1:1 with the real set");
  }
  const auto C = model_config.num_classes;
  for (const auto& s : real) {
    for (int v : s.class_mask.values) {
      if (v < 0 || static_cast<std::size_t>(v) >= C) {
        throw std::invalid_argument("train_seg: label " + std::to_string(v) +
                                    " outside [0," + std::to_string(C) + ")");
      }
    }
  }

  SegmentationModel model(model_config, mix_seed(seed, 0));
  Adam opt(model.parameters(), AdamConfig{.weight_decay = train_config.weight_decay});
  auto index_rng = make_rng(seed, 1);
  auto aug_rng = make_rng(seed, 2);
  auto drop_rng = make_rng(seed, 3);
  std::uniform_int_distribution<std::size_t> pick(0, real.size() - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  const auto H = real.front().class_mask.height;
  const auto W = real.front().class_mask.width;
  const auto B = train_config.batch;
  for (std::size_t step = 0; step < train_config.steps; ++step) {
    std::vector<const Tensor*> images;
    std::vector<double> target(B * C * H * W, 0.0);
    double total_weight = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
      const auto idx = pick(index_rng);
      const bool use_synth = coin(aug_rng) < train_config.p_aug && synthetic;
      const auto& s = use_synth ? (*synthetic)[idx] : real[idx];
      images.push_back(&s.image);
      for (std::size_t i = 0; i < H * W; ++i) {
        const auto cls = static_cast<std::size_t>(s.class_mask.values[i]);
        const double w = cls == 0 ? train_config.background_weight : 1.0;
        target[(b * C + cls) * H * W + i] = w;
        total_weight += w;
      }
    }
    const auto logp = log_softmax(model.logits(stack_images(images), DropoutMode::on, &drop_rng), 1);
    const auto loss =
        scale(sum(logp * Tensor({B, C, H, W}, std::move(target))), -1.0 / total_weight);
    opt.zero_grad();
    backward(loss);
    const double progress = static_cast<double>(step) / static_cast<double>(train_config.steps);
    opt.step(train_config.lr * std::pow(1.0 - progress, 0.9));
    if (loss_log) loss_log->push_back(loss.item());
  }
  return model;
}

Metrics compute_metrics(const std::vector<LabelMap>& predictions,
                        const std::vector<LabelMap>& ground_truth, std::size_t num_classes) {
  if (predictions.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (predictions.size() != ground_truth.size()) {
    throw std::invalid_argument("evaluate: prediction/ground-truth count mismatch");
  }
  std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  for (std::size_t n = 0; n < predictions.size(); ++n) {
    const auto& p = predictions[n].values;
    const auto& g = ground_truth[n].values;
    if (p.size() != g.size()) throw std::invalid_argument("evaluate: mask size mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      const auto pi = static_cast<std::size_t>(p[i]);
      const auto gi = static_cast<std::size_t>(g[i]);
      if (pi >= num_classes || gi >= num_classes) {
        throw std::invalid_argument("evaluate: class index out of range");
      }
      if (pi == gi) {
        ++tp[pi];
      } else {
        ++fp[pi];
        ++fn[gi];
      }
    }
  }
  Metrics m;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  double iou_sum = 0.0, acc_sum = 0.0;
  std::size_t iou_n = 0, acc_n = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto uni = tp[c] + fp[c] + fn[c];
    const auto sup = tp[c] + fn[c];
    m.support.push_back(sup);
    m.per_class_iou.push_back(uni ? double(tp[c]) / double(uni) : nan);
    m.per_class_acc.push_back(sup ? double(tp[c]) / double(sup) : nan);
    if (uni) {
      iou_sum += m.per_class_iou.back();
      ++iou_n;
    }
    if (sup) {
      acc_sum += m.per_class_acc.back();
      ++acc_n;
    }
  }
  m.miou = iou_n ? iou_sum / double(iou_n) : 0.0;
  m.macc = acc_n ? acc_sum / double(acc_n) : 0.0;
  return m;
}

Metrics evaluate(const SegmentationModel& model, const std::vector<SceneSample>& test) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
  NoGradGuard no_grad;
  std::vector<LabelMap> preds;
  std::vector<LabelMap> gts;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < test.size(); start += kChunk) {
    const auto end = std::min(test.size(), start + kChunk);
    std::vector<const Tensor*> images;
    for (std::size_t i = start; i < end; ++i) images.push_back(&test[i].image);
    const auto probs = predict_probs(model, stack_images(images), DropoutMode::off);
    const auto& s = probs.shape();
    const auto per = s[1] * s[2] * s[3];
    for (std::size_t b = 0; b < images.size(); ++b) {
      const auto d = probs.data().subspan(b * per, per);
      preds.push_back(argmax_labels(Tensor({s[1], s[2], s[3]}, {d.begin(), d.end()})));
      gts.push_back(test[start + b].class_mask);
    }
  }
  return compute_metrics(preds, gts, model.config().num_classes);
}

}  // namespace glab
