#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "glab/scenes.hpp"
#include "glab/segmentation.hpp"
#include "oracles.hpp"

using namespace glab;

namespace {

std::vector<SceneSample> scenes(std::size_t n, std::uint64_t seed = 1) {
  SceneConfig sc;
  sc.seed = seed;
  return gen_dataset(sc, n);
}

}  // namespace

TEST_CASE("connected components agree with flood fill") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = testing::random_label_map(rng, 4);
    const auto got = connected_components(m);
    const auto want = testing::flood_fill_components(m);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      CHECK(got[i].class_id == want[i].class_id);
      CHECK(got[i].pixel_count == want[i].pixel_count);
      CHECK(got[i].first_pixel == want[i].first_pixel);
      CHECK(got[i].mask == want[i].mask);
    }
  }
}

TEST_CASE("touching blobs of different classes stay separate") {
  LabelMap m(2, 3, 0);
  m.values = {1, 1, 2, 0, 1, 2};
  const auto c = connected_components(m);
  REQUIRE(c.size() == 2);
  CHECK(c[0].class_id == 1);
  CHECK(c[0].pixel_count == 3);
  CHECK(c[1].class_id == 2);
  CHECK(c[1].first_pixel == 2);
}

TEST_CASE("generated scenes are consistent") {
  const auto data = scenes(40);
  SceneConfig sc;
  for (const auto& s : data) {
    CHECK(s.image.shape() == Shape{1, 32, 32});
    for (auto v : s.image.data()) {
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
    }
    REQUIRE(!s.instances.empty());
    CHECK(s.instances.size() <= sc.max_objects);
    std::size_t labelled = 0;
    for (auto v : s.class_mask.values) labelled += v != 0;
    std::size_t covered = 0;
    for (const auto& inst : s.instances) {
      covered += inst.pixel_count;
      CHECK(inst.pixel_count >= 9);
      CHECK(inst.class_id >= 1);
      CHECK(inst.class_id < static_cast<int>(sc.num_classes));
      CHECK(std::abs(instance_contrast(s, inst)) >= sc.contrast_margin);
    }
    CHECK(covered == labelled);
  }
}

TEST_CASE("dataset generation is deterministic per seed") {
  const auto a = scenes(5, 7), b = scenes(5, 7), c = scenes(5, 8);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].class_mask == b[i].class_mask);
    CHECK(std::equal(a[i].image.data().begin(), a[i].image.data().end(), b[i].image.data().begin()));
  }
  CHECK(!(a[0].class_mask == c[0].class_mask));
}

TEST_CASE("every class appears") {
  std::vector<int> seen(5, 0);
  for (const auto& s : scenes(60)) {
    for (const auto& inst : s.instances) seen[static_cast<std::size_t>(inst.class_id)] = 1;
  }
  for (int c = 1; c < 5; ++c) CHECK(seen[static_cast<std::size_t>(c)]);
}

TEST_CASE("rasterized shapes") {
  const auto disk = rasterize(ShapeKind::disk, 16, 8.0, 8.0, 3.0, 0.0);
  CHECK(mask_count(disk) == 29);
  const auto square = rasterize(ShapeKind::square, 16, 8.0, 8.0, 3.0, 0.0);
  CHECK(mask_count(square) == 25);
  const auto ring = rasterize(ShapeKind::ring, 16, 8.0, 8.0, 5.0, 0.0);
  CHECK(ring(8, 8) == 0);
  CHECK(mask_count(ring) > 0);
}

TEST_CASE("sobel is normalised and zero on flat images") {
  const auto flat = sobel_magnitude(Tensor::full({1, 6, 6}, 0.4));
  for (auto v : flat.data()) CHECK(v == 0.0);
  std::vector<double> step(36, 0.0);
  for (std::size_t y = 0; y < 6; ++y) {
    for (std::size_t x = 3; x < 6; ++x) step[y * 6 + x] = 1.0;
  }
  const auto e = sobel_magnitude(Tensor({1, 6, 6}, step));
  double peak = 0.0;
  for (auto v : e.data()) peak = std::max(peak, v);
  CHECK(peak == 1.0);
  CHECK(e[2 * 6 + 2] == 1.0);
  CHECK(e[2 * 6 + 0] == 0.0);
}

TEST_CASE("condition channels and compositing") {
  const auto s = scenes(1).front();
  const auto inst = s.instances.front();
  const auto cond = make_condition(s, inst, 5);
  const auto st = cond.stacked();
  REQUIRE(st.shape() == Shape{4, 32, 32});
  const std::size_t n = 32 * 32;
  for (std::size_t i = 0; i < n; ++i) {
    CHECK(st[n + i] == static_cast<double>(inst.mask.values[i]));
    CHECK(st[2 * n + i] == doctest::Approx(inst.class_id / 5.0));
    CHECK(st[3 * n + i] == (inst.mask.values[i] ? 0.0 : s.image[i]));
  }
  const auto gen = Tensor::full({1, 32, 32}, 0.9);
  const auto mixed = composite(s.image, gen, inst.mask);
  for (std::size_t i = 0; i < n; ++i) CHECK(mixed[i] == (inst.mask.values[i] ? 0.9 : s.image[i]));
}

TEST_CASE("instance selection") {
  auto data = scenes(30);
  const SceneSample* multi = nullptr;
  for (const auto& s : data) {
    if (s.instances.size() >= 2) multi = &s;
  }
  REQUIRE(multi);
  const auto largest = select_instances(*multi, nullptr, SelectionStrategy::largest, 1);
  REQUIRE(largest.size() == 1);
  for (const auto& inst : multi->instances) CHECK(largest[0].pixel_count >= inst.pixel_count);
  CHECK(select_instances(*multi, nullptr, SelectionStrategy::largest, 10).size() ==
        multi->instances.size());
  CHECK_THROWS(select_instances(*multi, nullptr, SelectionStrategy::most_certain, 1));

  const SegmentationModel model({}, 3);
  const auto ranked = select_instances(*multi, &model, SelectionStrategy::most_certain, 10);
  const auto ent = pixel_entropy(predict_probs(model, multi->image, DropoutMode::off));
  auto mean_ent = [&](const Instance& inst) {
    double t = 0.0;
    for (std::size_t i = 0; i < ent.size(); ++i) t += inst.mask.values[i] ? ent[i] : 0.0;
    return t / static_cast<double>(inst.pixel_count);
  };
  for (std::size_t i = 1; i < ranked.size(); ++i) {
    CHECK(mean_ent(ranked[i - 1]) <= mean_ent(ranked[i]) + 1e-9);
  }
  CHECK(to_string(parse_selection("most_certain")) == "most_certain");
  CHECK_THROWS(parse_selection("random"));
}

TEST_CASE("dataset directory round trip") {
  const auto data = scenes(3);
  const auto dir = std::filesystem::temp_directory_path() / "glab_test_dataset";
  std::filesystem::remove_all(dir);
  save_dataset(dir, data, "test");
  const auto back = load_dataset(dir);
  std::filesystem::remove_all(dir);
  REQUIRE(back.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    CHECK(back[i].class_mask == data[i].class_mask);
    CHECK(std::equal(back[i].image.data().begin(), back[i].image.data().end(),
                     data[i].image.data().begin()));
    CHECK(back[i].instances.size() == data[i].instances.size());
  }
}

TEST_CASE("scene config validation") {
  SceneConfig sc;
  sc.min_radius = 1.0;
  CHECK_THROWS(sc.validate());
  sc = {};
  sc.min_contrast = 0.1;
  CHECK_THROWS(sc.validate());
  sc = {};
  CHECK_THROWS(sc.kind_for_class(0));
  CHECK(sc.kind_for_class(4) == ShapeKind::ring);
}
