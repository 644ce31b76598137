#include <filesystem>

#include "ctxpatch/detector_train.hpp"
#include "ctxpatch/scene_synth.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace ctxpatch;

namespace {

Detection det_at(BoundingBox b, double obj, Index cell = 0) { return {b, obj, {1.0}, cell}; }

std::vector<Detection> random_dets(Rng& rng, int n) {
  std::vector<Detection> out;
  for (int i = 0; i < n; ++i) {
    const double x = uniform(rng, 0, 40), y = uniform(rng, 0, 40);
    out.push_back(det_at({x, y, x + uniform(rng, 5, 20), y + uniform(rng, 5, 20)}, uniform(rng, 0, 1), i));
  }
  return out;
}

std::vector<Scene> scenes(std::uint64_t seed, int count) {
  SynthConfig c;
  c.seed = seed;
  std::vector<Scene> out;
  for (int i = 0; i < count; ++i) out.push_back(generate_scene(c, i));
  return out;
}

}  // namespace

TEST_CASE("nms keeps the higher of two identical boxes") {
  const BoundingBox b{10, 10, 30, 30};
  const auto kept = nms({det_at(b, 0.8, 1), det_at(b, 0.9, 2)}, 0.5);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].objectness == 0.9);
}

TEST_CASE("nms output is sorted, separated and idempotent") {
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto once = nms(random_dets(rng, 30), 0.5);
    for (std::size_t a = 0; a < once.size(); ++a) {
      if (a > 0) CHECK(once[a - 1].objectness >= once[a].objectness);
      for (std::size_t b = a + 1; b < once.size(); ++b) CHECK(iou(once[a].bbox, once[b].bbox) <= 0.5);
    }
    const auto twice = nms(once, 0.5);
    REQUIRE(twice.size() == once.size());
    for (std::size_t k = 0; k < once.size(); ++k) CHECK(twice[k].cell == once[k].cell);
  }
}

TEST_CASE("match_detections examples") {
  const std::vector<BoundingBox> targets{{0, 0, 10, 10}, {50, 50, 60, 60}};
  for (const auto& m : match_detections({}, targets, 0.5)) CHECK(m.confidence == 0.0);
  auto m = match_detections({det_at(targets[0], 0.92)}, targets, 0.5);
  CHECK(m[0].confidence == 0.92);
  CHECK(m[1].confidence == 0.0);
  m = match_detections({det_at(targets[0], 0.6), det_at({0, 0, 10, 11}, 0.9)}, targets, 0.5);
  CHECK(m[0].confidence == 0.9);
}

TEST_CASE("match_detections is permutation invariant") {
  Rng rng(2);
  const std::vector<BoundingBox> targets{{5, 5, 20, 20}, {20, 20, 35, 38}, {0, 30, 12, 45}};
  for (int i = 0; i < 50; ++i) {
    auto dets = random_dets(rng, 20);
    const auto ref = match_detections(dets, targets, 0.3);
    std::shuffle(dets.begin(), dets.end(), rng);
    const auto got = match_detections(dets, targets, 0.3);
    for (std::size_t t = 0; t < targets.size(); ++t) CHECK(got[t].confidence == ref[t].confidence);
  }
}

TEST_CASE("registry") {
  auto& reg = DetectorRegistry::instance();
  CHECK(reg.contains("toy-a"));
  CHECK(reg.contains("toy-b"));
  CHECK_THROWS_AS(reg.get("yolo"), InvalidArgument);
  CHECK(reg.get("toy-a").stride() == 16);
  CHECK_THROWS_AS(reg.get("toy-a").layer_index("head"), InvalidArgument);
  CHECK(reg.get("toy-a").hash() != reg.get("toy-b").hash());
}

TEST_CASE("detector output invariants") {
  const ConvDetector<float> det(init_weights(DetectorRegistry::instance().get("toy-b"), 3));
  Rng rng(3);
  const auto img = oracle::random_image<float>(rng, 256, 256);
  const auto out = det.forward(img);
  CHECK(out.cells() == 256);
  for (Index c = 0; c < out.cells(); ++c) {
    CHECK(out.objectness(c) >= 0.0);
    CHECK(out.objectness(c) <= 1.0);
  }
  CHECK_THROWS_AS(det.forward(Image<float>(128, 128)), DimensionError);
  const auto dets = det.detect(img, 0.0, 0.5);
  for (std::size_t k = 1; k < dets.size(); ++k) CHECK(dets[k - 1].objectness >= dets[k].objectness);
  for (const auto& d : dets) CHECK(d.class_scores[0] == doctest::Approx(1.0).epsilon(1e-5));
  const auto small = det.detect(resize_bilinear(img, 128, 128), 0.0, 0.5);
  for (const auto& d : small) CHECK(d.bbox.x_max <= 128 + 64);
}

TEST_CASE("input gradient matches central differences") {
  for (const char* name : {"toy-a", "toy-b"}) {
    const ConvDetector<double> det(init_weights(DetectorRegistry::instance().get(name), 4));
    Rng rng(5);
    const auto img = oracle::random_image<double>(rng, 256, 256);
    const auto objective = [&](const Image<double>& x) {
      const auto out = det.forward(x);
      double s = 0;
      for (Index c = 0; c < out.cells(); ++c) s += out.objectness(c);
      return s;
    };
    nn::ForwardCache<double> cache;
    const auto out = det.forward(img, &cache);
    nn::Matrix<double> hg = nn::Matrix<double>::Zero(5, out.cells());
    for (Index c = 0; c < out.cells(); ++c) {
      const double s = out.objectness(c);
      hg(0, c) = s * (1 - s);
    }
    const auto g = det.input_gradient(cache, hg);
    const double h = 1e-5;
    for (int i = 0; i < 10; ++i) {
      const Index k = uniform_int(rng, 0, int(img.data().size()) - 1);
      auto p = img, m = img;
      p.data().data()[k] += h;
      m.data().data()[k] -= h;
      const double fd = (objective(p) - objective(m)) / (2 * h);
      const double an = g.data()[k];
      CHECK(std::abs(fd - an) <= 1e-3 * std::max(std::abs(fd), std::abs(an)) + 1e-10);
    }
  }
}

TEST_CASE("gradcam zero and normalized cases") {
  DetectorWeights w = init_weights(DetectorRegistry::instance().get("toy-a"), 6);
  Rng rng(7);
  const auto img = oracle::random_image<double>(rng, 256, 256);
  const Heatmap h = gradcam(ConvDetector<double>(w), img, "block3", {17, 100});
  CHECK(h.height == 256);
  CHECK(h.data.minCoeff() >= 0.0);
  if (h.data.maxCoeff() > 0) CHECK(h.data.maxCoeff() == doctest::Approx(1.0));
  w.params.back().weight.setZero();  // constant head
  const Heatmap z = gradcam(ConvDetector<double>(w), img, "block3", {17, 100});
  CHECK(z.data.maxCoeff() == 0.0);
  CHECK_THROWS_AS(gradcam(ConvDetector<double>(w), img, "block9", {0}), InvalidArgument);
}

TEST_CASE("weights save and load") {
  DetectorWeights w = init_weights(DetectorRegistry::instance().get("toy-b"), 8);
  w.metrics = {{"heldout_confidence", 0.91}};
  const auto path = std::filesystem::temp_directory_path() / "ctxpatch_weights.json";
  save_weights(path, w);
  const auto back = load_weights(path);
  CHECK(back.hash() == w.hash());
  CHECK(back.gate_metric().value() == doctest::Approx(0.91));
  CHECK(init_weights(w.arch, 9).hash() != w.hash());
  CHECK_THROWS_AS(load_weights(path.string() + ".missing"), IoError);
}

TEST_CASE("training preconditions") {
  const auto& arch = DetectorRegistry::instance().get("toy-a");
  DetectorRecipe r;
  CHECK_THROWS_AS(train_toy_detector(arch, {}, {}, r), InvalidArgument);
  CHECK_THROWS_AS(train_toy_detector(arch, scenes(1, 10), {}, r), InvalidArgument);
}

TEST_CASE("training is seeded and the gate is enforced") {
  const auto& arch = DetectorRegistry::instance().get("toy-b");
  const auto train = scenes(2, 50), held = scenes(3, 10);
  DetectorRecipe r;
  r.epochs = 1;
  r.gate = 0.0;
  r.seed = 42;
  const auto a = train_toy_detector(arch, train, held, r);
  const auto b = train_toy_detector(arch, train, held, r);
  CHECK(a.final_loss == b.final_loss);
  CHECK(a.weights.hash() == b.weights.hash());
  r.gate = 0.999;
  try {
    train_toy_detector(arch, train, held, r);
    FAIL("gate not enforced");
  } catch (const UnderTrainedError& e) {
    CHECK(e.achieved() == doctest::Approx(a.heldout_confidence));
  }
}
