#include <filesystem>

#include "ctxpatch/compositing.hpp"
#include "ctxpatch/png_io.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace ctxpatch;

namespace {

TargetRegion box_region(ImageDims dims, BoundingBox box, double r, bool fill_box) {
  TargetRegion t;
  t.bbox = box;
  t.context_scale = r;
  t.fg_mask = Mask<float>(dims.height, dims.width);
  for (Index y = 0; y < dims.height; ++y)
    for (Index x = 0; x < dims.width; ++x)
      if (fill_box ? oracle::inside(box, y, x) : (oracle::inside(box, y, x) && (x + y) % 3 == 0)) t.fg_mask(y, x) = 1;
  return t;
}

TargetRegion random_region(Rng& rng, ImageDims dims) {
  const double w = uniform(rng, 3, dims.width / 2.0), h = uniform(rng, 3, dims.height / 2.0);
  const double x = uniform(rng, 0, dims.width - w), y = uniform(rng, 0, dims.height - h);
  TargetRegion t = box_region(dims, {x, y, x + w, y + h}, uniform(rng, 1.0, 2.5), false);
  for (Index p = 0; p < t.fg_mask.pixels(); ++p)
    if (t.fg_mask.data()(p) > 0 && uniform(rng, 0, 1) < 0.3) t.fg_mask.data()(p) = 0.7f;  // soft, binarizes to 1
  return t;
}

}  // namespace

TEST_CASE("image and mask basics") {
  CHECK_THROWS_AS(Image<float>(0, 3), DimensionError);
  Image<float> img(2, 3, 0.5f);
  CHECK(img.in_unit_range());
  img(1, 2, 0) = 1.5f;
  CHECK_FALSE(img.in_unit_range());
  img.clamp_unit();
  CHECK(img(1, 2, 0) == 1.0f);
  Mask<float> m(1, 3);
  m.data() << 0.2f, 0.5f, 0.9f;
  CHECK(m.binarized().data()(0) == 0.0f);
  CHECK(m.binarized().data()(1) == 1.0f);
  CHECK(m.binarized().data()(2) == 1.0f);
}

TEST_CASE("bounding box geometry") {
  const BoundingBox b{2, 4, 6, 8};
  CHECK(b.scaled(2.0) == BoundingBox{0, 2, 8, 10});
  CHECK(b.scaled(3.0).clipped({10, 10}).x_min == 0.0);
  CHECK(b.contains_pixel(4, 2));
  CHECK_FALSE(b.contains_pixel(8, 2));
  CHECK(iou(b, b) == doctest::Approx(1.0));
  CHECK(iou(b, {6, 4, 10, 8}) == 0.0);
  const Window w = pixel_window({1.6, 0.4, 3.4, 2.6}, {10, 10});
  CHECK(w.col0 == 2);
  CHECK(w.cols == 1);
  CHECK(w.row0 == 0);
  CHECK(w.rows == 3);
}

TEST_CASE("extract_masks with r = 1 covers bbox minus silhouette") {
  const ImageDims dims{20, 20};
  const TargetRegion t = box_region(dims, {4, 5, 12, 15}, 1.0, false);
  const auto m = extract_masks<float>(t, dims);
  for (Index y = 0; y < 20; ++y)
    for (Index x = 0; x < 20; ++x) {
      const bool expect = oracle::inside(t.bbox, y, x) && t.fg_mask(y, x) < 0.5f;
      CHECK(m.bg(y, x) == (expect ? 1.0f : 0.0f));
    }
}

TEST_CASE("extract_masks with a full-box silhouette and r = 2 is the annulus") {
  const ImageDims dims{40, 40};
  const BoundingBox box{12, 14, 24, 22};
  const TargetRegion t = box_region(dims, box, 2.0, true);
  const auto m = extract_masks<float>(t, dims);
  const BoundingBox outer{6, 10, 30, 26};
  for (Index y = 0; y < 40; ++y)
    for (Index x = 0; x < 40; ++x) {
      const bool expect = oracle::inside(outer, y, x) && !oracle::inside(box, y, x);
      CHECK(m.bg(y, x) == (expect ? 1.0f : 0.0f));
    }
}

TEST_CASE("extract_masks is disjoint and binary over random regions") {
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    const ImageDims dims{Index(uniform_int(rng, 8, 40)), Index(uniform_int(rng, 8, 40))};
    const auto m = extract_masks<float>(random_region(rng, dims), dims);
    CHECK((m.fg.data() * m.bg.data()).maxCoeff() == 0.0f);
    const auto u = m.combined();
    CHECK(((u.data() == 0.0f) || (u.data() == 1.0f)).all());
  }
}

TEST_CASE("extract_masks rejects bad regions") {
  const ImageDims dims{16, 16};
  TargetRegion t = box_region(dims, {2, 2, 6, 6}, 1.5, true);
  t.bbox = {10, 10, 20, 14};
  CHECK_THROWS_AS(extract_masks<float>(t, dims), BoundsError);
  t.bbox = {2, 2, 6, 6};
  t.context_scale = 0.9;
  CHECK_THROWS_AS(extract_masks<float>(t, dims), InvalidArgument);
  t.context_scale = 1.5;
  CHECK_THROWS_AS(extract_masks<float>(t, {16, 17}), DimensionError);
}

TEST_CASE("ring is clipped at the image border") {
  const ImageDims dims{20, 20};
  const TargetRegion t = box_region(dims, {0, 0, 6, 6}, 2.0, true);
  const auto m = extract_masks<float>(t, dims);
  CHECK(m.bg(0, 7) == 1.0f);
  CHECK(m.bg(0, 9) == 0.0f);
  CHECK(m.bg.data().sum() == doctest::Approx(81 - 36));
}

TEST_CASE("build_contextual_patch") {
  Image<float> t(1, 1, 0.3f), p(1, 1, 0.9f);
  Mask<float> one(1, 1, 1.0f), zero(1, 1, 0.0f);
  CHECK(build_contextual_patch(t, one, zero, p)(0, 0, 0) == doctest::Approx(0.3f));
  CHECK(build_contextual_patch(t, zero, one, p)(0, 0, 0) == doctest::Approx(0.9f));
  Rng rng(1);
  const auto T = oracle::random_image<float>(rng, 5, 4), P = oracle::random_image<float>(rng, 5, 4);
  CHECK(build_contextual_patch(T, Mask<float>(5, 4, 1), Mask<float>(5, 4, 0), P) == T);
  CHECK(build_contextual_patch(T, Mask<float>(5, 4, 0), Mask<float>(5, 4, 1), P) == P);
  CHECK_THROWS_AS(build_contextual_patch(T, Mask<float>(5, 3), Mask<float>(5, 4), P), DimensionError);
}

TEST_CASE("compose_adversarial") {
  Image<float> x(1, 1, 0.4f), pc(1, 1, 0.8f);
  CHECK(compose_adversarial(x, pc, Mask<float>(1, 1, 0.5f))(0, 0, 1) == doctest::Approx(0.6f));
  Rng rng(2);
  const auto X = oracle::random_image<float>(rng, 6, 7), PC = oracle::random_image<float>(rng, 6, 7);
  CHECK(compose_adversarial(X, PC, Mask<float>(6, 7, 0)) == X);
  CHECK(compose_adversarial(X, PC, Mask<float>(6, 7, 1)) == PC);
  CHECK_THROWS_AS(compose_adversarial(X, PC, Mask<float>(6, 6)), DimensionError);
}

TEST_CASE("compositing convexity and idempotence") {
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const auto X = oracle::random_image<double>(rng, 5, 5), PC = oracle::random_image<double>(rng, 5, 5);
    Mask<double> m(5, 5);
    for (Index p = 0; p < 25; ++p) m.data()(p) = uniform(rng, 0, 1);
    const auto once = compose_adversarial(X, PC, m);
    for (Index k = 0; k < once.data().size(); ++k) {
      const double a = X.data().data()[k], b = PC.data().data()[k], v = once.data().data()[k];
      CHECK(v >= std::min(a, b) - 1e-15);
      CHECK(v <= std::max(a, b) + 1e-15);
    }
    Mask<double> bin = m.binarized();
    const auto b1 = compose_adversarial(X, PC, bin);
    CHECK(compose_adversarial(b1, PC, bin) == b1);
  }
}

TEST_CASE("place_patch no-op and single pixel") {
  Rng rng(4);
  const ImageDims dims{12, 12};
  const auto scene = oracle::random_image<float>(rng, 12, 12);
  const TargetRegion t = box_region(dims, {3, 3, 9, 9}, 1.5, false);
  auto patch = contextualize(scene, t, oracle::random_image<float>(rng, 8, 8));
  patch.bg.data().setZero();
  patch.background.data().setZero();
  CHECK(place_patch(scene, patch) == scene);

  Index pr = 0, pc = 0;
  while (patch.fg(pr, pc) > 0) ++pc;
  patch.bg(pr, pc) = 1.0f;
  for (Index ch = 0; ch < 3; ++ch) patch.background(pr, pc, ch) = 1.0f;
  const auto out = place_patch(scene, patch);
  for (Index r = 0; r < 12; ++r)
    for (Index c = 0; c < 12; ++c)
      for (Index ch = 0; ch < 3; ++ch) {
        const bool hit = r == patch.window.row0 + pr && c == patch.window.col0 + pc;
        CHECK(out(r, c, ch) == (hit ? 1.0f : scene(r, c, ch)));
      }
}

TEST_CASE("place_patch keeps every foreground pixel") {
  Rng rng(6);
  for (int i = 0; i < 30; ++i) {
    const ImageDims dims{24, 24};
    Scene s;
    s.image = oracle::random_image<float>(rng, 24, 24);
    s.targets = {random_region(rng, dims)};
    const auto out = place_patch(s, oracle::random_image<float>(rng, 16, 16), s.targets[0]);
    double diff = 0;
    const auto fg = s.targets[0].fg_mask.binarized();
    for (Index p = 0; p < fg.pixels(); ++p)
      for (Index ch = 0; ch < 3; ++ch) diff += fg.data()(p) * std::abs(out.data()(ch, p) - s.image.data()(ch, p));
    CHECK(diff == 0.0);
  }
}

TEST_CASE("place_patch rejects an empty placement") {
  Image<float> scene(8, 8, 0.2f);
  ContextualPatch<float> p;
  CHECK_THROWS_AS(place_patch(scene, p), BoundsError);
}

TEST_CASE("scene compositor: rings never cover any silhouette and canvas locality") {
  Rng rng(7);
  const ImageDims dims{40, 40};
  Scene s;
  s.image = oracle::random_image<float>(rng, 40, 40, 0.0, 0.5);
  s.targets = {box_region(dims, {5, 5, 15, 15}, 1.8, true), box_region(dims, {17, 6, 27, 14}, 1.8, false)};
  const SceneCompositor<double> comp(s, 1.8, 8, 8);
  const auto canvas = oracle::random_image<double>(rng, 8, 8);
  const auto out = comp.forward(canvas);
  CHECK(foreground_preserved(comp.clean(), out, comp.foreground()));

  // pixels a canvas perturbation changes must be ring pixels
  Mask<float> ring(40, 40);
  for (const auto& t : s.targets) {
    TargetRegion r = t;
    const auto m = extract_masks<float>(r, dims, &comp.foreground());
    ring.data() = ring.data().max(m.bg.data());
  }
  for (int k = 0; k < 10; ++k) {
    auto bumped = canvas;
    bumped.data()(uniform_int(rng, 0, 2), uniform_int(rng, 0, 63)) += 0.25;
    const auto o2 = comp.forward(bumped);
    for (Index p = 0; p < ring.pixels(); ++p)
      for (Index ch = 0; ch < 3; ++ch)
        if (o2.data()(ch, p) != out.data()(ch, p)) CHECK(ring.data()(p) == 1.0f);
  }
}

TEST_CASE("scene compositor backward is the adjoint of forward") {
  Rng rng(8);
  const ImageDims dims{32, 32};
  Scene s;
  s.image = oracle::random_image<float>(rng, 32, 32);
  s.targets = {box_region(dims, {4, 4, 14, 12}, 1.6, false), box_region(dims, {12, 10, 22, 20}, 2.0, true)};
  const SceneCompositor<double> comp(s, 2.0, 7, 9);
  const auto zero = comp.forward(Image<double>(7, 9, 0.0));
  const auto v = oracle::random_image<double>(rng, 7, 9);
  Image<double>::Storage w = oracle::random_image<double>(rng, 32, 32, -1, 1).data();
  const Image<double>::Storage jv = comp.forward(v).data() - zero.data();
  const Image<double>::Storage jtw = comp.backward(w, 7, 9);
  CHECK((jv * w).sum() == doctest::Approx((v.data() * jtw).sum()).epsilon(1e-12));
}

TEST_CASE("png round trip within quantization") {
  Rng rng(9);
  const auto img = oracle::random_image<float>(rng, 9, 11);
  const auto dir = std::filesystem::temp_directory_path() / "ctxpatch_png_test";
  std::filesystem::create_directories(dir);
  write_png(dir / "a.png", img);
  const auto back = read_png(dir / "a.png");
  REQUIRE(back.dims() == img.dims());
  CHECK((back.data() - img.data()).abs().maxCoeff() <= 0.5f / 255.0f + 1e-6f);
  Mask<float> m(4, 5);
  m(1, 2) = 1.0f;
  write_mask_png(dir / "m.png", m);
  CHECK(read_mask_png(dir / "m.png") == m);
  CHECK_THROWS_AS(read_png(dir / "missing.png"), IoError);
}
