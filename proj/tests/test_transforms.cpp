#include "ctxpatch/transforms.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace ctxpatch;

TEST_CASE("disabled config samples the identity") {
  Rng rng(1);
  const auto t = sample_transform(TransformConfig::disabled(), rng);
  CHECK(t.identity());
  Rng a(5), b(5);
  const TransformConfig c;
  CHECK(sample_transform(c, a) == sample_transform(c, b));
}

TEST_CASE("sampled parameters stay in range") {
  TransformConfig c;
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const auto t = sample_transform(c, rng);
    CHECK(t.scale >= c.scale_min);
    CHECK(t.scale <= c.scale_max);
    CHECK(std::abs(t.rotation_deg) <= c.rotation_deg);
    CHECK(std::abs(t.brightness) <= c.brightness);
    CHECK(t.contrast >= c.contrast_min);
    CHECK(t.contrast <= c.contrast_max);
  }
}

TEST_CASE("config validation") {
  TransformConfig c;
  c.scale_min = 1.5;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c = TransformConfig();
  c.noise_sigma = -0.1;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  const auto j = to_json(TransformConfig());
  CHECK(to_json(transform_config_from_json(j)) == j);
}

TEST_CASE("identity and clamp") {
  Rng rng(3);
  const auto img = oracle::random_image<float>(rng, 9, 9);
  CHECK(apply_transform(img, Transform{}) == img);
  Transform t;
  t.brightness = 0.1;
  CHECK(apply_transform(Image<float>(2, 2, 0.95f), t)(1, 1, 2) == 1.0f);
}

TEST_CASE("outputs stay in the unit range") {
  TransformConfig c;
  c.brightness = 0.5;
  c.noise_sigma = 0.3;
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    const auto img = oracle::random_image<float>(rng, 16, 16);
    CHECK(apply_transform(img, sample_transform(c, rng)).in_unit_range());
  }
}

TEST_CASE("rotation round trip of a centered disk") {
  const Index n = 96;
  Image<double> disk(n, n, 0.2);
  for (Index r = 0; r < n; ++r)
    for (Index c = 0; c < n; ++c)
      if (std::hypot(r + 0.5 - n / 2.0, c + 0.5 - n / 2.0) < 30)
        for (Index ch = 0; ch < 3; ++ch) disk(r, c, ch) = 0.9;
  for (double deg : {5.0, 12.0, 15.0}) {
    Transform a, b;
    a.rotation_deg = deg;
    b.rotation_deg = -deg;
    const auto back = apply_transform(apply_transform(disk, a), b);
    // pixels inside the inscribed circle never sample the out-of-frame fill
    double err = 0;
    int count = 0;
    for (Index r = 0; r < n; ++r)
      for (Index c = 0; c < n; ++c)
        if (std::hypot(r + 0.5 - n / 2.0, c + 0.5 - n / 2.0) < n / 2.0 - 2) {
          err += (back.data().col(r * n + c) - disk.data().col(r * n + c)).abs().sum() / 3.0;
          ++count;
        }
    const double mae = err / count;
    MESSAGE("round trip " << deg << " deg: " << mae);
    CHECK(mae < 0.02);
  }
}

TEST_CASE("backward matches central differences") {
  Rng rng(6);
  const ImageDims dims{12, 12};
  Transform t;
  t.scale = 1.17;
  t.rotation_deg = 9.0;
  t.brightness = 0.03;
  t.contrast = 1.1;
  t.noise_sigma = 0.01;
  t.noise_seed = 77;
  const auto img = oracle::random_image<double>(rng, 12, 12, 0.1, 0.9);
  const auto w = oracle::random_image<double>(rng, 12, 12, -1, 1);
  const auto f = [&](const Image<double>& x) {
    TransformPass<double> pass(dims, t);
    return (pass.forward(x).data() * w.data()).sum();
  };
  TransformPass<double> pass(dims, t);
  pass.forward(img);
  const auto g = pass.backward(w.data());
  const double h = 1e-6;
  for (int i = 0; i < 20; ++i) {
    const Index k = uniform_int(rng, 0, int(img.data().size()) - 1);
    auto p = img, m = img;
    p.data().data()[k] += h;
    m.data().data()[k] -= h;
    const double fd = (f(p) - f(m)) / (2 * h);
    CHECK(std::abs(fd - g.data()[k]) <= 1e-4 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("transformed boxes follow the silhouette") {
  const ImageDims dims{64, 64};
  TargetRegion tr;
  tr.bbox = {24, 24, 40, 40};
  tr.fg_mask = Mask<float>(64, 64);
  for (Index r = 24; r < 40; ++r)
    for (Index c = 24; c < 40; ++c) tr.fg_mask(r, c) = 1;
  Transform t;
  t.scale = 1.25;
  TransformPass<float> pass(dims, t);
  const auto box = transformed_target_box(pass, tr);
  REQUIRE(box.has_value());
  CHECK(box->width() == doctest::Approx(20.0).epsilon(0.1));
  CHECK(box->center_x() == doctest::Approx(32.0).epsilon(0.05));

  tr.bbox = {0, 0, 6, 6};
  tr.fg_mask = Mask<float>(64, 64);
  for (Index r = 0; r < 6; ++r)
    for (Index c = 0; c < 6; ++c) tr.fg_mask(r, c) = 1;
  t.scale = 1.3;
  TransformPass<float> out(dims, t);
  CHECK_FALSE(transformed_target_box(out, tr).has_value());
}
