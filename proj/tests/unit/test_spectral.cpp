#include <doctest.h>

#include <cmath>
#include <numbers>

#include "hsi/error.hpp"
#include "hsi/phantom.hpp"
#include "hsi/spectral.hpp"
#include "test_util.hpp"

using namespace hsi;

namespace {

// Literal form: sum of products over the product of two separate norms.
double sam_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  for (double x : a) aa += x * x;
  for (double y : b) bb += y * y;
  double c = dot / (std::sqrt(aa) * std::sqrt(bb));
  if (c > 1.0) c = 1.0;
  if (c < -1.0) c = -1.0;
  return std::acos(c);
}

double sam(const std::vector<double>& a, const std::vector<double>& b) {
  return sam_distance(std::span<const double>(a), std::span<const double>(b));
}

}  // namespace

TEST_CASE("SAM analytic values") {
  CHECK(sam({1.0, 0.0}, {0.0, 1.0}) == doctest::Approx(std::numbers::pi / 2).epsilon(1e-15));
  CHECK(sam({1.0, 1.0}, {1.0, 0.0}) == doctest::Approx(std::numbers::pi / 4).epsilon(1e-15));
  CHECK(sam({1.0, 2.0}, {-1.0, -2.0}) == doctest::Approx(std::numbers::pi).epsilon(1e-15));
  CHECK(sam({0.3, 0.2, 0.9}, {0.3, 0.2, 0.9}) == 0.0);
}

TEST_CASE("SAM errors") {
  CHECK_THROWS_AS(sam({1.0, 2.0}, {1.0}), ShapeError);
  CHECK_THROWS_AS(sam({0.0, 0.0}, {1.0, 0.0}), DomainError);
  CHECK_THROWS_AS(sam({1.0, 0.0}, {0.0, 0.0}), DomainError);
}

TEST_CASE("SAM matches the literal oracle on random 104-band pairs") {
  Rng rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 2000; ++trial) {
    const auto a = testutil::random_spectrum(rng, 104);
    const auto b = testutil::random_spectrum(rng, 104);
    worst = std::max(worst, std::abs(sam(a, b) - sam_oracle(a, b)));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("SAM properties") {
  Rng rng(7);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 1 + rng.below(12);
    auto a = testutil::random_spectrum(rng, n, -1.0, 1.0);
    auto b = testutil::random_spectrum(rng, n, -1.0, 1.0);
    const double d = sam(a, b);
    CHECK(d == sam(b, a));
    CHECK(d >= 0.0);
    CHECK(d <= std::numbers::pi);
    CHECK_FALSE(std::isnan(d));

    // Exactly parallel (power-of-two scale) gives 0; a perturbed copy does not.
    std::vector<double> twice(a);
    for (auto& x : twice) x *= 2.0;
    CHECK(sam(a, twice) == 0.0);
    if (n >= 2) {
      std::vector<double> bent(a);
      bent[0] += 0.5;
      if (std::abs(a[1]) > 1e-3) CHECK(sam(a, bent) > 0.0);
    }
  }
}

TEST_CASE("SAM scale invariance on positive spectra") {
  Rng rng(8);
  for (int trial = 0; trial < 2000; ++trial) {
    const auto a = testutil::random_spectrum(rng, 104);
    const auto b = testutil::random_spectrum(rng, 104);
    const double k = std::exp(rng.uniform(-6.0, 6.0));
    std::vector<double> ka(a);
    for (auto& x : ka) x *= k;
    CHECK(std::abs(sam(ka, b) - sam(a, b)) <= 1e-12);
  }
}

TEST_CASE("L2 distance") {
  const std::vector<double> a{3.0, 0.0}, b{0.0, 4.0};
  CHECK(l2_distance(std::span<const double>(a), std::span<const double>(b)) == 5.0);
  CHECK(l2_distance(std::span<const double>(a), std::span<const double>(a)) == 0.0);
  const std::vector<double> c{1.0};
  CHECK_THROWS_AS(l2_distance(std::span<const double>(a), std::span<const double>(c)), ShapeError);

  Rng rng(3);
  auto l2 = [](const std::vector<double>& x, const std::vector<double>& y) {
    return l2_distance(std::span<const double>(x), std::span<const double>(y));
  };
  for (int trial = 0; trial < 1000; ++trial) {
    const auto x = testutil::random_spectrum(rng, 104, -1.0, 1.0);
    const auto y = testutil::random_spectrum(rng, 104, -1.0, 1.0);
    const auto z = testutil::random_spectrum(rng, 104, -1.0, 1.0);
    long double s = 0.0L;
    for (std::size_t i = 0; i < x.size(); ++i) s += (static_cast<long double>(x[i]) - y[i]) * (x[i] - y[i]);
    const double oracle = static_cast<double>(std::sqrt(s));
    CHECK(std::abs(l2(x, y) - oracle) <= 1e-12 * oracle);
    CHECK(l2(x, y) == l2(y, x));
    CHECK(l2(x, z) <= l2(x, y) + l2(y, z) + 1e-12);
  }
}

TEST_CASE("mean spectrum") {
  const std::vector<std::vector<double>> one{{0.2, 0.4}};
  CHECK(mean_spectrum(one) == one[0]);
  const std::vector<std::vector<double>> two{{0.0, 0.0}, {2.0, 2.0}};
  CHECK(mean_spectrum(two) == std::vector<double>{1.0, 1.0});
  CHECK_THROWS_AS(mean_spectrum(std::span<const std::vector<double>>{}), DomainError);

  Rng rng(12);
  std::vector<std::vector<double>> many;
  for (int i = 0; i < 1000; ++i) many.push_back(testutil::random_spectrum(rng, 104));
  const auto mean = mean_spectrum(many);
  for (std::size_t b = 0; b < 104; ++b) {
    long double s = 0.0L;
    for (const auto& v : many) s += v[b];
    CHECK(std::abs(mean[b] - static_cast<double>(s / 1000.0L)) <= 1e-12);
  }
}

TEST_CASE("sam_map: serial and parallel agree; invalid pixels are NaN") {
  Rng rng(4);
  const auto cube = testutil::random_cube(rng, 20, 17, 9, 0.7);
  const auto ref = testutil::random_spectrum(rng, 9);
  const auto serial = sam_map(cube, ref, Exec::serial);
  const auto parallel = sam_map(cube, ref, Exec::parallel);
  for (std::size_t p = 0; p < cube.pixel_count(); ++p) {
    if (cube.valid(p)) {
      CHECK(serial[p] == parallel[p]);
      CHECK(serial[p] == sam_distance(cube.pixel(p), std::span<const double>(ref)));
    } else {
      CHECK(std::isnan(serial[p]));
      CHECK(std::isnan(parallel[p]));
    }
  }
}

TEST_CASE("chi-square statistic and survival") {
  const std::vector<double> m1{1.0, 2.0}, v1{0.5, 1.0}, m2{1.5, 2.0}, v2{0.5, 3.0};
  const double expect = 0.25 / (0.5 / 10 + 0.5 / 20);
  CHECK(two_sample_chi2(m1, v1, 10, m2, v2, 20) == doctest::Approx(expect).epsilon(1e-14));
  const std::vector<double> zero{0.0, 0.0};
  CHECK(two_sample_chi2(m1, zero, 3, m1, zero, 3) == 0.0);
  CHECK(std::isinf(two_sample_chi2(m1, zero, 3, m2, zero, 3)));

  for (double x : {0.1, 1.0, 3.7, 12.0}) {
    CHECK(chi2_survival(x, 2) == doctest::Approx(std::exp(-x / 2)).epsilon(1e-13));
    CHECK(chi2_survival(x, 1) == doctest::Approx(std::erfc(std::sqrt(x / 2))).epsilon(1e-12));
  }
  CHECK(chi2_survival(0.0, 5) == 1.0);
  CHECK_THROWS_AS(chi2_survival(1.0, 0), DomainError);
}

TEST_CASE("separability: identical populations are indistinguishable") {
  Rng rng(2);
  HsiCube cube(10, 10, SpectralAxis::linear(500, 600, 6));
  AnnotationMask mask(10, 10);
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 10; ++c) {
      const auto s = testutil::random_spectrum(rng, 6);
      for (std::size_t b = 0; b < 6; ++b) cube.at(r, c, b) = cube.at(r + 5, c, b) = static_cast<float>(s[b]);
      cube.set_valid(r, c, true);
      cube.set_valid(r + 5, c, true);
      mask.set(r, c, 1);
      mask.set(r + 5, c, 6);
    }
  }
  const std::vector<int> classes{1, 6};
  const auto report = cluster_separability(cube, mask, classes);
  const auto& p = report.pair(6, 1);
  CHECK(p.inter_centroid_sam == 0.0);
  CHECK(p.chi2 == 0.0);
  CHECK(p.p_value == doctest::Approx(1.0));
  CHECK(p.intra_a == p.intra_b);
  CHECK(p.intra_a > 0.0);
}

TEST_CASE("separability: disjoint noiseless directions") {
  HsiCube cube(4, 4, SpectralAxis({500.0, 600.0}));
  AnnotationMask mask(4, 4);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 4; ++c) {
      const bool left = c < 2;
      cube.at(r, c, 0) = left ? 1.0f : 0.0f;
      cube.at(r, c, 1) = left ? 0.0f : 1.0f;
      cube.set_valid(r, c, true);
      mask.set(r, c, left ? 1 : 6);
    }
  }
  const std::vector<int> classes{1, 6};
  const auto report = cluster_separability(cube, mask, classes);
  const auto& p = report.pair(1, 6);
  CHECK(p.intra_a == 0.0);
  CHECK(p.intra_b == 0.0);
  CHECK(p.inter_centroid_sam == doctest::Approx(std::numbers::pi / 2));
  CHECK(p.p_value == 0.0);
}

TEST_CASE("separability errors") {
  HsiCube cube(2, 2, SpectralAxis({500.0, 600.0}));
  for (std::size_t p = 0; p < 4; ++p) {
    cube.set_valid(p, true);
    cube.pixel(p)[0] = 1.0f;
  }
  AnnotationMask mask(2, 2, 1);
  mask.set(0, 0, 6);
  const std::vector<int> classes{1, 6};
  CHECK_THROWS_AS(cluster_separability(cube, mask, classes), DomainError);  // single-pixel class
  const std::vector<int> absent{1, 8};
  CHECK_THROWS_AS(cluster_separability(cube, mask, absent), DomainError);
  const std::vector<int> lone{1};
  CHECK_THROWS_AS(cluster_separability(cube, mask, lone), DomainError);
  CHECK_THROWS_AS(cluster_separability(cube, AnnotationMask(3, 2), classes), ShapeError);
}

TEST_CASE("separability: subsampled intra distance is within 2% of the exhaustive value") {
  auto config = standard_phantom(6);
  config.height = config.width = 96;
  config.noise_sigma = 0.03;
  const auto scene = generate_scene(config);
  const std::vector<int> classes{1, 6};
  SeparabilityOptions options;
  options.max_sampled_pixels = 600;
  options.seed = 9;
  const auto report = cluster_separability(scene.cube, scene.mask, classes, options);
  for (const auto& spread : report.classes) {
    REQUIRE(spread.pixel_count > spread.sampled);
    std::vector<std::vector<double>> all;
    for (std::size_t p = 0; p < scene.cube.pixel_count(); ++p) {
      if (scene.cube.valid(p) && scene.mask.at(p) == spread.class_id) {
        const auto px = scene.cube.pixel(p);
        all.emplace_back(px.begin(), px.end());
      }
    }
    double total = 0.0;
    for (std::size_t i = 0; i < all.size(); ++i) {
      for (std::size_t j = i + 1; j < all.size(); ++j) total += sam_oracle(all[i], all[j]);
    }
    const double exhaustive = total / (0.5 * static_cast<double>(all.size()) * static_cast<double>(all.size() - 1));
    CHECK(std::abs(spread.intra_sam - exhaustive) <= 0.02 * exhaustive);
    CHECK(mean_pairwise_sam(all, Exec::serial) == doctest::Approx(exhaustive).epsilon(1e-12));
  }
}

TEST_CASE("separability: a planted 700 nm boost separates centroids beyond the intra spread") {
  auto config = planted_band_phantom(3, 700.0, 0.2);
  config.height = config.width = 64;
  config.noise_sigma = 0.005;
  config.vignette_strength = 0.0;
  const auto scene = generate_scene(config);
  const std::vector<int> classes{1, 6};
  const auto report = cluster_separability(scene.cube, scene.mask, classes);
  const auto& p = report.pair(1, 6);
  CHECK(p.inter_centroid_sam > p.intra_a);
  CHECK(p.inter_centroid_sam > p.intra_b);
}
