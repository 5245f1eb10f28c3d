#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"

#include "iclb/metrics.hpp"
#include "iclb/rng.hpp"
#include "iclb/tasks.hpp"

using namespace iclb;

namespace {

Image random_image(int h, int w, std::uint64_t seed) {
  Image img(h, w, 3);
  Rng rng(seed);
  for (auto& v : img.pixels) v = static_cast<float>(rng.uniform(0.0, 1.0));
  return img;
}

// Two-pass local SSIM: Gaussian means first, then centred second moments.
double ssim_oracle(const Image& a, const Image& b) {
  const int k = 7;
  const double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
  std::vector<double> w(k * k);
  double z = 0.0;
  for (int i = 0; i < k * k; ++i) {
    const double dy = i / k - 3, dx = i % k - 3;
    w[i] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
    z += w[i];
  }
  for (auto& v : w) v /= z;
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    double acc = 0.0;
    int n = 0;
    for (int y0 = 0; y0 <= a.height - k; ++y0)
      for (int x0 = 0; x0 <= a.width - k; ++x0) {
        double mx = 0, my = 0;
        for (int i = 0; i < k * k; ++i) {
          mx += w[i] * a.at(y0 + i / k, x0 + i % k, c);
          my += w[i] * b.at(y0 + i / k, x0 + i % k, c);
        }
        double vx = 0, vy = 0, cv = 0;
        for (int i = 0; i < k * k; ++i) {
          const double dx = a.at(y0 + i / k, x0 + i % k, c) - mx;
          const double dy = b.at(y0 + i / k, x0 + i % k, c) - my;
          vx += w[i] * dx * dx;
          vy += w[i] * dy * dy;
          cv += w[i] * dx * dy;
        }
        acc += (2 * mx * my + c1) * (2 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++n;
      }
    total += acc / n;
  }
  return total / 3;
}

}  // namespace

TEST_CASE("metric directions and names") {
  CHECK(direction_of(MetricId::RMSE) == Direction::LowerBetter);
  CHECK(direction_of(MetricId::ARel) == Direction::LowerBetter);
  CHECK(direction_of(MetricId::Delta1) == Direction::HigherBetter);
  CHECK(direction_of(MetricId::MIoU) == Direction::HigherBetter);
  for (auto id : {MetricId::PSNR, MetricId::SSIM, MetricId::MIoU, MetricId::RMSE, MetricId::ARel, MetricId::Delta1}) {
    CHECK(metric_from_name(metric_name(id)) == id);
  }
  CHECK_THROWS_AS(metric_from_name("fid"), std::invalid_argument);
}

TEST_CASE("psnr") {
  const Image a = Image::filled(16, 16, {0.5f, 0.5f, 0.5f});
  CHECK(std::isinf(psnr(a, a)));
  const Image b = Image::filled(16, 16, {0.6f, 0.6f, 0.6f});
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-5));
  CHECK_THROWS_AS(psnr(a, Image(8, 8, 3)), std::invalid_argument);
}

TEST_CASE("ssim") {
  const Image x = random_image(16, 16, 1);
  CHECK(ssim(x, x) == doctest::Approx(1.0));
  SUBCASE("matches the two-pass oracle") {
    for (std::uint64_t s = 0; s < 10; ++s) {
      const Image a = random_image(16, 16, 10 + s);
      Image b = a;
      Rng rng(s);
      for (auto& v : b.pixels) v = std::clamp(v + static_cast<float>(rng.normal() * 0.1), 0.0f, 1.0f);
      CHECK(ssim(a, b) == doctest::Approx(ssim_oracle(a, b)).epsilon(1e-9));
    }
  }
  SUBCASE("flat images differing by a constant") {
    const Image a = Image::filled(16, 16, {0.5f, 0.5f, 0.5f});
    const Image b = Image::filled(16, 16, {0.6f, 0.6f, 0.6f});
    const double mx = 0.5, my = 0.6;
    const double expect = (2 * mx * my + 1e-4) / (mx * mx + my * my + 1e-4);
    CHECK(ssim(a, b) == doctest::Approx(expect).epsilon(1e-5));
  }
  SUBCASE("panels smaller than the window use one global window") {
    const Image a = random_image(4, 4, 3);
    CHECK(ssim(a, a) == doctest::Approx(1.0));
  }
  SUBCASE("noise lowers ssim monotonically") {
    const Image a = gen_base_image(2);
    double prev = 1.0;
    for (double sd : {0.02, 0.05, 0.1, 0.2}) {
      Image b = a;
      Rng rng(5);
      for (auto& v : b.pixels) v = std::clamp(v + static_cast<float>(rng.normal() * sd), 0.0f, 1.0f);
      const double s = ssim(a, b);
      CHECK(s < prev);
      prev = s;
    }
  }
}

TEST_CASE("miou") {
  const auto& pal = segmentation_palette();
  const Image bg = Image::filled(4, 4, pal[0]);
  CHECK(miou(bg, bg, pal) == doctest::Approx(1.0));
  Image half = bg;
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 4; ++x)
      for (int c = 0; c < 3; ++c) half.at(y, x, c) = pal[1][c];
  // background: 8/16, rectangle: 0/8
  CHECK(miou(bg, half, pal) == doctest::Approx(0.25));
  SUBCASE("predictions snap to the nearest palette colour") {
    Image noisy = half;
    for (auto& v : noisy.pixels) v = std::clamp(v + 0.1f, 0.0f, 1.0f);
    CHECK(miou(noisy, half, pal) == doctest::Approx(1.0));
  }
}

TEST_CASE("depth metrics") {
  Image g = Image::filled(2, 2, {0.5f, 0.5f, 0.5f});
  Image p = g;
  for (auto& v : p.pixels) v = 0.6f;
  const auto d = depth_metrics(p, g);
  CHECK(d.rmse == doctest::Approx(0.1).epsilon(1e-5));
  CHECK(d.abs_rel == doctest::Approx(0.2).epsilon(1e-5));
  CHECK(d.delta1 == doctest::Approx(1.0));
  for (auto& v : p.pixels) v = 0.7f;
  CHECK(depth_metrics(p, g).delta1 == doctest::Approx(0.0));
}

TEST_CASE("degradation") {
  CHECK(degradation(0.49, 0.05, Direction::HigherBetter) == doctest::Approx(-89.7959).epsilon(1e-4));
  CHECK(degradation(0.28, 1.10, Direction::LowerBetter) == doctest::Approx(-292.857).epsilon(1e-4));
  CHECK(degradation(22.26, 12.84, Direction::HigherBetter) == doctest::Approx(-42.3181).epsilon(1e-4));
  CHECK(degradation(0.73, 0.76, Direction::HigherBetter) == doctest::Approx(4.1096).epsilon(1e-4));
  CHECK(degradation(0.8, 0.8, Direction::LowerBetter) == 0.0);
  CHECK_THROWS_AS(degradation(0.0, 0.5, Direction::HigherBetter), UndefinedRatioError);
  CHECK_THROWS_AS(degradation(std::numeric_limits<double>::infinity(), 30.0, Direction::HigherBetter),
                  std::invalid_argument);
}

TEST_CASE("blend") {
  const Image x = Image::filled(2, 2, {0.2f, 0.4f, 0.6f});
  const Image a = Image::filled(2, 2, {0.0f, 1.0f, 0.0f});
  CHECK(blend(x, a, 0.0) == x);
  CHECK(blend(x, a, 1.0) == a);
  const Image m = blend(x, a, 0.25);
  CHECK(m.at(1, 1, 0) == doctest::Approx(0.15));
  CHECK(m.at(1, 1, 1) == doctest::Approx(0.55));
  CHECK_THROWS_AS(blend(x, a, 1.5), std::invalid_argument);
}

TEST_CASE("evaluate_metric dispatch") {
  const Image a = random_image(16, 16, 4);
  const Image b = random_image(16, 16, 5);
  CHECK(evaluate_metric(MetricId::PSNR, a, b) == psnr(a, b));
  CHECK(evaluate_metric(MetricId::RMSE, a, b) == depth_metrics(a, b).rmse);
  CHECK(evaluate_metric(MetricId::MIoU, a, b, segmentation_palette()) ==
        miou(a, b, segmentation_palette()));
}
