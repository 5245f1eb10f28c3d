#include "iclb/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace iclb {

namespace {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;
constexpr int kWindow = 7;
constexpr double kSigma = 1.5;

void require_same_shape(const Image& a, const Image& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": image shapes differ (" +
                                std::to_string(a.height) + "x" + std::to_string(a.width) + "x" +
                                std::to_string(a.channels) + " vs " + std::to_string(b.height) + "x" +
                                std::to_string(b.width) + "x" + std::to_string(b.channels) + ")");
  }
}

std::array<double, kWindow * kWindow> gaussian_window() {
  std::array<double, kWindow * kWindow> w{};
  double total = 0.0;
  const int r = kWindow / 2;
  for (int y = 0; y < kWindow; ++y) {
    for (int x = 0; x < kWindow; ++x) {
      const double d2 = static_cast<double>((y - r) * (y - r) + (x - r) * (x - r));
      w[y * kWindow + x] = std::exp(-d2 / (2.0 * kSigma * kSigma));
      total += w[y * kWindow + x];
    }
  }
  for (auto& v : w) v /= total;
  return w;
}

double ssim_from_moments(double mx, double my, double vx, double vy, double cov) {
  return ((2.0 * mx * my + kC1) * (2.0 * cov + kC2)) /
         ((mx * mx + my * my + kC1) * (vx + vy + kC2));
}

}  // namespace

Direction direction_of(MetricId id) {
  switch (id) {
    case MetricId::RMSE:
    case MetricId::ARel:
      return Direction::LowerBetter;
    default:
      return Direction::HigherBetter;
  }
}

MetricSpec metric_spec(MetricId id) { return {id, direction_of(id)}; }

std::string metric_name(MetricId id) {
  switch (id) {
    case MetricId::PSNR: return "PSNR";
    case MetricId::SSIM: return "SSIM";
    case MetricId::MIoU: return "mIoU";
    case MetricId::RMSE: return "RMSE";
    case MetricId::ARel: return "A.Rel";
    case MetricId::Delta1: return "delta1";
  }
  return "?";
}

MetricId metric_from_name(const std::string& name) {
  for (auto id : {MetricId::PSNR, MetricId::SSIM, MetricId::MIoU, MetricId::RMSE, MetricId::ARel,
                  MetricId::Delta1}) {
    if (metric_name(id) == name) return id;
  }
  throw std::invalid_argument("unknown metric '" + name + "'");
}

double psnr(const Image& a, const Image& b) {
  require_same_shape(a, b, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = static_cast<double>(a.pixels[i]) - b.pixels[i];
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  const double mse = se / static_cast<double>(a.pixels.size());
  return 10.0 * std::log10(1.0 / mse);
}

double ssim_global(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("ssim_global: size mismatch");
  const double n = static_cast<double>(a.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    mx += a[i];
    my += b[i];
  }
  mx /= n;
  my /= n;
  double vx = 0.0, vy = 0.0, cov = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    vx += (a[i] - mx) * (a[i] - mx);
    vy += (b[i] - my) * (b[i] - my);
    cov += (a[i] - mx) * (b[i] - my);
  }
  return ssim_from_moments(mx, my, vx / n, vy / n, cov / n);
}

double ssim(const Image& a, const Image& b) {
  require_same_shape(a, b, "ssim");
  const int h = a.height;
  const int w = a.width;
  const int ch = a.channels;
  double total = 0.0;
  if (h < kWindow || w < kWindow) {
    std::vector<float> xa(static_cast<std::size_t>(h) * w), xb(xa.size());
    for (int c = 0; c < ch; ++c) {
      for (int i = 0; i < h * w; ++i) {
        xa[i] = a.pixels[static_cast<std::size_t>(i) * ch + c];
        xb[i] = b.pixels[static_cast<std::size_t>(i) * ch + c];
      }
      total += ssim_global(xa, xb);
    }
    return total / ch;
  }
  static const auto kernel = gaussian_window();
  for (int c = 0; c < ch; ++c) {
    double channel_total = 0.0;
    int windows = 0;
    for (int y0 = 0; y0 + kWindow <= h; ++y0) {
      for (int x0 = 0; x0 + kWindow <= w; ++x0) {
        double mx = 0.0, my = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
        for (int dy = 0; dy < kWindow; ++dy) {
          for (int dx = 0; dx < kWindow; ++dx) {
            const double k = kernel[dy * kWindow + dx];
            const double va = a.at(y0 + dy, x0 + dx, c);
            const double vb = b.at(y0 + dy, x0 + dx, c);
            mx += k * va;
            my += k * vb;
            sxx += k * va * va;
            syy += k * vb * vb;
            sxy += k * va * vb;
          }
        }
        channel_total += ssim_from_moments(mx, my, sxx - mx * mx, syy - my * my, sxy - mx * my);
        ++windows;
      }
    }
    total += channel_total / windows;
  }
  return total / ch;
}

std::vector<int> quantize(const Image& img, std::span<const Rgb> palette) {
  if (palette.empty()) throw std::invalid_argument("quantize: empty palette");
  if (img.channels != 3) throw std::invalid_argument("quantize: expected an RGB image");
  std::vector<int> out(static_cast<std::size_t>(img.height) * img.width);
  for (std::size_t p = 0; p < out.size(); ++p) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < palette.size(); ++k) {
      double d = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double diff = static_cast<double>(img.pixels[p * 3 + c]) - palette[k][c];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(k);
      }
    }
    out[p] = best;
  }
  return out;
}

Image quantize_to_palette(const Image& img, std::span<const Rgb> palette) {
  const auto labels = quantize(img, palette);
  Image out(img.height, img.width, 3);
  for (std::size_t p = 0; p < labels.size(); ++p) {
    for (int c = 0; c < 3; ++c) out.pixels[p * 3 + c] = palette[labels[p]][c];
  }
  return out;
}

double miou(const Image& pred, const Image& gt, std::span<const Rgb> palette) {
  require_same_shape(pred, gt, "miou");
  const auto lp = quantize(pred, palette);
  const auto lg = quantize(gt, palette);
  std::vector<std::size_t> inter(palette.size(), 0), uni(palette.size(), 0);
  for (std::size_t i = 0; i < lp.size(); ++i) {
    if (lp[i] == lg[i]) {
      ++inter[lp[i]];
      ++uni[lp[i]];
    } else {
      ++uni[lp[i]];
      ++uni[lg[i]];
    }
  }
  double total = 0.0;
  int classes = 0;
  for (std::size_t k = 0; k < palette.size(); ++k) {
    if (uni[k] == 0) continue;
    total += static_cast<double>(inter[k]) / static_cast<double>(uni[k]);
    ++classes;
  }
  if (classes == 0) throw std::invalid_argument("miou: no class present in either image");
  return total / classes;
}

DepthMetrics depth_metrics(const Image& pred, const Image& gt) {
  require_same_shape(pred, gt, "depth_metrics");
  constexpr double kFloor = 1e-3;
  double se = 0.0, rel = 0.0;
  std::size_t within = 0;
  const std::size_t n = pred.pixels.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double p = pred.pixels[i];
    const double g = gt.pixels[i];
    se += (p - g) * (p - g);
    const double gc = std::max(g, kFloor);
    const double pc = std::max(p, kFloor);
    rel += std::abs(p - g) / gc;
    if (std::max(pc / gc, gc / pc) < 1.25) ++within;
  }
  return {std::sqrt(se / n), rel / n, static_cast<double>(within) / n};
}

double degradation(double clean, double attacked, Direction direction) {
  if (!std::isfinite(clean) || !std::isfinite(attacked)) {
    throw std::invalid_argument("degradation: values must be finite");
  }
  if (clean == 0.0) throw UndefinedRatioError("degradation: clean value is zero");
  const double change = direction == Direction::HigherBetter ? attacked - clean : clean - attacked;
  return change / std::abs(clean) * 100.0;
}

Image blend(const Image& x, const Image& a, double alpha) {
  require_same_shape(x, a, "blend");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("blend: alpha must lie in [0,1]");
  if (alpha == 0.0) return x;
  if (alpha == 1.0) return a;
  Image out = x;
  const float al = static_cast<float>(alpha);
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = (1.0f - al) * x.pixels[i] + al * a.pixels[i];
  }
  return out;
}

double evaluate_metric(MetricId id, const Image& pred, const Image& target, std::span<const Rgb> palette) {
  switch (id) {
    case MetricId::PSNR: return psnr(pred, target);
    case MetricId::SSIM: return ssim(pred, target);
    case MetricId::MIoU: return miou(pred, target, palette);
    case MetricId::RMSE: return depth_metrics(pred, target).rmse;
    case MetricId::ARel: return depth_metrics(pred, target).abs_rel;
    case MetricId::Delta1: return depth_metrics(pred, target).delta1;
  }
  throw std::invalid_argument("evaluate_metric: unknown metric");
}

}  // namespace iclb
