// Evaluation metrics: image quality, segmentation, depth-style error
// statistics, the percentage-degradation score and the green blend used to
// study output corruption.

#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iclb/image.hpp"

namespace iclb {

enum class MetricId { PSNR, SSIM, MIoU, RMSE, ARel, Delta1 };
enum class Direction { HigherBetter, LowerBetter };

struct MetricSpec {
  MetricId id;
  Direction direction;
};

/// PSNR/SSIM/mIoU/δ1 are higher-better, RMSE/A.Rel lower-better.
Direction direction_of(MetricId id);
MetricSpec metric_spec(MetricId id);
std::string metric_name(MetricId id);
/// Inverse of metric_name; throws std::invalid_argument for unknown names.
MetricId metric_from_name(const std::string& name);

/// Raised by degradation() when the clean reference is zero.
class UndefinedRatioError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Peak signal-to-noise ratio with peak 1.0; +infinity for identical images.
double psnr(const Image& a, const Image& b);

/// Mean local SSIM (7×7 Gaussian window, σ = 1.5, C1 = 0.01², C2 = 0.03²) over
/// valid window positions, averaged across channels. Panels smaller than the
/// window use a single global window.
double ssim(const Image& a, const Image& b);

/// SSIM of one channel pair computed over a single window covering the whole
/// image with uniform weights.
double ssim_global(std::span<const float> a, std::span<const float> b);

/// Index of the palette colour nearest to each pixel.
std::vector<int> quantize(const Image& img, std::span<const Rgb> palette);
Image quantize_to_palette(const Image& img, std::span<const Rgb> palette);

/// Mean IoU over palette classes present in either image (after quantizing
/// both to the palette). Throws std::invalid_argument when no class is present.
double miou(const Image& pred, const Image& gt, std::span<const Rgb> palette);

struct DepthMetrics {
  double rmse = 0.0;
  double abs_rel = 0.0;
  double delta1 = 0.0;
};

/// RMSE, mean |p−g|/g and the fraction with max(p/g, g/p) < 1.25, taken over
/// every value. Ratios clamp both operands at 1e-3.
DepthMetrics depth_metrics(const Image& pred, const Image& gt);

/// Relative change against a clean value in percent, signed so that negative
/// always means worse: higher-better (attacked − clean)/clean·100, lower-better
/// (clean − attacked)/clean·100.
double degradation(double clean, double attacked, Direction direction);

/// Elementwise (1−α)x + αa.
Image blend(const Image& x, const Image& a, double alpha);

/// Value of one metric for a prediction/target pair. `palette` is required for mIoU.
double evaluate_metric(MetricId id, const Image& pred, const Image& target,
                       std::span<const Rgb> palette = {});

}  // namespace iclb
