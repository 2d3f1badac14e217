#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "aquafuse/image_io.hpp"

// Real-time underwater enhancement: per-channel color pre-correction followed
// by a weighted multi-scale Retinex whose large Gaussian blurs are evaluated
// on a recursive half-size pyramid.
namespace aquafuse {

struct ChannelStats {
  std::array<double, 3> mean{};
  std::array<double, 3> std{};  // population standard deviation
};

struct MsrConfig {
  std::vector<double> sigmas{30.0, 150.0, 300.0};
  std::vector<double> weights{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  double sigma_min = 10.0;
  double epsilon = 1.0;
  double truncation_factor = 3.0;
  // Lower/upper percentiles (in percent) of the final per-channel stretch.
  std::array<double, 2> stretch_percentiles{1.0, 99.0};

  /// Throws DomainError describing the first violated constraint.
  void validate() const;
};

struct GaussianKernel {
  double sigma = 0.0;
  std::size_t radius = 0;
  std::vector<double> taps;  // 2 * radius + 1 entries, sum 1
};

ChannelStats compute_channel_stats(const RgbImage& img);

/// Maps [mean - std, mean + std] of each channel onto [0, 255] and clamps.
/// Channels with zero spread are returned unchanged.
RgbImage color_precorrect(const RgbImage& img);

/// radius = ceil(factor * sigma); taps are the sampled Gaussian normalized to sum 1.
GaussianKernel make_gaussian_kernel(double sigma, double truncation_factor = 3.0);

/// Exact truncated separable convolution (horizontal, then vertical) with
/// half-sample mirror boundaries. Reference path for the pyramid blur.
RgbImage direct_gaussian_blur(const RgbImage& img, double sigma, double truncation_factor = 3.0);

/// Recursive pyramid approximation of direct_gaussian_blur. While sigma
/// exceeds sigma_min the image is box-downsampled by 2 and sigma halved; the
/// terminal level is blurred directly and the result bilinearly upsampled back
/// through every level.
RgbImage pyramid_gaussian_blur(const RgbImage& img, double sigma, double sigma_min,
                               double truncation_factor = 3.0);

/// 2x2 box average; odd trailing rows/columns average the pixels available.
RgbImage downsample_half(const RgbImage& img);

/// Bilinear resampling with pixel-center alignment to an (h, w) grid twice
/// (or about twice) the size of `img`.
RgbImage upsample_bilinear(const RgbImage& img, std::size_t h, std::size_t w);

/// Unstretched weighted log-ratio field sum_n w_n (log(I + eps) - log(blur_n(I) + eps)).
RgbImage msr_log_field(const RgbImage& img, const MsrConfig& cfg);

/// Per-channel percentile stretch of a signed field to [0, 255]. A channel
/// whose percentile span is degenerate maps to 127.5.
RgbImage percentile_stretch(const RgbImage& field, double lower_pct, double upper_pct);

RgbImage msr_enhance(const RgbImage& img, const MsrConfig& cfg);

/// color_precorrect followed by msr_enhance.
RgbImage water_msr(const RgbImage& img, const MsrConfig& cfg = {});

/// Linear-interpolated percentile (numpy "linear" convention) of `values`, p in [0, 100].
double percentile(std::vector<double> values, double p);

}  // namespace aquafuse
