#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "aquafuse/image_io.hpp"

namespace aquafuse {

struct BlurBenchOptions {
  std::size_t height = 750;
  std::size_t width = 1300;
  std::vector<double> sigmas{300.0};
  double sigma_min = 10.0;
  double truncation_factor = 3.0;
  std::size_t warmup = 1;
  std::size_t repeats = 5;  // median of this many timed runs
  std::uint64_t seed = 0;
};

struct BlurBenchRow {
  double sigma = 0.0;
  double direct_ms = 0.0;
  double pyramid_ms = 0.0;
  double speedup = 0.0;
  double rms_rel = 0.0;
};

/// Uniform random intensities in [0, 255], reproducible from `seed`.
RgbImage random_image(std::size_t height, std::size_t width, std::uint64_t seed);

/// RMS of (approx - reference) over all planes, divided by the dynamic range
/// (max - min) of the reference. Zero when the images are identical.
double relative_rms_error(const RgbImage& approx, const RgbImage& reference);

/// Times direct and pyramid blurs of one synthetic image per sigma.
std::vector<BlurBenchRow> run_blur_bench(const BlurBenchOptions& options);

/// "sigma,direct_ms,pyramid_ms,speedup,rms_rel"
std::string bench_header();
std::string format_bench_row(const BlurBenchRow& row);

}  // namespace aquafuse
