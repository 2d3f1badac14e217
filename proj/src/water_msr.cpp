#include "aquafuse/water_msr.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "aquafuse/errors.hpp"
#include "aquafuse/parallel.hpp"

namespace aquafuse {

namespace {

// Spans below this in the log domain are treated as a flat field.
constexpr double kDegenerateSpan = 1e-9;

void require_nonempty(const RgbImage& img, const char* op) {
  if (img.empty()) throw DomainError(std::string(op) + ": empty image");
}

// Half-sample symmetric reflection, periodic with period 2n so arbitrarily
// large offsets stay in range.
std::size_t mirror_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * n;
  long m = i % period;
  if (m < 0) m += period;
  if (m >= n) m = period - 1 - m;
  return static_cast<std::size_t>(m);
}

// Vertical 1-D convolution of an h x w plane. Each output row accumulates
// taps in ascending order, so the result is independent of the row split.
std::vector<double> convolve_columns(const std::vector<double>& src, std::size_t h, std::size_t w,
                                     const GaussianKernel& k) {
  std::vector<double> dst(h * w, 0.0);
  const long r = static_cast<long>(k.radius);
  parallel_for(
      h,
      [&](std::size_t y0, std::size_t y1) {
        for (std::size_t y = y0; y < y1; ++y) {
          double* out = dst.data() + y * w;
          for (long t = -r; t <= r; ++t) {
            const double tap = k.taps[static_cast<std::size_t>(t + r)];
            const double* row = src.data() + mirror_index(static_cast<long>(y) + t, static_cast<long>(h)) * w;
            for (std::size_t x = 0; x < w; ++x) out[x] += tap * row[x];
          }
        }
      },
      8);
  return dst;
}

std::vector<double> transpose(const std::vector<double>& src, std::size_t h, std::size_t w) {
  std::vector<double> dst(h * w);
  constexpr std::size_t kBlock = 32;
  for (std::size_t yb = 0; yb < h; yb += kBlock)
    for (std::size_t xb = 0; xb < w; xb += kBlock)
      for (std::size_t y = yb; y < std::min(h, yb + kBlock); ++y)
        for (std::size_t x = xb; x < std::min(w, xb + kBlock); ++x) dst[x * h + y] = src[y * w + x];
  return dst;
}

std::vector<double> blur_plane(const std::vector<double>& plane, std::size_t h, std::size_t w,
                               const GaussianKernel& k) {
  // Horizontal pass runs as a column pass over the transpose.
  auto horizontal = transpose(convolve_columns(transpose(plane, h, w), w, h, k), w, h);
  return convolve_columns(horizontal, h, w, k);
}

RgbImage pyramid_level(const RgbImage& img, double sigma, double sigma_min, double factor) {
  if (sigma <= sigma_min || img.height < 2 || img.width < 2) return direct_gaussian_blur(img, sigma, factor);
  const RgbImage coarse = pyramid_level(downsample_half(img), sigma / 2.0, sigma_min, factor);
  return upsample_bilinear(coarse, img.height, img.width);
}

}  // namespace

void MsrConfig::validate() const {
  if (sigmas.empty()) throw DomainError("MsrConfig: at least one scale is required");
  if (sigmas.size() != weights.size())
    throw DomainError("MsrConfig: " + std::to_string(sigmas.size()) + " sigmas but " +
                      std::to_string(weights.size()) + " weights");
  for (double s : sigmas)
    if (!(s > 0.0) || !std::isfinite(s)) throw DomainError("MsrConfig: sigmas must be positive");
  double total = 0.0;
  for (double wgt : weights) {
    if (!(wgt >= 0.0) || !std::isfinite(wgt)) throw DomainError("MsrConfig: weights must be non-negative");
    total += wgt;
  }
  if (std::abs(total - 1.0) > 1e-12) throw DomainError("MsrConfig: weights must sum to 1");
  if (!(sigma_min > 0.0)) throw DomainError("MsrConfig: sigma_min must be positive");
  if (!(epsilon > 0.0)) throw DomainError("MsrConfig: epsilon must be positive");
  if (!(truncation_factor > 0.0)) throw DomainError("MsrConfig: truncation_factor must be positive");
  const auto [lo, hi] = stretch_percentiles;
  if (!(lo >= 0.0 && hi <= 100.0 && lo < hi))
    throw DomainError("MsrConfig: stretch_percentiles must satisfy 0 <= lower < upper <= 100");
}

ChannelStats compute_channel_stats(const RgbImage& img) {
  require_nonempty(img, "compute_channel_stats");
  ChannelStats s;
  const double n = static_cast<double>(img.pixel_count());
  for (std::size_t c = 0; c < 3; ++c) {
    const auto& p = img.planes[c];
    const double mean = std::accumulate(p.begin(), p.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : p) ss += (v - mean) * (v - mean);
    s.mean[c] = mean;
    s.std[c] = std::sqrt(ss / n);
  }
  return s;
}

RgbImage color_precorrect(const RgbImage& img) {
  if (img.empty()) return img;
  const ChannelStats s = compute_channel_stats(img);
  RgbImage out = img;
  for (std::size_t c = 0; c < 3; ++c) {
    if (s.std[c] == 0.0) continue;
    const double lo = s.mean[c] - s.std[c];
    const double span = 2.0 * s.std[c];
    for (double& v : out.planes[c]) v = std::clamp((v - lo) / span * 255.0, 0.0, 255.0);
  }
  return out;
}

GaussianKernel make_gaussian_kernel(double sigma, double truncation_factor) {
  if (!(sigma > 0.0) || !std::isfinite(sigma))
    throw DomainError("make_gaussian_kernel: sigma must be positive, got " + std::to_string(sigma));
  if (!(truncation_factor > 0.0)) throw DomainError("make_gaussian_kernel: truncation factor must be positive");
  GaussianKernel k;
  k.sigma = sigma;
  k.radius = static_cast<std::size_t>(std::ceil(truncation_factor * sigma));
  k.taps.resize(2 * k.radius + 1);
  const double r = static_cast<double>(k.radius);
  const double denom = 2.0 * sigma * sigma;
  for (std::size_t i = 0; i < k.taps.size(); ++i) {
    const double d = static_cast<double>(i) - r;
    k.taps[i] = std::exp(-d * d / denom);
  }
  // Sum from the tails inward: the small terms go first.
  double total = 0.0;
  for (std::size_t i = 0; i < k.radius; ++i) total += k.taps[i] + k.taps[2 * k.radius - i];
  total += k.taps[k.radius];
  for (double& t : k.taps) t /= total;
  return k;
}

RgbImage direct_gaussian_blur(const RgbImage& img, double sigma, double truncation_factor) {
  const GaussianKernel k = make_gaussian_kernel(sigma, truncation_factor);
  RgbImage out;
  out.height = img.height;
  out.width = img.width;
  if (img.empty()) return img;
  for (std::size_t c = 0; c < 3; ++c) out.planes[c] = blur_plane(img.planes[c], img.height, img.width, k);
  return out;
}

RgbImage downsample_half(const RgbImage& img) {
  const std::size_t h = (img.height + 1) / 2;
  const std::size_t w = (img.width + 1) / 2;
  RgbImage out(h, w);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto& src = img.planes[c];
    auto& dst = out.planes[c];
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t y0 = 2 * y;
      const std::size_t y1 = std::min(y0 + 1, img.height - 1);
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t x0 = 2 * x;
        const std::size_t x1 = std::min(x0 + 1, img.width - 1);
        double sum = src[y0 * img.width + x0];
        double count = 1.0;
        if (x1 != x0) {
          sum += src[y0 * img.width + x1];
          count += 1.0;
        }
        if (y1 != y0) {
          sum += src[y1 * img.width + x0];
          count += 1.0;
          if (x1 != x0) {
            sum += src[y1 * img.width + x1];
            count += 1.0;
          }
        }
        dst[y * w + x] = sum / count;
      }
    }
  }
  return out;
}

RgbImage upsample_bilinear(const RgbImage& img, std::size_t h, std::size_t w) {
  RgbImage out(h, w);
  if (img.empty()) throw DomainError("upsample_bilinear: empty source");
  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps_for = [](std::size_t fine, std::size_t coarse) {
    std::vector<Tap> t(fine);
    const double scale = static_cast<double>(coarse) / static_cast<double>(fine);
    for (std::size_t i = 0; i < fine; ++i) {
      double pos = (static_cast<double>(i) + 0.5) * scale - 0.5;
      pos = std::clamp(pos, 0.0, static_cast<double>(coarse - 1));
      const auto i0 = static_cast<std::size_t>(pos);
      t[i] = {i0, std::min(i0 + 1, coarse - 1), pos - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps_for(h, img.height);
  const auto tx = taps_for(w, img.width);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto& src = img.planes[c];
    auto& dst = out.planes[c];
    for (std::size_t y = 0; y < h; ++y) {
      const double* r0 = src.data() + ty[y].i0 * img.width;
      const double* r1 = src.data() + ty[y].i1 * img.width;
      const double fy = ty[y].f;
      for (std::size_t x = 0; x < w; ++x) {
        const auto& t = tx[x];
        const double top = r0[t.i0] + (r0[t.i1] - r0[t.i0]) * t.f;
        const double bottom = r1[t.i0] + (r1[t.i1] - r1[t.i0]) * t.f;
        dst[y * w + x] = top + (bottom - top) * fy;
      }
    }
  }
  return out;
}

RgbImage pyramid_gaussian_blur(const RgbImage& img, double sigma, double sigma_min, double truncation_factor) {
  if (!(sigma > 0.0)) throw DomainError("pyramid_gaussian_blur: sigma must be positive");
  if (!(sigma_min > 0.0)) throw DomainError("pyramid_gaussian_blur: sigma_min must be positive");
  if (img.empty()) return img;
  return pyramid_level(img, sigma, sigma_min, truncation_factor);
}

RgbImage msr_log_field(const RgbImage& img, const MsrConfig& cfg) {
  cfg.validate();
  RgbImage field(img.height, img.width, 0.0);
  if (img.empty()) return field;
  RgbImage log_in = img;
  for (auto& p : log_in.planes)
    for (double& v : p) v = std::log(std::max(v, 0.0) + cfg.epsilon);
  for (std::size_t n = 0; n < cfg.sigmas.size(); ++n) {
    if (cfg.weights[n] == 0.0) continue;
    const RgbImage blurred = pyramid_gaussian_blur(img, cfg.sigmas[n], cfg.sigma_min, cfg.truncation_factor);
    const double wgt = cfg.weights[n];
    for (std::size_t c = 0; c < 3; ++c) {
      auto& f = field.planes[c];
      const auto& li = log_in.planes[c];
      const auto& b = blurred.planes[c];
      for (std::size_t i = 0; i < f.size(); ++i) f[i] += wgt * (li[i] - std::log(std::max(b[i], 0.0) + cfg.epsilon));
    }
  }
  return field;
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw DomainError("percentile: empty input");
  const double rank = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const double frac = rank - static_cast<double>(lo);
  std::nth_element(values.begin(), values.begin() + static_cast<long>(lo), values.end());
  const double a = values[lo];
  if (frac == 0.0 || lo + 1 >= values.size()) return a;
  const double b = *std::min_element(values.begin() + static_cast<long>(lo) + 1, values.end());
  return a + (b - a) * frac;
}

RgbImage percentile_stretch(const RgbImage& field, double lower_pct, double upper_pct) {
  RgbImage out(field.height, field.width);
  if (field.empty()) return out;
  for (std::size_t c = 0; c < 3; ++c) {
    const double lo = percentile(field.planes[c], lower_pct);
    const double hi = percentile(field.planes[c], upper_pct);
    auto& dst = out.planes[c];
    if (!(hi - lo > kDegenerateSpan)) {
      std::fill(dst.begin(), dst.end(), 127.5);
      continue;
    }
    const double scale = 255.0 / (hi - lo);
    const auto& src = field.planes[c];
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::clamp((src[i] - lo) * scale, 0.0, 255.0);
  }
  return out;
}

RgbImage msr_enhance(const RgbImage& img, const MsrConfig& cfg) {
  const RgbImage field = msr_log_field(img, cfg);
  return percentile_stretch(field, cfg.stretch_percentiles[0], cfg.stretch_percentiles[1]);
}

RgbImage water_msr(const RgbImage& img, const MsrConfig& cfg) { return msr_enhance(color_precorrect(img), cfg); }

}  // namespace aquafuse
