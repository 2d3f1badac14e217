// aquafuse command-line tool.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "aquafuse/backbone.hpp"
#include "aquafuse/blur_bench.hpp"
#include "aquafuse/config.hpp"
#include "aquafuse/errors.hpp"
#include "aquafuse/gradcheck.hpp"
#include "aquafuse/image_io.hpp"
#include "aquafuse/parallel.hpp"
#include "aquafuse/tensor_io.hpp"
#include "aquafuse/water_msr.hpp"

namespace fs = std::filesystem;
using namespace aquafuse;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitBadShape = 2;

// Flags that override config-file values. Empty strings mean "not given".
struct Overrides {
  std::string sigmas, weights, sigma_min, epsilon, truncation_factor, stretch_percentiles;
  std::string dim, depths, heads, window, patch, seed;
  bool shared_weights = false;
};

void add_msr_flags(CLI::App* app, Overrides& o) {
  app->add_option("--sigmas", o.sigmas, "Comma-separated Gaussian scales (pixels)");
  app->add_option("--weights", o.weights, "Comma-separated scale weights, summing to 1");
  app->add_option("--sigma-min", o.sigma_min, "Pyramid recursion stops at this sigma");
  app->add_option("--epsilon", o.epsilon, "Offset inside the logarithms");
  app->add_option("--truncation-factor", o.truncation_factor, "Kernel radius = ceil(factor * sigma)");
  app->add_option("--stretch-percentiles", o.stretch_percentiles, "Output stretch percentiles, e.g. 1,99");
}

void add_backbone_flags(CLI::App* app, Overrides& o) {
  app->add_option("--dim", o.dim, "Stage-1 channel count");
  app->add_option("--depths", o.depths, "Blocks per stage, e.g. 2,2,6,2");
  app->add_option("--heads", o.heads, "Heads per stage, e.g. 1,2,4,8");
  app->add_option("--window", o.window, "Attention window side in tokens");
  app->add_option("--patch", o.patch, "Patch side in pixels");
  app->add_flag("--shared-weights", o.shared_weights, "Share all parameters between the two streams");
}

KeyValues overrides_to_keys(const Overrides& o) {
  KeyValues kv;
  auto put = [&](const char* key, const std::string& v) {
    if (!v.empty()) kv[key] = v;
  };
  put("sigmas", o.sigmas);
  put("weights", o.weights);
  put("sigma_min", o.sigma_min);
  put("epsilon", o.epsilon);
  put("truncation_factor", o.truncation_factor);
  put("stretch_percentiles", o.stretch_percentiles);
  put("dim", o.dim);
  put("depths", o.depths);
  put("heads", o.heads);
  put("window", o.window);
  put("patch", o.patch);
  put("seed", o.seed);
  if (o.shared_weights) kv["shared_weights"] = "true";
  return kv;
}

int resolve_threads(int flag, const std::optional<int>& from_config) {
  if (flag > 0) return flag;
  if (from_config && *from_config > 0) return *from_config;
  if (const char* env = std::getenv("AQUAFUSE_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_enhance(const std::vector<std::string>& inputs, const fs::path& out_dir, const MsrConfig& cfg) {
  cfg.validate();
  if (inputs.empty()) return kExitOk;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  int failures = 0;
  for (const auto& input : inputs) {
    try {
      const RgbImage img = load_image(input);
      const auto t0 = std::chrono::steady_clock::now();
      const RgbImage out = water_msr(img, cfg);
      const double ms = elapsed_ms(t0);
      const fs::path dst = out_dir / (fs::path(input).stem().string() + "_enhanced.png");
      save_image(out, dst);
      std::printf("%s -> %s  %zux%zu  %.1f ms\n", input.c_str(), dst.string().c_str(), img.width, img.height, ms);
    } catch (const Error& e) {
      std::fprintf(stderr, "error: %s: %s\n", input.c_str(), e.what());
      ++failures;
    }
  }
  return failures ? kExitFailure : kExitOk;
}

int cmd_bench(const std::string& size, const BlurBenchOptions& base) {
  BlurBenchOptions opts = base;
  const auto x = size.find_first_of("xX");
  try {
    if (x == std::string::npos) throw ConfigError("");
    opts.height = std::stoul(size.substr(0, x));
    opts.width = std::stoul(size.substr(x + 1));
  } catch (const std::exception&) {
    throw ConfigError("--size must look like HxW, got '" + size + "'");
  }
  if (opts.height == 0 || opts.width == 0) throw ConfigError("--size must be positive");
  std::printf("%s\n", bench_header().c_str());
  for (const auto& row : run_blur_bench(opts)) std::printf("%s\n", format_bench_row(row).c_str());
  return kExitOk;
}

int cmd_features(const std::string& raw_path, const std::string& enhanced_path, bool auto_enhance,
                 const fs::path& out_dir, const RunSettings& settings) {
  if (auto_enhance == !enhanced_path.empty())
    throw ConfigError("features needs exactly one of an enhanced image path or --auto-enhance");
  const RgbImage raw = load_image(raw_path);
  Backbone net(settings.backbone);
  try {
    net.check_input(raw, raw);
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitBadShape;
  }
  const RgbImage enhanced = auto_enhance ? water_msr(raw, settings.msr) : load_image(enhanced_path);
  StagePyramid pyramid;
  try {
    pyramid = net.forward(raw, enhanced);
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitBadShape;
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  for (const auto& stage : pyramid.stages) {
    const fs::path dst = out_dir / ("stage" + std::to_string(stage.stage) + ".tns");
    save_tensor(stage.f, dst);
    double mean = 0.0;
    for (double v : stage.f.data()) mean += v;
    mean /= static_cast<double>(stage.f.size());
    double var = 0.0;
    for (double v : stage.f.data()) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(stage.f.size()));
    std::printf("stage%zu %s mean=%.9g std=%.9g -> %s\n", stage.stage, shape_string(stage.f.shape()).c_str(), mean,
                sd, dst.string().c_str());
  }
  return kExitOk;
}

int cmd_gradcheck(const std::string& scope, std::uint64_t seed, const std::string& perturb) {
  GradcheckOptions opts;
  opts.seed = seed;
  opts.perturb_op = perturb;
  const auto results = run_gradcheck(scope, opts);
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-16s %-18s checked=%-6zu max_rel_err=%.3e %s\n", r.scope.c_str(), r.op.c_str(), r.checked,
                r.max_rel_error, r.passed ? "PASS" : "FAIL");
    if (!r.passed) {
      std::fprintf(stderr, "gradcheck failed: %s (max relative error %.3e >= %.0e)\n", r.op.c_str(), r.max_rel_error,
                   opts.tolerance);
      ok = false;
    }
  }
  return ok ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"aquafuse: water-MSR enhancement and two-stream cross-domain features"};
  app.require_subcommand(1);

  int threads = 0;
  std::string config_path;
  app.add_option("--threads", threads, "Worker threads (default: AQUAFUSE_THREADS or all cores)");
  app.add_option("--config", config_path, "key=value settings file; flags override it");

  Overrides ov;

  auto* enhance = app.add_subcommand("enhance", "Enhance images with water-MSR");
  std::vector<std::string> inputs;
  std::string out_dir = ".";
  enhance->add_option("inputs", inputs, "Input images (PNG or PPM)");
  enhance->add_option("--out-dir", out_dir, "Directory for <name>_enhanced.png outputs");
  add_msr_flags(enhance, ov);

  auto* bench = app.add_subcommand("bench", "Time direct vs pyramid Gaussian blur");
  std::string size = "1300x750";
  std::string bench_sigmas = "300";
  BlurBenchOptions bench_opts;
  std::uint64_t bench_seed = 0;
  bench->add_option("--size", size, "Synthetic image size HxW");
  bench->add_option("--sigmas", bench_sigmas, "Comma-separated sigmas to time");
  bench->add_option("--sigma-min", bench_opts.sigma_min, "Pyramid terminal sigma");
  bench->add_option("--truncation-factor", bench_opts.truncation_factor, "Kernel radius factor");
  bench->add_option("--repeats", bench_opts.repeats, "Timed runs per measurement (median reported)");
  bench->add_option("--warmup", bench_opts.warmup, "Untimed warm-up runs");
  bench->add_option("--seed", bench_seed, "Synthetic image seed");

  auto* features = app.add_subcommand("features", "Extract the four-stage fused feature pyramid");
  std::string raw_path, enhanced_path;
  bool auto_enhance = false;
  std::string features_out = ".";
  features->add_option("raw", raw_path, "Raw image")->required();
  features->add_option("enhanced", enhanced_path, "Enhanced image (omit with --auto-enhance)");
  features->add_flag("--auto-enhance", auto_enhance, "Generate the enhanced image with water-MSR");
  features->add_option("--out-dir", features_out, "Directory for stage{1..4}.tns");
  features->add_option("--seed", ov.seed, "Parameter initialization seed");
  add_backbone_flags(features, ov);
  add_msr_flags(features, ov);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  std::string scope = "all";
  std::uint64_t gc_seed = 0;
  std::string perturb;
  gradcheck->add_option("--scope", scope, "all, tensor_autograd, cfi_attention, gff_fusion or backbone");
  gradcheck->add_option("--seed", gc_seed, "Seed for random instances");
  gradcheck->add_option("--perturb", perturb, "Corrupt the analytic gradient of this op (test hook)")
      ->group("");

  CLI11_PARSE(app, argc, argv);

  try {
    RunSettings settings;
    if (!config_path.empty()) apply_settings(load_key_values(config_path), settings);
    apply_settings(overrides_to_keys(ov), settings);
    set_num_threads(resolve_threads(threads, settings.threads));

    if (*enhance) return cmd_enhance(inputs, out_dir, settings.msr);
    if (*bench) {
      bench_opts.sigmas = parse_double_list(bench_sigmas);
      bench_opts.seed = bench_seed;
      return cmd_bench(size, bench_opts);
    }
    if (*features) return cmd_features(raw_path, enhanced_path, auto_enhance, features_out, settings);
    if (*gradcheck) return cmd_gradcheck(scope, gc_seed, perturb);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitFailure;
}
