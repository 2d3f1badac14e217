#include "aquafuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "aquafuse/backbone.hpp"
#include "aquafuse/cfi_attention.hpp"
#include "aquafuse/errors.hpp"
#include "aquafuse/gff_fusion.hpp"

namespace aquafuse {

double gradient_relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradcheckFloor});
  return std::abs(analytic - numeric) / denom;
}

void fill_uniform(Tensor& t, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.data()) v = dist(rng);
}

FdReport finite_difference_check(const std::function<double()>& loss, const std::vector<FdTarget>& targets,
                                 std::size_t max_samples, std::uint64_t sample_seed, double step) {
  std::vector<std::pair<std::size_t, std::size_t>> entries;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (targets[t].values.size() != targets[t].analytic.size())
      throw ShapeError("finite_difference_check: target '" + targets[t].name + "' has mismatched gradient size");
    for (std::size_t i = 0; i < targets[t].values.size(); ++i) entries.emplace_back(t, i);
  }
  if (max_samples > 0 && max_samples < entries.size()) {
    std::mt19937_64 rng(sample_seed);
    std::shuffle(entries.begin(), entries.end(), rng);
    entries.resize(max_samples);
    std::sort(entries.begin(), entries.end());
  }
  FdReport report;
  for (const auto& [t, i] : entries) {
    double& x = targets[t].values[i];
    const double saved = x;
    x = saved + step;
    const double up = loss();
    x = saved - step;
    const double down = loss();
    x = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double err = gradient_relative_error(targets[t].analytic[i], numeric);
    if (report.checked == 0 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst = targets[t].name + "[" + std::to_string(i) + "]";
    }
    ++report.checked;
  }
  return report;
}

namespace {

struct Suite {
  std::string scope;
  const GradcheckOptions& opts;
  std::mt19937_64 rng;
  std::vector<GradcheckResult> results;

  // Runs the comparison, corrupting a copy of the first analytic entry when
  // this op is the perturbation target.
  void check(const std::string& op, const std::function<double()>& loss, std::vector<FdTarget> targets,
             std::size_t max_samples = 0) {
    std::vector<double> corrupted;
    if (opts.perturb_op == op && !targets.empty() && !targets[0].analytic.empty()) {
      corrupted.assign(targets[0].analytic.begin(), targets[0].analytic.end());
      corrupted[0] += 1e-2 * (1.0 + std::abs(corrupted[0]));
      targets[0].analytic = corrupted;
    }
    const FdReport r = finite_difference_check(loss, targets, max_samples, rng(), opts.step);
    results.push_back({scope, op, r.max_rel_error, r.checked, r.max_rel_error < opts.tolerance});
  }

  Tensor random(Shape shape, double lo = -2.0, double hi = 2.0) {
    Tensor t(std::move(shape));
    fill_uniform(t, rng, lo, hi);
    return t;
  }

  void randomize(ParamStore& store, double lo, double hi) {
    for (Param& p : store) {
      fill_uniform(p.value, rng, lo, hi);
      if (p.init == ParamInit::kOnes)
        for (double& v : p.value.data()) v += 1.0;
    }
  }
};

std::vector<FdTarget> param_targets(ParamStore& store) {
  std::vector<FdTarget> t;
  for (Param& p : store) t.push_back({p.name, p.value.data(), p.grad.data()});
  return t;
}

void run_tensor_autograd(Suite& s) {
  {
    Tensor a = s.random({4, 5}), b = s.random({5, 2}), g = s.random({4, 2});
    const MatmulGrads mg = matmul_backward(a, b, g);
    s.check("matmul", [&] { return dot(g, matmul(a, b)); },
            {{"a", a.data(), mg.da.data()}, {"b", b.data(), mg.db.data()}});
  }
  {
    Tensor a = s.random({3, 2, 4}), b = s.random({3, 4, 3}), g = s.random({3, 2, 3});
    const MatmulGrads mg = matmul_backward(a, b, g);
    s.check("matmul_batched", [&] { return dot(g, matmul(a, b)); },
            {{"a", a.data(), mg.da.data()}, {"b", b.data(), mg.db.data()}});
  }
  {
    Tensor x = s.random({3, 7}), g = s.random({3, 7});
    const Tensor dx = softmax_lastdim_backward(softmax_lastdim(x), g);
    s.check("softmax_lastdim", [&] { return dot(g, softmax_lastdim(x)); }, {{"x", x.data(), dx.data()}});
  }
  {
    ParamStore store;
    Param& scale = store.add("scale", {8}, ParamInit::kOnes);
    Param& shift = store.add("shift", {8}, ParamInit::kZeros);
    fill_uniform(scale.value, s.rng, -2.0, 2.0);
    fill_uniform(shift.value, s.rng, -2.0, 2.0);
    Tensor x = s.random({5, 8}), g = s.random({5, 8});
    LayerNormCache cache;
    layer_norm(x, scale, shift, &cache);
    const Tensor dx = layer_norm_backward(g, cache, scale, shift);
    s.check("layer_norm", [&] { return dot(g, layer_norm(x, scale, shift)); },
            {{"x", x.data(), dx.data()}, {"scale", scale.value.data(), scale.grad.data()},
             {"shift", shift.value.data(), shift.grad.data()}});
  }
  {
    Tensor x = s.random({16}), g = s.random({16});
    const Tensor dx = gelu_backward(x, g);
    s.check("gelu", [&] { return dot(g, gelu(x)); }, {{"x", x.data(), dx.data()}});
  }
  {
    Tensor x = s.random({16}), g = s.random({16});
    const Tensor dx = sigmoid_backward(sigmoid(x), g);
    s.check("sigmoid", [&] { return dot(g, sigmoid(x)); }, {{"x", x.data(), dx.data()}});
  }
  {
    ParamStore store;
    Param& w = store.add("w", {6, 3}, ParamInit::kZeros);
    Param& b = store.add("b", {3}, ParamInit::kZeros);
    fill_uniform(w.value, s.rng, -2.0, 2.0);
    fill_uniform(b.value, s.rng, -2.0, 2.0);
    Tensor x = s.random({5, 6}), g = s.random({5, 3});
    const Tensor dx = linear_backward(x, g, w, &b);
    s.check("linear", [&] { return dot(g, linear(x, w, &b)); },
            {{"x", x.data(), dx.data()}, {"w", w.value.data(), w.grad.data()}, {"b", b.value.data(), b.grad.data()}});
  }
}

void check_block(Suite& s, const std::string& op, std::size_t shift) {
  ParamStore store;
  AttentionConfig cfg;
  cfg.window = 7;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.shift = shift;
  CfiBlock block(store, "block", cfg);
  s.randomize(store, -0.5, 0.5);
  DomainFeaturePair in{s.random({14, 14, 8}), s.random({14, 14, 8})};
  const DomainFeaturePair g{s.random({14, 14, 8}), s.random({14, 14, 8})};
  auto loss = [&] {
    const DomainFeaturePair out = block.forward(in);
    return dot(g.z_r, out.z_r) + dot(g.z_e, out.z_e);
  };
  store.zero_grad();
  block.forward(in);
  const DomainFeaturePair din = block.backward(g);
  auto targets = param_targets(store);
  targets.push_back({"z_r", in.z_r.data(), din.z_r.data()});
  targets.push_back({"z_e", in.z_e.data(), din.z_e.data()});
  s.check(op, loss, targets);
}

void run_cfi_attention(Suite& s) {
  {
    // Two 2x2 windows, four channels in two heads, with a partial mask.
    ParamStore store;
    const std::size_t c = 4, heads = 2, m = 2, t = m * m;
    Param& table = store.add("rel_pos_bias", {(2 * m - 1) * (2 * m - 1), heads}, ParamInit::kZeros);
    DomainProjection pr{&store.add("r.wq", {c, c}, ParamInit::kZeros), &store.add("r.wk", {c, c}, ParamInit::kZeros),
                        &store.add("r.wv", {c, c}, ParamInit::kZeros)};
    DomainProjection pe{&store.add("e.wq", {c, c}, ParamInit::kZeros), &store.add("e.wk", {c, c}, ParamInit::kZeros),
                        &store.add("e.wv", {c, c}, ParamInit::kZeros)};
    s.randomize(store, -1.0, 1.0);
    RelPosBias bias(table, m, heads);
    Tensor mask({2, t, t});
    mask.at({1, 0, 3}) = kMaskedLogit;
    mask.at({1, 3, 0}) = kMaskedLogit;
    CrossAttention attn(heads);
    DomainFeaturePair in{s.random({2, t, c}), s.random({2, t, c})};
    const DomainFeaturePair g{s.random({2, t, c}), s.random({2, t, c})};
    auto loss = [&] {
      const DomainFeaturePair out = attn.forward(in, pr, pe, bias, &mask);
      return dot(g.z_r, out.z_r) + dot(g.z_e, out.z_e);
    };
    attn.forward(in, pr, pe, bias, &mask);
    const DomainFeaturePair din = attn.backward(g);
    auto targets = param_targets(store);
    targets.push_back({"z_r", in.z_r.data(), din.z_r.data()});
    targets.push_back({"z_e", in.z_e.data(), din.z_e.data()});
    s.check("mca", loss, targets);
  }
  check_block(s, "cfi_block", 0);
  check_block(s, "cfi_block_shifted", 3);
  {
    ParamStore store;
    PatchEmbedding embed(store, "embed", 4, 4);
    s.randomize(store, -0.5, 0.5);
    RgbImage raw(8, 8), enh(8, 8);
    std::uniform_real_distribution<double> px(0.0, 255.0);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 64; ++i) {
        raw.planes[c][i] = px(s.rng);
        enh.planes[c][i] = px(s.rng);
      }
    const DomainFeaturePair g{s.random({2, 2, 4}), s.random({2, 2, 4})};
    auto loss = [&] {
      const DomainFeaturePair out = embed.forward(raw, enh, 1.0 / 255.0);
      return dot(g.z_r, out.z_r) + dot(g.z_e, out.z_e);
    };
    embed.forward(raw, enh, 1.0 / 255.0);
    embed.backward(g);
    s.check("patch_embed", loss, param_targets(store));
  }
  {
    ParamStore store;
    PatchMerging merge(store, "merge", 3);
    s.randomize(store, -1.0, 1.0);
    DomainFeaturePair in{s.random({4, 4, 3}), s.random({4, 4, 3})};
    const DomainFeaturePair g{s.random({2, 2, 6}), s.random({2, 2, 6})};
    auto loss = [&] {
      const DomainFeaturePair out = merge.forward(in);
      return dot(g.z_r, out.z_r) + dot(g.z_e, out.z_e);
    };
    merge.forward(in);
    const DomainFeaturePair din = merge.backward(g);
    auto targets = param_targets(store);
    targets.push_back({"z_r", in.z_r.data(), din.z_r.data()});
    targets.push_back({"z_e", in.z_e.data(), din.z_e.data()});
    s.check("patch_merge", loss, targets);
  }
}

void run_gff_fusion(Suite& s) {
  ParamStore store;
  GatedFusion gff(store, "gff", 3);
  s.randomize(store, -2.0, 2.0);
  DomainFeaturePair in{s.random({2, 2, 3}), s.random({2, 2, 3})};
  const Tensor g = s.random({2, 2, 3});
  auto loss = [&] { return dot(g, gff.forward(in).f); };
  gff.forward(in);
  const DomainFeaturePair din = gff.backward(g);
  auto targets = param_targets(store);
  targets.push_back({"z_r", in.z_r.data(), din.z_r.data()});
  targets.push_back({"z_e", in.z_e.data(), din.z_e.data()});
  s.check("gff_fuse", loss, targets);
}

void run_backbone(Suite& s) {
  BackboneConfig cfg;
  cfg.dim = 8;
  cfg.depths = {1, 1, 1, 1};
  cfg.window = 2;
  cfg.patch = 4;
  cfg.seed = s.opts.seed;
  Backbone net(cfg);
  s.randomize(net.params(), -0.3, 0.3);
  RgbImage raw(32, 32), enh(32, 32);
  std::uniform_real_distribution<double> px(0.0, 255.0);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 32 * 32; ++i) {
      raw.planes[c][i] = px(s.rng);
      enh.planes[c][i] = px(s.rng);
    }
  std::array<Tensor, kNumStages> g;
  const StagePyramid first = net.forward(raw, enh);
  for (std::size_t k = 0; k < kNumStages; ++k) g[k] = s.random(first.stages[k].f.shape(), -1.0, 1.0);
  auto loss = [&] {
    const StagePyramid p = net.forward(raw, enh);
    double l = 0.0;
    for (std::size_t k = 0; k < kNumStages; ++k) l += dot(g[k], p.stages[k].f);
    return l;
  };
  net.params().zero_grad();
  net.forward(raw, enh);
  net.backward(g);
  s.check("backbone_tiny", loss, param_targets(net.params()), 50);
}

}  // namespace

const std::vector<std::string>& gradcheck_scopes() {
  static const std::vector<std::string> scopes{"tensor_autograd", "cfi_attention", "gff_fusion", "backbone"};
  return scopes;
}

std::vector<GradcheckResult> run_gradcheck(const std::string& scope, const GradcheckOptions& options) {
  const auto& known = gradcheck_scopes();
  if (scope != "all" && std::find(known.begin(), known.end(), scope) == known.end())
    throw ConfigError("unknown gradcheck scope '" + scope + "'");
  std::vector<GradcheckResult> all;
  for (std::size_t k = 0; k < known.size(); ++k) {
    const std::string& name = known[k];
    if (scope != "all" && scope != name) continue;
    // Each scope draws from its own stream so filtering does not change results.
    Suite s{name, options, std::mt19937_64(options.seed * 1000003ULL + k + 1), {}};
    if (name == "tensor_autograd") run_tensor_autograd(s);
    if (name == "cfi_attention") run_cfi_attention(s);
    if (name == "gff_fusion") run_gff_fusion(s);
    if (name == "backbone") run_backbone(s);
    all.insert(all.end(), s.results.begin(), s.results.end());
  }
  return all;
}

}  // namespace aquafuse
