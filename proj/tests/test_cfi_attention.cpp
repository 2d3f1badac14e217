#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "aquafuse/cfi_attention.hpp"
#include "aquafuse/errors.hpp"
#include "aquafuse/gradcheck.hpp"
#include "oracles.hpp"

namespace aquafuse {
namespace {

Tensor iota_grid(std::size_t h, std::size_t w, std::size_t c) {
  Tensor t({h, w, c});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(i);
  return t;
}

// Weights for a bare MCA call.
struct McaRig {
  ParamStore store;
  DomainProjection proj_r, proj_e;
  Param* table = nullptr;
  std::size_t window, heads;

  McaRig(std::size_t dim, std::size_t window_, std::size_t heads_, std::uint64_t seed, bool shared = false)
      : window(window_), heads(heads_) {
    auto proj = [&](const std::string& p) {
      return DomainProjection{&store.add(p + ".wq", {dim, dim}, ParamInit::kTruncatedNormal),
                              &store.add(p + ".wk", {dim, dim}, ParamInit::kTruncatedNormal),
                              &store.add(p + ".wv", {dim, dim}, ParamInit::kTruncatedNormal)};
    };
    proj_r = proj("raw");
    proj_e = shared ? proj_r : proj("enh");
    table = &store.add("table", {(2 * window - 1) * (2 * window - 1), heads}, ParamInit::kZeros);
    store.initialize(seed);
    // Scale projections up so the softmax is far from uniform, and give the
    // bias table content.
    std::mt19937_64 rng(seed + 1);
    for (auto& p : store) fill_uniform(p.value, rng, -0.6, 0.6);
  }
};

// ---- window geometry ---------------------------------------------------------------

TEST(Windows, PartitionShapeAndOrder) {
  const Tensor x = iota_grid(14, 14, 3);
  const Tensor w = window_partition(x, 7);
  EXPECT_EQ(w.shape(), (Shape{4, 49, 3}));
  // Window 1 is the top-right block; its first token is grid (0, 7).
  EXPECT_EQ(w.at({1, 0, 0}), x.at({0, 7, 0}));
  // Window 2, token 8 is grid (7 + 1, 0 + 1).
  EXPECT_EQ(w.at({2, 8, 2}), x.at({8, 1, 2}));
  EXPECT_THROW(window_partition(iota_grid(15, 15, 1), 7), ShapeError);
}

TEST(Windows, ReverseIsExactInverse) {
  std::mt19937_64 rng(1);
  const Tensor x = oracle::random_tensor({14, 21, 5}, rng);
  EXPECT_EQ(window_reverse(window_partition(x, 7), 14, 21), x);
  EXPECT_THROW(window_reverse(window_partition(x, 7), 14, 14), ShapeError);
  EXPECT_THROW(window_reverse(window_partition(x, 7), 14, 20), ShapeError);
}

TEST(Windows, CyclicShiftMovesTokens) {
  const Tensor x = iota_grid(14, 14, 2);
  const Tensor s = cyclic_shift(x, 3);
  // Shifted position (i, j) holds original ((i + 3) % 14, (j + 3) % 14), so
  // original (0, 0) ends up at (11, 11) and original (3, 3) at (0, 0).
  EXPECT_EQ(s.at({11, 11, 1}), x.at({0, 0, 1}));
  EXPECT_EQ(s.at({0, 0, 0}), x.at({3, 3, 0}));
  EXPECT_EQ(cyclic_unshift(s, 3), x);
  // The unshift moves (0, 0) to (3, 3).
  EXPECT_EQ(cyclic_unshift(x, 3).at({3, 3, 0}), x.at({0, 0, 0}));
}

// ---- shifted-window mask -----------------------------------------------------------

// Two tokens of a rolled window may attend to each other iff the roll did not
// separate them, i.e. their original displacement equals the rolled one on
// both axes.
Tensor wrap_oracle_mask(std::size_t h, std::size_t w, std::size_t m, std::size_t s) {
  const std::size_t wx = w / m, t = m * m;
  Tensor mask({(h / m) * wx, t, t});
  for (std::size_t win = 0; win < mask.extent(0); ++win)
    for (std::size_t a = 0; a < t; ++a)
      for (std::size_t b = 0; b < t; ++b) {
        const long ay = (win / wx) * m + a / m, ax = (win % wx) * m + a % m;
        const long by = (win / wx) * m + b / m, bx = (win % wx) * m + b % m;
        const long oay = (ay + s) % h, oax = (ax + s) % w, oby = (by + s) % h, obx = (bx + s) % w;
        const bool same = (oay - oby == ay - by) && (oax - obx == ax - bx);
        mask.at({win, a, b}) = same ? 0.0 : kMaskedLogit;
      }
  return mask;
}

TEST(ShiftMask, ZeroShiftIsAllZero) {
  const Tensor mask = shifted_window_mask(14, 14, 7, 0);
  EXPECT_EQ(mask.shape(), (Shape{4, 49, 49}));
  for (double v : mask.data()) EXPECT_EQ(v, 0.0);
}

TEST(ShiftMask, MatchesWrapOracle) {
  EXPECT_EQ(shifted_window_mask(14, 14, 7, 3), wrap_oracle_mask(14, 14, 7, 3));
  EXPECT_EQ(shifted_window_mask(8, 12, 4, 2), wrap_oracle_mask(8, 12, 4, 2));
  EXPECT_EQ(shifted_window_mask(7, 7, 7, 3), wrap_oracle_mask(7, 7, 7, 3));
}

TEST(ShiftMask, SingleWindowRegionSizes) {
  const Tensor mask = shifted_window_mask(7, 7, 7, 3);
  // Each row's zero count is the size of its token's region.
  std::vector<std::size_t> sizes;
  for (std::size_t a = 0; a < 49; ++a) {
    std::size_t zeros = 0;
    for (std::size_t b = 0; b < 49; ++b) zeros += mask.at({0, a, b}) == 0.0;
    sizes.push_back(zeros);
    EXPECT_EQ(mask.at({0, a, a}), 0.0);
  }
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{9, 12, 16}));
  std::size_t total = 0;
  for (std::size_t a = 0; a < 49; ++a)
    for (std::size_t b = 0; b < 49; ++b) total += mask.at({0, a, b}) == 0.0;
  // 16^2 + 12^2 + 12^2 + 9^2 allowed pairs: four regions.
  EXPECT_EQ(total, 16u * 16u + 2u * 12u * 12u + 9u * 9u);
}

// ---- relative position bias ----------------------------------------------------------

TEST(RelPos, IndexDependsOnlyOnDisplacement) {
  const std::size_t m = 7, t = m * m;
  const auto idx = relative_position_index(m, m);
  ASSERT_EQ(idx.size(), t * t);
  for (std::size_t a = 0; a < t; ++a)
    for (std::size_t b = 0; b < t; ++b) {
      const long dy = static_cast<long>(a / m) - static_cast<long>(b / m);
      const long dx = static_cast<long>(a % m) - static_cast<long>(b % m);
      EXPECT_EQ(idx[a * t + b], static_cast<std::size_t>((dy + 6) * 13 + dx + 6));
    }
}

TEST(RelPos, SmallerWindowReadsCentreOfTable) {
  ParamStore store;
  Param& table = store.add("t", {9, 2}, ParamInit::kZeros);
  for (std::size_t i = 0; i < table.value.size(); ++i) table.value[i] = static_cast<double>(i);
  RelPosBias bias(table, 2, 2);
  const Tensor b1 = bias.bias(1);
  EXPECT_EQ(b1.shape(), (Shape{2, 1, 1}));
  EXPECT_EQ(b1[0], table.value.at({4, 0}));  // zero displacement
  EXPECT_EQ(b1[1], table.value.at({4, 1}));

  Tensor g({2, 1, 1}, 1.0);
  bias.accumulate_grad(g, 1);
  bias.accumulate_grad(g, 1);
  EXPECT_EQ(table.grad.at({4, 1}), 2.0);
  EXPECT_EQ(table.grad.at({0, 0}), 0.0);
}

// ---- cross attention ---------------------------------------------------------------

TEST(CrossAttention, MatchesScalarOracleInBothDirections) {
  const std::size_t dim = 8, heads = 2, window = 2;
  McaRig rig(dim, window, heads, 3);
  RelPosBias bias(*rig.table, window, heads);
  std::mt19937_64 rng(4);
  const Tensor zr = oracle::random_tensor({3, 4, dim}, rng), ze = oracle::random_tensor({3, 4, dim}, rng);
  const Tensor mask = shifted_window_mask(2, 6, 2, 1);  // partial mask on the last window
  CrossAttention attn(heads);
  const DomainFeaturePair out = attn.forward({zr, ze}, rig.proj_r, rig.proj_e, bias, &mask);
  const Tensor b = bias.bias(window);
  const Tensor ref_r = oracle::windowed_attention(ze, zr, rig.proj_e.wq->value, rig.proj_r.wk->value,
                                                  rig.proj_r.wv->value, b, &mask, heads);
  const Tensor ref_e = oracle::windowed_attention(zr, ze, rig.proj_r.wq->value, rig.proj_e.wk->value,
                                                  rig.proj_e.wv->value, b, &mask, heads);
  EXPECT_LE(max_abs_diff(out.z_r, ref_r), 1e-12);
  EXPECT_LE(max_abs_diff(out.z_e, ref_e), 1e-12);
}

TEST(CrossAttention, IdenticalDomainsReduceToSelfAttention) {
  const std::size_t dim = 6, heads = 3, window = 3;
  McaRig rig(dim, window, heads, 5, /*shared=*/true);
  RelPosBias bias(*rig.table, window, heads);
  std::mt19937_64 rng(6);
  const Tensor z = oracle::random_tensor({2, 9, dim}, rng);
  CrossAttention attn(heads);
  const DomainFeaturePair out = attn.forward({z, z}, rig.proj_r, rig.proj_e, bias, nullptr);
  const Tensor self = oracle::windowed_attention(z, z, rig.proj_r.wq->value, rig.proj_r.wk->value,
                                                 rig.proj_r.wv->value, bias.bias(window), nullptr, heads);
  EXPECT_LE(max_abs_diff(out.z_r, self), 1e-12);
  EXPECT_LE(max_abs_diff(out.z_e, self), 1e-12);
}

TEST(CrossAttention, SingleTokenWindowReturnsValueProjection) {
  const std::size_t dim = 4;
  McaRig rig(dim, 1, 1, 7);
  RelPosBias bias(*rig.table, 1, 1);
  std::mt19937_64 rng(8);
  const Tensor zr = oracle::random_tensor({9, 1, dim}, rng), ze = oracle::random_tensor({9, 1, dim}, rng);
  CrossAttention attn(1);
  const DomainFeaturePair out = attn.forward({zr, ze}, rig.proj_r, rig.proj_e, bias, nullptr);
  // Softmax over one key is 1: each stream's output is its own keys-and-values
  // domain projected by W^V, whatever the queries are.
  const Tensor vr = matmul(zr.reshaped({9, dim}), rig.proj_r.wv->value).reshaped({9, 1, dim});
  const Tensor ve = matmul(ze.reshaped({9, dim}), rig.proj_e.wv->value).reshaped({9, 1, dim});
  EXPECT_LE(max_abs_diff(out.z_r, vr), 1e-14);
  EXPECT_LE(max_abs_diff(out.z_e, ve), 1e-14);
}

TEST(CrossAttention, ConstantValuesIgnoreQueries) {
  const std::size_t dim = 4;
  McaRig rig(dim, 2, 2, 9);
  RelPosBias bias(*rig.table, 2, 2);
  std::mt19937_64 rng(10);
  const Tensor zr({1, 4, dim}, std::vector<double>{0.5, -1, 2, 0.25, 0.5, -1, 2, 0.25, 0.5, -1, 2, 0.25, 0.5, -1, 2, 0.25});
  CrossAttention attn(2);
  const Tensor out1 = attn.forward({zr, oracle::random_tensor({1, 4, dim}, rng)}, rig.proj_r, rig.proj_e, bias, nullptr).z_r;
  const Tensor out2 = attn.forward({zr, oracle::random_tensor({1, 4, dim}, rng)}, rig.proj_r, rig.proj_e, bias, nullptr).z_r;
  const Tensor v = matmul(Tensor({1, dim}, std::vector<double>{0.5, -1, 2, 0.25}), rig.proj_r.wv->value);
  for (std::size_t tok = 0; tok < 4; ++tok)
    for (std::size_t c = 0; c < dim; ++c) EXPECT_NEAR(out1.at({0, tok, c}), v[c], 1e-14);
  EXPECT_LE(max_abs_diff(out1, out2), 1e-14);
}

TEST(CrossAttention, MaskedProbabilitiesAreRowStochastic) {
  const std::size_t dim = 4, heads = 2;
  McaRig rig(dim, 4, heads, 11);
  RelPosBias bias(*rig.table, 4, heads);
  std::mt19937_64 rng(12);
  const Tensor mask = shifted_window_mask(8, 8, 4, 2);
  const Tensor zr = window_partition(oracle::random_tensor({8, 8, dim}, rng), 4);
  const Tensor ze = window_partition(oracle::random_tensor({8, 8, dim}, rng), 4);
  CrossAttention attn(heads);
  attn.forward({zr, ze}, rig.proj_r, rig.proj_e, bias, &mask);
  for (const Tensor* p : {&attn.probs_for_raw_output(), &attn.probs_for_enhanced_output()}) {
    ASSERT_EQ(p->shape(), (Shape{4 * heads, 16, 16}));
    for (std::size_t w = 0; w < 4; ++w)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < 16; ++i) {
          double s = 0;
          for (std::size_t j = 0; j < 16; ++j) {
            const double v = p->at({w * heads + h, i, j});
            s += v;
            if (mask.at({w, i, j}) != 0.0) EXPECT_EQ(v, 0.0);
          }
          EXPECT_NEAR(s, 1.0, 1e-12);
        }
  }
}

TEST(CrossAttention, EquivariantUnderWindowPermutation) {
  const std::size_t dim = 4;
  McaRig rig(dim, 2, 1, 13);
  RelPosBias bias(*rig.table, 2, 1);
  std::mt19937_64 rng(14);
  const Tensor zr = oracle::random_tensor({3, 4, dim}, rng), ze = oracle::random_tensor({3, 4, dim}, rng);
  auto reversed = [&](const Tensor& x) {
    Tensor y(x.shape());
    const std::size_t per = 4 * dim;
    for (std::size_t w = 0; w < 3; ++w) std::copy_n(x.ptr() + (2 - w) * per, per, y.ptr() + w * per);
    return y;
  };
  CrossAttention attn(1);
  const DomainFeaturePair a = attn.forward({zr, ze}, rig.proj_r, rig.proj_e, bias, nullptr);
  const DomainFeaturePair b = attn.forward({reversed(zr), reversed(ze)}, rig.proj_r, rig.proj_e, bias, nullptr);
  EXPECT_EQ(reversed(a.z_r), b.z_r);
  EXPECT_EQ(reversed(a.z_e), b.z_e);
}

// ---- CFI block ---------------------------------------------------------------------

TEST(CfiBlock, ZeroProjectionsGiveIdentity) {
  AttentionConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.shift = 3;
  ParamStore store;
  CfiBlock block(store, "blk", cfg);
  store.initialize(1);
  for (auto& p : store)
    if (p.init == ParamInit::kTruncatedNormal) p.value.fill(0.0);
  std::mt19937_64 rng(2);
  const DomainFeaturePair in{oracle::random_tensor({14, 14, 8}, rng), oracle::random_tensor({14, 14, 8}, rng)};
  const DomainFeaturePair out = block.forward(in);
  EXPECT_EQ(out.z_r, in.z_r);
  EXPECT_EQ(out.z_e, in.z_e);
}

TEST(CfiBlock, ShapesAndParameterLayout) {
  AttentionConfig cfg;
  cfg.dim = 16;
  cfg.heads = 2;
  ParamStore store;
  CfiBlock block(store, "b", cfg);
  store.initialize(3);
  // Per stream: 2 LN (2 x 2C), 3 projections C^2, fc1 C*4C + 4C, fc2 4C*C + C; plus the shared table.
  const std::size_t c = 16, per_stream = 4 * c + 3 * c * c + 4 * c * c + 4 * c + 4 * c * c + c;
  EXPECT_EQ(store.scalar_count(), 2 * per_stream + 13 * 13 * 2);
  std::mt19937_64 rng(4);
  const DomainFeaturePair in{oracle::random_tensor({7, 14, 16}, rng), oracle::random_tensor({7, 14, 16}, rng)};
  const DomainFeaturePair out = block.forward(in);
  EXPECT_EQ(out.z_r.shape(), in.z_r.shape());
  EXPECT_EQ(out.z_e.shape(), in.z_e.shape());
  EXPECT_NE(out.z_r, in.z_r);
  EXPECT_THROW(block.forward({oracle::random_tensor({8, 8, 16}, rng), oracle::random_tensor({8, 8, 16}, rng)}),
               ShapeError);
  EXPECT_THROW(block.forward({oracle::random_tensor({7, 7, 8}, rng), oracle::random_tensor({7, 7, 8}, rng)}),
               ShapeError);
}

TEST(CfiBlock, SharedStreamsWithEqualInputsStayEqual) {
  AttentionConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.window = 4;
  cfg.shift = 2;
  ParamStore store;
  CfiBlock block(store, "b", cfg, /*shared_streams=*/true);
  store.initialize(5);
  std::mt19937_64 rng(6);
  const Tensor z = oracle::random_tensor({8, 8, 8}, rng);
  const DomainFeaturePair out = block.forward({z, z});
  EXPECT_EQ(out.z_r, out.z_e);
}

TEST(CfiBlock, GridSmallerThanWindowAttendsGlobally) {
  AttentionConfig cfg;
  cfg.dim = 8;
  cfg.heads = 1;
  cfg.shift = 3;
  ParamStore store;
  CfiBlock block(store, "b", cfg);
  store.initialize(7);
  std::mt19937_64 rng(8);
  const DomainFeaturePair in{oracle::random_tensor({2, 2, 8}, rng), oracle::random_tensor({2, 2, 8}, rng)};
  const DomainFeaturePair out = block.forward(in);
  EXPECT_EQ(out.z_r.shape(), (Shape{2, 2, 8}));
  EXPECT_EQ(block.attention().probs_for_raw_output().shape(), (Shape{1, 4, 4}));
}

TEST(CfiBlock, GradcheckScopePasses) {
  for (const auto& res : run_gradcheck("cfi_attention")) EXPECT_TRUE(res.passed) << res.op << " " << res.max_rel_error;
}

// ---- patch embedding and merging -------------------------------------------------------

TEST(PatchEmbedding, GridShapeAndZeroInput) {
  ParamStore store;
  PatchEmbedding embed(store, "embed", 4, 16);
  store.initialize(1);
  const RgbImage img(224, 224, 0.0);
  const DomainFeaturePair out = embed.forward(img, img, 1.0 / 255.0);
  EXPECT_EQ(out.z_r.shape(), (Shape{56, 56, 16}));
  for (double v : out.z_r.data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(embed.forward(RgbImage(225, 224), RgbImage(225, 224)), ShapeError);
}

TEST(PatchEmbedding, MatchesExplicitMatrixVectorProduct) {
  ParamStore store;
  PatchEmbedding embed(store, "embed", 4, 5);
  store.initialize(2);
  std::mt19937_64 rng(3);
  fill_uniform(embed.bias_r().value, rng, -1, 1);
  RgbImage img(4, 4);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 16; ++i) img.planes[c][i] = static_cast<double>((c * 16 + i) * 5 % 256);
  const Tensor out = embed.forward(img, img, 1.0 / 255.0).z_r;
  ASSERT_EQ(out.shape(), (Shape{1, 1, 5}));
  for (std::size_t o = 0; o < 5; ++o) {
    double acc = embed.bias_r().value[o];
    for (std::size_t dy = 0; dy < 4; ++dy)
      for (std::size_t dx = 0; dx < 4; ++dx)
        for (std::size_t c = 0; c < 3; ++c)
          acc += img.at(c, dy, dx) / 255.0 * embed.weight_r().value.at({(dy * 4 + dx) * 3 + c, o});
    EXPECT_NEAR(out[o], acc, 1e-14);
  }
}

TEST(PatchMerging, HalvesGridAndDoublesChannels) {
  ParamStore store;
  PatchMerging merge(store, "merge", 16);
  store.initialize(4);
  std::mt19937_64 rng(5);
  const DomainFeaturePair out =
      merge.forward({oracle::random_tensor({56, 56, 16}, rng), oracle::random_tensor({56, 56, 16}, rng)});
  EXPECT_EQ(out.z_r.shape(), (Shape{28, 28, 32}));
  EXPECT_EQ(out.z_e.shape(), (Shape{28, 28, 32}));
  EXPECT_THROW(merge.forward({Tensor({5, 4, 16}), Tensor({5, 4, 16})}), ShapeError);
  EXPECT_THROW(merge.forward({Tensor({4, 4, 8}), Tensor({4, 4, 8})}), ShapeError);
}

TEST(PatchMerging, MatchesExplicitConcatenation) {
  ParamStore store;
  PatchMerging merge(store, "merge", 1);
  store.initialize(6);
  const Tensor x({2, 2, 1}, std::vector<double>{1.0, 2.0, 3.0, 4.0});  // a b / c d
  const Tensor out = merge.forward({x, x}).z_r;
  ASSERT_EQ(out.shape(), (Shape{1, 1, 2}));
  const Tensor& w = merge.weight_r().value;  // [4, 2]
  for (std::size_t o = 0; o < 2; ++o)
    EXPECT_NEAR(out[o], 1.0 * w.at({0, o}) + 2.0 * w.at({1, o}) + 3.0 * w.at({2, o}) + 4.0 * w.at({3, o}), 1e-15);
  EXPECT_EQ(gather_2x2(x), Tensor({1, 4}, std::vector<double>{1, 2, 3, 4}));
}

TEST(PatchMerging, ScatterIsAdjointOfGather) {
  std::mt19937_64 rng(7);
  const Tensor x = oracle::random_tensor({6, 4, 3}, rng), y = oracle::random_tensor({6, 12}, rng);
  EXPECT_NEAR(dot(gather_2x2(x), y), dot(x, scatter_2x2(y, 6, 4, 3)), 1e-12);
}

}  // namespace
}  // namespace aquafuse
