#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "aquafuse/image_io.hpp"
#include "aquafuse/tensor.hpp"

// Cross-domain feature interaction: two token streams (raw and enhanced) pass
// through windowed multi-head attention in which each stream's queries attend
// to the other stream's keys and values.
//
// Token grids are [H, W, C] tensors; window tensors are [num_windows, M*M, C].
namespace aquafuse {

inline constexpr double kMaskedLogit = -1e9;

struct AttentionConfig {
  std::size_t window = 7;
  std::size_t dim = 16;
  std::size_t heads = 1;
  std::size_t mlp_ratio = 4;
  std::size_t shift = 0;

  std::size_t head_dim() const { return dim / heads; }
  void validate() const;
};

/// z_r carries the raw-image stream, z_e the enhanced-image stream.
struct DomainFeaturePair {
  Tensor z_r;
  Tensor z_e;
};

// ---- window geometry -------------------------------------------------------

/// [H, W, C] -> [(H/M)*(W/M), M*M, C]; windows and tokens in row-major order.
Tensor window_partition(const Tensor& x, std::size_t window);
/// Inverse of window_partition.
Tensor window_reverse(const Tensor& windows, std::size_t height, std::size_t width);

/// Toroidal roll by (-shift, -shift): out(i, j) = x((i + shift) % H, (j + shift) % W).
Tensor cyclic_shift(const Tensor& x, std::size_t shift);
/// Roll by (+shift, +shift); exact inverse of cyclic_shift.
Tensor cyclic_unshift(const Tensor& x, std::size_t shift);

/// Additive [num_windows, M*M, M*M] mask for shifted windows: 0 between tokens
/// that came from the same contiguous region before the roll, kMaskedLogit
/// otherwise.
Tensor shifted_window_mask(std::size_t height, std::size_t width, std::size_t window, std::size_t shift);

// ---- relative position bias ------------------------------------------------

/// Row of the (2M-1)^2 displacement table for each (query, key) pair of an
/// m x m window, m <= table_window.
std::vector<std::size_t> relative_position_index(std::size_t window, std::size_t table_window);

class RelPosBias {
 public:
  /// `table` must have shape [(2M-1)^2, heads].
  RelPosBias(Param& table, std::size_t window, std::size_t heads);

  /// [heads, m*m, m*m] bias for an m x m window (m <= configured window).
  Tensor bias(std::size_t window) const;
  /// Scatter-add of a [heads, m*m, m*m] gradient into the table.
  void accumulate_grad(const Tensor& dbias, std::size_t window);

  Param& table() { return *table_; }
  std::size_t window() const { return window_; }
  std::size_t heads() const { return heads_; }

 private:
  Param* table_;
  std::size_t window_;
  std::size_t heads_;
};

struct DomainProjection {
  Param* wq = nullptr;
  Param* wk = nullptr;
  Param* wv = nullptr;
};

// ---- multi-head cross attention ----------------------------------------------

/// Windowed multi-head cross attention. The returned pair is
/// (Attention(Q_e, K_r, V_r), Attention(Q_r, K_e, V_e)): the raw-stream output
/// is read out of raw values with enhanced queries, and vice versa.
class CrossAttention {
 public:
  explicit CrossAttention(std::size_t heads) : heads_(heads) {}

  /// `mask` is [num_windows, T, T] or null.
  DomainFeaturePair forward(const DomainFeaturePair& windows, const DomainProjection& proj_r,
                            const DomainProjection& proj_e, RelPosBias& bias, const Tensor* mask);
  /// Returns window gradients; accumulates projection and bias-table grads.
  DomainFeaturePair backward(const DomainFeaturePair& dout);

  /// Softmax probabilities [num_windows * heads, T, T] of the last forward.
  const Tensor& probs_for_raw_output() const { return to_raw_.probs; }
  const Tensor& probs_for_enhanced_output() const { return to_enh_.probs; }

 private:
  struct Direction {
    Tensor q, kt, v;  // split heads: [nW*h, T, d], [nW*h, d, T], [nW*h, T, d]
    Tensor probs;     // [nW*h, T, T]
  };

  Tensor attend(Direction& dir, const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& bias,
                const Tensor* mask) const;
  struct DirectionGrads {
    Tensor dq, dk, dv;
  };
  DirectionGrads attend_backward(const Direction& dir, const Tensor& dout, Tensor& dbias) const;

  std::size_t heads_;
  std::size_t num_windows_ = 0, tokens_ = 0, dim_ = 0, window_ = 0;
  Tensor x_r_, x_e_;  // [nW*T, C]
  DomainProjection proj_r_, proj_e_;
  RelPosBias* bias_ = nullptr;
  Direction to_raw_, to_enh_;
};

/// Splits channels into heads: [nW*T, h*d] -> [nW*h, T, d].
Tensor split_heads(const Tensor& x, std::size_t num_windows, std::size_t tokens, std::size_t heads);
/// Inverse of split_heads.
Tensor merge_heads(const Tensor& x, std::size_t num_windows, std::size_t tokens, std::size_t heads);

// ---- CFI block ---------------------------------------------------------------

struct StreamParams {
  Param* norm1_scale = nullptr;
  Param* norm1_shift = nullptr;
  DomainProjection proj;
  Param* norm2_scale = nullptr;
  Param* norm2_shift = nullptr;
  Param* fc1_w = nullptr;
  Param* fc1_b = nullptr;
  Param* fc2_w = nullptr;
  Param* fc2_b = nullptr;
};

/// One cross-domain interaction block:
///   z^ = MCA(LN(z)) + z,  z' = MLP(LN(z^)) + z^   on each stream,
/// with (optionally shifted) window partitioning around the MCA.
class CfiBlock {
 public:
  /// With `shared_streams` the enhanced stream reuses the raw stream's params.
  CfiBlock(ParamStore& store, const std::string& name, const AttentionConfig& cfg, bool shared_streams = false);

  DomainFeaturePair forward(const DomainFeaturePair& in);
  DomainFeaturePair backward(const DomainFeaturePair& dout);

  const AttentionConfig& config() const { return cfg_; }
  StreamParams& raw_params() { return raw_; }
  StreamParams& enhanced_params() { return enh_; }
  RelPosBias& position_bias() { return bias_; }
  const CrossAttention& attention() const { return attn_; }

 private:
  struct StreamCache {
    LayerNormCache norm1;
    Tensor hat;  // [HW, C]
    LayerNormCache norm2;
    Tensor norm2_out, fc1_out, act;
  };

  Tensor stream_pre_attention(const Tensor& z, const StreamParams& p, StreamCache& cache) const;
  Tensor stream_post_attention(const Tensor& z, const Tensor& attn_windows, const StreamParams& p,
                               StreamCache& cache) const;
  Tensor stream_mlp_backward(const Tensor& dout, StreamParams& p, const StreamCache& cache, Tensor& dattn_windows) const;

  AttentionConfig cfg_;
  StreamParams raw_, enh_;
  RelPosBias bias_;
  CrossAttention attn_;
  std::size_t height_ = 0, width_ = 0, eff_window_ = 0, eff_shift_ = 0;
  Tensor mask_;
  std::size_t mask_h_ = 0, mask_w_ = 0;
  StreamCache cache_r_, cache_e_;
};

// ---- embedding and merging -----------------------------------------------------

/// [H, W] image -> [(H/p)*(W/p), p*p*3] patch rows, flattened in (dy, dx, channel) order.
Tensor patchify(const RgbImage& img, std::size_t patch, double scale = 1.0);

/// Per-domain linear patch embedding (weight [p*p*3, C] plus bias [C]).
class PatchEmbedding {
 public:
  PatchEmbedding(ParamStore& store, const std::string& name, std::size_t patch, std::size_t dim,
                 bool shared_streams = false);

  /// Pixel values are multiplied by `input_scale` before projection.
  DomainFeaturePair forward(const RgbImage& raw, const RgbImage& enhanced, double input_scale = 1.0);
  void backward(const DomainFeaturePair& dout);

  Param& weight_r() { return *w_r_; }
  Param& bias_r() { return *b_r_; }
  Param& weight_e() { return *w_e_; }
  Param& bias_e() { return *b_e_; }
  std::size_t patch() const { return patch_; }

 private:
  std::size_t patch_, dim_;
  Param *w_r_, *b_r_, *w_e_, *b_e_;
  Tensor rows_r_, rows_e_;
  std::size_t grid_h_ = 0, grid_w_ = 0;
};

/// [H, W, C] -> [(H/2)*(W/2), 4C], neighbors ordered (0,0), (0,1), (1,0), (1,1).
Tensor gather_2x2(const Tensor& x);
/// Adjoint of gather_2x2.
Tensor scatter_2x2(const Tensor& rows, std::size_t height, std::size_t width, std::size_t channels);

/// 2x2 neighborhood concatenation followed by a bias-free 4C -> 2C projection, per domain.
class PatchMerging {
 public:
  PatchMerging(ParamStore& store, const std::string& name, std::size_t dim, bool shared_streams = false);

  DomainFeaturePair forward(const DomainFeaturePair& in);
  DomainFeaturePair backward(const DomainFeaturePair& dout);

  Param& weight_r() { return *w_r_; }
  Param& weight_e() { return *w_e_; }

 private:
  std::size_t dim_;
  Param *w_r_, *w_e_;
  Tensor rows_r_, rows_e_;
  std::size_t height_ = 0, width_ = 0;
};

/// Throws ShapeError unless z_r and z_e are [H, W, C] grids of identical shape.
void require_grid_pair(const DomainFeaturePair& pair, const char* op);

}  // namespace aquafuse
