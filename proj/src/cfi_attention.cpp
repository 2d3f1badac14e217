#include "aquafuse/cfi_attention.hpp"

#include <cmath>
#include <string>

#include "aquafuse/errors.hpp"
#include "aquafuse/parallel.hpp"

namespace aquafuse {

namespace {

std::string dims(std::size_t h, std::size_t w) { return std::to_string(h) + "x" + std::to_string(w); }

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
  if (x.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(x.shape()));
}

std::size_t isqrt_exact(std::size_t t, const char* op) {
  const auto m = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(t))));
  if (m * m != t) throw ShapeError(std::string(op) + ": window token count " + std::to_string(t) + " is not square");
  return m;
}

// Region label of a position on the rolled grid: 0 for [0, n - window),
// 1 for [n - window, n - shift), 2 for [n - shift, n).
std::size_t shift_region(std::size_t i, std::size_t n, std::size_t window, std::size_t shift) {
  if (i < n - window) return 0;
  if (i < n - shift) return 1;
  return 2;
}

Tensor roll(const Tensor& x, std::size_t dy, std::size_t dx) {
  require_rank(x, 3, "cyclic_shift");
  const std::size_t h = x.extent(0), w = x.extent(1), c = x.extent(2);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < h; ++i) {
    const std::size_t si = (i + dy) % h;
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t sj = (j + dx) % w;
      std::copy_n(x.ptr() + (si * w + sj) * c, c, y.ptr() + (i * w + j) * c);
    }
  }
  return y;
}

Tensor flat_tokens(const Tensor& grid) { return grid.reshaped({grid.extent(0) * grid.extent(1), grid.extent(2)}); }

}  // namespace

void AttentionConfig::validate() const {
  if (window == 0) throw ConfigError("attention window must be >= 1");
  if (heads == 0 || dim % heads != 0)
    throw ConfigError("channel count " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  if (shift >= window)
    throw ConfigError("shift " + std::to_string(shift) + " must be smaller than window " + std::to_string(window));
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be >= 1");
}

void require_grid_pair(const DomainFeaturePair& pair, const char* op) {
  require_rank(pair.z_r, 3, op);
  if (pair.z_r.shape() != pair.z_e.shape())
    throw ShapeError(std::string(op) + ": stream shapes differ " + shape_string(pair.z_r.shape()) + " vs " +
                     shape_string(pair.z_e.shape()));
}

Tensor window_partition(const Tensor& x, std::size_t window) {
  require_rank(x, 3, "window_partition");
  const std::size_t h = x.extent(0), w = x.extent(1), c = x.extent(2);
  if (window == 0 || h % window != 0 || w % window != 0)
    throw ShapeError("window_partition: grid " + dims(h, w) + " is not divisible by window " + std::to_string(window));
  const std::size_t wy = h / window, wx = w / window, t = window * window;
  Tensor out({wy * wx, t, c});
  for (std::size_t by = 0; by < wy; ++by)
    for (std::size_t bx = 0; bx < wx; ++bx)
      for (std::size_t iy = 0; iy < window; ++iy)
        for (std::size_t ix = 0; ix < window; ++ix) {
          const std::size_t src = ((by * window + iy) * w + bx * window + ix) * c;
          const std::size_t dst = ((by * wx + bx) * t + iy * window + ix) * c;
          std::copy_n(x.ptr() + src, c, out.ptr() + dst);
        }
  return out;
}

Tensor window_reverse(const Tensor& windows, std::size_t height, std::size_t width) {
  require_rank(windows, 3, "window_reverse");
  const std::size_t t = windows.extent(1), c = windows.extent(2);
  const std::size_t window = isqrt_exact(t, "window_reverse");
  if (height % window != 0 || width % window != 0 || (height / window) * (width / window) != windows.extent(0))
    throw ShapeError("window_reverse: " + shape_string(windows.shape()) + " cannot tile a " + dims(height, width) +
                     " grid");
  const std::size_t wx = width / window;
  Tensor out({height, width, c});
  for (std::size_t wi = 0; wi < windows.extent(0); ++wi) {
    const std::size_t by = wi / wx, bx = wi % wx;
    for (std::size_t iy = 0; iy < window; ++iy)
      for (std::size_t ix = 0; ix < window; ++ix) {
        const std::size_t src = (wi * t + iy * window + ix) * c;
        const std::size_t dst = ((by * window + iy) * width + bx * window + ix) * c;
        std::copy_n(windows.ptr() + src, c, out.ptr() + dst);
      }
  }
  return out;
}

Tensor cyclic_shift(const Tensor& x, std::size_t shift) {
  require_rank(x, 3, "cyclic_shift");
  return roll(x, shift % x.extent(0), shift % x.extent(1));
}

Tensor cyclic_unshift(const Tensor& x, std::size_t shift) {
  require_rank(x, 3, "cyclic_unshift");
  const std::size_t h = x.extent(0), w = x.extent(1);
  return roll(x, (h - shift % h) % h, (w - shift % w) % w);
}

Tensor shifted_window_mask(std::size_t height, std::size_t width, std::size_t window, std::size_t shift) {
  if (window == 0 || height % window != 0 || width % window != 0)
    throw ShapeError("shifted_window_mask: grid " + dims(height, width) + " is not divisible by window " +
                     std::to_string(window));
  const std::size_t wy = height / window, wx = width / window, t = window * window;
  Tensor mask({wy * wx, t, t});
  if (shift == 0) return mask;
  if (shift >= window) throw ShapeError("shifted_window_mask: shift must be smaller than the window");
  std::vector<std::size_t> label(t);
  for (std::size_t by = 0; by < wy; ++by)
    for (std::size_t bx = 0; bx < wx; ++bx) {
      for (std::size_t iy = 0; iy < window; ++iy)
        for (std::size_t ix = 0; ix < window; ++ix)
          label[iy * window + ix] = shift_region(by * window + iy, height, window, shift) * 3 +
                                    shift_region(bx * window + ix, width, window, shift);
      double* m = mask.ptr() + (by * wx + bx) * t * t;
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < t; ++j) m[i * t + j] = label[i] == label[j] ? 0.0 : kMaskedLogit;
    }
  return mask;
}

std::vector<std::size_t> relative_position_index(std::size_t window, std::size_t table_window) {
  if (window == 0 || window > table_window)
    throw ShapeError("relative_position_index: window " + std::to_string(window) + " exceeds table window " +
                     std::to_string(table_window));
  const std::size_t t = window * window;
  const std::size_t span = 2 * table_window - 1;
  std::vector<std::size_t> index(t * t);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < t; ++j) {
      const std::size_t dy = i / window + table_window - 1 - j / window;
      const std::size_t dx = i % window + table_window - 1 - j % window;
      index[i * t + j] = dy * span + dx;
    }
  return index;
}

RelPosBias::RelPosBias(Param& table, std::size_t window, std::size_t heads)
    : table_(&table), window_(window), heads_(heads) {
  const std::size_t span = 2 * window - 1;
  if (table.value.shape() != Shape{span * span, heads})
    throw ShapeError("RelPosBias: table must be " + shape_string({span * span, heads}) + ", got " +
                     shape_string(table.value.shape()));
}

Tensor RelPosBias::bias(std::size_t window) const {
  const auto index = relative_position_index(window, window_);
  const std::size_t t = window * window;
  Tensor out({heads_, t, t});
  for (std::size_t h = 0; h < heads_; ++h)
    for (std::size_t k = 0; k < t * t; ++k) out[h * t * t + k] = table_->value[index[k] * heads_ + h];
  return out;
}

void RelPosBias::accumulate_grad(const Tensor& dbias, std::size_t window) {
  const auto index = relative_position_index(window, window_);
  const std::size_t t = window * window;
  if (dbias.shape() != Shape{heads_, t, t}) throw ShapeError("RelPosBias: gradient shape mismatch");
  for (std::size_t h = 0; h < heads_; ++h)
    for (std::size_t k = 0; k < t * t; ++k) table_->grad[index[k] * heads_ + h] += dbias[h * t * t + k];
}

Tensor split_heads(const Tensor& x, std::size_t num_windows, std::size_t tokens, std::size_t heads) {
  const std::size_t c = x.extent(1), d = c / heads;
  Tensor out({num_windows * heads, tokens, d});
  for (std::size_t w = 0; w < num_windows; ++w)
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(x.ptr() + (w * tokens + t) * c + h * d, d, out.ptr() + ((w * heads + h) * tokens + t) * d);
  return out;
}

Tensor merge_heads(const Tensor& x, std::size_t num_windows, std::size_t tokens, std::size_t heads) {
  const std::size_t d = x.extent(2), c = d * heads;
  Tensor out({num_windows * tokens, c});
  for (std::size_t w = 0; w < num_windows; ++w)
    for (std::size_t t = 0; t < tokens; ++t)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(x.ptr() + ((w * heads + h) * tokens + t) * d, d, out.ptr() + (w * tokens + t) * c + h * d);
  return out;
}

Tensor CrossAttention::attend(Direction& dir, const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& bias,
                              const Tensor* mask) const {
  const std::size_t t = tokens_, hs = heads_;
  dir.q = split_heads(q, num_windows_, t, hs);
  dir.kt = transpose_last2(split_heads(k, num_windows_, t, hs));
  dir.v = split_heads(v, num_windows_, t, hs);
  Tensor scores = matmul(dir.q, dir.kt);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim_ / hs));
  parallel_for(num_windows_ * hs, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t b = b0; b < b1; ++b) {
      const std::size_t w = b / hs, h = b % hs;
      double* s = scores.ptr() + b * t * t;
      const double* bh = bias.ptr() + h * t * t;
      const double* mw = mask ? mask->ptr() + w * t * t : nullptr;
      for (std::size_t k2 = 0; k2 < t * t; ++k2) s[k2] = s[k2] * scale + bh[k2] + (mw ? mw[k2] : 0.0);
    }
  });
  dir.probs = softmax_lastdim(scores);
  return merge_heads(matmul(dir.probs, dir.v), num_windows_, t, hs);
}

CrossAttention::DirectionGrads CrossAttention::attend_backward(const Direction& dir, const Tensor& dout,
                                                               Tensor& dbias) const {
  const std::size_t t = tokens_, hs = heads_;
  const Tensor dout_heads = split_heads(dout, num_windows_, t, hs);
  MatmulGrads pv = matmul_backward(dir.probs, dir.v, dout_heads);
  Tensor dscores = softmax_lastdim_backward(dir.probs, pv.da);
  // Bias gradient sums over windows in ascending order.
  for (std::size_t w = 0; w < num_windows_; ++w)
    for (std::size_t h = 0; h < hs; ++h) {
      const double* ds = dscores.ptr() + (w * hs + h) * t * t;
      double* db = dbias.ptr() + h * t * t;
      for (std::size_t k2 = 0; k2 < t * t; ++k2) db[k2] += ds[k2];
    }
  const double scale = 1.0 / std::sqrt(static_cast<double>(dim_ / hs));
  MatmulGrads qk = matmul_backward(dir.q, dir.kt, scaled(dscores, scale));
  return {merge_heads(qk.da, num_windows_, t, hs), merge_heads(transpose_last2(qk.db), num_windows_, t, hs),
          merge_heads(pv.db, num_windows_, t, hs)};
}

DomainFeaturePair CrossAttention::forward(const DomainFeaturePair& windows, const DomainProjection& proj_r,
                                          const DomainProjection& proj_e, RelPosBias& bias, const Tensor* mask) {
  require_rank(windows.z_r, 3, "mca");
  if (windows.z_r.shape() != windows.z_e.shape())
    throw ShapeError("mca: stream window shapes differ " + shape_string(windows.z_r.shape()) + " vs " +
                     shape_string(windows.z_e.shape()));
  num_windows_ = windows.z_r.extent(0);
  tokens_ = windows.z_r.extent(1);
  dim_ = windows.z_r.extent(2);
  window_ = isqrt_exact(tokens_, "mca");
  if (dim_ % heads_ != 0)
    throw ShapeError("mca: " + std::to_string(dim_) + " channels do not split into " + std::to_string(heads_) +
                     " heads");
  if (bias.heads() != heads_) throw ShapeError("mca: position bias head count differs from attention heads");
  if (mask && mask->shape() != Shape{num_windows_, tokens_, tokens_})
    throw ShapeError("mca: mask " + shape_string(mask->shape()) + " does not match windows " +
                     shape_string(windows.z_r.shape()));
  proj_r_ = proj_r;
  proj_e_ = proj_e;
  bias_ = &bias;
  x_r_ = windows.z_r.reshaped({num_windows_ * tokens_, dim_});
  x_e_ = windows.z_e.reshaped({num_windows_ * tokens_, dim_});
  const Tensor q_r = linear(x_r_, *proj_r.wq), k_r = linear(x_r_, *proj_r.wk), v_r = linear(x_r_, *proj_r.wv);
  const Tensor q_e = linear(x_e_, *proj_e.wq), k_e = linear(x_e_, *proj_e.wk), v_e = linear(x_e_, *proj_e.wv);
  const Tensor b = bias.bias(window_);
  const Shape out_shape = windows.z_r.shape();
  return {attend(to_raw_, q_e, k_r, v_r, b, mask).reshaped(out_shape),
          attend(to_enh_, q_r, k_e, v_e, b, mask).reshaped(out_shape)};
}

DomainFeaturePair CrossAttention::backward(const DomainFeaturePair& dout) {
  if (!bias_) throw ShapeError("mca: backward called before forward");
  const Shape flat{num_windows_ * tokens_, dim_};
  Tensor dbias({heads_, tokens_, tokens_});
  const DirectionGrads g_raw = attend_backward(to_raw_, dout.z_r.reshaped(flat), dbias);  // dQ_e, dK_r, dV_r
  const DirectionGrads g_enh = attend_backward(to_enh_, dout.z_e.reshaped(flat), dbias);  // dQ_r, dK_e, dV_e
  bias_->accumulate_grad(dbias, window_);

  Tensor dx_r = linear_backward(x_r_, g_enh.dq, *proj_r_.wq);
  add_inplace(dx_r, linear_backward(x_r_, g_raw.dk, *proj_r_.wk));
  add_inplace(dx_r, linear_backward(x_r_, g_raw.dv, *proj_r_.wv));
  Tensor dx_e = linear_backward(x_e_, g_raw.dq, *proj_e_.wq);
  add_inplace(dx_e, linear_backward(x_e_, g_enh.dk, *proj_e_.wk));
  add_inplace(dx_e, linear_backward(x_e_, g_enh.dv, *proj_e_.wv));
  const Shape win{num_windows_, tokens_, dim_};
  return {std::move(dx_r).reshaped(win), std::move(dx_e).reshaped(win)};
}

namespace {

StreamParams register_stream(ParamStore& store, const std::string& prefix, std::size_t dim, std::size_t hidden) {
  StreamParams p;
  p.norm1_scale = &store.add(prefix + ".norm1.scale", {dim}, ParamInit::kOnes);
  p.norm1_shift = &store.add(prefix + ".norm1.shift", {dim}, ParamInit::kZeros);
  p.proj.wq = &store.add(prefix + ".attn.wq", {dim, dim}, ParamInit::kTruncatedNormal);
  p.proj.wk = &store.add(prefix + ".attn.wk", {dim, dim}, ParamInit::kTruncatedNormal);
  p.proj.wv = &store.add(prefix + ".attn.wv", {dim, dim}, ParamInit::kTruncatedNormal);
  p.norm2_scale = &store.add(prefix + ".norm2.scale", {dim}, ParamInit::kOnes);
  p.norm2_shift = &store.add(prefix + ".norm2.shift", {dim}, ParamInit::kZeros);
  p.fc1_w = &store.add(prefix + ".mlp.fc1.weight", {dim, hidden}, ParamInit::kTruncatedNormal);
  p.fc1_b = &store.add(prefix + ".mlp.fc1.bias", {hidden}, ParamInit::kZeros);
  p.fc2_w = &store.add(prefix + ".mlp.fc2.weight", {hidden, dim}, ParamInit::kTruncatedNormal);
  p.fc2_b = &store.add(prefix + ".mlp.fc2.bias", {dim}, ParamInit::kZeros);
  return p;
}

Param& register_bias_table(ParamStore& store, const std::string& name, const AttentionConfig& cfg) {
  cfg.validate();
  const std::size_t span = 2 * cfg.window - 1;
  return store.add(name + ".rel_pos_bias", {span * span, cfg.heads}, ParamInit::kZeros);
}

}  // namespace

CfiBlock::CfiBlock(ParamStore& store, const std::string& name, const AttentionConfig& cfg, bool shared_streams)
    : cfg_(cfg), bias_(register_bias_table(store, name, cfg), cfg.window, cfg.heads), attn_(cfg.heads) {
  const std::size_t hidden = cfg.dim * cfg.mlp_ratio;
  raw_ = register_stream(store, name + ".raw", cfg.dim, hidden);
  enh_ = shared_streams ? raw_ : register_stream(store, name + ".enh", cfg.dim, hidden);
}

Tensor CfiBlock::stream_pre_attention(const Tensor& z, const StreamParams& p, StreamCache& cache) const {
  Tensor normed = layer_norm(flat_tokens(z), *p.norm1_scale, *p.norm1_shift, &cache.norm1);
  normed = std::move(normed).reshaped(z.shape());
  if (eff_shift_ > 0) normed = cyclic_shift(normed, eff_shift_);
  return window_partition(normed, eff_window_);
}

Tensor CfiBlock::stream_post_attention(const Tensor& z, const Tensor& attn_windows, const StreamParams& p,
                                       StreamCache& cache) const {
  Tensor a = window_reverse(attn_windows, height_, width_);
  if (eff_shift_ > 0) a = cyclic_unshift(a, eff_shift_);
  cache.hat = add(flat_tokens(a), flat_tokens(z));
  cache.norm2_out = layer_norm(cache.hat, *p.norm2_scale, *p.norm2_shift, &cache.norm2);
  cache.fc1_out = linear(cache.norm2_out, *p.fc1_w, p.fc1_b);
  cache.act = gelu(cache.fc1_out);
  Tensor out = add(cache.hat, linear(cache.act, *p.fc2_w, p.fc2_b));
  return std::move(out).reshaped(z.shape());
}

DomainFeaturePair CfiBlock::forward(const DomainFeaturePair& in) {
  require_grid_pair(in, "cfi_block");
  height_ = in.z_r.extent(0);
  width_ = in.z_r.extent(1);
  if (in.z_r.extent(2) != cfg_.dim)
    throw ShapeError("cfi_block: expected " + std::to_string(cfg_.dim) + " channels, got " +
                     shape_string(in.z_r.shape()));
  const std::size_t m = cfg_.window;
  if (height_ % m == 0 && width_ % m == 0) {
    eff_window_ = m;
    eff_shift_ = cfg_.shift;
  } else if (height_ == width_ && height_ < m) {
    // Grid smaller than one window: attend over the whole grid, unshifted.
    eff_window_ = height_;
    eff_shift_ = 0;
  } else {
    throw ShapeError("cfi_block: token grid " + dims(height_, width_) + " is not divisible by window " +
                     std::to_string(m));
  }
  if (eff_shift_ > 0 && (mask_h_ != height_ || mask_w_ != width_)) {
    mask_ = shifted_window_mask(height_, width_, eff_window_, eff_shift_);
    mask_h_ = height_;
    mask_w_ = width_;
  }
  const DomainFeaturePair windows{stream_pre_attention(in.z_r, raw_, cache_r_),
                                  stream_pre_attention(in.z_e, enh_, cache_e_)};
  const DomainFeaturePair attended =
      attn_.forward(windows, raw_.proj, enh_.proj, bias_, eff_shift_ > 0 ? &mask_ : nullptr);
  return {stream_post_attention(in.z_r, attended.z_r, raw_, cache_r_),
          stream_post_attention(in.z_e, attended.z_e, enh_, cache_e_)};
}

Tensor CfiBlock::stream_mlp_backward(const Tensor& dout, StreamParams& p, const StreamCache& cache,
                                     Tensor& dattn_windows) const {
  const Tensor d = flat_tokens(dout);
  Tensor dact = linear_backward(cache.act, d, *p.fc2_w, p.fc2_b);
  Tensor dfc1 = gelu_backward(cache.fc1_out, dact);
  Tensor dnorm2 = linear_backward(cache.norm2_out, dfc1, *p.fc1_w, p.fc1_b);
  Tensor dhat = add(d, layer_norm_backward(dnorm2, cache.norm2, *p.norm2_scale, *p.norm2_shift));
  Tensor dgrid = dhat.reshaped({height_, width_, cfg_.dim});
  if (eff_shift_ > 0) dgrid = cyclic_shift(dgrid, eff_shift_);
  dattn_windows = window_partition(dgrid, eff_window_);
  return dhat;
}

DomainFeaturePair CfiBlock::backward(const DomainFeaturePair& dout) {
  require_grid_pair(dout, "cfi_block backward");
  if (dout.z_r.shape() != Shape{height_, width_, cfg_.dim})
    throw ShapeError("cfi_block backward: gradient " + shape_string(dout.z_r.shape()) + " does not match forward");
  DomainFeaturePair dwin;
  Tensor dz_r = stream_mlp_backward(dout.z_r, raw_, cache_r_, dwin.z_r);
  Tensor dz_e = stream_mlp_backward(dout.z_e, enh_, cache_e_, dwin.z_e);
  const DomainFeaturePair dnormed = attn_.backward(dwin);
  auto finish = [&](Tensor& dz, const Tensor& dn, StreamParams& p, const StreamCache& cache) {
    Tensor g = window_reverse(dn, height_, width_);
    if (eff_shift_ > 0) g = cyclic_unshift(g, eff_shift_);
    add_inplace(dz, layer_norm_backward(flat_tokens(g), cache.norm1, *p.norm1_scale, *p.norm1_shift));
    return std::move(dz).reshaped({height_, width_, cfg_.dim});
  };
  return {finish(dz_r, dnormed.z_r, raw_, cache_r_), finish(dz_e, dnormed.z_e, enh_, cache_e_)};
}

Tensor patchify(const RgbImage& img, std::size_t patch, double scale) {
  if (patch == 0 || img.empty() || img.height % patch != 0 || img.width % patch != 0)
    throw ShapeError("patch embedding: image " + dims(img.height, img.width) + " must be divisible by patch size " +
                     std::to_string(patch));
  const std::size_t gh = img.height / patch, gw = img.width / patch, len = patch * patch * 3;
  Tensor rows({gh * gw, len});
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      double* row = rows.ptr() + (gy * gw + gx) * len;
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx)
          for (std::size_t c = 0; c < 3; ++c)
            row[(dy * patch + dx) * 3 + c] = img.at(c, gy * patch + dy, gx * patch + dx) * scale;
    }
  return rows;
}

PatchEmbedding::PatchEmbedding(ParamStore& store, const std::string& name, std::size_t patch, std::size_t dim,
                               bool shared_streams)
    : patch_(patch), dim_(dim) {
  if (patch == 0 || dim == 0) throw ConfigError("patch embedding: patch size and dim must be positive");
  const std::size_t len = patch * patch * 3;
  w_r_ = &store.add(name + ".raw.weight", {len, dim}, ParamInit::kTruncatedNormal);
  b_r_ = &store.add(name + ".raw.bias", {dim}, ParamInit::kZeros);
  if (shared_streams) {
    w_e_ = w_r_;
    b_e_ = b_r_;
  } else {
    w_e_ = &store.add(name + ".enh.weight", {len, dim}, ParamInit::kTruncatedNormal);
    b_e_ = &store.add(name + ".enh.bias", {dim}, ParamInit::kZeros);
  }
}

DomainFeaturePair PatchEmbedding::forward(const RgbImage& raw, const RgbImage& enhanced, double input_scale) {
  if (raw.height != enhanced.height || raw.width != enhanced.width)
    throw ShapeError("patch embedding: raw image " + dims(raw.height, raw.width) + " and enhanced image " +
                     dims(enhanced.height, enhanced.width) + " differ in size");
  rows_r_ = patchify(raw, patch_, input_scale);
  rows_e_ = patchify(enhanced, patch_, input_scale);
  grid_h_ = raw.height / patch_;
  grid_w_ = raw.width / patch_;
  const Shape grid{grid_h_, grid_w_, dim_};
  return {linear(rows_r_, *w_r_, b_r_).reshaped(grid), linear(rows_e_, *w_e_, b_e_).reshaped(grid)};
}

void PatchEmbedding::backward(const DomainFeaturePair& dout) {
  const Shape flat{grid_h_ * grid_w_, dim_};
  linear_backward(rows_r_, dout.z_r.reshaped(flat), *w_r_, b_r_);
  linear_backward(rows_e_, dout.z_e.reshaped(flat), *w_e_, b_e_);
}

Tensor gather_2x2(const Tensor& x) {
  require_rank(x, 3, "patch_merge");
  const std::size_t h = x.extent(0), w = x.extent(1), c = x.extent(2);
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("patch_merge: token grid " + dims(h, w) + " must have even extents");
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor rows({oh * ow, 4 * c});
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t xx = 0; xx < ow; ++xx)
      for (std::size_t k = 0; k < 4; ++k) {
        const std::size_t sy = 2 * y + k / 2, sx = 2 * xx + k % 2;
        std::copy_n(x.ptr() + (sy * w + sx) * c, c, rows.ptr() + (y * ow + xx) * 4 * c + k * c);
      }
  return rows;
}

Tensor scatter_2x2(const Tensor& rows, std::size_t height, std::size_t width, std::size_t channels) {
  const std::size_t oh = height / 2, ow = width / 2;
  if (rows.shape() != Shape{oh * ow, 4 * channels}) throw ShapeError("patch_merge: gradient shape mismatch");
  Tensor x({height, width, channels});
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t xx = 0; xx < ow; ++xx)
      for (std::size_t k = 0; k < 4; ++k) {
        const std::size_t sy = 2 * y + k / 2, sx = 2 * xx + k % 2;
        std::copy_n(rows.ptr() + (y * ow + xx) * 4 * channels + k * channels, channels,
                    x.ptr() + (sy * width + sx) * channels);
      }
  return x;
}

PatchMerging::PatchMerging(ParamStore& store, const std::string& name, std::size_t dim, bool shared_streams)
    : dim_(dim) {
  w_r_ = &store.add(name + ".raw.reduction", {4 * dim, 2 * dim}, ParamInit::kTruncatedNormal);
  w_e_ = shared_streams ? w_r_ : &store.add(name + ".enh.reduction", {4 * dim, 2 * dim}, ParamInit::kTruncatedNormal);
}

DomainFeaturePair PatchMerging::forward(const DomainFeaturePair& in) {
  require_grid_pair(in, "patch_merge");
  if (in.z_r.extent(2) != dim_)
    throw ShapeError("patch_merge: expected " + std::to_string(dim_) + " channels, got " +
                     shape_string(in.z_r.shape()));
  height_ = in.z_r.extent(0);
  width_ = in.z_r.extent(1);
  rows_r_ = gather_2x2(in.z_r);
  rows_e_ = gather_2x2(in.z_e);
  const Shape out{height_ / 2, width_ / 2, 2 * dim_};
  return {linear(rows_r_, *w_r_).reshaped(out), linear(rows_e_, *w_e_).reshaped(out)};
}

DomainFeaturePair PatchMerging::backward(const DomainFeaturePair& dout) {
  const Shape flat{(height_ / 2) * (width_ / 2), 2 * dim_};
  return {scatter_2x2(linear_backward(rows_r_, dout.z_r.reshaped(flat), *w_r_), height_, width_, dim_),
          scatter_2x2(linear_backward(rows_e_, dout.z_e.reshaped(flat), *w_e_), height_, width_, dim_)};
}

}  // namespace aquafuse
