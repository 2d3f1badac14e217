#include "aquafuse/backbone.hpp"

#include <algorithm>
#include <string>

#include "aquafuse/errors.hpp"

namespace aquafuse {

std::size_t BackboneConfig::stage_heads(std::size_t stage) const {
  if (!heads.empty()) return heads.at(stage);
  return std::max<std::size_t>(1, dim / 32) << stage;
}

void BackboneConfig::validate() const {
  if (dim == 0) throw ConfigError("backbone: dim must be positive");
  if (depths.size() != kNumStages) throw ConfigError("backbone: depths must list exactly 4 stages");
  if (!heads.empty() && heads.size() != kNumStages) throw ConfigError("backbone: heads must list exactly 4 stages");
  if (window == 0 || patch == 0 || mlp_ratio == 0) throw ConfigError("backbone: window, patch and mlp_ratio must be positive");
  for (std::size_t s = 0; s < kNumStages; ++s) {
    if (depths[s] == 0) throw ConfigError("backbone: stage " + std::to_string(s + 1) + " has no blocks");
    const std::size_t h = stage_heads(s);
    if (h == 0 || stage_dim(s) % h != 0)
      throw ConfigError("backbone: stage " + std::to_string(s + 1) + " channels " + std::to_string(stage_dim(s)) +
                        " not divisible by " + std::to_string(h) + " heads");
  }
}

Backbone::Backbone(const BackboneConfig& cfg) : cfg_(cfg), store_(std::make_unique<ParamStore>()) {
  cfg_.validate();
  const bool shared = cfg_.shared_weights;
  embed_ = std::make_unique<PatchEmbedding>(*store_, "embed", cfg_.patch, cfg_.dim, shared);
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const std::string prefix = "stage" + std::to_string(s + 1);
    if (s > 0) merges_.emplace_back(*store_, prefix + ".merge", cfg_.stage_dim(s - 1), shared);
    stages_[s].reserve(cfg_.depths[s]);
    for (std::size_t k = 0; k < cfg_.depths[s]; ++k) {
      AttentionConfig ac;
      ac.window = cfg_.window;
      ac.dim = cfg_.stage_dim(s);
      ac.heads = cfg_.stage_heads(s);
      ac.mlp_ratio = cfg_.mlp_ratio;
      ac.shift = (k % 2 == 1) ? cfg_.window / 2 : 0;
      stages_[s].emplace_back(*store_, prefix + ".block" + std::to_string(k), ac, shared);
    }
    fusions_.emplace_back(*store_, prefix + ".gff", cfg_.stage_dim(s), s + 1);
  }
  store_->initialize(cfg_.seed);
}

std::size_t Backbone::block_count() const {
  std::size_t n = 0;
  for (const auto& st : stages_) n += st.size();
  return n;
}

void Backbone::check_input(const RgbImage& raw, const RgbImage& enhanced) const {
  if (raw.height != enhanced.height || raw.width != enhanced.width)
    throw ShapeError("backbone: raw image " + std::to_string(raw.height) + "x" + std::to_string(raw.width) +
                     " and enhanced image " + std::to_string(enhanced.height) + "x" +
                     std::to_string(enhanced.width) + " differ in size");
  const std::size_t multiple = cfg_.required_multiple();
  auto fail = [&] {
    throw ShapeError("backbone: input " + std::to_string(raw.height) + "x" + std::to_string(raw.width) +
                     " is not supported; height and width must be multiples of " + std::to_string(multiple) +
                     " (patch " + std::to_string(cfg_.patch) + " x window " + std::to_string(cfg_.window) +
                     " x 8)");
  };
  const std::size_t coarsest = cfg_.patch << (kNumStages - 1);
  if (raw.empty() || raw.height % coarsest != 0 || raw.width % coarsest != 0) fail();
  // Every stage grid must tile into windows, or be one square grid smaller than a window.
  for (std::size_t s = 0; s < kNumStages; ++s) {
    const std::size_t gh = raw.height / (cfg_.patch << s), gw = raw.width / (cfg_.patch << s);
    const bool tiles = gh % cfg_.window == 0 && gw % cfg_.window == 0;
    const bool single = gh == gw && gh < cfg_.window;
    if (!tiles && !single) fail();
  }
}

StagePyramid Backbone::forward(const RgbImage& raw, const RgbImage& enhanced) {
  check_input(raw, enhanced);
  StagePyramid out;
  DomainFeaturePair pair = embed_->forward(raw, enhanced, 1.0 / 255.0);
  for (std::size_t s = 0; s < kNumStages; ++s) {
    if (s > 0) pair = merges_[s - 1].forward(pair);
    for (auto& block : stages_[s]) pair = block.forward(pair);
    out.stages[s] = fusions_[s].forward(pair);
    streams_[s] = pair;
  }
  return out;
}

void Backbone::backward(const std::array<Tensor, kNumStages>& grads) {
  DomainFeaturePair carry;
  for (std::size_t s = kNumStages; s-- > 0;) {
    DomainFeaturePair d = fusions_[s].backward(grads[s]);
    if (s + 1 < kNumStages) {
      add_inplace(d.z_r, carry.z_r);
      add_inplace(d.z_e, carry.z_e);
    }
    for (auto it = stages_[s].rbegin(); it != stages_[s].rend(); ++it) d = it->backward(d);
    if (s > 0)
      carry = merges_[s - 1].backward(d);
    else
      embed_->backward(d);
  }
}

Backbone build_backbone(const BackboneConfig& cfg) { return Backbone(cfg); }

}  // namespace aquafuse
