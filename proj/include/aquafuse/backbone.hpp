#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <vector>

#include "aquafuse/cfi_attention.hpp"
#include "aquafuse/gff_fusion.hpp"
#include "aquafuse/image_io.hpp"
#include "aquafuse/tensor.hpp"

namespace aquafuse {

inline constexpr std::size_t kNumStages = 4;

struct BackboneConfig {
  std::size_t dim = 16;
  std::vector<std::size_t> depths{2, 2, 6, 2};
  // Empty means max(1, dim / 32) heads at stage 1, doubling per stage.
  std::vector<std::size_t> heads;
  std::size_t window = 7;
  std::size_t patch = 4;
  std::size_t mlp_ratio = 4;
  std::uint64_t seed = 0;
  // Enhanced stream reuses every raw-stream parameter.
  bool shared_weights = false;

  std::size_t stage_heads(std::size_t stage) const;
  std::size_t stage_dim(std::size_t stage) const { return dim << stage; }
  /// Side lengths must be multiples of this (patch * window * 2^3).
  std::size_t required_multiple() const { return patch * window * 8; }
  /// Throws ConfigError.
  void validate() const;
};

/// The four fused maps, finest first: [H/4, W/4, C] ... [H/32, W/32, 8C] for patch 4.
struct StagePyramid {
  std::array<FusedFeature, kNumStages> stages;
};

/// Two-stream hierarchy of four CFI stages joined by patch merging. Odd blocks
/// use windows shifted by M/2. Each stage emits a gated fusion as a side
/// output; both streams continue into the next stage.
class Backbone {
 public:
  explicit Backbone(const BackboneConfig& cfg);

  Backbone(Backbone&&) noexcept = default;
  Backbone& operator=(Backbone&&) noexcept = default;

  StagePyramid forward(const RgbImage& raw, const RgbImage& enhanced);
  /// Accumulates dL/dtheta for L = sum_s <grads[s], F^s> into every Param.
  void backward(const std::array<Tensor, kNumStages>& grads);

  /// Throws ShapeError naming the required multiple if the pair cannot be processed.
  void check_input(const RgbImage& raw, const RgbImage& enhanced) const;

  ParamStore& params() { return *store_; }
  const ParamStore& params() const { return *store_; }
  const BackboneConfig& config() const { return cfg_; }
  std::size_t block_count() const;
  std::size_t fusion_count() const { return fusions_.size(); }
  CfiBlock& block(std::size_t stage, std::size_t index) { return stages_[stage][index]; }

  /// Last forward's stream states at each stage output (before fusion).
  const std::array<DomainFeaturePair, kNumStages>& stage_streams() const { return streams_; }

 private:
  BackboneConfig cfg_;
  std::unique_ptr<ParamStore> store_;
  std::unique_ptr<PatchEmbedding> embed_;
  std::vector<PatchMerging> merges_;
  std::array<std::vector<CfiBlock>, kNumStages> stages_;
  std::vector<GatedFusion> fusions_;
  std::array<DomainFeaturePair, kNumStages> streams_;
};

Backbone build_backbone(const BackboneConfig& cfg);

}  // namespace aquafuse
