#pragma once

#include <cstddef>
#include <string>

#include "aquafuse/cfi_attention.hpp"
#include "aquafuse/tensor.hpp"

namespace aquafuse {

/// Per-stage gate weights: 1x1 convolutions, i.e. per-token C x C linear maps
/// without bias.
struct GffParams {
  Param* w_r = nullptr;
  Param* w_e = nullptr;
};

struct FusedFeature {
  Tensor f;  // [H_s, W_s, C_s]
  std::size_t stage = 0;
};

/// Gated fusion of the two streams of one stage:
///   G_r = sigmoid(z_r W_r),  G_e = sigmoid(z_e W_e),  F = G_r * z_r + G_e * z_e.
class GatedFusion {
 public:
  GatedFusion(ParamStore& store, const std::string& name, std::size_t dim, std::size_t stage = 1);
  /// Uses externally owned weights.
  GatedFusion(GffParams params, std::size_t stage = 1);

  FusedFeature forward(const DomainFeaturePair& pair);
  /// Returns stream gradients; accumulates into the gate weights.
  DomainFeaturePair backward(const Tensor& dfused);

  GffParams& params() { return params_; }
  const Tensor& gate_r() const { return gate_r_; }  // [H*W, C]
  const Tensor& gate_e() const { return gate_e_; }
  std::size_t stage() const { return stage_; }

 private:
  GffParams params_;
  std::size_t stage_;
  Shape grid_;
  Tensor z_r_, z_e_, gate_r_, gate_e_;  // flattened [H*W, C]
};

/// Stateless forward of the fusion for callers that do not need gradients.
FusedFeature gff_fuse(const DomainFeaturePair& pair, const GffParams& params, std::size_t stage = 1);

}  // namespace aquafuse
