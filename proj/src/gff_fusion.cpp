#include "aquafuse/gff_fusion.hpp"

#include "aquafuse/errors.hpp"

namespace aquafuse {

GatedFusion::GatedFusion(ParamStore& store, const std::string& name, std::size_t dim, std::size_t stage)
    : stage_(stage) {
  params_.w_r = &store.add(name + ".gate_r", {dim, dim}, ParamInit::kZeros);
  params_.w_e = &store.add(name + ".gate_e", {dim, dim}, ParamInit::kZeros);
}

GatedFusion::GatedFusion(GffParams params, std::size_t stage) : params_(params), stage_(stage) {}

FusedFeature GatedFusion::forward(const DomainFeaturePair& pair) {
  require_grid_pair(pair, "gff_fuse");
  const std::size_t c = pair.z_r.extent(2);
  if (params_.w_r->value.shape() != Shape{c, c} || params_.w_e->value.shape() != Shape{c, c})
    throw ShapeError("gff_fuse: gate weights must be " + shape_string({c, c}) + " for stream " +
                     shape_string(pair.z_r.shape()));
  grid_ = pair.z_r.shape();
  const Shape flat{grid_[0] * grid_[1], c};
  z_r_ = pair.z_r.reshaped(flat);
  z_e_ = pair.z_e.reshaped(flat);
  gate_r_ = sigmoid(linear(z_r_, *params_.w_r));
  gate_e_ = sigmoid(linear(z_e_, *params_.w_e));
  Tensor f = add(hadamard(gate_r_, z_r_), hadamard(gate_e_, z_e_));
  return {std::move(f).reshaped(grid_), stage_};
}

DomainFeaturePair GatedFusion::backward(const Tensor& dfused) {
  if (dfused.shape() != grid_)
    throw ShapeError("gff_fuse backward: gradient " + shape_string(dfused.shape()) + " does not match " +
                     shape_string(grid_));
  const Tensor d = dfused.reshaped(z_r_.shape());
  auto branch = [&](const Tensor& z, const Tensor& gate, Param& w) {
    Tensor dz = hadamard(d, gate);
    const Tensor dpre = sigmoid_backward(gate, hadamard(d, z));
    add_inplace(dz, linear_backward(z, dpre, w));
    return std::move(dz).reshaped(grid_);
  };
  return {branch(z_r_, gate_r_, *params_.w_r), branch(z_e_, gate_e_, *params_.w_e)};
}

FusedFeature gff_fuse(const DomainFeaturePair& pair, const GffParams& params, std::size_t stage) {
  GatedFusion g(params, stage);
  return g.forward(pair);
}

}  // namespace aquafuse
