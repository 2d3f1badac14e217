#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

// Dense double-precision tensors with explicit forward/backward functions.
// There is no tape: composite layers keep whatever they need from forward and
// call the matching *_backward functions in reverse order.
namespace aquafuse {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Row-major multi-index access; the number of indices must equal rank().
  double& at(std::initializer_list<std::size_t> idx);
  double at(std::initializer_list<std::size_t> idx) const;

  /// Same data, new shape of equal element count.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(double v);

  bool operator==(const Tensor&) const = default;

 private:
  std::size_t offset(std::initializer_list<std::size_t> idx) const;

  Shape shape_;
  std::vector<double> data_;
};

enum class ParamInit { kTruncatedNormal, kOnes, kZeros };

/// Learnable tensor with its gradient buffer. Backward functions accumulate
/// into `grad`; call zero_grad() between independent passes.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  ParamInit init = ParamInit::kZeros;

  void zero_grad() { grad.fill(0.0); }
};

/// Owns parameters with stable addresses, in registration order.
class ParamStore {
 public:
  Param& add(std::string name, Shape shape, ParamInit init);

  /// Truncated normal (std 0.02, cut at two std) for projections, ones/zeros
  /// otherwise. Draws happen in registration order from a seeded mt19937_64.
  void initialize(std::uint64_t seed);
  void zero_grad();

  std::size_t scalar_count() const;
  std::size_t size() const { return params_.size(); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  Param& operator[](std::size_t i) { return params_[i]; }
  const Param& operator[](std::size_t i) const { return params_[i]; }

 private:
  std::deque<Param> params_;
};

// ---- elementwise helpers -------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
void add_inplace(Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, double s);
double dot(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

// ---- matmul --------------------------------------------------------------

/// [..., m, k] x [..., k, n] -> [..., m, n]. Leading extents must be equal;
/// there is no broadcasting.
Tensor matmul(const Tensor& a, const Tensor& b);

struct MatmulGrads {
  Tensor da;
  Tensor db;
};
MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dout);

/// Swaps the last two axes.
Tensor transpose_last2(const Tensor& x);

// ---- softmax -------------------------------------------------------------

Tensor softmax_lastdim(const Tensor& x);
/// Gradient w.r.t. the logits, given the softmax output y.
Tensor softmax_lastdim_backward(const Tensor& y, const Tensor& dy);

// ---- layer norm ----------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Tensor xhat;
  std::vector<double> rstd;
};

/// Normalizes over the last axis, then applies scale/shift of shape [C].
Tensor layer_norm(const Tensor& x, const Param& scale, const Param& shift, LayerNormCache* cache = nullptr);
/// Returns dL/dx; accumulates into scale.grad and shift.grad.
Tensor layer_norm_backward(const Tensor& dy, const LayerNormCache& cache, Param& scale, Param& shift);

// ---- activations ---------------------------------------------------------

/// Exact x * Phi(x).
Tensor gelu(const Tensor& x);
Tensor gelu_backward(const Tensor& x, const Tensor& dy);

Tensor sigmoid(const Tensor& x);
/// Gradient w.r.t. the input, given the sigmoid output y.
Tensor sigmoid_backward(const Tensor& y, const Tensor& dy);

// ---- linear --------------------------------------------------------------

/// x [T, in] * w [in, out] (+ bias [out]).
Tensor linear(const Tensor& x, const Param& w, const Param* bias = nullptr);
/// Returns dL/dx; accumulates into w.grad (and bias->grad).
Tensor linear_backward(const Tensor& x, const Tensor& dy, Param& w, Param* bias = nullptr);

}  // namespace aquafuse
