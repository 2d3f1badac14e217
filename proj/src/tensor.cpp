#include "aquafuse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>

#include "aquafuse/errors.hpp"
#include "aquafuse/parallel.hpp"

namespace aquafuse {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_size(shape_))
    throw ShapeError("tensor data has " + std::to_string(data_.size()) + " values for shape " + shape_string(shape_));
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != shape_.size()) throw ShapeError("index rank does not match tensor " + shape_string(shape_));
  std::size_t off = 0;
  std::size_t axis = 0;
  for (std::size_t i : idx) {
    if (i >= shape_[axis]) throw ShapeError("index out of range for tensor " + shape_string(shape_));
    off = off * shape_[axis++] + i;
  }
  return off;
}

double& Tensor::at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
double Tensor::at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

Tensor Tensor::reshaped(Shape shape) const& { return Tensor(*this).reshaped(std::move(shape)); }

Tensor Tensor::reshaped(Shape shape) && {
  if (shape_size(shape) != data_.size())
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  shape_ = std::move(shape);
  return std::move(*this);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Param& ParamStore::add(std::string name, Shape shape, ParamInit init) {
  Param& p = params_.emplace_back();
  p.name = std::move(name);
  p.value = Tensor(shape);
  p.grad = Tensor(std::move(shape));
  p.init = init;
  return p;
}

void ParamStore::initialize(std::uint64_t seed) {
  constexpr double kStd = 0.02;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, kStd);
  for (Param& p : params_) {
    switch (p.init) {
      case ParamInit::kOnes:
        p.value.fill(1.0);
        break;
      case ParamInit::kZeros:
        p.value.fill(0.0);
        break;
      case ParamInit::kTruncatedNormal:
        for (double& v : p.value.data()) {
          double draw;
          do draw = normal(rng);
          while (std::abs(draw) > 2.0 * kStd);
          v = draw;
        }
        break;
    }
    p.zero_grad();
  }
}

void ParamStore::zero_grad() {
  for (Param& p : params_) p.zero_grad();
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const Param& p : params_) n += p.value.size();
  return n;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
}

template <typename Fn>
Tensor map(const Tensor& x, Fn&& fn) {
  Tensor y(x.shape());
  const double* in = x.ptr();
  double* out = y.ptr();
  parallel_for(
      x.size(),
      [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) out[i] = fn(in[i]);
      },
      4096);
  return y;
}

template <typename Fn>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, Fn&& fn) {
  require_same_shape(a, b, op);
  Tensor y(a.shape());
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* out = y.ptr();
  parallel_for(
      a.size(),
      [&](std::size_t s, std::size_t e) {
        for (std::size_t i = s; i < e; ++i) out[i] = fn(pa[i], pb[i]);
      },
      4096);
  return y;
}

struct MatmulDims {
  std::size_t batch, m, k, n;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank())
    throw ShapeError("matmul: incompatible ranks " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  const std::size_t r = a.rank();
  if (!std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
    throw ShapeError("matmul: batch extents differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  if (a.extent(r - 1) != b.extent(r - 2))
    throw ShapeError("matmul: inner extents differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  return {a.size() / (a.extent(r - 2) * a.extent(r - 1)), a.extent(r - 2), a.extent(r - 1), b.extent(r - 1)};
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return zip(a, b, "add", [](double x, double y) { return x + y; });
}

void add_inplace(Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add_inplace");
  double* pa = a.ptr();
  const double* pb = b.ptr();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += pb[i];
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  return zip(a, b, "hadamard", [](double x, double y) { return x * y; });
}

Tensor scaled(const Tensor& a, double s) {
  return map(a, [s](double x) { return x * s; });
}

double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto [batch, m, k, n] = matmul_dims(a, b);
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor out(out_shape);
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* po = out.ptr();
  parallel_for(
      batch * m,
      [&, m = m, k = k, n = n](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
          const std::size_t bi = r / m;
          const double* arow = pa + r * k;
          const double* bmat = pb + bi * k * n;
          double* orow = po + r * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = bmat + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
          }
        }
      },
      16);
  return out;
}

MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dout) {
  const auto [batch, m, k, n] = matmul_dims(a, b);
  Shape expect = a.shape();
  expect.back() = n;
  if (dout.shape() != expect)
    throw ShapeError("matmul_backward: gradient " + shape_string(dout.shape()) + " does not match output " +
                     shape_string(expect));
  MatmulGrads g{Tensor(a.shape()), Tensor(b.shape())};
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  const double* pd = dout.ptr();
  double* pda = g.da.ptr();
  double* pdb = g.db.ptr();
  // da[i, p] = sum_j dout[i, j] * b[p, j]
  parallel_for(
      batch * m,
      [&, m = m, k = k, n = n](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
          const std::size_t bi = r / m;
          const double* drow = pd + r * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = pb + (bi * k + p) * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += drow[j] * brow[j];
            pda[r * k + p] = acc;
          }
        }
      },
      16);
  // db[p, :] = sum_i a[i, p] * dout[i, :]
  parallel_for(
      batch * k,
      [&, m = m, k = k, n = n](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
          const std::size_t bi = r / k;
          const std::size_t p = r % k;
          double* dbrow = pdb + r * n;
          for (std::size_t i = 0; i < m; ++i) {
            const double av = pa[(bi * m + i) * k + p];
            const double* drow = pd + (bi * m + i) * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * drow[j];
          }
        }
      },
      16);
  return g;
}

Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2: rank must be >= 2, got " + shape_string(x.shape()));
  const std::size_t r = x.rank();
  const std::size_t m = x.extent(r - 2), n = x.extent(r - 1);
  Shape s = x.shape();
  std::swap(s[r - 2], s[r - 1]);
  Tensor y(s);
  const std::size_t batch = x.size() / (m * n);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) y[b * m * n + j * m + i] = x[b * m * n + i * n + j];
  return y;
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() == 0) throw ShapeError("softmax_lastdim: empty last axis");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor y(x.shape());
  parallel_for(
      rows,
      [&](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
          const double* in = x.ptr() + r * n;
          double* out = y.ptr() + r * n;
          const double mx = *std::max_element(in, in + n);
          double total = 0.0;
          for (std::size_t j = 0; j < n; ++j) total += (out[j] = std::exp(in[j] - mx));
          for (std::size_t j = 0; j < n; ++j) out[j] /= total;
        }
      },
      64);
  return y;
}

Tensor softmax_lastdim_backward(const Tensor& y, const Tensor& dy) {
  require_same_shape(y, dy, "softmax_lastdim_backward");
  const std::size_t n = y.shape().back();
  const std::size_t rows = y.size() / n;
  Tensor dx(y.shape());
  parallel_for(
      rows,
      [&](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
          const double* yr = y.ptr() + r * n;
          const double* gr = dy.ptr() + r * n;
          double inner = 0.0;
          for (std::size_t j = 0; j < n; ++j) inner += yr[j] * gr[j];
          double* out = dx.ptr() + r * n;
          for (std::size_t j = 0; j < n; ++j) out[j] = yr[j] * (gr[j] - inner);
        }
      },
      64);
  return dx;
}

Tensor layer_norm(const Tensor& x, const Param& scale, const Param& shift, LayerNormCache* cache) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t c = x.shape().back();
  if (scale.value.shape() != Shape{c} || shift.value.shape() != Shape{c})
    throw ShapeError("layer_norm: affine parameters must have shape [" + std::to_string(c) + "]");
  const std::size_t rows = x.size() / c;
  Tensor y(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> rstd(rows);
  const double* g = scale.value.ptr();
  const double* b = shift.value.ptr();
  parallel_for(
      rows,
      [&](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
          const double* in = x.ptr() + r * c;
          double mean = 0.0;
          for (std::size_t j = 0; j < c; ++j) mean += in[j];
          mean /= static_cast<double>(c);
          double var = 0.0;
          for (std::size_t j = 0; j < c; ++j) var += (in[j] - mean) * (in[j] - mean);
          var /= static_cast<double>(c);
          const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
          rstd[r] = rs;
          double* xh = xhat.ptr() + r * c;
          double* out = y.ptr() + r * c;
          for (std::size_t j = 0; j < c; ++j) {
            xh[j] = (in[j] - mean) * rs;
            out[j] = xh[j] * g[j] + b[j];
          }
        }
      },
      64);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

Tensor layer_norm_backward(const Tensor& dy, const LayerNormCache& cache, Param& scale, Param& shift) {
  require_same_shape(dy, cache.xhat, "layer_norm_backward");
  const std::size_t c = dy.shape().back();
  const std::size_t rows = dy.size() / c;
  Tensor dx(dy.shape());
  const double* g = scale.value.ptr();
  parallel_for(
      rows,
      [&](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r) {
          const double* d = dy.ptr() + r * c;
          const double* xh = cache.xhat.ptr() + r * c;
          double mean_dxh = 0.0, mean_dxh_xh = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double dxh = d[j] * g[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
          }
          mean_dxh /= static_cast<double>(c);
          mean_dxh_xh /= static_cast<double>(c);
          double* out = dx.ptr() + r * c;
          for (std::size_t j = 0; j < c; ++j) out[j] = cache.rstd[r] * (d[j] * g[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
      },
      64);
  double* dg = scale.grad.ptr();
  double* db = shift.grad.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* d = dy.ptr() + r * c;
    const double* xh = cache.xhat.ptr() + r * c;
    for (std::size_t j = 0; j < c; ++j) {
      dg[j] += d[j] * xh[j];
      db[j] += d[j];
    }
  }
  return dx;
}

Tensor gelu(const Tensor& x) {
  return map(x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); });
}

Tensor gelu_backward(const Tensor& x, const Tensor& dy) {
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  return zip(x, dy, "gelu_backward", [](double v, double g) {
    const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
    return g * (cdf + v * pdf);
  });
}

Tensor sigmoid(const Tensor& x) {
  return map(x, [](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

Tensor sigmoid_backward(const Tensor& y, const Tensor& dy) {
  return zip(y, dy, "sigmoid_backward", [](double s, double g) { return g * s * (1.0 - s); });
}

Tensor linear(const Tensor& x, const Param& w, const Param* bias) {
  if (x.rank() != 2 || w.value.rank() != 2 || x.extent(1) != w.value.extent(0))
    throw ShapeError("linear: input " + shape_string(x.shape()) + " incompatible with weight " +
                     shape_string(w.value.shape()));
  Tensor y = matmul(x, w.value);
  if (bias) {
    const std::size_t n = w.value.extent(1);
    if (bias->value.shape() != Shape{n}) throw ShapeError("linear: bias must have shape [" + std::to_string(n) + "]");
    for (std::size_t t = 0; t < y.extent(0); ++t)
      for (std::size_t j = 0; j < n; ++j) y[t * n + j] += bias->value[j];
  }
  return y;
}

Tensor linear_backward(const Tensor& x, const Tensor& dy, Param& w, Param* bias) {
  MatmulGrads g = matmul_backward(x, w.value, dy);
  add_inplace(w.grad, g.db);
  if (bias) {
    const std::size_t n = dy.extent(1);
    double* db = bias->grad.ptr();
    for (std::size_t t = 0; t < dy.extent(0); ++t)
      for (std::size_t j = 0; j < n; ++j) db[j] += dy[t * n + j];
  }
  return std::move(g.da);
}

}  // namespace aquafuse
