#include "circuitscope/numerics.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "circuitscope/error.hpp"

namespace circuitscope {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_to_string(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  validate_shape(shape_);
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (data_.size() != shape_numel(shape_)) {
    throw DimensionError("buffer of " + std::to_string(data_.size()) + " values does not fit shape " +
                         shape_to_string(shape_));
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<float> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged rows in Tensor::from_rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<float> values) {
  return Tensor({values.size()}, std::vector<float>(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_to_string(shape_));
  }
  return shape_[axis];
}

std::size_t Tensor::cols() const { return shape_.empty() ? 0 : shape_.back(); }

std::size_t Tensor::rows() const {
  if (shape_.empty()) return 0;
  return data_.size() / shape_.back();
}

void Tensor::reshape(Shape shape) {
  validate_shape(shape);
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  }
  shape_ = std::move(shape);
}

Tensor Tensor::reshaped(Shape shape) const {
  Tensor out = *this;
  out.reshape(std::move(shape));
  return out;
}

void Tensor::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string(what) + " produced a non-finite value");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  kernels::gemm(false, false, m, n, k, a.ptr(), k, b.ptr(), n, c.ptr(), n, false);
  require_finite(c, "matmul");
  return c;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  const std::size_t d = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm parameter shape mismatch: input " + shape_to_string(x.shape()) + ", gain " +
                         shape_to_string(gain.shape()) + ", bias " + shape_to_string(bias.shape()));
  }
  if (!(eps > 0.0f)) throw InputError("layer_norm eps must be positive");
  Tensor out(x.shape());
  kernels::layer_norm_rows(x.ptr(), x.rows(), d, gain.ptr(), bias.ptr(), eps, out.ptr(), nullptr, nullptr);
  require_finite(out, "layer_norm");
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  kernels::gelu(x.ptr(), x.numel(), out.ptr());
  require_finite(out, "gelu");
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size()) {
    throw DimensionError("cross_entropy expects [T, V] logits with T targets; got " +
                         shape_to_string(logits.shape()) + " and " + std::to_string(targets.size()) + " targets");
  }
  const std::size_t v = logits.dim(1);
  Tensor out({targets.size()});
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= v) {
      throw IndexError("target " + std::to_string(targets[t]) + " at position " + std::to_string(t) +
                       " outside vocabulary of " + std::to_string(v));
    }
    out[t] = static_cast<float>(kernels::row_cross_entropy(logits.ptr() + t * v, v, targets[t]));
  }
  require_finite(out, "cross_entropy");
  return out;
}

namespace kernels {

namespace {

using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor, Eigen::Unaligned, Eigen::OuterStride<>>;
using MutMap = Eigen::Map<RowMajor, Eigen::Unaligned, Eigen::OuterStride<>>;

constexpr float kGeluScale = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluCubic = 0.044715f;

}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const float* a,
          std::size_t lda, const float* b, std::size_t ldb, float* c, std::size_t ldc, bool accumulate) {
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  MutMap cm(c, ei(m), ei(n), Eigen::OuterStride<>(ei(ldc)));
  // Stored shapes: A is m x k (or k x m when transposed), B is k x n (or n x k).
  ConstMap am(a, trans_a ? ei(k) : ei(m), trans_a ? ei(m) : ei(k), Eigen::OuterStride<>(ei(lda)));
  ConstMap bm(b, trans_b ? ei(n) : ei(k), trans_b ? ei(k) : ei(n), Eigen::OuterStride<>(ei(ldb)));
  if (!accumulate) cm.setZero();
  if (!trans_a && !trans_b) {
    cm.noalias() += am * bm;
  } else if (trans_a && !trans_b) {
    cm.noalias() += am.transpose() * bm;
  } else if (!trans_a && trans_b) {
    cm.noalias() += am * bm.transpose();
  } else {
    cm.noalias() += am.transpose() * bm.transpose();
  }
}

void layer_norm_rows(const float* x, std::size_t rows, std::size_t d, const float* gain, const float* bias,
                     float eps, float* out, float* mean, float* rstd) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x + r * d;
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) sum += xr[j];
    const double mu = sum / static_cast<double>(d);
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xr[j] - mu;
      sq += c * c;
    }
    const double inv = 1.0 / std::sqrt(sq / static_cast<double>(d) + static_cast<double>(eps));
    const float muf = static_cast<float>(mu);
    const float invf = static_cast<float>(inv);
    float* o = out + r * d;
    for (std::size_t j = 0; j < d; ++j) o[j] = (xr[j] - muf) * invf * gain[j] + bias[j];
    if (mean) mean[r] = muf;
    if (rstd) rstd[r] = invf;
  }
}

void gelu(const float* x, std::size_t n, float* out) {
  Eigen::Map<const Eigen::ArrayXf> xa(x, static_cast<Eigen::Index>(n));
  Eigen::Map<Eigen::ArrayXf> oa(out, static_cast<Eigen::Index>(n));
  oa = 0.5f * xa * (1.0f + (kGeluScale * (xa + kGeluCubic * xa * xa * xa)).tanh());
}

void gelu_backward(const float* x, std::size_t n, float* grad) {
  Eigen::Map<const Eigen::ArrayXf> xa(x, static_cast<Eigen::Index>(n));
  Eigen::Map<Eigen::ArrayXf> ga(grad, static_cast<Eigen::Index>(n));
  const Eigen::ArrayXf th = (kGeluScale * (xa + kGeluCubic * xa * xa * xa)).tanh();
  const Eigen::ArrayXf sech2 = 1.0f - th * th;
  ga *= 0.5f * (1.0f + th) + 0.5f * xa * sech2 * kGeluScale * (1.0f + 3.0f * kGeluCubic * xa * xa);
}

void add_bias_rows(float* x, std::size_t rows, std::size_t d, const float* bias) {
  for (std::size_t r = 0; r < rows; ++r) {
    float* xr = x + r * d;
    for (std::size_t j = 0; j < d; ++j) xr[j] += bias[j];
  }
}

void accumulate_column_sums(const float* x, std::size_t rows, std::size_t d, float* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x + r * d;
    for (std::size_t j = 0; j < d; ++j) out[j] += xr[j];
  }
}

double row_cross_entropy(const float* logits, std::size_t v, int target) {
  const float mx = *std::max_element(logits, logits + v);
  double sum = 0.0;
  for (std::size_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(logits[j]) - mx);
  return std::log(sum) - (static_cast<double>(logits[target]) - mx);
}

}  // namespace kernels

}  // namespace circuitscope
