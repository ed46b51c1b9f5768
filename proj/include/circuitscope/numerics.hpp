#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace circuitscope {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major float32 array. The buffer length always equals the product
// of the shape; every dimension is >= 1.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor from_rows(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor vector(std::initializer_list<float> values);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Last dimension, and the product of all leading dimensions.
  std::size_t cols() const;
  std::size_t rows() const;

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  float* ptr() { return data_.data(); }
  const float* ptr() const { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

  // Same buffer, new shape; numel must be preserved.
  void reshape(Shape shape);
  Tensor reshaped(Shape shape) const;

  void fill(float value);
  bool all_finite() const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Throws NumericError naming `what` when the tensor holds NaN or Inf.
void require_finite(const Tensor& t, const char* what);

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps);

// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
Tensor gelu(const Tensor& x);

// Per-row -log softmax(logits)[target]; logits is [T, V].
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

// Raw-buffer kernels shared by the transformer forward pass and the trainer's
// backward pass. All matrices are row-major; no finiteness checks.
namespace kernels {

// C (m x n) = op(A) * op(B) (+ C when accumulate). op transposes when the flag
// is set; lda/ldb/ldc are row strides of the stored matrices.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const float* a, std::size_t lda, const float* b, std::size_t ldb, float* c,
          std::size_t ldc, bool accumulate);

// out[r, :] = (x[r, :] - mean) * rstd * gain + bias; mean/rstd optional outputs.
void layer_norm_rows(const float* x, std::size_t rows, std::size_t d, const float* gain,
                     const float* bias, float eps, float* out, float* mean, float* rstd);

void gelu(const float* x, std::size_t n, float* out);
// d gelu / dx evaluated at x, multiplied into grad in place.
void gelu_backward(const float* x, std::size_t n, float* grad);

void add_bias_rows(float* x, std::size_t rows, std::size_t d, const float* bias);
// out[j] += sum_r x[r, j]
void accumulate_column_sums(const float* x, std::size_t rows, std::size_t d, float* out);

// Stable log-softmax cross entropy of one row.
double row_cross_entropy(const float* logits, std::size_t v, int target);

}  // namespace kernels

}  // namespace circuitscope
