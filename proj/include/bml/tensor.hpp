#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bml {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_product(const Shape& shape);

// Dense row-major array of doubles. Value type: copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor filled(Shape shape, double value);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const;

  // Rank-2 accessors; rows()/cols() throw on other ranks.
  std::size_t rows() const;
  std::size_t cols() const;

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<double> row(std::size_t r);
  std::span<const double> row(std::size_t r) const;

  Tensor reshaped(Shape shape) const;
  void fill(double value);
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// Exact equality of shape and the raw bytes of every element.
bool bitwise_equal(const Tensor& a, const Tensor& b);

// FNV-1a over the raw little-endian bytes of the payload.
std::uint64_t hash_bytes(std::span<const double> values, std::uint64_t seed = 0xcbf29ce484222325ULL);

Tensor matmul(const Tensor& a, const Tensor& b);
// a · bᵀ without materialising the transpose.
Tensor matmul_transposed(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor reverse_rows(const Tensor& a);

enum class Activation { relu, tanh };

std::string_view to_string(Activation kind);
Activation parse_activation(std::string_view name);

double activate(double x, Activation kind);
// σ′ evaluated at the pre-activation; relu′(0) is taken as 0.
double activate_grad(double pre, Activation kind);
Tensor activation(const Tensor& x, Activation kind);
Tensor activation_grad(const Tensor& pre, Activation kind);

Tensor softmax_rows(const Tensor& logits);

struct CrossEntropyResult {
  double loss = 0.0;
  Tensor dlogits;
};

// Mean over rows of -log softmax(row)[label]; dlogits = (softmax - onehot) / T.
CrossEntropyResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

}  // namespace bml
