#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kw {

using Real = double;
using Shape = std::vector<std::size_t>;

std::size_t shape_volume(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense row-major array. Activations are laid out (batch, channel, height, width).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = 0);
  Tensor(Shape shape, std::vector<Real> values);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  Real* ptr() { return data_.data(); }
  const Real* ptr() const { return data_.data(); }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  Real& at(std::size_t i, std::size_t j);
  Real at(std::size_t i, std::size_t j) const;
  Real& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l);
  Real at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const;

  // Same data, new extents; volume must match.
  Tensor reshaped(Shape shape) const;

  void fill(Real value);
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<Real> data_;
};

// Elementwise helpers used by tests, optimizers and mixtures.
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(Real s, const Tensor& a);
void axpy(Real alpha, const Tensor& x, Tensor& y);  // y += alpha * x

Real sum(const Tensor& t);
Real max_abs(const Tensor& t);
Real max_abs_diff(const Tensor& a, const Tensor& b);
// max |a-b| / max(max|b|, tiny); comparisons against an oracle b.
Real max_rel_diff(const Tensor& a, const Tensor& b);

}  // namespace kw
