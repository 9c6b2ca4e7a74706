#include "kw/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace kw {

std::size_t shape_volume(const Shape& shape) {
  std::size_t v = 1;
  for (auto d : shape) v *= d;
  return v;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Real fill) : shape_(std::move(shape)) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
  data_.assign(shape_volume(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<Real> values) : shape_(std::move(shape)), data_(std::move(values)) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
  if (shape_volume(shape_) != data_.size())
    throw ShapeError("shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) + " values");
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  return shape_[axis];
}

Real& Tensor::at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
Real Tensor::at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

Real& Tensor::at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
  return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
}
Real Tensor::at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
  return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_volume(shape) != data_.size())
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(Real value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
}

namespace {
void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace

Tensor operator+(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor operator*(Real s, const Tensor& a) {
  Tensor out = a;
  for (auto& v : out.data()) v *= s;
  return out;
}

void axpy(Real alpha, const Tensor& x, Tensor& y) {
  require_same_shape(x, y, "axpy");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

Real sum(const Tensor& t) {
  Real s = 0;
  for (auto v : t.data()) s += v;
  return s;
}

Real max_abs(const Tensor& t) {
  Real m = 0;
  for (auto v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

Real max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  Real m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Real max_rel_diff(const Tensor& a, const Tensor& b) {
  Real scale = std::max(max_abs(b), Real(1e-300));
  return max_abs_diff(a, b) / scale;
}

}  // namespace kw
