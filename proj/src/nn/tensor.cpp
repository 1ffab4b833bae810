#include "fscd/nn/tensor.hpp"

#include <cmath>
#include <sstream>

#include "fscd/errors.hpp"

namespace fscd::nn {

long numel_of(const std::vector<long>& shape) {
  long n = 1;
  for (long d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<long>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<long> shape)
    : shape_(std::move(shape)),
      data_(static_cast<std::size_t>(numel_of(shape_)), 0.0) {}

Tensor::Tensor(std::vector<long> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel_of(shape_) != static_cast<long>(data_.size())) {
    throw DimensionError("Tensor: data size " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::zeros(std::vector<long> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<long> shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t({1});
  t.data_[0] = value;
  return t;
}

Tensor Tensor::randn(std::vector<long> shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& x : t.data_) x = dist(rng);
  return t;
}

Tensor Tensor::uniform(std::vector<long> shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& x : t.data_) x = dist(rng);
  return t;
}

long Tensor::rows() const {
  if (rank() != 2) throw DimensionError("Tensor::rows: rank-2 required, got " + shape_str(shape_));
  return shape_[0];
}

long Tensor::cols() const {
  if (rank() != 2) throw DimensionError("Tensor::cols: rank-2 required, got " + shape_str(shape_));
  return shape_[1];
}

MatMap Tensor::mat(long r, long c) {
  if (r * c != numel()) {
    throw DimensionError("Tensor::mat: cannot view " + shape_str(shape_) +
                         " as " + std::to_string(r) + "x" + std::to_string(c));
  }
  return MatMap(data_.data(), r, c);
}

ConstMatMap Tensor::mat(long r, long c) const {
  if (r * c != numel()) {
    throw DimensionError("Tensor::mat: cannot view " + shape_str(shape_) +
                         " as " + std::to_string(r) + "x" + std::to_string(c));
  }
  return ConstMatMap(data_.data(), r, c);
}

MatMap Tensor::mat2d() { return mat(rows(), cols()); }
ConstMatMap Tensor::mat2d() const { return mat(rows(), cols()); }

bool Tensor::all_finite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

Tensor Tensor::reshaped(std::vector<long> new_shape) const {
  if (numel_of(new_shape) != numel()) {
    throw DimensionError("Tensor::reshaped: numel mismatch " +
                         shape_str(shape_) + " -> " + shape_str(new_shape));
  }
  return Tensor(std::move(new_shape), data_);
}

}  // namespace fscd::nn
