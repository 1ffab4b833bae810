#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <random>
#include <vector>

namespace fscd::nn {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

using Rng = std::mt19937_64;

/// Dense row-major tensor of doubles. Rank 1 and 2 cover most of the library;
/// rank 3 is used for feature maps laid out [H, W, C] and rank 4 for conv
/// kernels [KH, KW, Cin, Cout].
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<long> shape);
  Tensor(std::vector<long> shape, std::vector<double> data);

  static Tensor zeros(std::vector<long> shape);
  static Tensor full(std::vector<long> shape, double value);
  static Tensor scalar(double value);
  // i.i.d. N(0, stddev^2)
  static Tensor randn(std::vector<long> shape, Rng& rng, double stddev = 1.0);
  // i.i.d. U[lo, hi)
  static Tensor uniform(std::vector<long> shape, Rng& rng, double lo,
                        double hi);

  const std::vector<long>& shape() const { return shape_; }
  long rank() const { return static_cast<long>(shape_.size()); }
  long numel() const { return static_cast<long>(data_.size()); }
  long dim(long i) const { return shape_[static_cast<std::size_t>(i)]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](long i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](long i) const { return data_[static_cast<std::size_t>(i)]; }

  // Rank-2 accessors.
  double& at(long r, long c) { return data_[static_cast<std::size_t>(r * cols() + c)]; }
  double at(long r, long c) const { return data_[static_cast<std::size_t>(r * cols() + c)]; }
  long rows() const;
  long cols() const;

  // Maps the tensor as a rows x cols row-major matrix; numel must match.
  MatMap mat(long rows, long cols);
  ConstMatMap mat(long rows, long cols) const;
  MatMap mat2d();             // rank-2 view using the tensor's own shape
  ConstMatMap mat2d() const;

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  Tensor reshaped(std::vector<long> new_shape) const;

 private:
  std::vector<long> shape_;
  std::vector<double> data_;
};

long numel_of(const std::vector<long>& shape);
std::string shape_str(const std::vector<long>& shape);

}  // namespace fscd::nn
