#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace mkunet {

using Index = Eigen::Index;

/// Thrown for any shape contract violation (mismatched dims, bad broadcast,
/// indivisible groups, ...).
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Shape4 {
  Index n = 1;
  Index c = 1;
  Index h = 1;
  Index w = 1;

  [[nodiscard]] Index size() const { return n * c * h * w; }
  [[nodiscard]] Index plane() const { return h * w; }
  [[nodiscard]] bool valid() const { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }
  [[nodiscard]] std::string str() const;

  friend bool operator==(const Shape4&, const Shape4&) = default;
};

std::ostream& operator<<(std::ostream& os, const Shape4& s);

/// Dense NCHW rank-4 array, row-major (w fastest).
template <typename Scalar>
class Tensor4 {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatrixMap = Eigen::Map<Matrix>;
  using ConstMatrixMap = Eigen::Map<const Matrix>;

  Tensor4() : Tensor4(Shape4{}) {}
  explicit Tensor4(const Shape4& shape, Scalar fill = Scalar(0));

  static Tensor4 zeros(const Shape4& shape) { return Tensor4(shape); }
  static Tensor4 constant(const Shape4& shape, Scalar value) { return Tensor4(shape, value); }
  static Tensor4 from_values(const Shape4& shape, std::span<const Scalar> values);
  static Tensor4 uniform(const Shape4& shape, Scalar lo, Scalar hi, std::uint64_t seed);

  [[nodiscard]] const Shape4& shape() const { return shape_; }
  [[nodiscard]] Index size() const { return shape_.size(); }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> values() const {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }

  [[nodiscard]] Index offset(Index n, Index c, Index h, Index w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  Scalar& operator()(Index n, Index c, Index h, Index w) { return data_[offset(n, c, h, w)]; }
  Scalar operator()(Index n, Index c, Index h, Index w) const {
    return data_[offset(n, c, h, w)];
  }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// Pointer to plane (n, c).
  Scalar* plane(Index n, Index c) { return data_.data() + offset(n, c, 0, 0); }
  const Scalar* plane(Index n, Index c) const { return data_.data() + offset(n, c, 0, 0); }

  /// Sample n viewed as a (c, h*w) matrix.
  MatrixMap sample_matrix(Index n) { return {plane(n, 0), shape_.c, shape_.plane()}; }
  ConstMatrixMap sample_matrix(Index n) const { return {plane(n, 0), shape_.c, shape_.plane()}; }

  void fill(Scalar v) { data_.setConstant(v); }
  void set_zero() { data_.setZero(); }

  template <typename Other>
  [[nodiscard]] Tensor4<Other> cast() const {
    Tensor4<Other> out(shape_);
    out.array() = data_.template cast<Other>();
    return out;
  }

 private:
  Shape4 shape_;
  Storage data_;
};

extern template class Tensor4<float>;
extern template class Tensor4<double>;

}  // namespace mkunet
