#include "mkunet/tensor.hpp"

#include <random>
#include <sstream>

namespace mkunet {

std::string Shape4::str() const {
  std::ostringstream os;
  os << *this;
  return os.str();
}

std::ostream& operator<<(std::ostream& os, const Shape4& s) {
  return os << '(' << s.n << ',' << s.c << ',' << s.h << ',' << s.w << ')';
}

template <typename Scalar>
Tensor4<Scalar>::Tensor4(const Shape4& shape, Scalar fill) : shape_(shape) {
  if (!shape.valid()) {
    throw ShapeError("tensor dimensions must be >= 1, got " + shape.str());
  }
  data_ = Storage::Constant(shape.size(), fill);
}

template <typename Scalar>
Tensor4<Scalar> Tensor4<Scalar>::from_values(const Shape4& shape, std::span<const Scalar> values) {
  Tensor4 t(shape);
  if (static_cast<Index>(values.size()) != shape.size()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape.str());
  }
  std::copy(values.begin(), values.end(), t.data());
  return t;
}

template <typename Scalar>
Tensor4<Scalar> Tensor4<Scalar>::uniform(const Shape4& shape, Scalar lo, Scalar hi,
                                         std::uint64_t seed) {
  Tensor4 t(shape);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template class Tensor4<float>;
template class Tensor4<double>;

}  // namespace mkunet
