#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mkunet/autograd.hpp"

namespace mkunet {

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradcheckReport {
  double max_rel_err = 0;
  bool pass = true;
  Index checked = 0;
  Index skipped = 0;  // coordinates whose perturbation crossed a kink
  std::string worst;  // "<leaf>[<index>]" of the largest error
};

/// One leaf to probe. Empty `coords` means every element.
struct GradProbe {
  std::string name;
  Var<double> leaf;
  std::vector<Index> coords;
};

/// Central differences (f(x+eps) - f(x-eps)) / 2eps against backward(f()).
/// rel = |a - n| / max(|a|, |n|, 1e-8). A coordinate is skipped when moving it
/// by eps or 10 eps changes any recorded kink pattern.
GradcheckReport finite_diff_check(const std::function<Var<double>()>& f,
                                  std::vector<GradProbe>& probes, double eps, double tol);

/// Convenience form: probes every coordinate of `x`.
GradcheckReport finite_diff_check(const std::function<Var<double>(const Var<double>&)>& f,
                                  const Tensor4<double>& x, double eps, double tol);

/// Blocks covered by gradcheck_block, in reporting order.
const std::vector<std::string>& gradcheck_block_names();

/// Random-parameter check of one block (or "net": T preset at 32x32) on
/// f = mean(out * R) with fixed random R, in train mode.
GradcheckReport gradcheck_block(const std::string& block, double eps, double tol,
                                std::uint64_t seed);

}  // namespace mkunet
