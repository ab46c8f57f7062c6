#pragma once

#include <random>
#include <string>
#include <vector>

#include "mkunet/ops.hpp"

namespace mkunet {

/// Ordered depthwise kernel sizes of an MKDC block. Duplicates are allowed.
class KernelSet {
 public:
  KernelSet() = default;
  KernelSet(std::initializer_list<int> sizes) : KernelSet(std::vector<int>(sizes)) {}
  explicit KernelSet(std::vector<int> sizes);

  [[nodiscard]] const std::vector<int>& sizes() const { return sizes_; }
  [[nodiscard]] std::size_t size() const { return sizes_.size(); }
  [[nodiscard]] int max() const;
  [[nodiscard]] std::string str() const;

  friend bool operator==(const KernelSet&, const KernelSet&) = default;

 private:
  std::vector<int> sizes_{1, 3, 5};
};

struct BlockHyper {
  int expansion = 2;
  int ca_reduction = 16;
  int sa_kernel = 7;
  int shuffle_groups = 2;
  int gag_kernel = 3;
  bool shuffle_enabled = true;

  void validate() const;
  friend bool operator==(const BlockHyper&, const BlockHyper&) = default;
};

enum class GateKind { gag, ag, none };

[[nodiscard]] inline Index ca_reduced_width(Index channels, int reduction) {
  return std::max<Index>(1, channels / reduction);
}

/// Source of initial weights; draws happen in construction order.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  /// Kaiming-uniform over the given fan-in with negative slope sqrt(5),
  /// i.e. bound 1/sqrt(fan_in) (the torch.nn.Conv2d default).
  template <typename Scalar>
  Tensor4<Scalar> kaiming_uniform(const Shape4& shape, Index fan_in);

 private:
  std::mt19937_64 rng_;
};

template <typename Scalar>
class ParamVisitor {
 public:
  virtual ~ParamVisitor() = default;
  virtual void parameter(const std::string& path, Var<Scalar>& p) = 0;
  virtual void buffer(const std::string& path, Tensor4<Scalar>& b) = 0;
};

template <typename Scalar>
struct Conv2d {
  Var<Scalar> weight;
  std::optional<Var<Scalar>> bias;
  ConvSpec spec;

  Conv2d(Index c_in, Index c_out, Index kernel, Index groups, bool with_bias, Initializer& init);

  Var<Scalar> forward(const Var<Scalar>& x) const { return conv2d(x, weight, bias, spec); }
  void visit(const std::string& prefix, ParamVisitor<Scalar>& v);
};

template <typename Scalar>
struct BatchNorm2d {
  Var<Scalar> gamma;
  Var<Scalar> beta;
  RunningStats<Scalar> stats;

  explicit BatchNorm2d(Index channels);

  Var<Scalar> forward(const Var<Scalar>& x, Mode mode) {
    return batch_norm(x, gamma, beta, stats, mode);
  }
  void visit(const std::string& prefix, ParamVisitor<Scalar>& v);
};

/// CS(sum_k ReLU6(BN(DWC_k(x)))).
template <typename Scalar>
struct Mkdc {
  std::vector<Conv2d<Scalar>> branches;
  std::vector<BatchNorm2d<Scalar>> norms;
  Index shuffle_groups = 0;  // 0 disables the shuffle

  Mkdc(Index channels, const KernelSet& kernels, const BlockHyper& hyper, Initializer& init);

  Var<Scalar> forward(const Var<Scalar>& x, Mode mode);
  void visit(const std::string& prefix, ParamVisitor<Scalar>& v);
};

/// BN(PWC2(MKDC(ReLU6(BN(PWC1(x)))))), plus x when shapes allow and the
/// shortcut is enabled.
template <typename Scalar>
struct Mkir {
  Conv2d<Scalar> expand;
  BatchNorm2d<Scalar> expand_norm;
  Mkdc<Scalar> mkdc;
  Conv2d<Scalar> project;
  BatchNorm2d<Scalar> project_norm;
  bool shortcut;

  Mkir(Index c_in, Index c_out, const KernelSet& kernels, const BlockHyper& hyper,
       bool allow_shortcut, Initializer& init);

  Var<Scalar> forward(const Var<Scalar>& x, Mode mode);
  void visit(const std::string& prefix, ParamVisitor<Scalar>& v);
};

template <typename Scalar>
struct ChannelAttention {
  Conv2d<Scalar> reduce;
  Conv2d<Scalar> restore;

  ChannelAttention(Index channels, const BlockHyper& hyper, Initializer& init);

  /// Per-channel coefficients (n,c,1,1) in (0,1).
  Var<Scalar> coefficients(const Var<Scalar>& x) const;
  Var<Scalar> forward(const Var<Scalar>& x) const { return hadamard(x, coefficients(x)); }
  void visit(const std::string& prefix, ParamVisitor<Scalar>& v);
};

template <typename Scalar>
struct SpatialAttention {
  Conv2d<Scalar> conv;

  SpatialAttention(const BlockHyper& hyper, Initializer& init);

  /// Per-pixel coefficients (n,1,h,w) in (0,1).
  Var<Scalar> coefficients(const Var<Scalar>& x) const;
  Var<Scalar> forward(const Var<Scalar>& x) const { return hadamard(x, coefficients(x)); }
  void visit(const std::string& prefix, ParamVisitor<Scalar>& v);
};

template <typename Scalar>
struct Mkira {
  ChannelAttention<Scalar> ca;
  SpatialAttention<Scalar> sa;
  Mkir<Scalar> mkir;

  Mkira(Index c_in, Index c_out, const KernelSet& kernels, const BlockHyper& hyper,
        bool allow_shortcut, Initializer& init);

  Var<Scalar> forward(const Var<Scalar>& x, Mode mode) {
    return mkir.forward(sa.forward(ca.forward(x)), mode);
  }
  void visit(const std::string& prefix, ParamVisitor<Scalar>& v);
};

/// x * sigmoid(BN(Conv1x1(ReLU(BN(GC_g(g)) + BN(GC_x(x)))))).
/// GateKind::gag uses depthwise k x k paths, GateKind::ag dense 1x1 paths.
template <typename Scalar>
struct AttentionGate {
  Conv2d<Scalar> gate_conv;
  BatchNorm2d<Scalar> gate_norm;
  Conv2d<Scalar> skip_conv;
  BatchNorm2d<Scalar> skip_norm;
  Conv2d<Scalar> psi;
  BatchNorm2d<Scalar> psi_norm;

  AttentionGate(Index channels, GateKind kind, const BlockHyper& hyper, Initializer& init);

  Var<Scalar> coefficients(const Var<Scalar>& g, const Var<Scalar>& x, Mode mode);
  Var<Scalar> forward(const Var<Scalar>& g, const Var<Scalar>& x, Mode mode) {
    return hadamard(x, coefficients(g, x, mode));
  }
  void visit(const std::string& prefix, ParamVisitor<Scalar>& v);
};

template <typename Scalar>
struct SegHead {
  Conv2d<Scalar> conv;

  SegHead(Index channels, Initializer& init) : conv(channels, 1, 1, 1, true, init) {}

  Var<Scalar> forward(const Var<Scalar>& x) const { return conv.forward(x); }
  void visit(const std::string& prefix, ParamVisitor<Scalar>& v) { conv.visit(prefix, v); }
};

#define MKUNET_EXTERN_BLOCKS(S)               \
  extern template struct Conv2d<S>;           \
  extern template struct BatchNorm2d<S>;      \
  extern template struct Mkdc<S>;             \
  extern template struct Mkir<S>;             \
  extern template struct ChannelAttention<S>; \
  extern template struct SpatialAttention<S>; \
  extern template struct Mkira<S>;            \
  extern template struct AttentionGate<S>;

MKUNET_EXTERN_BLOCKS(float)
MKUNET_EXTERN_BLOCKS(double)
#undef MKUNET_EXTERN_BLOCKS

}  // namespace mkunet
