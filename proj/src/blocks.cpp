#include "mkunet/blocks.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mkunet {

KernelSet::KernelSet(std::vector<int> sizes) : sizes_(std::move(sizes)) {
  if (sizes_.empty()) throw std::invalid_argument("kernel set must not be empty");
  for (int k : sizes_) {
    if (k < 1 || k > 7 || k % 2 == 0) {
      throw std::invalid_argument("kernel sizes must be odd and in [1,7], got " +
                                  std::to_string(k));
    }
  }
}

int KernelSet::max() const { return *std::max_element(sizes_.begin(), sizes_.end()); }

std::string KernelSet::str() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < sizes_.size(); ++i) os << (i ? "," : "") << sizes_[i];
  return os.str();
}

void BlockHyper::validate() const {
  if (expansion < 1) throw std::invalid_argument("expansion must be >= 1");
  if (ca_reduction < 1) throw std::invalid_argument("ca_reduction must be >= 1");
  if (sa_kernel < 1 || sa_kernel % 2 == 0) throw std::invalid_argument("sa_kernel must be odd");
  if (gag_kernel < 1 || gag_kernel % 2 == 0) throw std::invalid_argument("gag_kernel must be odd");
  if (shuffle_groups < 1) throw std::invalid_argument("shuffle_groups must be >= 1");
}

template <typename Scalar>
Tensor4<Scalar> Initializer::kaiming_uniform(const Shape4& shape, Index fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor4<Scalar> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng_));
  return t;
}

template Tensor4<float> Initializer::kaiming_uniform(const Shape4&, Index);
template Tensor4<double> Initializer::kaiming_uniform(const Shape4&, Index);

// ---- Conv2d / BatchNorm2d -------------------------------------------------

template <typename Scalar>
Conv2d<Scalar>::Conv2d(Index c_in, Index c_out, Index kernel, Index groups, bool with_bias,
                       Initializer& init) {
  if (groups < 1 || c_in % groups != 0 || c_out % groups != 0) {
    throw ShapeError("conv groups " + std::to_string(groups) + " must divide " +
                     std::to_string(c_in) + " and " + std::to_string(c_out));
  }
  const Index per_group = c_in / groups;
  weight = Var<Scalar>::parameter(init.kaiming_uniform<Scalar>(
      Shape4{c_out, per_group, kernel, kernel}, per_group * kernel * kernel));
  if (with_bias) bias = Var<Scalar>::parameter(Tensor4<Scalar>(Shape4{1, c_out, 1, 1}));
  spec = ConvSpec{1, (kernel - 1) / 2, groups};
}

template <typename Scalar>
void Conv2d<Scalar>::visit(const std::string& prefix, ParamVisitor<Scalar>& v) {
  v.parameter(prefix + ".weight", weight);
  if (bias) v.parameter(prefix + ".bias", *bias);
}

template <typename Scalar>
BatchNorm2d<Scalar>::BatchNorm2d(Index channels)
    : gamma(Var<Scalar>::parameter(Tensor4<Scalar>(Shape4{1, channels, 1, 1}, Scalar(1)))),
      beta(Var<Scalar>::parameter(Tensor4<Scalar>(Shape4{1, channels, 1, 1}))),
      stats(channels) {}

template <typename Scalar>
void BatchNorm2d<Scalar>::visit(const std::string& prefix, ParamVisitor<Scalar>& v) {
  v.parameter(prefix + ".gamma", gamma);
  v.parameter(prefix + ".beta", beta);
  v.buffer(prefix + ".running_mean", stats.mean);
  v.buffer(prefix + ".running_var", stats.var);
}

// ---- MKDC -----------------------------------------------------------------

template <typename Scalar>
Mkdc<Scalar>::Mkdc(Index channels, const KernelSet& kernels, const BlockHyper& hyper,
                   Initializer& init) {
  if (hyper.shuffle_enabled) {
    if (channels % hyper.shuffle_groups != 0) {
      throw ShapeError("shuffle groups " + std::to_string(hyper.shuffle_groups) +
                       " do not divide " + std::to_string(channels) + " channels");
    }
    shuffle_groups = hyper.shuffle_groups;
  }
  for (int k : kernels.sizes()) {
    branches.emplace_back(channels, channels, k, channels, false, init);
    norms.emplace_back(channels);
  }
}

template <typename Scalar>
Var<Scalar> Mkdc<Scalar>::forward(const Var<Scalar>& x, Mode mode) {
  Var<Scalar> acc;
  for (std::size_t i = 0; i < branches.size(); ++i) {
    Var<Scalar> y = relu6(norms[i].forward(branches[i].forward(x), mode));
    acc = i == 0 ? y : add(acc, y);
  }
  return shuffle_groups > 0 ? channel_shuffle(acc, shuffle_groups) : acc;
}

template <typename Scalar>
void Mkdc<Scalar>::visit(const std::string& prefix, ParamVisitor<Scalar>& v) {
  for (std::size_t i = 0; i < branches.size(); ++i) {
    branches[i].visit(prefix + ".dw" + std::to_string(i), v);
    norms[i].visit(prefix + ".bn" + std::to_string(i), v);
  }
}

// ---- MKIR -----------------------------------------------------------------

template <typename Scalar>
Mkir<Scalar>::Mkir(Index c_in, Index c_out, const KernelSet& kernels, const BlockHyper& hyper,
                   bool allow_shortcut, Initializer& init)
    : expand(c_in, c_in * hyper.expansion, 1, 1, false, init),
      expand_norm(c_in * hyper.expansion),
      mkdc(c_in * hyper.expansion, kernels, hyper, init),
      project(c_in * hyper.expansion, c_out, 1, 1, false, init),
      project_norm(c_out),
      shortcut(allow_shortcut && c_in == c_out) {}

template <typename Scalar>
Var<Scalar> Mkir<Scalar>::forward(const Var<Scalar>& x, Mode mode) {
  Var<Scalar> h = relu6(expand_norm.forward(expand.forward(x), mode));
  h = mkdc.forward(h, mode);
  Var<Scalar> y = project_norm.forward(project.forward(h), mode);
  return shortcut ? add(y, x) : y;
}

template <typename Scalar>
void Mkir<Scalar>::visit(const std::string& prefix, ParamVisitor<Scalar>& v) {
  expand.visit(prefix + ".expand", v);
  expand_norm.visit(prefix + ".expand_norm", v);
  mkdc.visit(prefix + ".mkdc", v);
  project.visit(prefix + ".project", v);
  project_norm.visit(prefix + ".project_norm", v);
}

// ---- attention ------------------------------------------------------------

template <typename Scalar>
ChannelAttention<Scalar>::ChannelAttention(Index channels, const BlockHyper& hyper,
                                           Initializer& init)
    : reduce(channels, ca_reduced_width(channels, hyper.ca_reduction), 1, 1, true, init),
      restore(ca_reduced_width(channels, hyper.ca_reduction), channels, 1, 1, true, init) {}

template <typename Scalar>
Var<Scalar> ChannelAttention<Scalar>::coefficients(const Var<Scalar>& x) const {
  // Weights are shared between the max- and average-pooled descriptors.
  auto path = [this](const Var<Scalar>& pooled) {
    return restore.forward(relu(reduce.forward(pooled)));
  };
  return sigmoid(add(path(global_pool(x, Reduce::max)), path(global_pool(x, Reduce::avg))));
}

template <typename Scalar>
void ChannelAttention<Scalar>::visit(const std::string& prefix, ParamVisitor<Scalar>& v) {
  reduce.visit(prefix + ".reduce", v);
  restore.visit(prefix + ".restore", v);
}

template <typename Scalar>
SpatialAttention<Scalar>::SpatialAttention(const BlockHyper& hyper, Initializer& init)
    : conv(2, 1, hyper.sa_kernel, 1, true, init) {}

template <typename Scalar>
Var<Scalar> SpatialAttention<Scalar>::coefficients(const Var<Scalar>& x) const {
  return sigmoid(conv.forward(
      concat_channels(channel_stats(x, Reduce::max), channel_stats(x, Reduce::avg))));
}

template <typename Scalar>
void SpatialAttention<Scalar>::visit(const std::string& prefix, ParamVisitor<Scalar>& v) {
  conv.visit(prefix + ".conv", v);
}

template <typename Scalar>
Mkira<Scalar>::Mkira(Index c_in, Index c_out, const KernelSet& kernels, const BlockHyper& hyper,
                     bool allow_shortcut, Initializer& init)
    : ca(c_in, hyper, init),
      sa(hyper, init),
      mkir(c_in, c_out, kernels, hyper, allow_shortcut, init) {}

template <typename Scalar>
void Mkira<Scalar>::visit(const std::string& prefix, ParamVisitor<Scalar>& v) {
  ca.visit(prefix + ".ca", v);
  sa.visit(prefix + ".sa", v);
  mkir.visit(prefix + ".mkir", v);
}

namespace {
Index gate_kernel(GateKind kind, const BlockHyper& hyper) {
  return kind == GateKind::ag ? 1 : hyper.gag_kernel;
}
Index gate_groups(GateKind kind, Index channels) { return kind == GateKind::ag ? 1 : channels; }
}  // namespace

template <typename Scalar>
AttentionGate<Scalar>::AttentionGate(Index channels, GateKind kind, const BlockHyper& hyper,
                                     Initializer& init)
    : gate_conv(channels, channels, gate_kernel(kind, hyper), gate_groups(kind, channels), false,
                init),
      gate_norm(channels),
      skip_conv(channels, channels, gate_kernel(kind, hyper), gate_groups(kind, channels), false,
                init),
      skip_norm(channels),
      psi(channels, 1, 1, 1, true, init),
      psi_norm(1) {
  if (kind == GateKind::none) throw std::invalid_argument("GateKind::none has no gate block");
}

template <typename Scalar>
Var<Scalar> AttentionGate<Scalar>::coefficients(const Var<Scalar>& g, const Var<Scalar>& x,
                                                Mode mode) {
  if (g.shape() != x.shape()) {
    throw ShapeError("attention gate inputs differ: g " + g.shape().str() + ", x " +
                     x.shape().str());
  }
  Var<Scalar> mixed = relu(add(gate_norm.forward(gate_conv.forward(g), mode),
                               skip_norm.forward(skip_conv.forward(x), mode)));
  return sigmoid(psi_norm.forward(psi.forward(mixed), mode));
}

template <typename Scalar>
void AttentionGate<Scalar>::visit(const std::string& prefix, ParamVisitor<Scalar>& v) {
  gate_conv.visit(prefix + ".gate_conv", v);
  gate_norm.visit(prefix + ".gate_norm", v);
  skip_conv.visit(prefix + ".skip_conv", v);
  skip_norm.visit(prefix + ".skip_norm", v);
  psi.visit(prefix + ".psi", v);
  psi_norm.visit(prefix + ".psi_norm", v);
}

#define MKUNET_BLOCKS(S)               \
  template struct Conv2d<S>;           \
  template struct BatchNorm2d<S>;      \
  template struct Mkdc<S>;             \
  template struct Mkir<S>;             \
  template struct ChannelAttention<S>; \
  template struct SpatialAttention<S>; \
  template struct Mkira<S>;            \
  template struct AttentionGate<S>;

MKUNET_BLOCKS(float)
MKUNET_BLOCKS(double)

}  // namespace mkunet
