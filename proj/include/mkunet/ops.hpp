#pragma once

#include <optional>

#include "mkunet/autograd.hpp"

namespace mkunet {

enum class Mode { train, eval };

// NOTE: every op below registers its backward rule through make_result.

// ---- elementwise ----------------------------------------------------------

/// a + b. `b` may match `a`, be per-channel (n,c,1,1) or per-pixel (n,1,h,w).
template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b);

/// Hadamard product with the same broadcast rule as add.
template <typename Scalar>
Var<Scalar> hadamard(const Var<Scalar>& a, const Var<Scalar>& b);

/// Sum of all elements as a (1,1,1,1) scalar.
template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x);

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> relu6(const Var<Scalar>& x);
template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x);

// ---- convolution / normalisation -----------------------------------------

struct ConvSpec {
  Index stride = 1;
  Index padding = 0;
  Index groups = 1;
};

/// Output spatial size of a convolution; throws when the kernel does not fit.
Index conv_out_extent(Index in, Index kernel, Index stride, Index padding);

/// Grouped 2-D cross-correlation with zero padding.
/// weight: (c_out, c_in/groups, k, k); bias: (1, c_out, 1, 1).
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight,
                   const std::optional<Var<Scalar>>& bias, const ConvSpec& spec);

/// Running statistics of one batch-norm layer.
template <typename Scalar>
struct RunningStats {
  Tensor4<Scalar> mean;
  Tensor4<Scalar> var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  explicit RunningStats(Index channels)
      : mean(Shape4{1, channels, 1, 1}, Scalar(0)), var(Shape4{1, channels, 1, 1}, Scalar(1)) {}
};

/// Train mode normalises with biased batch moments over (n,h,w) and updates
/// `stats` in place; eval mode applies the running statistics.
template <typename Scalar>
Var<Scalar> batch_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       RunningStats<Scalar>& stats, Mode mode);

// ---- pooling / resampling -------------------------------------------------

template <typename Scalar>
Var<Scalar> max_pool_2x2(const Var<Scalar>& x);

enum class Reduce { avg, max };

/// (n,c,h,w) -> (n,c,1,1).
template <typename Scalar>
Var<Scalar> global_pool(const Var<Scalar>& x, Reduce kind);

/// Bilinear resampling with half-pixel centres (align_corners = false).
template <typename Scalar>
Var<Scalar> bilinear_resize(const Var<Scalar>& x, Index out_h, Index out_w);

template <typename Scalar>
Var<Scalar> upsample_2x(const Var<Scalar>& x) {
  return bilinear_resize(x, x.shape().h * 2, x.shape().w * 2);
}

/// Input channel g*(c/groups)+i goes to output channel i*groups+g.
template <typename Scalar>
Var<Scalar> channel_shuffle(const Var<Scalar>& x, Index groups);

/// (n,c,h,w) -> (n,1,h,w) reduction over channels.
template <typename Scalar>
Var<Scalar> channel_stats(const Var<Scalar>& x, Reduce kind);

template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b);

// ---- plain tensor helpers (no graph) --------------------------------------

template <typename Scalar>
Tensor4<Scalar> resize_bilinear(const Tensor4<Scalar>& x, Index out_h, Index out_w);

/// Nearest-neighbour resampling (half-pixel centres), used for masks.
template <typename Scalar>
Tensor4<Scalar> resize_nearest(const Tensor4<Scalar>& x, Index out_h, Index out_w);

}  // namespace mkunet
