#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mkunet/network.hpp"

namespace mkunet {

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 200;
  int batch = 16;
  std::vector<double> scales{0.75, 1.0, 1.25};
  double clip_norm = 0.5;
  Index img_size = 256;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;

  void validate() const;
};

/// One image/mask pair; image (1, c, H, W) in [0,1], mask (1, 1, H, W) in {0,1}.
struct Sample {
  Tensor4<float> image;
  Tensor4<float> mask;
};

// ---- losses and metrics ---------------------------------------------------

/// Mean BCE over pixels plus IoU loss (per sample, averaged), on raw logits.
template <typename Scalar>
Var<Scalar> hybrid_loss(const Var<Scalar>& logits, const Tensor4<Scalar>& mask);

/// (2|P∩Y| + 1e-6) / (|P| + |Y| + 1e-6) with P = sigmoid(logits) > threshold.
/// Expects a single-sample map.
double dice_score(const Tensor4<float>& logits, const Tensor4<float>& mask,
                  double threshold = 0.5);
double iou_score(const Tensor4<float>& logits, const Tensor4<float>& mask,
                 double threshold = 0.5);

/// Throws unless every value is exactly 0 or 1.
template <typename Scalar>
void require_binary(const Tensor4<Scalar>& mask);

// ---- optimisation ---------------------------------------------------------

template <typename Scalar>
struct AdamWState {
  std::vector<Tensor4<Scalar>> m;
  std::vector<Tensor4<Scalar>> v;
  std::int64_t step = 0;
};

struct AdamWHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Decoupled-weight-decay Adam. Parameters without a gradient are treated as
/// having zero gradient. Throws (without touching anything) on a non-finite
/// gradient.
template <typename Scalar>
void adamw_step(std::vector<Var<Scalar>>& params, AdamWState<Scalar>& state,
                const AdamWHyper& hyper);

/// Global-L2-norm clipping; returns the norm before clipping.
template <typename Scalar>
double clip_gradients(std::vector<Var<Scalar>>& params, double max_norm);

// ---- data -----------------------------------------------------------------

/// round(base * scale / 32) * 32, at least 32.
Index scaled_size(Index base, double scale);

struct Batch {
  Tensor4<float> images;
  Tensor4<float> masks;
};

/// Stacks samples at side x side: bilinear for images, nearest for masks
/// (re-binarised at 0.5).
Batch make_batch(const std::vector<const Sample*>& samples, Index side);

/// Draws a scale for batch `batch_index` of epoch `epoch` and builds the batch.
Batch multi_scale_batch(const std::vector<const Sample*>& samples, Index base_size,
                        const std::vector<double>& scales, std::uint64_t seed, int epoch,
                        int batch_index);

/// Random filled ellipses on a noisy background; deterministic per arguments.
std::vector<Sample> synth_dataset(int count, Index size, std::uint64_t seed);

// ---- loop -----------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_dice = 0;
};

struct EvalResult {
  double mean_dice = 0;
  double mean_iou = 0;
  std::vector<double> per_sample_dice;
  std::vector<double> per_sample_iou;
};

EvalResult evaluate(Network<float>& net, const std::vector<Sample>& data, double threshold = 0.5);

struct TrainResult {
  NetworkState<float> best_state;
  int best_epoch = 0;
  double best_val_dice = -1;
  std::vector<EpochRecord> history;
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Stop after this many optimiser steps in total (unset = run all epochs).
  std::optional<std::int64_t> max_steps;
};

/// Seeded train/val split; the validation part takes round(n * fraction)
/// samples but always leaves at least one for training.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double val_fraction, std::uint64_t seed);

/// Trains `net` in place; the returned state is the one with the best
/// validation DICE (training set when the split leaves no validation data).
TrainResult train_loop(Network<float>& net, const TrainConfig& cfg, const std::vector<Sample>& data,
                       const TrainHooks& hooks = {});

std::string history_csv(const std::vector<EpochRecord>& history);

}  // namespace mkunet
