#include "mkunet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <sstream>

namespace mkunet {

void TrainConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("lr must be positive");
  if (!(clip_norm > 0)) throw std::invalid_argument("clip_norm must be positive");
  if (scales.empty()) throw std::invalid_argument("scales must not be empty");
  for (double s : scales)
    if (!(s > 0)) throw std::invalid_argument("scales must be positive");
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (val_fraction < 0 || val_fraction >= 1) {
    throw std::invalid_argument("val_fraction must be in [0, 1)");
  }
  check_input_dims(img_size, img_size);
}

template <typename Scalar>
void require_binary(const Tensor4<Scalar>& mask) {
  for (Index i = 0; i < mask.size(); ++i) {
    if (mask[i] != Scalar(0) && mask[i] != Scalar(1)) {
      throw std::invalid_argument("mask must be binary, found value " +
                                  std::to_string(static_cast<double>(mask[i])));
    }
  }
}

// ---- hybrid loss ----------------------------------------------------------

template <typename Scalar>
Var<Scalar> hybrid_loss(const Var<Scalar>& logits, const Tensor4<Scalar>& mask) {
  const Shape4 s = logits.shape();
  if (s != mask.shape()) {
    throw ShapeError("loss shapes differ: logits " + s.str() + ", mask " + mask.shape().str());
  }
  if (s.c != 1) throw ShapeError("hybrid_loss expects single-channel logits, got " + s.str());
  require_binary(mask);

  constexpr double kClamp = 1e-7;
  const auto& z = logits.value();
  const Index per = s.plane();
  const auto total = static_cast<double>(s.size());

  Tensor4<Scalar> prob(s);
  double bce = 0;
  // Per-sample intersection and union, kept for the backward rule.
  std::vector<double> inter(static_cast<std::size_t>(s.n));
  std::vector<double> uni(static_cast<std::size_t>(s.n));
  double iou = 0;
  for (Index n = 0; n < s.n; ++n) {
    double i_sum = 0;
    double p_sum = 0;
    double y_sum = 0;
    for (Index k = 0; k < per; ++k) {
      const Index idx = n * per + k;
      const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(z[idx])));
      const double y = mask[idx];
      prob[idx] = static_cast<Scalar>(p);
      const double pc = std::clamp(p, kClamp, 1.0 - kClamp);
      bce -= y * std::log(pc) + (1 - y) * std::log(1 - pc);
      i_sum += p * y;
      p_sum += p;
      y_sum += y;
    }
    const double u = p_sum + y_sum - i_sum;
    inter[static_cast<std::size_t>(n)] = i_sum;
    uni[static_cast<std::size_t>(n)] = u;
    iou += 1.0 - (i_sum + 1) / (u + 1);
  }
  const double loss = bce / total + iou / static_cast<double>(s.n);

  return make_result<Scalar>(
      Tensor4<Scalar>(Shape4{1, 1, 1, 1}, static_cast<Scalar>(loss)), {logits}, "hybrid_loss",
      [s, per, total, mask, prob = std::move(prob), inter = std::move(inter),
       uni = std::move(uni)](Node<Scalar>& self) {
        const double up = (*self.grad)[0];
        auto& dz = self.inputs[0]->grad_buffer();
        for (Index n = 0; n < s.n; ++n) {
          const double I = inter[static_cast<std::size_t>(n)];
          const double U = uni[static_cast<std::size_t>(n)];
          const double denom = (U + 1) * (U + 1);
          for (Index k = 0; k < per; ++k) {
            const Index idx = n * per + k;
            const double p = prob[idx];
            const double y = mask[idx];
            const bool clamped = p < kClamp || p > 1.0 - kClamp;
            const double d_bce = clamped ? 0.0 : (p - y) / total;
            const double d_iou_dp = -(y * (U + 1) - (I + 1) * (1 - y)) / denom;
            const double d_iou = d_iou_dp * p * (1 - p) / static_cast<double>(s.n);
            dz[idx] += static_cast<Scalar>(up * (d_bce + d_iou));
          }
        }
      });
}

namespace {

struct Overlap {
  double intersection = 0;
  double predicted = 0;
  double target = 0;
};

Overlap overlap(const Tensor4<float>& logits, const Tensor4<float>& mask, double threshold) {
  if (logits.shape() != mask.shape()) {
    throw ShapeError("metric shapes differ: " + logits.shape().str() + " vs " +
                     mask.shape().str());
  }
  Overlap o;
  for (Index i = 0; i < logits.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[i])));
    const bool pred = p > threshold;
    const bool tgt = mask[i] > 0.5f;
    o.intersection += pred && tgt;
    o.predicted += pred;
    o.target += tgt;
  }
  return o;
}

}  // namespace

double dice_score(const Tensor4<float>& logits, const Tensor4<float>& mask, double threshold) {
  const Overlap o = overlap(logits, mask, threshold);
  return (2 * o.intersection + 1e-6) / (o.predicted + o.target + 1e-6);
}

double iou_score(const Tensor4<float>& logits, const Tensor4<float>& mask, double threshold) {
  const Overlap o = overlap(logits, mask, threshold);
  return (o.intersection + 1e-6) / (o.predicted + o.target - o.intersection + 1e-6);
}

// ---- optimisation ---------------------------------------------------------

template <typename Scalar>
void adamw_step(std::vector<Var<Scalar>>& params, AdamWState<Scalar>& state,
                const AdamWHyper& hyper) {
  for (const auto& p : params) {
    if (p.has_grad() && !p.grad().array().isFinite().all()) {
      throw std::runtime_error("non-finite gradient, optimiser step aborted");
    }
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.shape());
      state.v.emplace_back(p.shape());
    }
  }
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("optimiser state does not match parameter list");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1 - std::pow(hyper.beta1, t);
  const double c2 = 1 - std::pow(hyper.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& theta = params[i].value();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const Tensor4<Scalar>* g = params[i].has_grad() ? &params[i].grad() : nullptr;
    for (Index k = 0; k < theta.size(); ++k) {
      const double gk = g ? static_cast<double>((*g)[k]) : 0.0;
      const double mk = hyper.beta1 * m[k] + (1 - hyper.beta1) * gk;
      const double vk = hyper.beta2 * v[k] + (1 - hyper.beta2) * gk * gk;
      m[k] = static_cast<Scalar>(mk);
      v[k] = static_cast<Scalar>(vk);
      const double m_hat = mk / c1;
      const double v_hat = vk / c2;
      const double th = theta[k];
      theta[k] = static_cast<Scalar>(th - hyper.lr * m_hat / (std::sqrt(v_hat) + hyper.eps) -
                                     hyper.lr * hyper.weight_decay * th);
    }
  }
}

template <typename Scalar>
double clip_gradients(std::vector<Var<Scalar>>& params, double max_norm) {
  double sq = 0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    const auto& g = p.grad();
    for (Index k = 0; k < g.size(); ++k) sq += static_cast<double>(g[k]) * g[k];
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const auto scale = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      auto& g = p.grad_buffer();
      for (Index k = 0; k < g.size(); ++k) g[k] = static_cast<Scalar>(g[k] * scale);
    }
  }
  return norm;
}

// ---- data -----------------------------------------------------------------

Index scaled_size(Index base, double scale) {
  const double units = std::round(static_cast<double>(base) * scale / 32.0);
  return std::max<Index>(32, static_cast<Index>(units) * 32);
}

Batch make_batch(const std::vector<const Sample*>& samples, Index side) {
  if (samples.empty()) throw std::invalid_argument("cannot batch zero samples");
  const Shape4 is = samples.front()->image.shape();
  const Shape4 ms = samples.front()->mask.shape();
  const auto n = static_cast<Index>(samples.size());
  Batch b{Tensor4<float>(Shape4{n, is.c, side, side}), Tensor4<float>(Shape4{n, 1, side, side})};
  for (Index i = 0; i < n; ++i) {
    const Sample& s = *samples[static_cast<std::size_t>(i)];
    if (s.image.shape() != is || s.mask.shape() != ms) {
      throw ShapeError("all samples in a batch must share dimensions");
    }
    const bool native = is.h == side && is.w == side;
    const Tensor4<float> img = native ? s.image : resize_bilinear(s.image, side, side);
    Tensor4<float> msk = native ? s.mask : resize_nearest(s.mask, side, side);
    for (Index k = 0; k < msk.size(); ++k) msk[k] = msk[k] > 0.5f ? 1.0f : 0.0f;
    std::copy_n(img.data(), img.size(), b.images.plane(i, 0));
    std::copy_n(msk.data(), msk.size(), b.masks.plane(i, 0));
  }
  return b;
}

Batch multi_scale_batch(const std::vector<const Sample*>& samples, Index base_size,
                        const std::vector<double>& scales, std::uint64_t seed, int epoch,
                        int batch_index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(batch_index),
                    0x5ca1eu};
  std::mt19937_64 rng(seq);
  const double scale = scales[static_cast<std::size_t>(rng() % scales.size())];
  return make_batch(samples, scaled_size(base_size, scale));
}

std::vector<Sample> synth_dataset(int count, Index size, std::uint64_t seed) {
  if (count < 0) throw std::invalid_argument("sample count must be >= 0");
  if (size < kSpatialMultiple || size % kSpatialMultiple != 0) {
    throw std::invalid_argument("synthetic image size must be a positive multiple of 32");
  }
  constexpr double kBackground = 0.3;
  constexpr double kForegroundOffset = 0.4;
  constexpr double kNoise = 0.1;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, kNoise);
  const double sz = static_cast<double>(size);

  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) {
    Tensor4<float> mask(Shape4{1, 1, size, size});
    for (;;) {
      mask.set_zero();
      const int ellipses = 1 + static_cast<int>(rng() % 3);
      for (int e = 0; e < ellipses; ++e) {
        const double cy = unit(rng) * sz;
        const double cx = unit(rng) * sz;
        const double ay = sz / 8 + unit(rng) * (sz / 3 - sz / 8);
        const double ax = sz / 8 + unit(rng) * (sz / 3 - sz / 8);
        const double theta = unit(rng) * std::numbers::pi;
        const double ct = std::cos(theta);
        const double st = std::sin(theta);
        for (Index i = 0; i < size; ++i) {
          for (Index j = 0; j < size; ++j) {
            const double dy = static_cast<double>(i) + 0.5 - cy;
            const double dx = static_cast<double>(j) + 0.5 - cx;
            const double u = (dx * ct + dy * st) / ax;
            const double v = (-dx * st + dy * ct) / ay;
            if (u * u + v * v <= 1.0) mask(0, 0, i, j) = 1.0f;
          }
        }
      }
      const double fraction = mask.array().template cast<double>().mean();
      if (fraction > 0.01 && fraction < 0.6) break;
    }
    Tensor4<float> image(Shape4{1, 3, size, size});
    for (Index i = 0; i < size; ++i) {
      for (Index j = 0; j < size; ++j) {
        const double v = std::clamp(
            kBackground + kForegroundOffset * mask(0, 0, i, j) + noise(rng), 0.0, 1.0);
        for (Index c = 0; c < 3; ++c) image(0, c, i, j) = static_cast<float>(v);
      }
    }
    out.push_back({std::move(image), std::move(mask)});
  }
  return out;
}

// ---- loop -----------------------------------------------------------------

EvalResult evaluate(Network<float>& net, const std::vector<Sample>& data, double threshold) {
  NoGradGuard no_grad;
  EvalResult r;
  for (const auto& s : data) {
    const auto out = net.forward(s.image, Mode::eval);
    r.per_sample_dice.push_back(dice_score(out.p1.value(), s.mask, threshold));
    r.per_sample_iou.push_back(iou_score(out.p1.value(), s.mask, threshold));
  }
  if (!data.empty()) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      r.mean_dice += r.per_sample_dice[i];
      r.mean_iou += r.per_sample_iou[i];
    }
    r.mean_dice /= static_cast<double>(data.size());
    r.mean_iou /= static_cast<double>(data.size());
  }
  return r;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    std::size_t n, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * val_fraction));
  if (n > 0) n_val = std::min(n_val, n - 1);
  std::vector<std::size_t> val(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  return {train, val};
}

TrainResult train_loop(Network<float>& net, const TrainConfig& cfg, const std::vector<Sample>& data,
                       const TrainHooks& hooks) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("training set is empty");

  const auto [train_idx, val_idx] = split_indices(data.size(), cfg.val_fraction, cfg.seed);
  std::vector<Sample> val_set;
  for (auto i : (val_idx.empty() ? train_idx : val_idx)) val_set.push_back(data[i]);

  std::vector<Var<float>> params;
  for (auto& [path, p] : net.parameters()) params.push_back(p);
  AdamWState<float> opt;
  const AdamWHyper hyper{cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay};

  TrainResult result;
  std::int64_t steps = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = train_idx;
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed),
                      static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x0de7u};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0;
    int batches = 0;
    bool stop = false;
    const auto bsz = static_cast<std::size_t>(cfg.batch);
    for (std::size_t start = 0, end = 0; start < order.size(); start = end) {
      end = std::min(order.size(), start + bsz);
      // A trailing single sample joins this batch; alone it can leave a
      // one-value bottleneck for train-mode BN.
      if (order.size() - end == 1 && bsz > 1) end = order.size();
      std::vector<const Sample*> members;
      for (std::size_t k = start; k < end; ++k) members.push_back(&data[order[k]]);
      const Batch batch =
          multi_scale_batch(members, cfg.img_size, cfg.scales, cfg.seed, epoch, batches);

      net.zero_grad();
      const auto out = net.forward(batch.images, Mode::train);
      const Var<float> loss = hybrid_loss(out.p1, batch.masks);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) +
                                 ", batch " + std::to_string(batches));
      }
      backward(loss);
      clip_gradients(params, cfg.clip_norm);
      adamw_step(params, opt, hyper);
      loss_sum += lv;
      ++batches;
      ++steps;
      if (hooks.max_steps && steps >= *hooks.max_steps) {
        stop = true;
        break;
      }
    }

    EpochRecord rec{epoch, batches ? loss_sum / batches : 0.0, evaluate(net, val_set).mean_dice};
    result.history.push_back(rec);
    if (rec.val_dice > result.best_val_dice) {
      result.best_val_dice = rec.val_dice;
      result.best_epoch = epoch;
      result.best_state = net.state();
    }
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (stop) break;
  }
  if (result.history.empty()) result.best_state = net.state();
  return result;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,train_loss,val_dice\n";
  char line[128];
  for (const auto& r : history) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_dice);
    os << line;
  }
  return os.str();
}

template Var<float> hybrid_loss(const Var<float>&, const Tensor4<float>&);
template Var<double> hybrid_loss(const Var<double>&, const Tensor4<double>&);
template void require_binary(const Tensor4<float>&);
template void require_binary(const Tensor4<double>&);
template void adamw_step(std::vector<Var<float>>&, AdamWState<float>&, const AdamWHyper&);
template void adamw_step(std::vector<Var<double>>&, AdamWState<double>&, const AdamWHyper&);
template double clip_gradients(std::vector<Var<float>>&, double);
template double clip_gradients(std::vector<Var<double>>&, double);

}  // namespace mkunet
