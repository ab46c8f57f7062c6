#include "mkunet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mkunet/network.hpp"

namespace mkunet {

namespace {

struct Evaluation {
  double value;
  std::vector<std::uint64_t> kinks;
};

Evaluation evaluate_once(const std::function<Var<double>()>& f) {
  NoGradGuard no_grad;
  KinkRecorder rec;
  KinkRecordingScope scope(rec);
  const Var<double> out = f();
  if (out.shape() != Shape4{1, 1, 1, 1}) throw ShapeError("gradcheck function must return a scalar");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NonFiniteError("non-finite function value during gradcheck");
  return {v, rec.signatures()};
}

}  // namespace

GradcheckReport finite_diff_check(const std::function<Var<double>()>& f,
                                  std::vector<GradProbe>& probes, double eps, double tol) {
  if (!(eps > 0)) throw std::invalid_argument("eps must be positive");
  for (auto& p : probes) p.leaf.zero_grad();

  std::vector<std::uint64_t> base_kinks;
  {
    KinkRecorder rec;
    KinkRecordingScope scope(rec);
    const Var<double> loss = f();
    if (!std::isfinite(loss.value()[0])) throw NonFiniteError("non-finite loss during gradcheck");
    backward(loss);
    base_kinks = rec.signatures();
  }

  GradcheckReport report;
  for (auto& p : probes) {
    std::vector<Index> coords = p.coords;
    if (coords.empty()) {
      coords.resize(static_cast<std::size_t>(p.leaf.value().size()));
      std::iota(coords.begin(), coords.end(), Index{0});
    }
    const Tensor4<double> analytic =
        p.leaf.has_grad() ? p.leaf.grad() : Tensor4<double>(p.leaf.shape());
    for (Index i : coords) {
      double& x = p.leaf.value()[i];
      const double x0 = x;
      auto probe = [&](double delta) {
        x = x0 + delta;
        Evaluation e = evaluate_once(f);
        x = x0;
        return e;
      };
      const Evaluation plus = probe(eps);
      const Evaluation minus = probe(-eps);
      bool crossed = plus.kinks != base_kinks || minus.kinks != base_kinks;
      if (!crossed) {
        crossed = probe(10 * eps).kinks != base_kinks || probe(-10 * eps).kinks != base_kinks;
      }
      if (crossed) {
        ++report.skipped;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2 * eps);
      const double a = analytic[i];
      if (!std::isfinite(a)) throw NonFiniteError("non-finite analytic gradient in " + p.name);
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      ++report.checked;
      if (report.worst.empty() || rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  report.pass = report.checked > 0 && report.max_rel_err < tol;
  return report;
}

GradcheckReport finite_diff_check(const std::function<Var<double>(const Var<double>&)>& f,
                                  const Tensor4<double>& x, double eps, double tol) {
  std::vector<GradProbe> probes{{"x", Var<double>::parameter(x), {}}};
  const Var<double> leaf = probes[0].leaf;
  return finite_diff_check([&] { return f(leaf); }, probes, eps, tol);
}

// ---- block suite ------------------------------------------------------------

namespace {

// Collects parameters and moves BN affine terms and biases off their
// initial 1/0 values so every path carries a generic gradient.
class Randomizer : public ParamVisitor<double> {
 public:
  explicit Randomizer(std::uint64_t seed) : rng_(seed) {}

  void parameter(const std::string& path, Var<double>& p) override {
    auto& v = p.value();
    // These feed a train-mode BN directly: the psi bias has an identically
    // zero gradient and a 1x1 depthwise weight is a per-channel scale that BN
    // cancels up to epsilon. Finite differences there only measure roundoff.
    const Shape4 s = v.shape();
    const bool unit_depthwise = path.find(".dw") != std::string::npos && s.c == 1 && s.h == 1 && s.w == 1;
    const bool structurally_zero = path.ends_with(".psi.bias") || unit_depthwise;
    if (path.ends_with(".gamma")) {
      std::uniform_real_distribution<double> d(0.5, 1.5);
      for (Index i = 0; i < v.size(); ++i) v[i] = d(rng_);
    } else if (path.ends_with(".beta") || path.ends_with(".bias")) {
      std::uniform_real_distribution<double> d(-0.2, 0.2);
      for (Index i = 0; i < v.size(); ++i) v[i] = d(rng_);
    }
    if (!structurally_zero) params.emplace_back(path, p);
  }
  void buffer(const std::string&, Tensor4<double>&) override {}

  std::vector<std::pair<std::string, Var<double>>> params;

 private:
  std::mt19937_64 rng_;
};

std::vector<Index> sample_coords(Index size, Index limit, std::mt19937_64& rng) {
  std::vector<Index> all(static_cast<std::size_t>(size));
  std::iota(all.begin(), all.end(), Index{0});
  if (size <= limit) return all;
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(static_cast<std::size_t>(limit));
  std::sort(all.begin(), all.end());
  return all;
}

// f = mean(out * R); R drawn once per output shape. Mean rather than sum
// keeps the roundoff of f, and so the noise of the differences taken on
// near-zero gradients, below the 1e-8 floor of the relative error.
Var<double> weighted_sum(const Var<double>& out, const Tensor4<double>& r) {
  Tensor4<double> scaled = r;
  scaled.array() /= static_cast<double>(r.size());
  return sum(hadamard(out, Var<double>(std::move(scaled))));
}

struct Suite {
  std::function<Var<double>()> f;
  std::vector<GradProbe> probes;
};

template <typename Block>
void add_params(Block& block, const std::string& prefix, std::vector<GradProbe>& probes,
                std::uint64_t seed, Index per_leaf, std::mt19937_64& rng) {
  Randomizer r(seed);
  block.visit(prefix, r);
  for (auto& [path, p] : r.params) {
    probes.push_back({path, p, sample_coords(p.value().size(), per_leaf, rng)});
  }
}

}  // namespace

const std::vector<std::string>& gradcheck_block_names() {
  static const std::vector<std::string> names{"mkdc", "mkir", "ca", "sa", "mkira", "gag", "net"};
  return names;
}

GradcheckReport gradcheck_block(const std::string& block, double eps, double tol,
                                std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  Initializer init(seed);
  BlockHyper hyper;
  const KernelSet kernels{1, 3, 5};
  const Index per_leaf = 6;

  auto input = [&](const Shape4& s) {
    return Var<double>::parameter(Tensor4<double>::uniform(s, -1.0, 1.0, rng()));
  };
  auto weights = [&](const Shape4& s) { return Tensor4<double>::uniform(s, -1.0, 1.0, rng()); };

  std::vector<GradProbe> probes;
  std::function<Var<double>()> f;

  // Blocks live in shared_ptrs so the closure outlives this scope safely.
  if (block == "mkdc") {
    auto b = std::make_shared<Mkdc<double>>(4, kernels, hyper, init);
    const Shape4 s{1, 4, 8, 8};
    auto x = input(s);
    const auto r = weights(s);
    add_params(*b, "mkdc", probes, rng(), per_leaf, rng);
    probes.push_back({"x", x, sample_coords(s.size(), 48, rng)});
    f = [b, x, r] { return weighted_sum(b->forward(x, Mode::train), r); };
  } else if (block == "mkir") {
    auto b = std::make_shared<Mkir<double>>(3, 3, kernels, hyper, true, init);
    const Shape4 s{1, 3, 8, 8};
    auto x = input(s);
    const auto r = weights(s);
    add_params(*b, "mkir", probes, rng(), per_leaf, rng);
    probes.push_back({"x", x, sample_coords(s.size(), 48, rng)});
    f = [b, x, r] { return weighted_sum(b->forward(x, Mode::train), r); };
  } else if (block == "ca") {
    auto b = std::make_shared<ChannelAttention<double>>(8, hyper, init);
    const Shape4 s{1, 8, 6, 6};
    auto x = input(s);
    const auto r = weights(s);
    add_params(*b, "ca", probes, rng(), per_leaf, rng);
    probes.push_back({"x", x, sample_coords(s.size(), 64, rng)});
    f = [b, x, r] { return weighted_sum(b->forward(x), r); };
  } else if (block == "sa") {
    auto b = std::make_shared<SpatialAttention<double>>(hyper, init);
    const Shape4 s{1, 4, 8, 8};
    auto x = input(s);
    const auto r = weights(s);
    add_params(*b, "sa", probes, rng(), 16, rng);
    probes.push_back({"x", x, sample_coords(s.size(), 64, rng)});
    f = [b, x, r] { return weighted_sum(b->forward(x), r); };
  } else if (block == "mkira") {
    auto b = std::make_shared<Mkira<double>>(4, 4, kernels, hyper, true, init);
    const Shape4 s{1, 4, 8, 8};
    auto x = input(s);
    const auto r = weights(s);
    add_params(*b, "mkira", probes, rng(), per_leaf, rng);
    probes.push_back({"x", x, sample_coords(s.size(), 48, rng)});
    f = [b, x, r] { return weighted_sum(b->forward(x, Mode::train), r); };
  } else if (block == "gag") {
    auto b = std::make_shared<AttentionGate<double>>(4, GateKind::gag, hyper, init);
    const Shape4 s{1, 4, 8, 8};
    auto g = input(s);
    auto x = input(s);
    const auto r = weights(s);
    add_params(*b, "gag", probes, rng(), per_leaf, rng);
    probes.push_back({"g", g, sample_coords(s.size(), 32, rng)});
    probes.push_back({"x", x, sample_coords(s.size(), 32, rng)});
    f = [b, g, x, r] { return weighted_sum(b->forward(g, x, Mode::train), r); };
  } else if (block == "net") {
    // Batch of four: train-mode BN at the 1x1 bottleneck normalises over the
    // batch alone, and two values would collapse to +-1.
    auto net = std::make_shared<Network<double>>(preset("t"), seed);
    const Shape4 s{4, 3, 32, 32};
    auto x = input(s);
    Randomizer r(rng());
    net->visit(r);
    for (auto& [path, p] : r.params) {
      probes.push_back({path, p, sample_coords(p.value().size(), 2, rng)});
    }
    probes.push_back({"x", x, sample_coords(s.size(), 24, rng)});
    const auto r1 = weights({4, 1, 32, 32});
    const auto r2 = weights({4, 1, 16, 16});
    const auto r3 = weights({4, 1, 8, 8});
    const auto r4 = weights({4, 1, 4, 4});
    f = [net, x, r1, r2, r3, r4] {
      const auto out = net->forward(x, Mode::train);
      Var<double> total = weighted_sum(out.p1, r1);
      total = add(total, weighted_sum(out.p2, r2));
      total = add(total, weighted_sum(out.p3, r3));
      return add(total, weighted_sum(out.p4, r4));
    };
  } else {
    throw std::invalid_argument("unknown gradcheck block '" + block + "'");
  }
  return finite_diff_check(f, probes, eps, tol);
}

}  // namespace mkunet
