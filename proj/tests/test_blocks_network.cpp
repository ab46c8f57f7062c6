#include <map>
#include <set>

#include "doctest.h"
#include "mkunet/complexity.hpp"
#include "mkunet/network.hpp"

using namespace mkunet;

namespace {

using T = Tensor4<double>;
using V = Var<double>;

class Zeroer : public ParamVisitor<double> {
 public:
  void parameter(const std::string&, V& p) override { p.value().set_zero(); }
  void buffer(const std::string&, T&) override {}
};

double max_abs_diff(const T& a, const T& b) {
  REQUIRE(a.shape() == b.shape());
  return (a.array() - b.array()).abs().maxCoeff();
}

// Conv MACs read off a materialised forward tape: every conv2d node costs
// (output elements per sample) x (input channels per group) x k^2.
std::int64_t tape_macs(Network<float>& net, Index h, Index w) {
  const auto out = net.forward(Tensor4<float>(Shape4{1, net.config().in_channels, h, w}), Mode::eval);
  const Var<float> all = add(add(sum(out.p1), sum(out.p2)), add(sum(out.p3), sum(out.p4)));
  std::int64_t total = 0;
  for (const auto* node : tape_order(all)) {
    if (std::string(node->op) != "conv2d") continue;
    const Shape4 ws = node->inputs[1]->value.shape();
    // Channel-attention MLP on pooled descriptors is outside the convention.
    if (node->inputs[0]->value.shape().plane() == 1) continue;
    total += node->value.size() * ws.c * ws.h * ws.w;
  }
  return total;
}

}  // namespace

TEST_CASE("kernel set and hyper validation") {
  CHECK_NOTHROW(KernelSet({1, 3, 5}));
  CHECK_NOTHROW(KernelSet({3, 3}));
  CHECK_THROWS_AS(KernelSet(std::vector<int>{}), std::invalid_argument);
  CHECK_THROWS_AS(KernelSet({2}), std::invalid_argument);
  CHECK_THROWS_AS(KernelSet({9}), std::invalid_argument);
  CHECK(KernelSet({1, 3, 5}).max() == 5);
  CHECK(ca_reduced_width(8, 16) == 1);
  CHECK(ca_reduced_width(160, 16) == 10);
}

TEST_CASE("zero-weight attention blocks halve their input exactly") {
  BlockHyper hyper;
  Initializer init(1);
  const T x = T::uniform({2, 16, 6, 6}, -3, 3, 5);
  T half = x;
  half.array() *= 0.5;

  ChannelAttention<double> ca(16, hyper, init);
  Zeroer z;
  ca.visit("ca", z);
  CHECK(max_abs_diff(ca.forward(V(x)).value(), half) == 0.0);

  SpatialAttention<double> sa(hyper, init);
  sa.visit("sa", z);
  CHECK(max_abs_diff(sa.forward(V(x)).value(), half) == 0.0);

  for (Mode mode : {Mode::train, Mode::eval}) {
    AttentionGate<double> gag(16, GateKind::gag, hyper, init);
    gag.visit("gag", z);
    const T g = T::uniform({2, 16, 6, 6}, -1, 1, 6);
    CHECK(max_abs_diff(gag.forward(V(g), V(x), mode).value(), half) == 0.0);
  }
}

TEST_CASE("attention coefficients lie in (0,1)") {
  BlockHyper hyper;
  Initializer init(2);
  const V x(T::uniform({1, 8, 5, 5}, -2, 2, 7));
  ChannelAttention<double> ca(8, hyper, init);
  SpatialAttention<double> sa(hyper, init);
  const T c = ca.coefficients(x).value();
  const T s = sa.coefficients(x).value();
  CHECK(c.shape() == Shape4{1, 8, 1, 1});
  CHECK(s.shape() == Shape4{1, 1, 5, 5});
  CHECK(((c.array() > 0) && (c.array() < 1)).all());
  CHECK(((s.array() > 0) && (s.array() < 1)).all());
}

TEST_CASE("mkira equals mkir after sa after ca, bit for bit") {
  BlockHyper hyper;
  Initializer init(3);
  Mkira<double> block(8, 4, {1, 3, 5}, hyper, true, init);
  const V x(T::uniform({2, 8, 8, 8}, -1, 1, 8));
  const T fused = block.forward(x, Mode::eval).value();
  const T manual = block.mkir.forward(block.sa.forward(block.ca.forward(x)), Mode::eval).value();
  CHECK(max_abs_diff(fused, manual) == 0.0);
}

TEST_CASE("mkir shortcut and shapes") {
  BlockHyper hyper;
  Initializer init(4);
  Mkir<double> same(4, 4, {1, 3, 5}, hyper, true, init);
  Mkir<double> wider(4, 6, {1, 3, 5}, hyper, true, init);
  Mkir<double> off(4, 4, {1, 3, 5}, hyper, false, init);
  CHECK(same.shortcut);
  CHECK_FALSE(wider.shortcut);
  CHECK_FALSE(off.shortcut);
  const V x(T::uniform({1, 4, 6, 6}, -1, 1, 9));
  CHECK(wider.forward(x, Mode::train).shape() == Shape4{1, 6, 6, 6});
  // With the shortcut, zeroing the project BN gamma/beta leaves the identity.
  Zeroer z;
  same.project_norm.visit("p", z);
  CHECK(max_abs_diff(same.forward(x, Mode::train).value(), x.value()) == 0.0);
  CHECK_THROWS_AS(Mkdc<double>(5, {3}, hyper, init), ShapeError);
}

TEST_CASE("gate rejects mismatched inputs") {
  BlockHyper hyper;
  Initializer init(5);
  AttentionGate<double> gag(4, GateKind::gag, hyper, init);
  CHECK_THROWS_AS(gag.forward(V(T({1, 4, 4, 4})), V(T({1, 4, 8, 8})), Mode::eval), ShapeError);
}

TEST_CASE("closed-form block parameter counts match materialised blocks") {
  BlockHyper hyper;
  Initializer init(6);
  struct Count : ParamVisitor<double> {
    std::int64_t n = 0;
    void parameter(const std::string&, V& p) override { n += p.value().size(); }
    void buffer(const std::string&, T&) override {}
  };
  for (auto [cin, cout] : std::vector<std::pair<Index, Index>>{{3, 16}, {16, 16}, {160, 96}, {4, 8}}) {
    for (const KernelSet& k : {KernelSet{1, 3, 5}, KernelSet{3}, KernelSet{1, 3}}) {
      Mkir<double> a(cin, cout, k, hyper, true, init);
      Mkira<double> b(cin, cout, k, hyper, true, init);
      Count ca, cb;
      a.visit("a", ca);
      b.visit("b", cb);
      CHECK(ca.n == mkir_param_count(cin, cout, k, hyper));
      CHECK(cb.n == mkira_param_count(cin, cout, k, hyper));
    }
  }
  for (Index c : {4, 16, 96}) {
    for (GateKind kind : {GateKind::gag, GateKind::ag}) {
      AttentionGate<double> g(c, kind, hyper, init);
      Count cnt;
      g.visit("g", cnt);
      CHECK(cnt.n == gate_param_count(c, kind, hyper));
    }
  }
}

TEST_CASE("network output shapes and input checks") {
  Network<float> net(preset("t"), 1);
  const auto out = net.forward(Tensor4<float>(Shape4{2, 3, 64, 96}), Mode::train);
  CHECK(out.p1.shape() == Shape4{2, 1, 64, 96});
  CHECK(out.p2.shape() == Shape4{2, 1, 32, 48});
  CHECK(out.p3.shape() == Shape4{2, 1, 16, 24});
  CHECK(out.p4.shape() == Shape4{2, 1, 8, 12});
  CHECK_THROWS_AS(net.forward(Tensor4<float>(Shape4{1, 3, 48, 64}), Mode::eval), ShapeError);
  CHECK_THROWS_AS(net.forward(Tensor4<float>(Shape4{1, 1, 64, 64}), Mode::eval), ShapeError);
  try {
    check_input_dims(48, 70);
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("pad by 16 rows and 26 cols") != std::string::npos);
  }
}

TEST_CASE("std preset at 256x256 gives the documented head resolutions") {
  Network<float> net(preset("std"), 0);
  NoGradGuard no_grad;
  const auto out = net.forward(Tensor4<float>(Shape4{1, 3, 256, 256}), Mode::eval);
  CHECK(out.p1.shape() == Shape4{1, 1, 256, 256});
  CHECK(out.p2.shape() == Shape4{1, 1, 128, 128});
  CHECK(out.p3.shape() == Shape4{1, 1, 64, 64});
  CHECK(out.p4.shape() == Shape4{1, 1, 32, 32});
}

TEST_CASE("parameter paths are ordered and unique") {
  VariantConfig cfg = preset("t");
  Network<float> net(cfg, 0);
  std::vector<std::string> order;
  std::set<std::string> uniq;
  for (auto& [path, p] : net.parameters()) {
    order.push_back(path);
    uniq.insert(path);
  }
  CHECK(uniq.size() == order.size());
  CHECK(order.front().rfind("enc1.", 0) == 0);
  CHECK(order.back() == "head1.bias");
  auto first = [&](const std::string& prefix) {
    for (std::size_t i = 0; i < order.size(); ++i)
      if (order[i].rfind(prefix, 0) == 0) return i;
    return order.size();
  };
  CHECK(first("enc5.") < first("dec5."));
  CHECK(first("dec5.") < first("dec1."));
  CHECK(first("dec1.") < first("gate4."));
  CHECK(first("gate4.") < first("gate1."));
  CHECK(first("gate1.") < first("head4."));
  cfg.gate = GateKind::none;
  Network<float> no_gate(cfg, 0);
  for (auto& [path, p] : no_gate.parameters()) CHECK(path.rfind("gate", 0) != 0);
}

TEST_CASE("initialisation is deterministic per seed") {
  Network<float> a(preset("t"), 7);
  Network<float> b(preset("t"), 7);
  Network<float> c(preset("t"), 8);
  auto pa = a.parameters();
  auto pb = b.parameters();
  auto pc = c.parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK((pa[i].second.value().array() == pb[i].second.value().array()).all());
    any_diff = any_diff || !(pa[i].second.value().array() == pc[i].second.value().array()).all();
    const auto& path = pa[i].first;
    const auto& v = pa[i].second.value();
    if (path.ends_with(".gamma")) CHECK((v.array() == 1.0f).all());
    if (path.ends_with(".beta") || path.ends_with(".bias")) CHECK((v.array() == 0.0f).all());
  }
  CHECK(any_diff);
}

TEST_CASE("a p1 loss reaches every parameter except the auxiliary heads") {
  Network<float> net(preset("t"), 3);
  const auto out = net.forward(Tensor4<float>::uniform({2, 3, 32, 32}, 0, 1, 4), Mode::train);
  backward(sum(hadamard(out.p1, Var<float>(Tensor4<float>::uniform({2, 1, 32, 32}, -1, 1, 5)))));
  for (auto& [path, p] : net.parameters()) {
    CAPTURE(path);
    const bool aux = path.rfind("head", 0) == 0 && path.rfind("head1.", 0) != 0;
    CHECK(p.has_grad() == !aux);
  }
}

TEST_CASE("symbolic parameter counts equal materialised totals for all presets") {
  const std::map<std::string, std::int64_t> frozen{
      {"t", 25313}, {"s", 81695}, {"std", 268266}, {"m", 958465}, {"l", 3085671}};
  for (const auto& [name, expect] : frozen) {
    CAPTURE(name);
    const VariantConfig cfg = preset(name);
    Network<float> net(cfg, 0);
    CHECK(count_params(cfg).total_params == net.parameter_count());
    CHECK(net.parameter_count() == expect);
    CHECK(net.state().element_count() == net.parameter_count());
  }
}

TEST_CASE("symbolic MAC counts equal conv work on the materialised tape") {
  for (const char* name : {"t", "s", "std"}) {
    for (GateKind gate : {GateKind::gag, GateKind::ag, GateKind::none}) {
      for (EncoderBlock enc : {EncoderBlock::mkir, EncoderBlock::mkira}) {
        VariantConfig cfg = preset(name);
        cfg.gate = gate;
        cfg.encoder_block = enc;
        Network<float> net(cfg, 0);
        CAPTURE(name);
        CHECK(count_macs(cfg, 64, 96).total_macs == tape_macs(net, 64, 96));
        CHECK(count_params(cfg).total_params == net.parameter_count());
      }
    }
  }
  VariantConfig k3 = preset("std");
  k3.kernels = KernelSet{3};
  Network<float> net(k3, 0);
  CHECK(count_macs(k3, 64, 64).total_macs == tape_macs(net, 64, 64));
}

TEST_CASE("state round trip through load_state") {
  Network<float> a(preset("t"), 1);
  Network<float> b(preset("t"), 2);
  b.load_state(a.state());
  const auto x = Tensor4<float>::uniform({1, 3, 32, 32}, 0, 1, 3);
  NoGradGuard no_grad;
  CHECK((a.forward(x, Mode::eval).p1.value().array() == b.forward(x, Mode::eval).p1.value().array()).all());
  Network<float> c(preset("s"), 0);
  CHECK_THROWS_AS(c.load_state(a.state()), ShapeError);
}

TEST_CASE("preset and parser errors") {
  CHECK_THROWS_AS(preset("q"), std::invalid_argument);
  CHECK_THROWS_AS(channel_ladder({1, 2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(parse_gate("x"), std::invalid_argument);
  CHECK(parse_encoder("mkira") == EncoderBlock::mkira);
}
