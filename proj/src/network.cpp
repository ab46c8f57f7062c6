#include "mkunet/network.hpp"

#include <map>

namespace mkunet {

void VariantConfig::validate() const {
  for (Index c : channels) {
    if (c < 1) throw std::invalid_argument("channel widths must be positive");
  }
  if (in_channels < 1) throw std::invalid_argument("in_channels must be positive");
  hyper.validate();
}

VariantConfig preset(const std::string& name) {
  static const std::map<std::string, std::array<Index, 5>> table{
      {"t", {4, 8, 16, 24, 32}},
      {"s", {8, 16, 32, 48, 80}},
      {"std", {16, 32, 64, 96, 160}},
      {"m", {32, 64, 128, 192, 320}},
      {"l", {64, 128, 256, 384, 512}},
  };
  const auto it = table.find(name);
  if (it == table.end()) throw std::invalid_argument("unknown variant '" + name + "'");
  VariantConfig cfg;
  cfg.channels = it->second;
  return cfg;
}

std::array<Index, 5> channel_ladder(const std::vector<Index>& channels) {
  if (channels.size() != 5) {
    throw std::invalid_argument("channel list must have exactly 5 entries, got " +
                                std::to_string(channels.size()));
  }
  std::array<Index, 5> out{};
  std::copy(channels.begin(), channels.end(), out.begin());
  return out;
}

std::string to_string(GateKind kind) {
  switch (kind) {
    case GateKind::gag: return "gag";
    case GateKind::ag: return "ag";
    case GateKind::none: return "none";
  }
  return "?";
}

std::string to_string(EncoderBlock kind) { return kind == EncoderBlock::mkir ? "mkir" : "mkira"; }

GateKind parse_gate(const std::string& s) {
  if (s == "gag") return GateKind::gag;
  if (s == "ag") return GateKind::ag;
  if (s == "none") return GateKind::none;
  throw std::invalid_argument("unknown gate '" + s + "'");
}

EncoderBlock parse_encoder(const std::string& s) {
  if (s == "mkir") return EncoderBlock::mkir;
  if (s == "mkira") return EncoderBlock::mkira;
  throw std::invalid_argument("unknown encoder block '" + s + "'");
}

void check_input_dims(Index h, Index w) {
  if (h < kSpatialMultiple || w < kSpatialMultiple || h % kSpatialMultiple != 0 ||
      w % kSpatialMultiple != 0) {
    auto pad = [](Index v) {
      const Index target = std::max(kSpatialMultiple, (v + kSpatialMultiple - 1) /
                                                          kSpatialMultiple * kSpatialMultiple);
      return target - v;
    };
    throw ShapeError("input " + std::to_string(h) + "x" + std::to_string(w) +
                     " must be a multiple of " + std::to_string(kSpatialMultiple) +
                     " (pad by " + std::to_string(pad(h)) + " rows and " +
                     std::to_string(pad(w)) + " cols)");
  }
}

template <typename Scalar>
Index NetworkState<Scalar>::element_count(bool learnable_only) const {
  Index total = 0;
  for (const auto& e : entries)
    if (e.learnable || !learnable_only) total += e.tensor.size();
  return total;
}

template <typename Scalar>
Network<Scalar>::Network(const VariantConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Initializer init(seed);
  const auto& C = cfg_.channels;
  const auto& K = cfg_.kernels;
  const auto& H = cfg_.hyper;

  Index prev = cfg_.in_channels;
  for (Index c : C) {
    if (cfg_.encoder_block == EncoderBlock::mkir) {
      encoder.emplace_back(std::in_place_type<Mkir<Scalar>>, prev, c, K, H, cfg_.shortcut, init);
    } else {
      encoder.emplace_back(std::in_place_type<Mkira<Scalar>>, prev, c, K, H, cfg_.shortcut, init);
    }
    prev = c;
  }
  // Decoder stage i maps C_i -> C_{i-1} (stage 1 keeps C_1).
  for (int i = 4; i >= 0; --i) {
    const Index out = i > 0 ? C[static_cast<std::size_t>(i - 1)] : C[0];
    decoder.emplace_back(C[static_cast<std::size_t>(i)], out, K, H, cfg_.shortcut, init);
  }
  for (int i = 3; i >= 0; --i) {
    if (cfg_.gate == GateKind::none) {
      gates.emplace_back(std::nullopt);
    } else {
      gates.emplace_back(std::in_place, C[static_cast<std::size_t>(i)], cfg_.gate, H, init);
    }
  }
  // Heads sit on the upsampled outputs of decoder stages 4..1.
  for (int i = 2; i >= -1; --i) heads.emplace_back(C[static_cast<std::size_t>(std::max(i, 0))], init);
}

template <typename Scalar>
SegOutputs<Scalar> Network<Scalar>::forward(const Var<Scalar>& image, Mode mode) {
  const Shape4 s = image.shape();
  if (s.c != cfg_.in_channels) {
    throw ShapeError("network expects " + std::to_string(cfg_.in_channels) +
                     " input channels, got " + s.str());
  }
  check_input_dims(s.h, s.w);

  // Encoder: every stage is followed by 2x2 max pooling; the pooled outputs of
  // stages 1..4 are the skips (H/2 .. H/16), stage 5 pools to the H/32 bottleneck.
  std::vector<Var<Scalar>> skips;
  Var<Scalar> x = image;
  for (auto& stage : encoder) {
    x = std::visit([&](auto& block) { return block.forward(x, mode); }, stage);
    x = max_pool_2x2(x);
    skips.push_back(x);
  }
  skips.pop_back();

  // Decoder: refine, upsample 2x, gate the matching skip and add.
  std::vector<Var<Scalar>> stage_out;  // upsampled outputs of decoder stages 5..1
  Var<Scalar> d = decoder[0].forward(x, mode);
  Var<Scalar> u = upsample_2x(d);
  stage_out.push_back(u);
  for (std::size_t j = 0; j < 4; ++j) {
    const Var<Scalar>& skip = skips[3 - j];
    Var<Scalar> fused = gates[j] ? add(gates[j]->forward(u, skip, mode), u) : add(skip, u);
    d = decoder[j + 1].forward(fused, mode);
    u = upsample_2x(d);
    stage_out.push_back(u);
  }
  SegOutputs<Scalar> out;
  out.p4 = heads[0].forward(stage_out[1]);
  out.p3 = heads[1].forward(stage_out[2]);
  out.p2 = heads[2].forward(stage_out[3]);
  out.p1 = heads[3].forward(stage_out[4]);
  return out;
}

template <typename Scalar>
void Network<Scalar>::visit(ParamVisitor<Scalar>& v) {
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    const std::string prefix = "enc" + std::to_string(i + 1);
    std::visit([&](auto& block) { block.visit(prefix, v); }, encoder[i]);
  }
  for (std::size_t i = 0; i < decoder.size(); ++i) decoder[i].visit("dec" + std::to_string(5 - i), v);
  for (std::size_t i = 0; i < gates.size(); ++i)
    if (gates[i]) gates[i]->visit("gate" + std::to_string(4 - i), v);
  for (std::size_t i = 0; i < heads.size(); ++i) heads[i].visit("head" + std::to_string(4 - i), v);
}

namespace {

template <typename Scalar>
class Collector : public ParamVisitor<Scalar> {
 public:
  std::vector<std::pair<std::string, Var<Scalar>>> params;
  NetworkState<Scalar> state;
  bool with_buffers = false;

  void parameter(const std::string& path, Var<Scalar>& p) override {
    params.emplace_back(path, p);
    if (with_buffers) state.entries.push_back({path, p.value(), true});
  }
  void buffer(const std::string& path, Tensor4<Scalar>& b) override {
    if (with_buffers) state.entries.push_back({path, b, false});
  }
};

template <typename Scalar>
class Loader : public ParamVisitor<Scalar> {
 public:
  explicit Loader(const NetworkState<Scalar>& s) : state_(s) {}

  void parameter(const std::string& path, Var<Scalar>& p) override { assign(path, p.value(), true); }
  void buffer(const std::string& path, Tensor4<Scalar>& b) override { assign(path, b, false); }
  void finish() const {
    if (next_ != state_.entries.size()) {
      throw ShapeError("state has " + std::to_string(state_.entries.size() - next_) +
                       " unexpected trailing tensors");
    }
  }

 private:
  void assign(const std::string& path, Tensor4<Scalar>& dst, bool learnable) {
    if (next_ >= state_.entries.size()) throw ShapeError("state is missing tensor " + path);
    const auto& e = state_.entries[next_++];
    if (e.path != path || e.learnable != learnable) {
      throw ShapeError("state tensor '" + e.path + "' where '" + path + "' was expected");
    }
    if (e.tensor.shape() != dst.shape()) {
      throw ShapeError("tensor " + path + " has shape " + e.tensor.shape().str() +
                       ", network expects " + dst.shape().str());
    }
    dst = e.tensor;
  }

  const NetworkState<Scalar>& state_;
  std::size_t next_ = 0;
};

}  // namespace

template <typename Scalar>
std::vector<std::pair<std::string, Var<Scalar>>> Network<Scalar>::parameters() {
  Collector<Scalar> c;
  visit(c);
  return std::move(c.params);
}

template <typename Scalar>
Index Network<Scalar>::parameter_count() {
  Index total = 0;
  for (auto& [path, p] : parameters()) total += p.value().size();
  return total;
}

template <typename Scalar>
void Network<Scalar>::zero_grad() {
  for (auto& [path, p] : parameters()) p.zero_grad();
}

template <typename Scalar>
NetworkState<Scalar> Network<Scalar>::state() {
  Collector<Scalar> c;
  c.with_buffers = true;
  visit(c);
  return std::move(c.state);
}

template <typename Scalar>
void Network<Scalar>::load_state(const NetworkState<Scalar>& s) {
  Loader<Scalar> loader(s);
  visit(loader);
  loader.finish();
}

template struct NetworkState<float>;
template struct NetworkState<double>;
template class Network<float>;
template class Network<double>;

}  // namespace mkunet
