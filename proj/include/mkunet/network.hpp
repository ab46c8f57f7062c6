#pragma once

#include <array>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "mkunet/blocks.hpp"

namespace mkunet {

enum class EncoderBlock { mkir, mkira };

struct VariantConfig {
  std::array<Index, 5> channels{16, 32, 64, 96, 160};
  KernelSet kernels{1, 3, 5};
  BlockHyper hyper{};
  EncoderBlock encoder_block = EncoderBlock::mkir;
  GateKind gate = GateKind::gag;
  Index in_channels = 3;
  bool shortcut = true;

  void validate() const;
  friend bool operator==(const VariantConfig&, const VariantConfig&) = default;
};

/// Size presets: "t", "s", "std", "m", "l".
VariantConfig preset(const std::string& name);

/// Channel list from a vector; throws unless it has exactly five entries.
std::array<Index, 5> channel_ladder(const std::vector<Index>& channels);

std::string to_string(GateKind kind);
std::string to_string(EncoderBlock kind);
GateKind parse_gate(const std::string& s);
EncoderBlock parse_encoder(const std::string& s);

/// Input spatial dims must be a multiple of this (five 2x2 poolings).
inline constexpr Index kSpatialMultiple = 32;

/// Raw logits: p1 at input resolution, p2..p4 at 1/2, 1/4, 1/8.
template <typename Scalar>
struct SegOutputs {
  Var<Scalar> p1;
  Var<Scalar> p2;
  Var<Scalar> p3;
  Var<Scalar> p4;
};

/// Snapshot of every learnable tensor and BN running statistic, in path order.
template <typename Scalar>
struct NetworkState {
  struct Entry {
    std::string path;
    Tensor4<Scalar> tensor;
    bool learnable;
  };
  std::vector<Entry> entries;

  [[nodiscard]] Index element_count(bool learnable_only = true) const;
};

template <typename Scalar>
class Network {
 public:
  using Stage = std::variant<Mkir<Scalar>, Mkira<Scalar>>;

  Network(const VariantConfig& cfg, std::uint64_t seed);
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const VariantConfig& config() const { return cfg_; }

  /// image: (n, in_channels, H, W) with H, W multiples of 32.
  SegOutputs<Scalar> forward(const Var<Scalar>& image, Mode mode);
  SegOutputs<Scalar> forward(const Tensor4<Scalar>& image, Mode mode) {
    return forward(Var<Scalar>(image), mode);
  }

  void visit(ParamVisitor<Scalar>& v);
  std::vector<std::pair<std::string, Var<Scalar>>> parameters();
  Index parameter_count();
  void zero_grad();

  NetworkState<Scalar> state();
  /// Copies `s` into this network; paths and shapes must match exactly.
  void load_state(const NetworkState<Scalar>& s);

  // Exposed for ablations and tests.
  std::vector<Stage> encoder;                         // stages 1..5
  std::vector<Mkira<Scalar>> decoder;                 // stages 5..1
  std::vector<std::optional<AttentionGate<Scalar>>> gates;  // gates 4..1
  std::vector<SegHead<Scalar>> heads;                 // heads 4..1

 private:
  VariantConfig cfg_;
};

/// Spatial dims check shared by forward and the CLI.
void check_input_dims(Index h, Index w);

extern template class Network<float>;
extern template class Network<double>;

}  // namespace mkunet
