#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mkunet/network.hpp"

namespace mkunet {

/// Layer-by-layer parameter and multiply-accumulate counts, derived
/// symbolically from a VariantConfig (nothing is materialised).
///
/// Convention: one MAC is reported as one FLOP and only convolutions are
/// counted; batch norm, activations, pooling and resizing cost zero, as does
/// the channel-attention MLP on its pooled 1x1 descriptors.
struct ComplexityReport {
  struct Row {
    std::string path;
    std::int64_t params = 0;
    std::int64_t macs = 0;
    friend bool operator==(const Row&, const Row&) = default;
  };

  std::vector<Row> rows;
  std::int64_t total_params = 0;
  std::int64_t total_macs = 0;
  std::optional<std::pair<Index, Index>> input;  // absent for parameter-only reports

  friend bool operator==(const ComplexityReport&, const ComplexityReport&) = default;
};

ComplexityReport count_params(const VariantConfig& cfg);
ComplexityReport count_macs(const VariantConfig& cfg, Index input_h, Index input_w);

/// Closed-form parameter counts of single blocks (used by tests and docs).
std::int64_t mkir_param_count(Index c_in, Index c_out, const KernelSet& k, const BlockHyper& h);
std::int64_t mkira_param_count(Index c_in, Index c_out, const KernelSet& k, const BlockHyper& h);
std::int64_t gate_param_count(Index channels, GateKind kind, const BlockHyper& h);

enum class ReportFormat { text, json };

std::string render(const ComplexityReport& r, ReportFormat format);
ComplexityReport report_from_json(const std::string& doc);

}  // namespace mkunet
