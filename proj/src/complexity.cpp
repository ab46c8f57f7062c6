#include "mkunet/complexity.hpp"

#include <cstdio>
#include <sstream>

#include "json.hpp"

namespace mkunet {

namespace {

class Counter {
 public:
  Counter(const VariantConfig& cfg, Index h, Index w) : cfg_(cfg), h_(h), w_(w) {}

  std::vector<ComplexityReport::Row> rows;

  // One conv layer applied `uses` times at output resolution (oh, ow).
  void conv(const std::string& path, Index c_in, Index c_out, Index k, Index groups, bool bias,
            Index oh, Index ow, Index uses = 1) {
    const std::int64_t weights = c_out * (c_in / groups) * k * k;
    rows.push_back({path, weights + (bias ? c_out : 0), uses * oh * ow * weights});
  }
  void bn(const std::string& path, Index c) { rows.push_back({path, 2 * c, 0}); }

  void mkir(const std::string& p, Index c_in, Index c_out, Index oh, Index ow) {
    const Index hidden = c_in * cfg_.hyper.expansion;
    conv(p + ".expand", c_in, hidden, 1, 1, false, oh, ow);
    bn(p + ".expand_norm", hidden);
    const auto& ks = cfg_.kernels.sizes();
    for (std::size_t i = 0; i < ks.size(); ++i) {
      conv(p + ".mkdc.dw" + std::to_string(i), hidden, hidden, ks[i], hidden, false, oh, ow);
      bn(p + ".mkdc.bn" + std::to_string(i), hidden);
    }
    conv(p + ".project", hidden, c_out, 1, 1, false, oh, ow);
    bn(p + ".project_norm", c_out);
  }

  void mkira(const std::string& p, Index c_in, Index c_out, Index oh, Index ow) {
    const Index r = ca_reduced_width(c_in, cfg_.hyper.ca_reduction);
    // The shared MLP acts on pooled 1x1 descriptors; its cost does not scale
    // with the image and is counted with the pooling, as zero.
    conv(p + ".ca.reduce", c_in, r, 1, 1, true, 1, 1, 0);
    conv(p + ".ca.restore", r, c_in, 1, 1, true, 1, 1, 0);
    conv(p + ".sa.conv", 2, 1, cfg_.hyper.sa_kernel, 1, true, oh, ow);
    mkir(p + ".mkir", c_in, c_out, oh, ow);
  }

  void gate(const std::string& p, Index c, Index oh, Index ow) {
    const bool ag = cfg_.gate == GateKind::ag;
    const Index k = ag ? 1 : cfg_.hyper.gag_kernel;
    const Index groups = ag ? 1 : c;
    conv(p + ".gate_conv", c, c, k, groups, false, oh, ow);
    bn(p + ".gate_norm", c);
    conv(p + ".skip_conv", c, c, k, groups, false, oh, ow);
    bn(p + ".skip_norm", c);
    conv(p + ".psi", c, 1, 1, 1, true, oh, ow);
    bn(p + ".psi_norm", 1);
  }

  void network() {
    const auto& C = cfg_.channels;
    auto at = [this](int level) { return std::pair<Index, Index>{h_ >> level, w_ >> level}; };
    Index prev = cfg_.in_channels;
    for (int i = 0; i < 5; ++i) {
      const auto [oh, ow] = at(i);
      const std::string p = "enc" + std::to_string(i + 1);
      if (cfg_.encoder_block == EncoderBlock::mkir) {
        mkir(p, prev, C[i], oh, ow);
      } else {
        mkira(p, prev, C[i], oh, ow);
      }
      prev = C[i];
    }
    // Decoder stage i runs at level i (stage 5 on the H/32 bottleneck).
    for (int i = 5; i >= 1; --i) {
      const auto [oh, ow] = at(i);
      const Index out = i > 1 ? C[i - 2] : C[0];
      mkira("dec" + std::to_string(i), C[i - 1], out, oh, ow);
    }
    if (cfg_.gate != GateKind::none) {
      for (int i = 4; i >= 1; --i) {
        const auto [oh, ow] = at(i);
        gate("gate" + std::to_string(i), C[i - 1], oh, ow);
      }
    }
    // Head i reads the upsampled output of decoder stage i at level i-1.
    for (int i = 4; i >= 1; --i) {
      const auto [oh, ow] = at(i - 1);
      const Index c = i > 1 ? C[i - 2] : C[0];
      conv("head" + std::to_string(i), c, 1, 1, 1, true, oh, ow);
    }
  }

 private:
  const VariantConfig& cfg_;
  Index h_;
  Index w_;
};

ComplexityReport finish(std::vector<ComplexityReport::Row> rows) {
  ComplexityReport r;
  r.rows = std::move(rows);
  for (const auto& row : r.rows) {
    r.total_params += row.params;
    r.total_macs += row.macs;
  }
  return r;
}

}  // namespace

ComplexityReport count_params(const VariantConfig& cfg) {
  cfg.validate();
  Counter counter(cfg, 0, 0);
  counter.network();
  // Without an input size only parameters are meaningful.
  for (auto& row : counter.rows) row.macs = 0;
  return finish(std::move(counter.rows));
}

ComplexityReport count_macs(const VariantConfig& cfg, Index input_h, Index input_w) {
  cfg.validate();
  check_input_dims(input_h, input_w);
  Counter counter(cfg, input_h, input_w);
  counter.network();
  ComplexityReport r = finish(std::move(counter.rows));
  r.input = {input_h, input_w};
  return r;
}

std::int64_t mkir_param_count(Index c_in, Index c_out, const KernelSet& k, const BlockHyper& h) {
  const std::int64_t hidden = c_in * h.expansion;
  std::int64_t total = c_in * hidden + 2 * hidden;
  for (int ks : k.sizes()) total += static_cast<std::int64_t>(ks) * ks * hidden + 2 * hidden;
  return total + hidden * c_out + 2 * c_out;
}

std::int64_t mkira_param_count(Index c_in, Index c_out, const KernelSet& k, const BlockHyper& h) {
  const std::int64_t r = ca_reduced_width(c_in, h.ca_reduction);
  const std::int64_t ca = (c_in * r + r) + (r * c_in + c_in);
  const std::int64_t sa = 2LL * h.sa_kernel * h.sa_kernel + 1;
  return ca + sa + mkir_param_count(c_in, c_out, k, h);
}

std::int64_t gate_param_count(Index c, GateKind kind, const BlockHyper& h) {
  if (kind == GateKind::none) return 0;
  const std::int64_t path = kind == GateKind::ag ? c * c : c * h.gag_kernel * h.gag_kernel;
  return 2 * (path + 2 * c) + (c + 1) + 2;
}

namespace {
std::string fixed3(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}
}  // namespace

std::string render(const ComplexityReport& r, ReportFormat format) {
  if (format == ReportFormat::json) {
    nlohmann::json j;
    j["input"] = r.input ? nlohmann::json::array({r.input->first, r.input->second})
                         : nlohmann::json(nullptr);
    j["convention"] = "mac";
    j["rows"] = nlohmann::json::array();
    for (const auto& row : r.rows) {
      j["rows"].push_back({{"path", row.path}, {"params", row.params}, {"macs", row.macs}});
    }
    j["total_params"] = r.total_params;
    j["total_macs"] = r.total_macs;
    return j.dump(2) + "\n";
  }
  std::ostringstream os;
  os << "# convention: mac (1 multiply-accumulate = 1 FLOP, convolutions only)\n";
  if (r.input) os << "# input: " << r.input->first << "x" << r.input->second << "\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-36s %12s %16s\n", "layer", "params", "macs");
  os << line;
  for (const auto& row : r.rows) {
    std::snprintf(line, sizeof line, "%-36s %12lld %16lld\n", row.path.c_str(),
                  static_cast<long long>(row.params), static_cast<long long>(row.macs));
    os << line;
  }
  os << "total_params " << r.total_params << " (" << fixed3(r.total_params / 1e6) << "M)\n";
  if (r.input) os << "total_macs " << r.total_macs << " (" << fixed3(r.total_macs / 1e9) << "G)\n";
  return os.str();
}

ComplexityReport report_from_json(const std::string& doc) {
  const auto j = nlohmann::json::parse(doc);
  ComplexityReport r;
  if (!j.at("input").is_null()) {
    r.input = {j["input"].at(0).get<Index>(), j["input"].at(1).get<Index>()};
  }
  for (const auto& row : j.at("rows")) {
    r.rows.push_back({row.at("path").get<std::string>(), row.at("params").get<std::int64_t>(),
                      row.at("macs").get<std::int64_t>()});
  }
  r.total_params = j.at("total_params").get<std::int64_t>();
  r.total_macs = j.at("total_macs").get<std::int64_t>();
  return r;
}

}  // namespace mkunet
