#include "mkunet/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include "json.hpp"

namespace mkunet {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

// ---- config ---------------------------------------------------------------

std::string config_to_json(const VariantConfig& cfg) {
  nlohmann::json j;
  j["channels"] = cfg.channels;
  j["kernels"] = cfg.kernels.sizes();
  j["encoder_block"] = to_string(cfg.encoder_block);
  j["gate"] = to_string(cfg.gate);
  j["in_channels"] = cfg.in_channels;
  j["shortcut"] = cfg.shortcut;
  j["hyper"] = {{"expansion", cfg.hyper.expansion},
                {"ca_reduction", cfg.hyper.ca_reduction},
                {"sa_kernel", cfg.hyper.sa_kernel},
                {"shuffle_groups", cfg.hyper.shuffle_groups},
                {"gag_kernel", cfg.hyper.gag_kernel},
                {"shuffle_enabled", cfg.hyper.shuffle_enabled}};
  return j.dump();
}

VariantConfig config_from_json(const std::string& doc) {
  try {
    const auto j = nlohmann::json::parse(doc);
    VariantConfig cfg;
    cfg.channels = channel_ladder(j.at("channels").get<std::vector<Index>>());
    cfg.kernels = KernelSet(j.at("kernels").get<std::vector<int>>());
    cfg.encoder_block = parse_encoder(j.at("encoder_block").get<std::string>());
    cfg.gate = parse_gate(j.at("gate").get<std::string>());
    cfg.in_channels = j.at("in_channels").get<Index>();
    cfg.shortcut = j.at("shortcut").get<bool>();
    const auto& h = j.at("hyper");
    cfg.hyper.expansion = h.at("expansion").get<int>();
    cfg.hyper.ca_reduction = h.at("ca_reduction").get<int>();
    cfg.hyper.sa_kernel = h.at("sa_kernel").get<int>();
    cfg.hyper.shuffle_groups = h.at("shuffle_groups").get<int>();
    cfg.hyper.gag_kernel = h.at("gag_kernel").get<int>();
    cfg.hyper.shuffle_enabled = h.at("shuffle_enabled").get<bool>();
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("invalid config block: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CorruptionError(std::string("invalid config block: ") + e.what());
  }
}

// ---- checkpoint -----------------------------------------------------------

namespace {

class Writer {
 public:
  std::vector<std::uint8_t> bytes;

  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

  template <typename T>
  T get(const char* what) {
    T v;
    std::memcpy(&v, take(sizeof(T), what), sizeof(T));
    return v;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CorruptionError(std::string("checkpoint truncated while reading ") + what);
    }
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  [[nodiscard]] bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(Network<float>& net) {
  Writer w;
  w.put_bytes("MKUN", 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string cfg = config_to_json(net.config());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cfg.size()));
  w.put_bytes(cfg.data(), cfg.size());
  const auto state = net.state();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(state.entries.size()));
  for (const auto& e : state.entries) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(e.path.size()));
    w.put_bytes(e.path.data(), e.path.size());
    w.put<std::uint8_t>(0);
    w.put<std::uint8_t>(4);
    const Shape4& s = e.tensor.shape();
    for (Index d : {s.n, s.c, s.h, s.w}) w.put<std::uint64_t>(static_cast<std::uint64_t>(d));
    w.put_bytes(e.tensor.data(), static_cast<std::size_t>(e.tensor.size()) * sizeof(float));
  }
  return std::move(w.bytes);
}

void save_checkpoint(Network<float>& net, const fs::path& path) {
  write_file(path, encode_checkpoint(net));
}

LoadedCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const std::uint8_t* magic = r.take(4, "magic");
  if (std::memcmp(magic, "MKUN", 4) != 0) throw CorruptionError("bad checkpoint magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw UnsupportedVersionError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto cfg_len = r.get<std::uint32_t>("config length");
  const auto* cfg_bytes = r.take(cfg_len, "config");
  VariantConfig cfg = config_from_json(std::string(reinterpret_cast<const char*>(cfg_bytes), cfg_len));

  NetworkState<float> state;
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = r.get<std::uint16_t>("tensor name length");
    const auto* name = r.take(name_len, "tensor name");
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != 0) throw CorruptionError("unsupported tensor dtype tag " + std::to_string(dtype));
    const auto rank = r.get<std::uint8_t>("rank");
    if (rank != 4) throw CorruptionError("tensor rank must be 4, got " + std::to_string(rank));
    std::array<Index, 4> dims{};
    for (auto& d : dims) {
      const auto v = r.get<std::uint64_t>("dims");
      if (v == 0 || v > (1ull << 32)) throw CorruptionError("invalid tensor dimension");
      d = static_cast<Index>(v);
    }
    const Shape4 shape{dims[0], dims[1], dims[2], dims[3]};
    const auto* data = r.take(static_cast<std::size_t>(shape.size()) * sizeof(float), "tensor data");
    Tensor4<float> tensor(shape);
    std::memcpy(tensor.data(), data, static_cast<std::size_t>(shape.size()) * sizeof(float));
    std::string path(reinterpret_cast<const char*>(name), name_len);
    const bool learnable = !(path.ends_with(".running_mean") || path.ends_with(".running_var"));
    state.entries.push_back({std::move(path), std::move(tensor), learnable});
  }
  if (!r.done()) throw CorruptionError("trailing bytes after checkpoint tensors");

  Network<float> net(cfg, 0);
  try {
    net.load_state(state);
  } catch (const ShapeError& e) {
    throw CorruptionError(std::string("checkpoint inconsistent with its config: ") + e.what());
  }
  return {cfg, std::move(net)};
}

LoadedCheckpoint load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

// ---- netpbm ---------------------------------------------------------------

namespace {

// Header tokens are separated by whitespace; '#' starts a comment to end of line.
std::string next_token(const std::vector<std::uint8_t>& b, std::size_t& pos) {
  for (;;) {
    while (pos < b.size() && std::isspace(b[pos])) ++pos;
    if (pos < b.size() && b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n' && b[pos] != '\r') ++pos;
      continue;
    }
    break;
  }
  std::string tok;
  while (pos < b.size() && !std::isspace(b[pos]) && b[pos] != '#') tok.push_back(static_cast<char>(b[pos++]));
  if (tok.empty()) throw CorruptionError("truncated netpbm header");
  return tok;
}

Index parse_positive(const std::string& tok, const char* what) {
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), ::isdigit)) {
    throw CorruptionError(std::string("invalid netpbm ") + what + " '" + tok + "'");
  }
  const long long v = std::stoll(tok);
  if (v <= 0) throw CorruptionError(std::string("netpbm ") + what + " must be positive");
  return static_cast<Index>(v);
}

}  // namespace

Image8 read_netpbm(const fs::path& path) {
  const auto b = read_file(path);
  std::size_t pos = 0;
  if (b.size() < 2 || b[0] != 'P') throw CorruptionError("not a netpbm file: " + path.string());
  const std::string magic = next_token(b, pos);
  Image8 img;
  if (magic == "P5") {
    img.channels = 1;
  } else if (magic == "P6") {
    img.channels = 3;
  } else {
    throw CorruptionError("unsupported netpbm format '" + magic + "' (need P5 or P6)");
  }
  img.width = parse_positive(next_token(b, pos), "width");
  img.height = parse_positive(next_token(b, pos), "height");
  const Index maxval = parse_positive(next_token(b, pos), "maxval");
  if (maxval != 255) throw CorruptionError("only maxval 255 is supported, got " + std::to_string(maxval));
  if (pos >= b.size() || !std::isspace(b[pos])) throw CorruptionError("truncated netpbm header");
  ++pos;  // single whitespace before the raster
  const auto need = static_cast<std::size_t>(img.channels * img.height * img.width);
  if (b.size() - pos < need) throw CorruptionError("truncated pixel data in " + path.string());
  img.pixels.assign(b.begin() + static_cast<std::ptrdiff_t>(pos),
                    b.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return img;
}

void write_netpbm(const Image8& img, const fs::path& path) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("netpbm needs 1 or 3 channels");
  const std::string header = (img.channels == 1 ? "P5\n" : "P6\n") + std::to_string(img.width) +
                             " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), img.pixels.begin(), img.pixels.end());
  write_file(path, bytes);
}

Tensor4<float> read_image(const fs::path& path) {
  const Image8 img = read_netpbm(path);
  Tensor4<float> t(Shape4{1, 3, img.height, img.width});
  for (Index i = 0; i < img.height * img.width; ++i) {
    for (Index c = 0; c < 3; ++c) {
      const Index src = img.channels == 1 ? i : i * 3 + c;
      t.plane(0, c)[i] = static_cast<float>(img.pixels[static_cast<std::size_t>(src)]) / 255.0f;
    }
  }
  return t;
}

Tensor4<float> read_mask(const fs::path& path) {
  const Image8 img = read_netpbm(path);
  Tensor4<float> t(Shape4{1, 1, img.height, img.width});
  for (Index i = 0; i < img.height * img.width; ++i) {
    const Index src = img.channels == 1 ? i : i * 3;
    t[i] = img.pixels[static_cast<std::size_t>(src)] > 127 ? 1.0f : 0.0f;
  }
  return t;
}

void write_mask(const Tensor4<float>& values, const fs::path& path, bool as_binary, double threshold) {
  const Shape4 s = values.shape();
  if (s.n != 1 || s.c != 1) throw ShapeError("write_mask expects (1,1,h,w), got " + s.str());
  Image8 img{1, s.h, s.w, std::vector<std::uint8_t>(static_cast<std::size_t>(s.plane()))};
  for (Index i = 0; i < s.plane(); ++i) {
    const double v = values[i];
    const double scaled = as_binary ? (v > threshold ? 255.0 : 0.0)
                                    : std::round(255.0 * std::clamp(v, 0.0, 1.0));
    img.pixels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(scaled);
  }
  write_netpbm(img, path);
}

void write_image(const Tensor4<float>& image, const fs::path& path, bool color) {
  const Shape4 s = image.shape();
  const Index ch = color ? 3 : 1;
  if (s.n != 1 || s.c < ch) throw ShapeError("write_image got shape " + s.str());
  Image8 img{ch, s.h, s.w, std::vector<std::uint8_t>(static_cast<std::size_t>(ch * s.plane()))};
  for (Index i = 0; i < s.plane(); ++i) {
    for (Index c = 0; c < ch; ++c) {
      const double v = std::clamp(static_cast<double>(image.plane(0, c)[i]), 0.0, 1.0);
      img.pixels[static_cast<std::size_t>(i * ch + c)] = static_cast<std::uint8_t>(std::round(255.0 * v));
    }
  }
  write_netpbm(img, path);
}

// ---- datasets -------------------------------------------------------------

namespace {

std::map<std::string, fs::path> stems_in(const fs::path& dir, const std::set<std::string>& exts) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension().string();
    if (exts.contains(ext)) out.emplace(entry.path().stem().string(), entry.path());
  }
  return out;
}

}  // namespace

std::vector<SamplePaths> dataset_scan(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  const auto images = stems_in(dir / "images", {".pgm", ".ppm"});
  const auto masks = stems_in(dir / "masks", {".pgm"});
  std::vector<std::string> orphans;
  std::vector<SamplePaths> out;
  for (const auto& [stem, path] : images) {
    const auto it = masks.find(stem);
    if (it == masks.end()) {
      orphans.push_back("image without mask: " + stem);
    } else {
      out.push_back({stem, path, it->second});
    }
  }
  for (const auto& [stem, path] : masks) {
    if (!images.contains(stem)) orphans.push_back("mask without image: " + stem);
  }
  if (!orphans.empty()) {
    std::string msg = "dataset validation failed:";
    for (const auto& o : orphans) msg += "\n  " + o;
    throw DatasetError(msg, orphans);
  }
  return out;  // std::map iteration is already sorted by stem
}

std::vector<Sample> load_dataset(const std::vector<SamplePaths>& paths) {
  std::vector<Sample> out;
  out.reserve(paths.size());
  for (const auto& p : paths) {
    Sample s{read_image(p.image), read_mask(p.mask)};
    if (s.image.shape().h != s.mask.shape().h || s.image.shape().w != s.mask.shape().w) {
      throw ShapeError("image and mask dims differ for " + p.stem);
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_dataset(const std::vector<Sample>& samples, const fs::path& dir) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "sample_%04zu", i);
    write_image(samples[i].image, dir / "images" / (std::string(stem) + ".pgm"), false);
    write_mask(samples[i].mask, dir / "masks" / (std::string(stem) + ".pgm"), true, 0.5);
  }
}

}  // namespace mkunet
