#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "mkunet/network.hpp"
#include "mkunet/train.hpp"

namespace mkunet {

/// Malformed or truncated file contents.
class CorruptionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnsupportedVersionError : public CorruptionError {
 public:
  using CorruptionError::CorruptionError;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- config ---------------------------------------------------------------

/// Canonical JSON (sorted keys, no whitespace).
std::string config_to_json(const VariantConfig& cfg);
VariantConfig config_from_json(const std::string& doc);

// ---- checkpoint -----------------------------------------------------------
//
// Little-endian layout:
//   "MKUN" | u32 version=1 | u32 config_len | config JSON | u32 tensor_count |
//   per tensor: u16 name_len | name | u8 dtype (0=f32) | u8 rank | rank x u64 dims | data

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(Network<float>& net);
void save_checkpoint(Network<float>& net, const std::filesystem::path& path);

struct LoadedCheckpoint {
  VariantConfig config;
  Network<float> network;
};

LoadedCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// ---- netpbm ---------------------------------------------------------------

struct Image8 {
  Index channels = 1;  // 1 (P5) or 3 (P6)
  Index height = 0;
  Index width = 0;
  std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

Image8 read_netpbm(const std::filesystem::path& path);
void write_netpbm(const Image8& img, const std::filesystem::path& path);

/// (1, 3, h, w) in [0,1]; grayscale is replicated over three channels.
Tensor4<float> read_image(const std::filesystem::path& path);

/// (1, 1, h, w) binary mask, 1 where the stored value exceeds 127.
Tensor4<float> read_mask(const std::filesystem::path& path);

/// P5 output. Binary mode writes 255 where value > threshold, else 0;
/// probability mode writes round(255 * value).
void write_mask(const Tensor4<float>& values, const std::filesystem::path& path, bool as_binary,
                double threshold = 0.5);

/// Writes channel 0 of an image tensor as P5 (or all three as P6 when `color`).
void write_image(const Tensor4<float>& image, const std::filesystem::path& path, bool color);

// ---- datasets -------------------------------------------------------------

struct SamplePaths {
  std::string stem;
  std::filesystem::path image;
  std::filesystem::path mask;
};

class DatasetError : public std::runtime_error {
 public:
  DatasetError(const std::string& msg, std::vector<std::string> orphans)
      : std::runtime_error(msg), orphans_(std::move(orphans)) {}
  const std::vector<std::string>& orphans() const { return orphans_; }

 private:
  std::vector<std::string> orphans_;
};

/// dir/images/*.pgm|ppm paired with dir/masks/*.pgm by stem, sorted by stem.
std::vector<SamplePaths> dataset_scan(const std::filesystem::path& dir);
std::vector<Sample> load_dataset(const std::vector<SamplePaths>& paths);

/// Writes images/ and masks/ under `dir` as sample_NNNN.pgm.
void write_dataset(const std::vector<Sample>& samples, const std::filesystem::path& dir);

}  // namespace mkunet
