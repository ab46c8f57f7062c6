#include <filesystem>
#include <fstream>
#include <iterator>

#include "doctest.h"
#include "mkunet/io.hpp"

using namespace mkunet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("mkunet_io_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

void put_u32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

// Gives running statistics non-default values.
void warm_up(Network<float>& net) {
  const auto x = Tensor4<float>::uniform({2, 3, 32, 32}, 0, 1, 77);
  NoGradGuard g;
  net.forward(x, Mode::train);
}

}  // namespace

TEST_CASE("config json round trip") {
  for (const char* v : {"t", "s", "std", "m", "l"}) {
    VariantConfig cfg = preset(v);
    CHECK(config_from_json(config_to_json(cfg)) == cfg);
  }
  VariantConfig odd = preset("s");
  odd.kernels = KernelSet{3, 7};
  odd.gate = GateKind::ag;
  odd.encoder_block = EncoderBlock::mkira;
  odd.shortcut = false;
  odd.hyper.shuffle_enabled = false;
  const std::string js = config_to_json(odd);
  CHECK(config_from_json(js) == odd);
  CHECK(config_to_json(config_from_json(js)) == js);
  CHECK_THROWS_AS(config_from_json("{"), CorruptionError);
  CHECK_THROWS_AS(config_from_json("{\"channels\":[1]}"), CorruptionError);
}

TEST_CASE("checkpoint round trip is byte-identical and reload-invariant") {
  Network<float> net(preset("t"), 3);
  warm_up(net);
  const auto bytes = encode_checkpoint(net);
  REQUIRE(bytes.size() > 16);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "MKUN");
  LoadedCheckpoint loaded = decode_checkpoint(bytes);
  CHECK(loaded.config == net.config());
  CHECK(encode_checkpoint(loaded.network) == bytes);

  TempDir tmp;
  save_checkpoint(net, tmp.path / "a.mkun");
  LoadedCheckpoint from_file = load_checkpoint(tmp.path / "a.mkun");
  save_checkpoint(from_file.network, tmp.path / "b.mkun");
  CHECK(slurp(tmp.path / "a.mkun") == slurp(tmp.path / "b.mkun"));

  const auto x = Tensor4<float>::uniform({1, 3, 64, 32}, 0, 1, 5);
  NoGradGuard g;
  const auto want = net.forward(x, Mode::eval);
  const auto got = from_file.network.forward(x, Mode::eval);
  CHECK((want.p1.value().array() == got.p1.value().array()).all());
  CHECK((want.p4.value().array() == got.p4.value().array()).all());

  const auto a = net.state();
  const auto b = from_file.network.state();
  REQUIRE(a.entries.size() == b.entries.size());
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    CHECK(a.entries[i].path == b.entries[i].path);
    CHECK(a.entries[i].learnable == b.entries[i].learnable);
  }
}

TEST_CASE("checkpoint corruption") {
  Network<float> net(preset("t"), 0);
  const auto good = encode_checkpoint(net);

  auto bad = good;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), CorruptionError);

  bad = good;
  put_u32(bad, 4, 2);
  CHECK_THROWS_AS(decode_checkpoint(bad), UnsupportedVersionError);

  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, good.size() / 2, good.size() - 1}) {
    CAPTURE(cut);
    CHECK_THROWS_AS(decode_checkpoint({good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut)}),
                    CorruptionError);
  }

  bad = good;
  bad.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(bad), CorruptionError);

  // Swap the config for one with other widths: tensors no longer fit.
  const std::string other = config_to_json(preset("s"));
  const std::uint32_t old_len = static_cast<std::uint32_t>(good[8]) | (good[9] << 8) | (good[10] << 16) |
                                (static_cast<std::uint32_t>(good[11]) << 24);
  std::vector<std::uint8_t> swapped(good.begin(), good.begin() + 12);
  put_u32(swapped, 8, static_cast<std::uint32_t>(other.size()));
  swapped.insert(swapped.end(), other.begin(), other.end());
  swapped.insert(swapped.end(), good.begin() + 12 + old_len, good.end());
  CHECK_THROWS_AS(decode_checkpoint(swapped), CorruptionError);

  CHECK_THROWS(load_checkpoint("/nonexistent/never.mkun"));
}

TEST_CASE("netpbm read and write") {
  TempDir tmp;
  Image8 gray{1, 2, 3, {0, 10, 20, 128, 200, 255}};
  write_netpbm(gray, tmp.path / "g.pgm");
  const Image8 g2 = read_netpbm(tmp.path / "g.pgm");
  CHECK(g2.channels == 1);
  CHECK(g2.height == 2);
  CHECK(g2.width == 3);
  CHECK(g2.pixels == gray.pixels);

  Image8 rgb{3, 1, 2, {1, 2, 3, 4, 5, 6}};
  write_netpbm(rgb, tmp.path / "c.ppm");
  CHECK(read_netpbm(tmp.path / "c.ppm").pixels == rgb.pixels);

  spit(tmp.path / "comment.pgm", std::string("P5\n# a comment\n3 2\n# another\n255\n") +
                                     std::string("\x00\x0a\x14\x80\xc8\xff", 6));
  CHECK(read_netpbm(tmp.path / "comment.pgm").pixels == gray.pixels);

  spit(tmp.path / "deep.pgm", "P5\n1 1\n65535\n\x01\x02");
  CHECK_THROWS_AS(read_netpbm(tmp.path / "deep.pgm"), CorruptionError);
  spit(tmp.path / "short.pgm", "P5\n3 2\n255\n\x01\x02");
  CHECK_THROWS_AS(read_netpbm(tmp.path / "short.pgm"), CorruptionError);
  spit(tmp.path / "ascii.pgm", "P2\n1 1\n255\n7\n");
  CHECK_THROWS_AS(read_netpbm(tmp.path / "ascii.pgm"), CorruptionError);
  CHECK_THROWS(read_netpbm(tmp.path / "missing.pgm"));

  const auto img = read_image(tmp.path / "g.pgm");
  CHECK(img.shape() == Shape4{1, 3, 2, 3});
  for (Index c = 0; c < 3; ++c) CHECK(img.plane(0, c)[3] == doctest::Approx(128 / 255.0));
  const auto col = read_image(tmp.path / "c.ppm");
  CHECK(col.plane(0, 1)[1] == doctest::Approx(5 / 255.0));

  const auto mask = read_mask(tmp.path / "g.pgm");
  CHECK(std::vector<float>(mask.data(), mask.data() + 6) == std::vector<float>{0, 0, 0, 1, 1, 1});
}

TEST_CASE("mask writing") {
  TempDir tmp;
  const std::vector<float> probs_v{0.0f, 0.2f, 0.5f, 0.51f, 0.9f, 1.0f};
  const auto probs = Tensor4<float>::from_values({1, 1, 2, 3}, probs_v);
  write_mask(probs, tmp.path / "bin.pgm", true);
  CHECK(read_netpbm(tmp.path / "bin.pgm").pixels == std::vector<std::uint8_t>{0, 0, 0, 255, 255, 255});
  write_mask(probs, tmp.path / "bin2.pgm", true, 0.1);
  CHECK(read_netpbm(tmp.path / "bin2.pgm").pixels == std::vector<std::uint8_t>{0, 255, 255, 255, 255, 255});
  write_mask(probs, tmp.path / "prob.pgm", false);
  const auto p = read_netpbm(tmp.path / "prob.pgm").pixels;
  CHECK(p.front() == 0);
  CHECK(p.back() == 255);
  CHECK(p[2] == 128);
  for (std::size_t i = 1; i < p.size(); ++i) CHECK(p[i] >= p[i - 1]);

  const auto img = Tensor4<float>::from_values({1, 3, 1, 2}, std::vector<float>{0, 1, 0.5f, 0.5f, 1, 0});
  write_image(img, tmp.path / "i.ppm", true);
  CHECK(read_netpbm(tmp.path / "i.ppm").pixels == std::vector<std::uint8_t>{0, 128, 255, 255, 128, 0});
  write_image(img, tmp.path / "i.pgm", false);
  CHECK(read_netpbm(tmp.path / "i.pgm").pixels == std::vector<std::uint8_t>{0, 255});
}

TEST_CASE("dataset directories") {
  TempDir tmp;
  const auto data = synth_dataset(3, 32, 4);
  write_dataset(data, tmp.path / "a");
  write_dataset(data, tmp.path / "b");
  for (const char* f : {"images/sample_0000.pgm", "masks/sample_0002.pgm"})
    CHECK(slurp(tmp.path / "a" / f) == slurp(tmp.path / "b" / f));

  const auto paths = dataset_scan(tmp.path / "a");
  REQUIRE(paths.size() == 3);
  CHECK(paths[0].stem == "sample_0000");
  CHECK(paths[2].stem == "sample_0002");
  const auto loaded = load_dataset(paths);
  REQUIRE(loaded.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK((loaded[i].mask.array() == data[i].mask.array()).all());
    CHECK(((loaded[i].image.array() - data[i].image.array()).abs() <= 0.5f / 255 + 1e-6f).all());
  }

  // Stems sort independently of creation order; ppm images are accepted.
  write_netpbm(Image8{3, 32, 32, std::vector<std::uint8_t>(32 * 32 * 3, 9)}, tmp.path / "a/images/aaa.ppm");
  write_netpbm(Image8{1, 32, 32, std::vector<std::uint8_t>(32 * 32, 0)}, tmp.path / "a/masks/aaa.pgm");
  CHECK(dataset_scan(tmp.path / "a").front().stem == "aaa");

  fs::remove(tmp.path / "a/masks/sample_0001.pgm");
  try {
    dataset_scan(tmp.path / "a");
    FAIL("expected DatasetError");
  } catch (const DatasetError& e) {
    CHECK(e.orphans() == std::vector<std::string>{"image without mask: sample_0001"});
  }
  CHECK_THROWS_AS(dataset_scan(tmp.path / "nope"), IoError);

  write_netpbm(Image8{1, 32, 64, std::vector<std::uint8_t>(32 * 64, 0)}, tmp.path / "b/masks/sample_0001.pgm");
  CHECK_THROWS(load_dataset(dataset_scan(tmp.path / "b")));
}
