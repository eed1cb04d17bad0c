#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "json.hpp"
#include "mixsga/checkpoint.hpp"
#include "support.hpp"

using namespace mixsga;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) { return fs::temp_directory_path() / name; }

template <typename T>
bool same_bits(std::span<const T> a, const std::vector<T>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

}  // namespace

TEST_CASE("round trip is bit exact for awkward values") {
  const auto path = temp_file("mixsga_ckpt_bits.bin");
  std::vector<double> v = {0.0, -0.0, 1.0 / 3.0, std::numeric_limits<double>::denorm_min(),
                           std::numeric_limits<double>::infinity(), -1e308,
                           std::numeric_limits<double>::quiet_NaN()};
  std::mt19937_64 rng(1);
  auto w = testing::uniform({3, 5}, rng);
  Tensor<double> a(Shape{7}, v);
  save_checkpoint<double>(path, {{"a", a}, {"w", w}}, {{"note", "x"}});
  auto ck = load_checkpoint(path);
  CHECK(ck.metadata.at("note") == "x");
  const auto& sa = ck.get("a");
  CHECK(sa.dtype == DType::f64);
  CHECK(sa.shape == Shape{7});
  CHECK(same_bits<double>(a.data(), sa.values<double>()));
  CHECK(same_bits<double>(w.data(), ck.get("w").values<double>()));
  CHECK_THROWS_AS(ck.get("missing"), CheckpointError);
  fs::remove(path);
}

TEST_CASE("float tensors round trip") {
  const auto path = temp_file("mixsga_ckpt_f32.bin");
  std::mt19937_64 rng(2);
  auto t = testing::uniform<float>({4, 4}, rng);
  save_checkpoint<float>(path, {{"t", t}});
  auto ck = load_checkpoint(path);
  CHECK(ck.get("t").dtype == DType::f32);
  CHECK(same_bits<float>(t.data(), ck.get("t").values<float>()));
  fs::remove(path);
}

TEST_CASE("file layout is a length-prefixed JSON header then raw arrays") {
  const auto path = temp_file("mixsga_ckpt_layout.bin");
  Tensor<float> t(Shape{2}, {1.5f, -2.0f});
  save_checkpoint<float>(path, {{"t", t}});
  std::ifstream in(path, std::ios::binary);
  unsigned char len_bytes[8];
  in.read(reinterpret_cast<char*>(len_bytes), 8);
  std::uint64_t len = 0;
  for (int i = 7; i >= 0; --i) len = (len << 8) | len_bytes[i];
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  auto j = nlohmann::json::parse(header);
  const auto& e = j.at("tensors").at(0);
  CHECK(e.at("name") == "t");
  CHECK(e.at("dtype") == "f32");
  CHECK(e.at("nbytes") == 8);
  in.seekg(static_cast<std::streamoff>(8 + len + e.at("offset").get<std::size_t>()));
  unsigned char raw[4];
  in.read(reinterpret_cast<char*>(raw), 4);
  // 1.5f = 0x3fc00000, little-endian.
  CHECK(raw[0] == 0x00);
  CHECK(raw[2] == 0xc0);
  CHECK(raw[3] == 0x3f);
  fs::remove(path);
}

TEST_CASE("corrupt and missing files are reported") {
  CHECK_THROWS_AS(load_checkpoint(temp_file("mixsga_no_such_ckpt.bin")), CheckpointError);
  const auto path = temp_file("mixsga_ckpt_trunc.bin");
  Tensor<double> t(Shape{64}, std::vector<double>(64, 1.0));
  save_checkpoint<double>(path, {{"t", t}});
  fs::resize_file(path, fs::file_size(path) - 16);
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  {
    std::ofstream out(path, std::ios::binary);
    out << "garbage";
  }
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  fs::remove(path);
}
