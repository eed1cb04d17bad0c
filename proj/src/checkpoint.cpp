#include "mixsga/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include "json.hpp"

namespace mixsga {

namespace {

using json = nlohmann::json;

template <typename U>
void put_le(std::vector<unsigned char>& out, U bits) {
  for (std::size_t i = 0; i < sizeof(U); ++i)
    out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const unsigned char* in) {
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<U>(in[i]) << (8 * i);
  return bits;
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

}  // namespace

const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& name) {
  if (name == "f32") return DType::f32;
  if (name == "f64") return DType::f64;
  throw CheckpointError("unknown dtype '" + name + "'");
}

template <typename T>
std::vector<T> StoredTensor::values() const {
  const std::size_t n = numel_of(shape);
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (dtype == DType::f32)
      out[i] = static_cast<T>(std::bit_cast<float>(get_le<std::uint32_t>(bytes.data() + 4 * i)));
    else
      out[i] = static_cast<T>(std::bit_cast<double>(get_le<std::uint64_t>(bytes.data() + 8 * i)));
  }
  return out;
}

template std::vector<float> StoredTensor::values<float>() const;
template std::vector<double> StoredTensor::values<double>() const;

const StoredTensor& Checkpoint::get(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw CheckpointError("checkpoint has no tensor '" + name + "'");
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, Tensor<T>>>& tensors,
                     const std::map<std::string, std::string>& metadata) {
  json header;
  header["tensors"] = json::array();
  std::vector<unsigned char> payload;
  for (const auto& [name, t] : tensors) {
    const std::size_t offset = payload.size();
    for (T v : t.data()) put_le(payload, std::bit_cast<Bits<T>>(v));
    header["tensors"].push_back({{"name", name},
                                 {"shape", t.shape()},
                                 {"dtype", dtype_name(dtype_of<T>())},
                                 {"offset", offset},
                                 {"nbytes", payload.size() - offset}});
  }
  header["metadata"] = metadata;
  const std::string text = header.dump();

  std::vector<unsigned char> prefix;
  put_le(prefix, static_cast<std::uint64_t>(text.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(prefix.data()), static_cast<std::streamsize>(prefix.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  if (!out) throw CheckpointError("write failed for '" + path.string() + "'");
}

template void save_checkpoint<float>(const std::filesystem::path&,
                                     const std::vector<std::pair<std::string, Tensor<float>>>&,
                                     const std::map<std::string, std::string>&);
template void save_checkpoint<double>(const std::filesystem::path&,
                                      const std::vector<std::pair<std::string, Tensor<double>>>&,
                                      const std::map<std::string, std::string>&);

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::vector<unsigned char> file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (file.size() < 8) throw CheckpointError("checkpoint '" + path.string() + "' is truncated");
  const auto header_len = get_le<std::uint64_t>(file.data());
  if (8 + header_len > file.size())
    throw CheckpointError("checkpoint '" + path.string() + "' header overruns file");

  json header;
  try {
    header = json::parse(file.begin() + 8, file.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint header is not valid JSON: " + std::string(e.what()));
  }

  const std::size_t base = 8 + header_len;
  Checkpoint ck;
  for (const auto& entry : header.at("tensors")) {
    StoredTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<Shape>();
    t.dtype = parse_dtype(entry.at("dtype").get<std::string>());
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto nbytes = entry.at("nbytes").get<std::size_t>();
    if (nbytes != numel_of(t.shape) * dtype_size(t.dtype))
      throw CheckpointError("tensor '" + t.name + "' byte count does not match its shape");
    if (base + offset + nbytes > file.size())
      throw CheckpointError("tensor '" + t.name + "' extends past end of file");
    t.bytes.assign(file.begin() + static_cast<std::ptrdiff_t>(base + offset),
                   file.begin() + static_cast<std::ptrdiff_t>(base + offset + nbytes));
    ck.tensors.push_back(std::move(t));
  }
  if (header.contains("metadata"))
    ck.metadata = header["metadata"].get<std::map<std::string, std::string>>();
  return ck;
}

}  // namespace mixsga
