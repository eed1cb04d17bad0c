#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixsga/tensor.hpp"

namespace mixsga {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType { f32, f64 };

const char* dtype_name(DType d);
DType parse_dtype(const std::string& name);

template <typename T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::f32 : DType::f64;
}

/// Loaded tensors keep the dtype they were written with until converted.
struct StoredTensor {
  std::string name;
  Shape shape;
  DType dtype = DType::f32;
  std::vector<unsigned char> bytes;  // little-endian

  template <typename T>
  std::vector<T> values() const;
};

/// File layout: u64 little-endian header length, the JSON header
/// {"tensors":[{"name","shape","dtype","offset","nbytes"}...],"metadata":{...}},
/// then the raw arrays at the stated offsets (relative to the end of the header).
template <typename T>
void save_checkpoint(const std::filesystem::path& path,
                     const std::vector<std::pair<std::string, Tensor<T>>>& tensors,
                     const std::map<std::string, std::string>& metadata = {});

struct Checkpoint {
  std::vector<StoredTensor> tensors;
  std::map<std::string, std::string> metadata;

  const StoredTensor& get(const std::string& name) const;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mixsga
