#pragma once

// Weight files and run configs.
//
// Weight file layout, all integers little-endian:
//   "EVIM" | u32 version | u32 count | count × record
//   record = u32 name_len | name bytes | u32 rank | rank × u64 extent
//            | u32 dtype (0 = f32, 1 = f64) | payload
// The payload is the row-major data in little-endian IEEE-754.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "evim/model.hpp"

namespace evim::io {

inline constexpr std::uint32_t kFormatVersion = 1;

/// A malformed weight file. `offset` is the byte where decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset);
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

/// A config document that breaks the schema.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

struct Entry {
  std::string name;
  AnyTensor value;
  std::uint64_t offset = 0;  // record start when decoded
};

struct WeightFile {
  std::vector<Entry> entries;

  const Entry* find(std::string_view name) const;
  template <class T>
  void add(std::string name, Tensor<T> t) {
    entries.push_back({std::move(name), std::move(t), 0});
  }
};

DType dtype_of(const AnyTensor& t);
const Shape& shape_of(const AnyTensor& t);

std::string encode(const WeightFile& file);
/// Rejects bad magic, unknown versions, truncation, trailing bytes, unknown
/// dtype tags, empty or duplicate names and rank-0 records.
WeightFile decode(std::string_view bytes);

void save(const std::filesystem::path& path, const WeightFile& file);
WeightFile load(const std::filesystem::path& path);

/// Parameters under their canonical names plus BN running statistics.
template <class T>
WeightFile to_weight_file(const ModelWeights<Tensor<T>>& w);
/// Fills `w` (already shaped for the target config) from `file`. Every name
/// must be present with the same shape and dtype; extra names are rejected.
template <class T>
void from_weight_file(const WeightFile& file, ModelWeights<Tensor<T>>& w);

// Configs ---------------------------------------------------------------------------

struct RunConfig {
  ModelConfig model;
  DType dtype = DType::f32;
  std::uint64_t seed = 0;
};

/// Keys: variant, blocks, channels, states, height, width, num_classes, msf,
/// dtype ("f32" | "f64"), seed. A `variant` of M1..M4 loads the preset first;
/// the other keys override it. Unknown keys are rejected.
RunConfig parse_config(std::string_view json_text);
RunConfig load_config(const std::filesystem::path& path);
std::string dump_config(const RunConfig& cfg);

/// A preset name (M1..M4) or a path to a config file.
RunConfig resolve_model(std::string_view preset_or_path);

DType parse_dtype(std::string_view s);

}  // namespace evim::io
