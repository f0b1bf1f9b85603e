#pragma once

// Binary archive shared by parameter checkpoints, optimizer states, replay
// buffers and trajectory logs:
//
//   u64 little-endian  header length in bytes
//   header             JSON object; "tensors" lists {name, shape, dtype}
//   payload            raw little-endian buffers in the order listed
//
// Loaders verify names, shapes and dtypes and reject anything else.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "betail/ad/graph.hpp"
#include "betail/ad/optim.hpp"

namespace betail::ad {

class ArchiveError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ArchiveEntry {
  std::string name;
  std::vector<int> shape;
  std::string dtype;  // "f32", "f64", "i64", "u8"
  std::vector<std::uint8_t> bytes;
};

struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<ArchiveEntry> entries;

  template <typename T>
  void add(const std::string& name, std::vector<int> shape, const std::vector<T>& data);
  template <typename T>
  std::vector<T> get(const std::string& name, const std::vector<int>& expected_shape = {}) const;
  const ArchiveEntry& entry(const std::string& name) const;
  bool has(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

template <typename T>
std::string dtype_name();

/// Parameter checkpoint. `descriptor` (architecture) is embedded and must
/// match on load, as must every name and shape.
template <typename T>
void save_parameters(const std::filesystem::path& path, const nlohmann::json& descriptor,
                     const ConstParameterSet<T>& params);
template <typename T>
void load_parameters(const std::filesystem::path& path, const nlohmann::json& descriptor,
                     const ParameterSet<T>& params);

template <typename T>
void add_optimizer_state(Archive& ar, const std::string& prefix, const OptimizerState<T>& st);
template <typename T>
void read_optimizer_state(const Archive& ar, const std::string& prefix, OptimizerState<T>& st);

}  // namespace betail::ad
