#include "betail/ad/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace betail::ad {

static_assert(std::endian::native == std::endian::little, "archives are written as raw little-endian buffers");

template <>
std::string dtype_name<float>() { return "f32"; }
template <>
std::string dtype_name<double>() { return "f64"; }
template <>
std::string dtype_name<std::int64_t>() { return "i64"; }
template <>
std::string dtype_name<std::uint8_t>() { return "u8"; }

namespace {

std::size_t dtype_size(const std::string& d) {
  if (d == "f32") return 4;
  if (d == "f64" || d == "i64") return 8;
  if (d == "u8") return 1;
  throw ArchiveError("unknown dtype " + d);
}

std::size_t count(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

}  // namespace

template <typename T>
void Archive::add(const std::string& name, std::vector<int> shape, const std::vector<T>& data) {
  if (count(shape) != data.size()) throw ArchiveError("archive entry " + name + ": shape does not match data");
  ArchiveEntry e{name, std::move(shape), dtype_name<T>(), {}};
  e.bytes.resize(data.size() * sizeof(T));
  if (!data.empty()) std::memcpy(e.bytes.data(), data.data(), e.bytes.size());
  entries.push_back(std::move(e));
}

const ArchiveEntry& Archive::entry(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e;
  }
  throw ArchiveError("archive has no entry named " + name);
}

bool Archive::has(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return true;
  }
  return false;
}

template <typename T>
std::vector<T> Archive::get(const std::string& name, const std::vector<int>& expected_shape) const {
  const auto& e = entry(name);
  if (e.dtype != dtype_name<T>()) throw ArchiveError("entry " + name + " has dtype " + e.dtype);
  if (!expected_shape.empty() && e.shape != expected_shape) {
    throw ArchiveError("entry " + name + " has a different shape than expected");
  }
  std::vector<T> out(count(e.shape));
  if (!out.empty()) std::memcpy(out.data(), e.bytes.data(), e.bytes.size());
  return out;
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  nlohmann::json header = archive.meta;
  header["tensors"] = nlohmann::json::array();
  for (const auto& e : archive.entries) {
    header["tensors"].push_back({{"name", e.name}, {"shape", e.shape}, {"dtype", e.dtype}});
  }
  const std::string text = header.dump();
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ArchiveError("cannot open " + tmp.string() + " for writing");
    const std::uint64_t n = text.size();
    os.write(reinterpret_cast<const char*>(&n), sizeof(n));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : archive.entries) {
      os.write(reinterpret_cast<const char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
    }
    if (!os) throw ArchiveError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArchiveError("cannot open " + path.string());
  std::uint64_t n = 0;
  is.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!is || n > (1ull << 30)) throw ArchiveError("bad archive header in " + path.string());
  std::string text(n, '\0');
  is.read(text.data(), static_cast<std::streamsize>(n));
  if (!is) throw ArchiveError("truncated header in " + path.string());
  Archive ar;
  try {
    ar.meta = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& ex) {
    throw ArchiveError("malformed header in " + path.string() + ": " + ex.what());
  }
  if (!ar.meta.contains("tensors")) throw ArchiveError("header without tensor list in " + path.string());
  for (const auto& t : ar.meta["tensors"]) {
    ArchiveEntry e;
    e.name = t.at("name").get<std::string>();
    e.shape = t.at("shape").get<std::vector<int>>();
    e.dtype = t.at("dtype").get<std::string>();
    e.bytes.resize(count(e.shape) * dtype_size(e.dtype));
    is.read(reinterpret_cast<char*>(e.bytes.data()), static_cast<std::streamsize>(e.bytes.size()));
    if (!is) throw ArchiveError("truncated payload for " + e.name + " in " + path.string());
    ar.entries.push_back(std::move(e));
  }
  ar.meta.erase("tensors");
  return ar;
}

template <typename T>
void save_parameters(const std::filesystem::path& path, const nlohmann::json& descriptor,
                     const ConstParameterSet<T>& params) {
  Archive ar;
  ar.meta["version"] = 1;
  ar.meta["kind"] = "parameters";
  ar.meta["architecture"] = descriptor;
  ar.meta["precision"] = dtype_name<T>();
  for (const auto* p : params) ar.add(p->name, p->value.shape().dims(), p->value.vec());
  write_archive(path, ar);
}

template <typename T>
void load_parameters(const std::filesystem::path& path, const nlohmann::json& descriptor,
                     const ParameterSet<T>& params) {
  const Archive ar = read_archive(path);
  if (ar.meta.value("version", 0) != 1 || ar.meta.value("kind", "") != "parameters") {
    throw ArchiveError(path.string() + " is not a version-1 parameter checkpoint");
  }
  if (ar.meta["architecture"] != descriptor) {
    throw ArchiveError(path.string() + ": architecture " + ar.meta["architecture"].dump() +
                       " does not match expected " + descriptor.dump());
  }
  if (ar.entries.size() != params.size()) throw ArchiveError(path.string() + ": parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (ar.entries[i].name != p.name) {
      throw ArchiveError(path.string() + ": expected " + p.name + ", found " + ar.entries[i].name);
    }
    p.value = Tensor<T>(p.value.shape(), ar.get<T>(p.name, p.value.shape().dims()));
    p.zero_grad();
  }
}

template <typename T>
void add_optimizer_state(Archive& ar, const std::string& prefix, const OptimizerState<T>& st) {
  ar.meta[prefix + ".step"] = st.step;
  ar.meta[prefix + ".slots"] = st.m.size();
  for (std::size_t i = 0; i < st.m.size(); ++i) {
    ar.add(prefix + ".m" + std::to_string(i), {static_cast<int>(st.m[i].size())}, st.m[i]);
    ar.add(prefix + ".v" + std::to_string(i), {static_cast<int>(st.v[i].size())}, st.v[i]);
  }
}

template <typename T>
void read_optimizer_state(const Archive& ar, const std::string& prefix, OptimizerState<T>& st) {
  st.step = ar.meta.at(prefix + ".step").get<std::int64_t>();
  const auto slots = ar.meta.at(prefix + ".slots").get<std::size_t>();
  st.m.assign(slots, {});
  st.v.assign(slots, {});
  for (std::size_t i = 0; i < slots; ++i) {
    st.m[i] = ar.get<T>(prefix + ".m" + std::to_string(i));
    st.v[i] = ar.get<T>(prefix + ".v" + std::to_string(i));
  }
}

template void Archive::add<float>(const std::string&, std::vector<int>, const std::vector<float>&);
template void Archive::add<double>(const std::string&, std::vector<int>, const std::vector<double>&);
template void Archive::add<std::int64_t>(const std::string&, std::vector<int>, const std::vector<std::int64_t>&);
template void Archive::add<std::uint8_t>(const std::string&, std::vector<int>, const std::vector<std::uint8_t>&);
template std::vector<float> Archive::get<float>(const std::string&, const std::vector<int>&) const;
template std::vector<double> Archive::get<double>(const std::string&, const std::vector<int>&) const;
template std::vector<std::int64_t> Archive::get<std::int64_t>(const std::string&, const std::vector<int>&) const;
template std::vector<std::uint8_t> Archive::get<std::uint8_t>(const std::string&, const std::vector<int>&) const;
template void save_parameters<float>(const std::filesystem::path&, const nlohmann::json&, const ConstParameterSet<float>&);
template void save_parameters<double>(const std::filesystem::path&, const nlohmann::json&, const ConstParameterSet<double>&);
template void load_parameters<float>(const std::filesystem::path&, const nlohmann::json&, const ParameterSet<float>&);
template void load_parameters<double>(const std::filesystem::path&, const nlohmann::json&, const ParameterSet<double>&);
template void add_optimizer_state<float>(Archive&, const std::string&, const OptimizerState<float>&);
template void read_optimizer_state<float>(const Archive&, const std::string&, OptimizerState<float>&);

}  // namespace betail::ad
