#pragma once

#include <filesystem>
#include <fstream>

#include "json.hpp"

#include "affunet/optim.hpp"

namespace affunet {

// ATSR tensor file: magic "ATSR", u8 version=1, u8 dtype (0=f32, 1=f64),
// u8 rank, rank little-endian u64 dims, then the raw little-endian payload.
// Host is assumed little-endian.

namespace detail {
constexpr char kAtsrMagic[4] = {'A', 'T', 'S', 'R'};
constexpr uint8_t kAtsrVersion = 1;
}  // namespace detail

template <typename T>
void write_atsr(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_atsr: cannot open " + path.string());
  f.write(detail::kAtsrMagic, 4);
  const uint8_t ver = detail::kAtsrVersion;
  const uint8_t dt = static_cast<uint8_t>(dtype_of<T>());
  const uint8_t rank = static_cast<uint8_t>(t.rank());
  f.write(reinterpret_cast<const char*>(&ver), 1);
  f.write(reinterpret_cast<const char*>(&dt), 1);
  f.write(reinterpret_cast<const char*>(&rank), 1);
  for (int i = 0; i < t.rank(); ++i) {
    const uint64_t d = static_cast<uint64_t>(t.dim(i));
    f.write(reinterpret_cast<const char*>(&d), 8);
  }
  f.write(reinterpret_cast<const char*>(t.data()),
          static_cast<std::streamsize>(sizeof(T) * t.numel()));
  if (!f) throw IoError("write_atsr: write failed for " + path.string());
}

template <typename T>
Tensor<T> read_atsr(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_atsr: cannot open " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, detail::kAtsrMagic, 4) != 0)
    throw IoError("read_atsr: bad magic in " + path.string());
  uint8_t ver = 0, dt = 0, rank = 0;
  f.read(reinterpret_cast<char*>(&ver), 1);
  f.read(reinterpret_cast<char*>(&dt), 1);
  f.read(reinterpret_cast<char*>(&rank), 1);
  if (!f || ver != detail::kAtsrVersion)
    throw IoError("read_atsr: unsupported version in " + path.string());
  if (dt != static_cast<uint8_t>(dtype_of<T>()))
    throw IoError("read_atsr: dtype is " + std::string(dtype_name(static_cast<Dtype>(dt))) +
                  ", expected " + dtype_name(dtype_of<T>()) + " in " + path.string());
  Shape shape(rank);
  for (int i = 0; i < rank; ++i) {
    uint64_t d = 0;
    f.read(reinterpret_cast<char*>(&d), 8);
    shape[static_cast<size_t>(i)] = static_cast<int64_t>(d);
  }
  if (!f) throw IoError("read_atsr: truncated header in " + path.string());
  std::vector<T> data(static_cast<size_t>(numel_of(shape)));
  f.read(reinterpret_cast<char*>(data.data()),
         static_cast<std::streamsize>(sizeof(T) * data.size()));
  if (!f) throw IoError("read_atsr: truncated payload in " + path.string());
  return Tensor<T>::from_data(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// Checkpoints: one ATSR file per parameter inside a directory, plus a JSON
// manifest with the parameter list and caller-provided metadata.
// ---------------------------------------------------------------------------

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const std::vector<NamedParam<T>>& params,
                     nlohmann::json meta = {}) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  nlohmann::json manifest;
  manifest["meta"] = std::move(meta);
  auto names = nlohmann::json::array();
  for (const auto& p : params) {
    write_atsr(dir / (p.name + ".atsr"), p.tensor);
    names.push_back(p.name);
  }
  manifest["params"] = std::move(names);
  std::ofstream f(dir / "manifest.json");
  if (!f) throw IoError("save_checkpoint: cannot write manifest in " + dir.string());
  f << manifest.dump(2) << "\n";
}

// Loads parameter values in place, by name; shapes must match.
template <typename T>
nlohmann::json load_checkpoint(const std::filesystem::path& dir,
                               std::vector<NamedParam<T>>& params) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw IoError("load_checkpoint: cannot open manifest in " + dir.string());
  nlohmann::json manifest = nlohmann::json::parse(f);
  for (auto& p : params) {
    Tensor<T> t = read_atsr<T>(dir / (p.name + ".atsr"));
    if (t.shape() != p.tensor.shape())
      throw IoError("load_checkpoint: parameter '" + p.name + "' has shape " +
                    shape_str(t.shape()) + ", expected " + shape_str(p.tensor.shape()));
    std::memcpy(p.tensor.data(), t.data(), sizeof(T) * static_cast<size_t>(t.numel()));
  }
  return manifest.contains("meta") ? manifest["meta"] : nlohmann::json{};
}

}  // namespace affunet
