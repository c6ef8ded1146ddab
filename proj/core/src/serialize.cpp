#include "capsroute/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace capsroute {

namespace {

template <typename U>
U to_little(U value) {
  if constexpr (std::endian::native == std::endian::little) {
    return value;
  } else {
    unsigned char bytes[sizeof(U)];
    std::memcpy(bytes, &value, sizeof(U));
    for (std::size_t k = 0; k < sizeof(U) / 2; ++k) std::swap(bytes[k], bytes[sizeof(U) - 1 - k]);
    std::memcpy(&value, bytes, sizeof(U));
    return value;
  }
}

template <typename U>
void put(std::ostream& out, U value) {
  value = to_little(value);
  out.write(reinterpret_cast<const char*>(&value), sizeof(U));
}

template <typename U>
U get(std::istream& in) {
  U value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(U))) throw FormatError("tensor stream truncated");
  return to_little(value);
}

constexpr std::uint64_t kMaxRank = 16;

const char* dtype_name(std::size_t width) { return width == 4 ? "float32" : "float64"; }

}  // namespace

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t) {
  put<std::uint64_t>(out, t.rank());
  for (auto d : t.shape()) put<std::uint64_t>(out, d);
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  } else {
    for (auto x : t.data()) put(out, x);
  }
  if (!out) throw FormatError("failed writing tensor");
}

template <typename T>
Tensor<T> read_tensor(std::istream& in, std::size_t stored_width) {
  if (stored_width != 4 && stored_width != 8) throw FormatError("unsupported element width");
  const auto rank = get<std::uint64_t>(in);
  if (rank > kMaxRank) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get<std::uint64_t>(in);
  Tensor<T> t(shape);
  for (std::size_t k = 0; k < t.size(); ++k) {
    t[k] = stored_width == 4 ? static_cast<T>(get<float>(in)) : static_cast<T>(get<double>(in));
  }
  return t;
}

template <typename T>
void write_tensor_file(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

template <typename T>
Tensor<T> read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  const auto bytes = std::filesystem::file_size(path);
  const auto rank = get<std::uint64_t>(in);
  if (rank > kMaxRank) throw FormatError("implausible tensor rank in " + path.string());
  std::uint64_t count = 1;
  for (std::uint64_t k = 0; k < rank; ++k) count *= get<std::uint64_t>(in);
  const std::uint64_t header = 8 * (rank + 1);
  if (count == 0 || bytes <= header || (bytes - header) % count != 0) {
    throw FormatError("tensor file size inconsistent with header: " + path.string());
  }
  const auto width = static_cast<std::size_t>((bytes - header) / count);
  in.seekg(0);
  return read_tensor<T>(in, width);
}

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const std::vector<NamedTensor<T>>& tensors,
                     const nlohmann::json& meta) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "capsroute-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = dtype_name(sizeof(T));
  manifest["meta"] = meta;
  manifest["tensors"] = nlohmann::json::array();
  for (const auto& [name, tensor] : tensors) {
    const std::string file = name + ".bin";
    write_tensor_file(dir / file, *tensor);
    manifest["tensors"].push_back({{"name", name}, {"file", file}, {"shape", tensor->shape()}});
  }
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw FormatError("failed writing manifest in " + dir.string());
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "capsroute-checkpoint") {
    throw FormatError("not a capsroute checkpoint: " + dir.string());
  }
  Checkpoint<T> ckpt;
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& entry : manifest.at("tensors")) {
    auto t = read_tensor_file<T>(dir / entry.at("file").get<std::string>());
    if (t.shape() != entry.at("shape").get<Shape>()) {
      throw FormatError("shape mismatch for tensor " + entry.at("name").get<std::string>());
    }
    ckpt.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

#define CAPSROUTE_INSTANTIATE(T)                                                              \
  template void write_tensor(std::ostream&, const Tensor<T>&);                                \
  template Tensor<T> read_tensor(std::istream&, std::size_t);                                 \
  template void write_tensor_file(const std::filesystem::path&, const Tensor<T>&);            \
  template Tensor<T> read_tensor_file(const std::filesystem::path&);                          \
  template void save_checkpoint(const std::filesystem::path&, const std::vector<NamedTensor<T>>&, \
                                const nlohmann::json&);                                       \
  template Checkpoint<T> load_checkpoint(const std::filesystem::path&);

CAPSROUTE_INSTANTIATE(float)
CAPSROUTE_INSTANTIATE(double)

#undef CAPSROUTE_INSTANTIATE

}  // namespace capsroute
