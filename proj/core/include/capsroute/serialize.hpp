#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "capsroute/tensor.hpp"

namespace capsroute {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Binary tensor layout, little-endian throughout:
//   u64 rank, u64 dims[rank], then the raw elements (f32 or f64).
// The element width is not stored; readers infer it from the byte count.

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t);

/// Reads a tensor whose elements are `stored_width` bytes (4 or 8), converting to T.
template <typename T>
Tensor<T> read_tensor(std::istream& in, std::size_t stored_width = sizeof(T));

template <typename T>
void write_tensor_file(const std::filesystem::path& path, const Tensor<T>& t);

/// Infers the stored element width from the file size.
template <typename T>
Tensor<T> read_tensor_file(const std::filesystem::path& path);

template <typename T>
struct NamedTensor {
  std::string name;
  const Tensor<T>* tensor;
};

/// A checkpoint directory: manifest.json naming each tensor plus one .bin per
/// tensor. `meta` is stored verbatim under the manifest's "meta" key.
template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const std::vector<NamedTensor<T>>& tensors,
                     const nlohmann::json& meta);

template <typename T>
struct Checkpoint {
  std::map<std::string, Tensor<T>> tensors;
  nlohmann::json meta;
};

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir);

}  // namespace capsroute
