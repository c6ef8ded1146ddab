#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "capsroute/tensor.hpp"

namespace capsroute {

/// Base for IDX parsing failures; the subclasses distinguish the cause.
class IdxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class IdxBadMagic : public IdxError {
 public:
  using IdxError::IdxError;
};
class IdxTruncated : public IdxError {
 public:
  using IdxError::IdxError;
};
class IdxCountMismatch : public IdxError {
 public:
  using IdxError::IdxError;
};

inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;

/// Images [N x 1 x H x W] with pixels in [0, 1] and one class index per image.
/// Pixels are kept in float regardless of the training precision.
struct Dataset {
  Tensor<float> images;
  std::vector<int> labels;
  std::string name;
  std::string split;

  std::size_t size() const { return labels.size(); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
  std::size_t pixels() const { return images.size() / size(); }
  std::span<const float> image(std::size_t index) const {
    return images.data().subspan(index * pixels(), pixels());
  }
};

/// Reads an (images, labels) pair of big-endian IDX files. Pixels are divided
/// by 255; counts are cross-checked between the two files.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Loads "train" or "test" from a directory holding the four standard MNIST
/// (or Fashion-MNIST) files.
Dataset load_mnist(const std::filesystem::path& dir, const std::string& split, const std::string& name = "mnist");

/// Writes `ds` back to IDX; pixels are rounded to the nearest byte.
void write_idx(const Dataset& ds, const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Deterministic stratified sample of n items, class counts differing by at
/// most one (limited by availability). Selected items keep their original
/// relative order. n >= size() returns the dataset unchanged.
Dataset subset(const Dataset& ds, std::size_t n, std::uint64_t seed);

/// Indices that subset() would select.
std::vector<std::size_t> stratified_indices(std::span<const int> labels, std::size_t n, std::uint64_t seed,
                                            int num_classes = 10);

/// Copies the given rows into a batch tensor [count x 1 x H x W] of type T.
template <typename T>
Tensor<T> gather_images(const Dataset& ds, std::span<const std::size_t> indices);

}  // namespace capsroute
