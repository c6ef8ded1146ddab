#include "capsroute/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

#include "capsroute/rng.hpp"

namespace capsroute {

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IdxError("cannot open IDX file " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& bytes, std::size_t offset, const std::filesystem::path& path) {
  if (offset + 4 > bytes.size()) throw IdxTruncated("IDX header truncated in " + path.string());
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                              static_cast<char>(v)};
  out.write(b.data(), 4);
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);

  const auto img_magic = be32(img, 0, images_path);
  if (img_magic != kIdxImageMagic) {
    throw IdxBadMagic("bad image magic " + std::to_string(img_magic) + " in " + images_path.string());
  }
  const auto lab_magic = be32(lab, 0, labels_path);
  if (lab_magic != kIdxLabelMagic) {
    throw IdxBadMagic("bad label magic " + std::to_string(lab_magic) + " in " + labels_path.string());
  }
  const std::size_t n_img = be32(img, 4, images_path);
  const std::size_t rows = be32(img, 8, images_path);
  const std::size_t cols = be32(img, 12, images_path);
  const std::size_t n_lab = be32(lab, 4, labels_path);
  if (n_img != n_lab) {
    throw IdxCountMismatch(std::to_string(n_img) + " images but " + std::to_string(n_lab) + " labels");
  }
  if (n_img == 0 || rows == 0 || cols == 0) throw IdxError("empty IDX dataset in " + images_path.string());
  if (img.size() < 16 + n_img * rows * cols) throw IdxTruncated("image data truncated in " + images_path.string());
  if (lab.size() < 8 + n_lab) throw IdxTruncated("label data truncated in " + labels_path.string());

  Dataset ds;
  ds.images = Tensor<float>({n_img, 1, rows, cols});
  for (std::size_t k = 0; k < ds.images.size(); ++k) ds.images[k] = static_cast<float>(img[16 + k]) / 255.0f;
  ds.labels.resize(n_lab);
  for (std::size_t k = 0; k < n_lab; ++k) ds.labels[k] = lab[8 + k];
  return ds;
}

Dataset load_mnist(const std::filesystem::path& dir, const std::string& split, const std::string& name) {
  std::string prefix;
  if (split == "train") {
    prefix = "train";
  } else if (split == "test") {
    prefix = "t10k";
  } else {
    throw std::invalid_argument("split must be 'train' or 'test', got '" + split + "'");
  }
  Dataset ds = load_idx(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"));
  ds.name = name;
  ds.split = split;
  return ds;
}

void write_idx(const Dataset& ds, const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw IdxError("cannot open IDX output files");
  put_be32(img, kIdxImageMagic);
  put_be32(img, static_cast<std::uint32_t>(ds.size()));
  put_be32(img, static_cast<std::uint32_t>(ds.height()));
  put_be32(img, static_cast<std::uint32_t>(ds.width()));
  for (float p : ds.images.data()) {
    const auto byte = static_cast<unsigned char>(std::lround(std::clamp(p, 0.0f, 1.0f) * 255.0f));
    img.put(static_cast<char>(byte));
  }
  put_be32(lab, kIdxLabelMagic);
  put_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (int l : ds.labels) lab.put(static_cast<char>(l));
  if (!img || !lab) throw IdxError("failed writing IDX files");
}

std::vector<std::size_t> stratified_indices(std::span<const int> labels, std::size_t n, std::uint64_t seed,
                                            int num_classes) {
  std::vector<std::size_t> all(labels.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (n >= labels.size()) return all;

  const auto K = static_cast<std::size_t>(num_classes);
  std::vector<std::vector<std::size_t>> by_class(K);
  for (std::size_t k = 0; k < labels.size(); ++k) {
    const int l = labels[k];
    if (l < 0 || l >= num_classes) throw std::out_of_range("label outside class range in stratified_indices");
    by_class[static_cast<std::size_t>(l)].push_back(k);
  }
  Rng rng(seed);
  for (auto& members : by_class) rng.shuffle(std::span<std::size_t>(members));

  // Classes receiving the n % K extra items are chosen by a seeded permutation.
  std::vector<std::size_t> order(K);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));

  std::vector<std::size_t> quota(K, n / K);
  for (std::size_t r = 0; r < n % K; ++r) quota[order[r]] += 1;
  // Shortfall from small classes is handed round-robin to classes with spare items.
  std::size_t shortfall = 0;
  for (std::size_t c = 0; c < K; ++c) {
    if (quota[c] > by_class[c].size()) {
      shortfall += quota[c] - by_class[c].size();
      quota[c] = by_class[c].size();
    }
  }
  while (shortfall > 0) {
    bool progressed = false;
    for (std::size_t r = 0; r < K && shortfall > 0; ++r) {
      const std::size_t c = order[r];
      if (quota[c] < by_class[c].size()) {
        ++quota[c];
        --shortfall;
        progressed = true;
      }
    }
    if (!progressed) break;
  }

  std::vector<std::size_t> picked;
  picked.reserve(n);
  for (std::size_t c = 0; c < K; ++c) {
    picked.insert(picked.end(), by_class[c].begin(), by_class[c].begin() + static_cast<std::ptrdiff_t>(quota[c]));
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

Dataset subset(const Dataset& ds, std::size_t n, std::uint64_t seed) {
  if (n >= ds.size()) return ds;
  int classes = 0;
  for (int l : ds.labels) classes = std::max(classes, l + 1);
  const auto picked = stratified_indices(ds.labels, n, seed, std::max(classes, 10));
  Dataset out;
  out.name = ds.name;
  out.split = ds.split;
  out.images = gather_images<float>(ds, picked);
  out.labels.reserve(picked.size());
  for (auto k : picked) out.labels.push_back(ds.labels[k]);
  return out;
}

template <typename T>
Tensor<T> gather_images(const Dataset& ds, std::span<const std::size_t> indices) {
  const std::size_t px = ds.pixels();
  Tensor<T> out({indices.size(), ds.images.dim(1), ds.height(), ds.width()});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= ds.size()) throw std::out_of_range("gather_images: index out of range");
    const float* src = ds.images.raw() + indices[r] * px;
    T* dst = out.raw() + r * px;
    for (std::size_t p = 0; p < px; ++p) dst[p] = static_cast<T>(src[p]);
  }
  return out;
}

template Tensor<float> gather_images(const Dataset&, std::span<const std::size_t>);
template Tensor<double> gather_images(const Dataset&, std::span<const std::size_t>);

}  // namespace capsroute
