#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "autobot/error.hpp"
#include "autobot/tensor.hpp"

namespace autobot {

/// In-memory labelled image set, row-major [N, C, H, W].
struct Dataset {
  Shape sample_shape;
  std::vector<float> images;
  std::vector<int> labels;
  std::size_t num_classes = 10;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t sample_numel() const { return shape_numel(sample_shape); }

  Tensor batch(std::span<const std::size_t> idx) const {
    Shape s{idx.size()};
    s.insert(s.end(), sample_shape.begin(), sample_shape.end());
    Tensor out(s);
    const std::size_t m = sample_numel();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(images.begin() + static_cast<long>(idx[i] * m), m, out.ptr() + i * m);
    }
    return out;
  }

  std::vector<int> batch_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out;
    for (auto i : idx) out.push_back(labels.at(i));
    return out;
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset d{sample_shape, {}, {}, num_classes};
    const std::size_t m = sample_numel();
    d.images.reserve(idx.size() * m);
    for (auto i : idx) {
      d.images.insert(d.images.end(), images.begin() + static_cast<long>(i * m),
                      images.begin() + static_cast<long>((i + 1) * m));
      d.labels.push_back(labels.at(i));
    }
    return d;
  }

  std::vector<std::size_t> histogram() const {
    std::vector<std::size_t> h(num_classes, 0);
    for (int l : labels) h.at(static_cast<std::size_t>(l))++;
    return h;
  }
};

/// Per-channel mean / std.
struct Normalization {
  std::vector<float> mean;
  std::vector<float> stddev;

  static Normalization from(const Dataset& d) {
    const std::size_t c = d.sample_shape.at(0);
    const std::size_t plane = d.sample_numel() / c;
    Normalization n;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0, s2 = 0.0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        const float* p = d.images.data() + i * d.sample_numel() + ch * plane;
        for (std::size_t k = 0; k < plane; ++k) {
          s += p[k];
          s2 += double(p[k]) * p[k];
        }
      }
      const double cnt = double(d.size() * plane);
      const double mean = s / cnt;
      const double var = std::max(s2 / cnt - mean * mean, 1e-12);
      n.mean.push_back(float(mean));
      n.stddev.push_back(float(std::sqrt(var)));
    }
    return n;
  }

  void apply(Dataset& d) const {
    const std::size_t c = d.sample_shape.at(0);
    if (c != mean.size()) throw ShapeError("normalization: channel count mismatch");
    const std::size_t plane = d.sample_numel() / c;
    for (std::size_t i = 0; i < d.size(); ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        float* p = d.images.data() + i * d.sample_numel() + ch * plane;
        for (std::size_t k = 0; k < plane; ++k) p[k] = (p[k] - mean[ch]) / stddev[ch];
      }
    }
  }
};

namespace detail {

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw FormatError("dataset: cannot open '" + p.string() + "'");
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

inline std::uint32_t be32(const std::string& b, std::size_t off, const std::filesystem::path& p) {
  if (off + 4 > b.size()) {
    throw FormatError("dataset: '" + p.string() + "' truncated at byte offset " + std::to_string(b.size()));
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(b[off + i]);
  return v;
}

}  // namespace detail

/// Reads an IDX image file (magic 0x00000803) and label file (0x00000801).
/// Pixels are scaled to [0, 1].
inline Dataset read_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const std::string img = detail::read_file(images_path);
  const std::string lab = detail::read_file(labels_path);
  auto fail = [](const std::filesystem::path& p, std::size_t off, const std::string& why) {
    throw FormatError("dataset: '" + p.string() + "' byte offset " + std::to_string(off) + ": " + why);
  };
  if (detail::be32(img, 0, images_path) != 0x00000803) fail(images_path, 0, "bad IDX image magic");
  if (detail::be32(lab, 0, labels_path) != 0x00000801) fail(labels_path, 0, "bad IDX label magic");
  const std::size_t n = detail::be32(img, 4, images_path);
  const std::size_t rows = detail::be32(img, 8, images_path);
  const std::size_t cols = detail::be32(img, 12, images_path);
  const std::size_t nl = detail::be32(lab, 4, labels_path);
  if (nl != n) fail(labels_path, 4, std::to_string(nl) + " labels for " + std::to_string(n) + " images");
  if (rows == 0 || cols == 0) fail(images_path, 8, "zero image size");
  const std::size_t need = 16 + n * rows * cols;
  if (img.size() < need) fail(images_path, img.size(), "truncated, expected " + std::to_string(need) + " bytes");
  if (img.size() > need) fail(images_path, need, "trailing bytes");
  if (lab.size() != 8 + n) fail(labels_path, std::min(lab.size(), 8 + n), "label payload size mismatch");
  Dataset d{{1, rows, cols}, std::vector<float>(n * rows * cols), std::vector<int>(n), 10};
  for (std::size_t i = 0; i < n * rows * cols; ++i) {
    d.images[i] = float(static_cast<unsigned char>(img[16 + i])) / 255.0f;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const int l = static_cast<unsigned char>(lab[8 + i]);
    if (l > 9) fail(labels_path, 8 + i, "label " + std::to_string(l) + " out of range");
    d.labels[i] = l;
  }
  return d;
}

/// Reads CIFAR-10 binary batches: records of 1 label byte + 3x32x32 pixels.
inline Dataset read_cifar10(const std::vector<std::filesystem::path>& files) {
  constexpr std::size_t kPixels = 3 * 32 * 32;
  constexpr std::size_t kRecord = 1 + kPixels;
  Dataset d{{3, 32, 32}, {}, {}, 10};
  for (const auto& p : files) {
    const std::string b = detail::read_file(p);
    if (b.empty() || b.size() % kRecord != 0) {
      throw FormatError("dataset: '" + p.string() + "' byte offset " +
                        std::to_string(b.size() - b.size() % kRecord) + ": incomplete CIFAR-10 record");
    }
    for (std::size_t off = 0; off < b.size(); off += kRecord) {
      const int l = static_cast<unsigned char>(b[off]);
      if (l > 9) {
        throw FormatError("dataset: '" + p.string() + "' byte offset " + std::to_string(off) + ": label " +
                          std::to_string(l) + " out of range");
      }
      d.labels.push_back(l);
      for (std::size_t i = 0; i < kPixels; ++i) {
        d.images.push_back(float(static_cast<unsigned char>(b[off + 1 + i])) / 255.0f);
      }
    }
  }
  return d;
}

/// Seeded selection of round(fraction * N) items, in original order.
inline std::vector<std::size_t> subset_indices(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ValueError("dataset: fraction must lie in (0, 1]");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (fraction == 1.0) return idx;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(std::llround(fraction * double(n))));
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Permutation of [0, n) for one epoch, fixed by (seed, epoch).
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed, std::uint64_t epoch = 0) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::seed_seq seq{seed, epoch};
  std::mt19937_64 rng(seq);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

/// Raw ([0, 1]-scaled) split of "mnist" (IDX files) or "cifar10" /
/// "cifar10-subset" (binary batches) from `dir`.
inline Dataset load_split(const std::string& name, const std::filesystem::path& dir, const std::string& split,
                          double fraction = 1.0, std::uint64_t seed = 0) {
  if (split != "train" && split != "test") throw ValueError("dataset: split must be train or test");
  Dataset d;
  if (name == "mnist") {
    const std::string prefix = split == "train" ? "train" : "t10k";
    d = read_idx(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"));
  } else if (name == "cifar10" || name == "cifar10-subset") {
    std::vector<std::filesystem::path> files;
    if (split == "train") {
      for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    } else {
      files.push_back(dir / "test_batch.bin");
    }
    d = read_cifar10(files);
  } else {
    throw ValueError("dataset: unknown dataset '" + name + "'");
  }
  if (fraction < 1.0) d = d.subset(subset_indices(d.size(), fraction, seed));
  return d;
}

struct DataSplits {
  Dataset train;
  Dataset test;
  Normalization norm;
};

/// Train and test splits normalized with the training split's statistics.
inline DataSplits load_dataset(const std::string& name, const std::filesystem::path& dir, double fraction = 1.0,
                               std::uint64_t seed = 0) {
  DataSplits s;
  s.train = load_split(name, dir, "train", fraction, seed);
  s.test = load_split(name, dir, "test", fraction, seed);
  s.norm = Normalization::from(s.train);
  s.norm.apply(s.train);
  s.norm.apply(s.test);
  return s;
}

}  // namespace autobot
