#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace l2ae {

/// Images as flat rows of [0, 1] pixels with integer labels.
struct ImageDataset {
  std::size_t height = 0, width = 0, channels = 1;
  Tensor<float> pixels;  // [n, height * width * channels]
  std::vector<int> labels;
  std::string source;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return height * width * channels; }

  int num_classes() const {
    return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  }

  std::size_t count(int label) const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label)); }

  void validate() const {
    if (pixels.rank() != 2 || pixels.dim(0) != labels.size() || pixels.dim(1) != dim())
      throw DimensionError("dataset pixel tensor " + shape_str(pixels.shape()) + " inconsistent with " +
                           std::to_string(labels.size()) + " samples of " + std::to_string(dim()) + " values");
    for (auto v : pixels.values())
      if (!(v >= 0.0f && v <= 1.0f)) throw ConfigError("dataset pixel outside [0, 1]");
    for (auto l : labels)
      if (l < 0) throw ConfigError("dataset label must be non-negative");
  }

  bool operator==(const ImageDataset&) const = default;
};

/// Rows `indices` of `ds`, in the given order.
inline ImageDataset select(const ImageDataset& ds, const std::vector<std::size_t>& indices, const std::string& tag) {
  if (indices.empty()) throw ConfigError("selection of zero samples from " + ds.source);
  ImageDataset out;
  out.height = ds.height;
  out.width = ds.width;
  out.channels = ds.channels;
  out.source = tag.empty() ? ds.source : ds.source + "|" + tag;
  const std::size_t d = ds.dim();
  std::vector<float> px;
  px.reserve(indices.size() * d);
  for (auto i : indices) {
    if (i >= ds.size()) throw ConfigError("selection index " + std::to_string(i) + " out of range");
    auto row = ds.pixels.row(i);
    px.insert(px.end(), row.begin(), row.end());
    out.labels.push_back(ds.labels[i]);
  }
  out.pixels = Tensor<float>({indices.size(), d}, std::move(px));
  return out;
}

/// Concatenation of datasets with identical image shapes.
inline ImageDataset concat(const ImageDataset& a, const ImageDataset& b, const std::string& source) {
  if (a.height != b.height || a.width != b.width || a.channels != b.channels)
    throw DimensionError("cannot concatenate datasets of different image shapes");
  ImageDataset out = a;
  out.source = source;
  auto px = a.pixels.storage();
  px.insert(px.end(), b.pixels.storage().begin(), b.pixels.storage().end());
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.pixels = Tensor<float>({out.labels.size(), a.dim()}, std::move(px));
  return out;
}

// ---------------------------------------------------------------------------
// MNIST IDX
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

/// Whole file contents; gzip members are inflated transparently, plain files pass through.
inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (f == nullptr) throw FormatError("cannot open " + path);
  std::vector<std::uint8_t> bytes;
  std::uint8_t buf[1 << 16];
  for (;;) {
    const int got = gzread(f, buf, sizeof buf);
    if (got < 0) {
      int errnum = 0;
      const std::string msg = gzerror(f, &errnum);
      gzclose(f);
      throw FormatError(path + ": read failed at byte " + std::to_string(bytes.size()) + ": " + msg);
    }
    if (got == 0) break;
    bytes.insert(bytes.end(), buf, buf + got);
  }
  gzclose(f);
  return bytes;
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t offset, const std::string& path) {
  if (offset + 4 > b.size())
    throw FormatError(path + ": truncated header at byte offset " + std::to_string(offset));
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) | (std::uint32_t{b[offset + 2]} << 8) |
         std::uint32_t{b[offset + 3]};
}

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

inline void expect_size(const std::vector<std::uint8_t>& b, std::size_t expected, const std::string& path) {
  if (b.size() < expected)
    throw FormatError(path + ": truncated payload, data ends at byte offset " + std::to_string(b.size()) +
                      ", expected " + std::to_string(expected));
  if (b.size() > expected)
    throw FormatError(path + ": " + std::to_string(b.size() - expected) + " trailing bytes after byte offset " +
                      std::to_string(expected));
}

}  // namespace detail

/// Parses an MNIST image/label IDX pair (plain or gzipped).
inline ImageDataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_file_bytes(images_path);
  const auto lab = detail::read_file_bytes(labels_path);
  const auto img_magic = detail::read_be32(img, 0, images_path);
  if (img_magic != kIdxImageMagic)
    throw FormatError(images_path + ": bad magic at byte offset 0 (expected 0x00000803)");
  const auto lab_magic = detail::read_be32(lab, 0, labels_path);
  if (lab_magic != kIdxLabelMagic)
    throw FormatError(labels_path + ": bad magic at byte offset 0 (expected 0x00000801)");
  const std::size_t n = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t n_labels = detail::read_be32(lab, 4, labels_path);
  if (n == 0 || rows == 0 || cols == 0) throw FormatError(images_path + ": zero dimension in header");
  if (n != n_labels)
    throw FormatError("image count " + std::to_string(n) + " != label count " + std::to_string(n_labels));
  detail::expect_size(img, 16 + n * rows * cols, images_path);
  detail::expect_size(lab, 8 + n, labels_path);

  ImageDataset ds;
  ds.height = rows;
  ds.width = cols;
  ds.channels = 1;
  ds.source = "mnist-idx:" + images_path;
  std::vector<float> px(n * rows * cols);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<float>(img[16 + i] / 255.0);
  ds.pixels = Tensor<float>({n, rows * cols}, std::move(px));
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (lab[8 + i] > 9) throw FormatError(labels_path + ": label out of range at byte offset " + std::to_string(8 + i));
    ds.labels[i] = lab[8 + i];
  }
  return ds;
}

/// IDX image bytes of a dataset; pixels are quantized as round(255·p).
inline std::vector<std::uint8_t> idx_image_bytes(const ImageDataset& ds) {
  std::vector<std::uint8_t> out;
  out.reserve(20 + ds.pixels.size());
  const bool color = ds.channels != 1;
  detail::put_be32(out, color ? 0x00000804 : kIdxImageMagic);
  detail::put_be32(out, static_cast<std::uint32_t>(ds.size()));
  detail::put_be32(out, static_cast<std::uint32_t>(ds.height));
  detail::put_be32(out, static_cast<std::uint32_t>(ds.width));
  if (color) detail::put_be32(out, static_cast<std::uint32_t>(ds.channels));
  for (auto p : ds.pixels.values())
    out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(p, 0.0f, 1.0f) * 255.0f)));
  return out;
}

inline std::vector<std::uint8_t> idx_label_bytes(const ImageDataset& ds) {
  std::vector<std::uint8_t> out;
  detail::put_be32(out, kIdxLabelMagic);
  detail::put_be32(out, static_cast<std::uint32_t>(ds.size()));
  for (auto l : ds.labels) {
    if (l < 0 || l > 255) throw ConfigError("label " + std::to_string(l) + " does not fit an IDX byte");
    out.push_back(static_cast<std::uint8_t>(l));
  }
  return out;
}

inline void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("short write to " + path);
}

inline void write_idx(const ImageDataset& ds, const std::string& images_path, const std::string& labels_path) {
  write_bytes(images_path, idx_image_bytes(ds));
  write_bytes(labels_path, idx_label_bytes(ds));
}

// ---------------------------------------------------------------------------
// USPS text
// ---------------------------------------------------------------------------

inline constexpr std::size_t kUspsSide = 16;

/// Parses whitespace-separated rows of `label v1 ... v256`.
///
/// Values are mapped affinely from the declared range to [0, 1]. The range
/// defaults to [-1, 1] (the common distribution) and can be declared by a
/// header line `# range <lo> <hi>`. Other lines starting with '#' and blank
/// lines are ignored. Values outside the declared range are rejected.
inline ImageDataset load_usps_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  double lo = -1.0, hi = 1.0;
  std::vector<float> px;
  std::vector<int> labels;
  std::string line;
  std::size_t line_no = 0;
  const std::size_t d = kUspsSide * kUspsSide;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    if (line[first] == '#') {
      std::istringstream hs(line.substr(first + 1));
      std::string word;
      if (hs >> word && word == "range") {
        if (!labels.empty()) throw FormatError(path + ":" + std::to_string(line_no) + ": range header after data");
        if (!(hs >> lo >> hi) || !(hi > lo))
          throw FormatError(path + ":" + std::to_string(line_no) + ": malformed range header");
      }
      continue;
    }
    std::istringstream ls(line);
    std::vector<double> fields;
    std::string tok;
    while (ls >> tok) {
      try {
        std::size_t used = 0;
        fields.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw FormatError(path + ":" + std::to_string(line_no) + ": non-numeric field '" + tok + "'");
      }
    }
    if (fields.size() != d + 1)
      throw FormatError(path + ":" + std::to_string(line_no) + ": expected label + 256 values, got " +
                        std::to_string(fields.size()) + " fields");
    const double label = fields[0];
    if (label != std::floor(label) || label < 0 || label > 9)
      throw FormatError(path + ":" + std::to_string(line_no) + ": label must be an integer 0-9");
    labels.push_back(static_cast<int>(label));
    for (std::size_t j = 1; j <= d; ++j) {
      if (fields[j] < lo || fields[j] > hi)
        throw FormatError(path + ":" + std::to_string(line_no) + ": value outside declared range");
      px.push_back(static_cast<float>((fields[j] - lo) / (hi - lo)));
    }
  }
  if (labels.empty()) throw FormatError(path + ": no samples");
  ImageDataset ds;
  ds.height = kUspsSide;
  ds.width = kUspsSide;
  ds.channels = 1;
  ds.source = "usps-text:" + path;
  ds.pixels = Tensor<float>({labels.size(), d}, std::move(px));
  ds.labels = std::move(labels);
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic data and subsets
// ---------------------------------------------------------------------------

/// Gaussian blobs in [0, 1]^dim.
///
/// Class c is centered at 0.5 + (separation / 2)·u_c for a random unit
/// direction u_c; samples add N(0, noise²) per coordinate and are clipped to
/// [0, 1]. Samples are ordered class by class. Shape is 1 × dim × 1.
inline ImageDataset synth_blobs(int num_classes, std::size_t per_class, std::size_t dim, double separation,
                                double noise, const Rng& rng) {
  if (num_classes < 1 || per_class < 1 || dim < 1) throw ConfigError("synth_blobs needs positive sizes");
  if (!(separation > 0)) throw ConfigError("synth_blobs separation must be > 0");
  if (!(noise >= 0)) throw ConfigError("synth_blobs noise must be >= 0");
  ImageDataset ds;
  ds.height = 1;
  ds.width = dim;
  ds.channels = 1;
  std::ostringstream src;
  src << "synth-blobs:k=" << num_classes << ",per_class=" << per_class << ",dim=" << dim << ",sep=" << separation
      << ",noise=" << noise << ",seed=" << rng.seed();
  ds.source = src.str();
  std::vector<float> px;
  px.reserve(num_classes * per_class * dim);
  for (int c = 0; c < num_classes; ++c) {
    Rng dir_rng = rng.child("center").child(static_cast<std::uint64_t>(c));
    std::vector<double> center(dim);
    double norm = 0;
    for (auto& v : center) {
      v = dir_rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : center) v = 0.5 + 0.5 * separation * v / norm;
    Rng sample_rng = rng.child("samples").child(static_cast<std::uint64_t>(c));
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t j = 0; j < dim; ++j)
        px.push_back(static_cast<float>(std::clamp(center[j] + noise * sample_rng.normal(), 0.0, 1.0)));
      ds.labels.push_back(c);
    }
  }
  ds.pixels = Tensor<float>({ds.labels.size(), dim}, std::move(px));
  return ds;
}

/// Reinterprets flat rows as h × w × c images.
inline ImageDataset with_shape(ImageDataset ds, std::size_t h, std::size_t w, std::size_t c) {
  if (h * w * c != ds.dim())
    throw DimensionError("cannot view " + std::to_string(ds.dim()) + " values as " + std::to_string(h) + "x" +
                         std::to_string(w) + "x" + std::to_string(c));
  ds.height = h;
  ds.width = w;
  ds.channels = c;
  return ds;
}

/// Indices of each label, in dataset order.
inline std::map<int, std::vector<std::size_t>> indices_by_label(const ImageDataset& ds) {
  std::map<int, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < ds.size(); ++i) out[ds.labels[i]].push_back(i);
  return out;
}

/// Seeded class-stratified subset of `per_class` samples per label; keeps dataset order.
inline ImageDataset subsample_per_class(const ImageDataset& ds, std::size_t per_class, const Rng& rng) {
  std::vector<std::size_t> keep;
  for (const auto& [label, idx] : indices_by_label(ds)) {
    if (idx.size() < per_class)
      throw ConfigError("class " + std::to_string(label) + " has " + std::to_string(idx.size()) + " samples, " +
                        std::to_string(per_class) + " requested");
    Rng class_rng = rng.child(static_cast<std::uint64_t>(label));
    for (auto k : class_rng.sample_without_replacement(idx.size(), per_class)) keep.push_back(idx[k]);
  }
  std::sort(keep.begin(), keep.end());
  return select(ds, keep, "per_class=" + std::to_string(per_class) + ",seed=" + std::to_string(rng.seed()));
}

/// Seeded uniform subset of `total` samples; keeps dataset order.
inline ImageDataset subsample_total(const ImageDataset& ds, std::size_t total, const Rng& rng) {
  if (total > ds.size())
    throw ConfigError(std::to_string(total) + " samples requested from a dataset of " + std::to_string(ds.size()));
  Rng r = rng;
  auto keep = r.sample_without_replacement(ds.size(), total);
  std::sort(keep.begin(), keep.end());
  return select(ds, keep, "total=" + std::to_string(total) + ",seed=" + std::to_string(rng.seed()));
}

/// Named index subsets of one dataset.
struct SplitSpec {
  std::map<std::string, std::vector<std::size_t>> subsets;
  std::uint64_t seed = 0;

  void validate(std::size_t n) const {
    for (const auto& [name, idx] : subsets) {
      std::set<std::size_t> seen;
      for (auto i : idx) {
        if (i >= n) throw ConfigError("split '" + name + "' index " + std::to_string(i) + " out of range");
        if (!seen.insert(i).second) throw ConfigError("split '" + name + "' repeats index " + std::to_string(i));
      }
    }
  }
};

/// Stratified two-way split: `holdout_per_class` samples of each label go to
/// "test", the rest to "train". Both keep dataset order.
inline SplitSpec stratified_holdout(const ImageDataset& ds, std::size_t holdout_per_class, const Rng& rng) {
  SplitSpec split;
  split.seed = rng.seed();
  auto& train = split.subsets["train"];
  auto& test = split.subsets["test"];
  for (const auto& [label, idx] : indices_by_label(ds)) {
    if (idx.size() <= holdout_per_class)
      throw ConfigError("class " + std::to_string(label) + " too small for a holdout of " +
                        std::to_string(holdout_per_class));
    Rng class_rng = rng.child(static_cast<std::uint64_t>(label));
    auto picked = class_rng.sample_without_replacement(idx.size(), holdout_per_class);
    std::vector<bool> in_test(idx.size(), false);
    for (auto k : picked) in_test[k] = true;
    for (std::size_t k = 0; k < idx.size(); ++k) (in_test[k] ? test : train).push_back(idx[k]);
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  split.validate(ds.size());
  return split;
}

}  // namespace l2ae
