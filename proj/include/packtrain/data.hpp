// Copyright (c) 2026 The packtrain Authors
// SPDX-License-Identifier: Apache-2.0
//
// Datasets, epoch orders, batching and the memoized preprocessing stage.
//
// Binary layout (all little-endian):
//   "PTDS" | u32 version | u64 N | u64 D | u32 class_count
//   | N*D f64 features (row-major) | N u32 labels
// Text layout: one sample per line, comma separated, last column is the label.

#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <shared_mutex>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "packtrain/error.hpp"
#include "packtrain/random.hpp"
#include "packtrain/tensor.hpp"

namespace packtrain {

static_assert(std::endian::native == std::endian::little, "byte codecs assume a little-endian host");

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s);
  }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    return get_bytes(n, what);
  }
  std::size_t position() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated input reading ") + what, pos_);
  }
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, std::span<const unsigned char> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace detail

struct Dataset {
  std::string id;
  Tensor features;  // [N, D]
  std::vector<std::uint32_t> labels;
  std::uint32_t class_count = 1;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t width() const noexcept { return features.cols(); }
};

inline std::vector<unsigned char> encode_dataset(const Dataset& ds) {
  detail::ByteWriter w;
  w.put_bytes("PTDS");
  w.put<std::uint32_t>(kDatasetFormatVersion);
  w.put<std::uint64_t>(ds.size());
  w.put<std::uint64_t>(ds.width());
  w.put<std::uint32_t>(ds.class_count);
  for (double v : ds.features.data) w.put<double>(v);
  for (std::uint32_t l : ds.labels) w.put<std::uint32_t>(l);
  return std::move(w.bytes());
}

// Content-derived identity: identical bytes always produce the same id.
inline std::string dataset_id_for(const Dataset& ds) { return "ds-" + detail::hex64(fnv1a64(encode_dataset(ds))); }

inline void validate_dataset(const Dataset& ds) {
  if (ds.size() == 0) throw Error("dataset has no samples");
  if (ds.class_count == 0) throw Error("dataset class_count must be >= 1");
  if (ds.features.shape != Shape{ds.size(), ds.width()}) throw Error("dataset features/labels disagree on N");
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (ds.labels[i] >= ds.class_count)
      throw Error("label " + std::to_string(ds.labels[i]) + " at sample " + std::to_string(i) + " >= class_count " +
                  std::to_string(ds.class_count));
}

inline Dataset make_dataset(Tensor features, std::vector<std::uint32_t> labels, std::uint32_t class_count) {
  Dataset ds{{}, std::move(features), std::move(labels), class_count};
  validate_dataset(ds);
  ds.id = dataset_id_for(ds);
  return ds;
}

inline Dataset decode_dataset(std::span<const unsigned char> bytes) {
  if (bytes.empty()) throw FormatError("empty dataset file", 0);
  detail::ByteReader r(bytes);
  if (r.get_bytes(4, "magic") != "PTDS") throw FormatError("bad dataset magic", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kDatasetFormatVersion) throw FormatError("unsupported dataset version " + std::to_string(version), 4);
  const auto n = r.get<std::uint64_t>("N");
  const auto d = r.get<std::uint64_t>("D");
  const auto classes = r.get<std::uint32_t>("class_count");
  if (n == 0) throw FormatError("dataset header declares N = 0", 8);
  if (d == 0) throw FormatError("dataset header declares D = 0", 16);
  if (classes == 0) throw FormatError("dataset header declares class_count = 0", 24);
  if (r.remaining() != n * d * 8 + n * 4)
    throw FormatError("payload length " + std::to_string(r.remaining()) + " disagrees with header", r.position());
  std::vector<double> feats(n * d);
  for (auto& v : feats) v = r.get<double>("features");
  std::vector<std::uint32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = r.position();
    labels[i] = r.get<std::uint32_t>("labels");
    if (labels[i] >= classes)
      throw FormatError("label " + std::to_string(labels[i]) + " >= class_count " + std::to_string(classes), at);
  }
  return make_dataset(Tensor({n, d}, std::move(feats)), std::move(labels), classes);
}

// Comma-delimited text; class_count is one past the largest label.
inline Dataset parse_dataset_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<double> feats;
  std::vector<std::uint32_t> labels;
  std::size_t width = 0;
  std::uint64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() < 2) throw FormatError("expected at least one feature and a label", line_no, "line");
    if (width == 0) width = cells.size() - 1;
    if (cells.size() - 1 != width)
      throw FormatError("row has " + std::to_string(cells.size() - 1) + " features, expected " + std::to_string(width), line_no, "line");
    for (std::size_t c = 0; c < cells.size(); ++c) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cells[c], &used);
      } catch (const std::exception&) {
        throw FormatError("unparsable cell '" + cells[c] + "'", line_no, "line");
      }
      if (cells[c].find_first_not_of(" \t", used) != std::string::npos || !std::isfinite(v))
        throw FormatError("unparsable cell '" + cells[c] + "'", line_no, "line");
      if (c + 1 < cells.size()) {
        feats.push_back(v);
      } else {
        if (v < 0 || v != std::floor(v) || v > 4294967295.0) throw FormatError("label must be a non-negative integer", line_no, "line");
        labels.push_back(static_cast<std::uint32_t>(v));
      }
    }
  }
  if (labels.empty()) throw FormatError("empty dataset file", 0);
  const std::uint32_t classes = *std::max_element(labels.begin(), labels.end()) + 1;
  const std::size_t n = labels.size();
  return make_dataset(Tensor({n, width}, std::move(feats)), std::move(labels), classes);
}

inline Dataset load_dataset(const std::string& path) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), "PTDS", 4) == 0) return decode_dataset(bytes);
  if (bytes.empty()) throw FormatError("empty dataset file '" + path + "'", 0);
  return parse_dataset_text(std::string(bytes.begin(), bytes.end()));
}

inline void save_dataset(const Dataset& ds, const std::string& path) { detail::write_file(path, encode_dataset(ds)); }

// Gaussian class blobs: class centres drawn with spread `separation`, unit
// noise around each centre. Labels cycle through the classes.
inline Dataset synth_dataset(std::size_t n, std::size_t d, std::uint32_t classes, std::uint64_t seed, double separation = 4.0) {
  if (n == 0 || d == 0 || classes == 0) throw ConfigError("synth_dataset", "n, d and classes must be >= 1");
  Rng rng(mix_seed(seed, 0x5eed));
  std::vector<double> centres(static_cast<std::size_t>(classes) * d);
  for (double& c : centres) c = separation * rng.normal();
  std::vector<double> feats(n * d);
  std::vector<std::uint32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<std::uint32_t>(i % classes);
    for (std::size_t j = 0; j < d; ++j) feats[i * d + j] = centres[labels[i] * d + j] + rng.normal();
  }
  return make_dataset(Tensor({n, d}, std::move(feats)), std::move(labels), classes);
}

inline Dataset subset(const Dataset& ds, std::span<const std::uint32_t> indices) {
  const std::size_t d = ds.width();
  std::vector<double> feats;
  feats.reserve(indices.size() * d);
  std::vector<std::uint32_t> labels;
  labels.reserve(indices.size());
  for (std::uint32_t i : indices) {
    feats.insert(feats.end(), ds.features.data.begin() + static_cast<std::ptrdiff_t>(i * d),
                 ds.features.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
    labels.push_back(ds.labels[i]);
  }
  return make_dataset(Tensor({indices.size(), d}, std::move(feats)), std::move(labels), ds.class_count);
}

struct Split {
  Dataset train;
  Dataset validation;
};

// Held-out split; the membership depends only on (dataset, fraction, seed).
inline Split split_dataset(const Dataset& ds, double validation_fraction, std::uint64_t seed) {
  const auto n_val = static_cast<std::size_t>(std::llround(validation_fraction * static_cast<double>(ds.size())));
  if (n_val == 0 || n_val >= ds.size()) throw ConfigError("validation_fraction", "split leaves an empty side");
  std::vector<std::uint32_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::uint32_t>(i);
  Rng rng(mix_seed(fnv1a64(ds.id), seed));
  rng.shuffle(order);
  std::vector<std::uint32_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::uint32_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {subset(ds, train), subset(ds, val)};
}

struct EpochPermutation {
  std::string dataset_id;
  std::uint64_t epoch = 0;
  std::vector<std::uint32_t> order;
};

inline EpochPermutation epoch_permutation(const std::string& dataset_id, std::size_t n, std::uint64_t epoch) {
  EpochPermutation p{dataset_id, epoch, std::vector<std::uint32_t>(n)};
  for (std::size_t i = 0; i < n; ++i) p.order[i] = static_cast<std::uint32_t>(i);
  Rng rng(mix_seed(fnv1a64(dataset_id), epoch));
  rng.shuffle(p.order);
  return p;
}

struct Batch {
  Tensor features;                     // [b, D]
  Tensor labels;                       // [b], class indices as f64
  std::vector<std::uint32_t> indices;  // sample indices, in batch order
};

inline Batch batch_at(const Dataset& ds, const EpochPermutation& perm, std::size_t cursor, std::size_t b) {
  if (perm.order.size() != ds.size()) throw Error("permutation length disagrees with dataset size");
  if (b == 0 || cursor + b > ds.size())
    throw ReplanNeeded("batch [" + std::to_string(cursor) + ", " + std::to_string(cursor + b) + ") crosses the epoch end " +
                       std::to_string(ds.size()));
  Batch out;
  out.indices.assign(perm.order.begin() + static_cast<std::ptrdiff_t>(cursor),
                     perm.order.begin() + static_cast<std::ptrdiff_t>(cursor + b));
  const std::size_t d = ds.width();
  std::vector<double> f(b * d), l(b);
  for (std::size_t r = 0; r < b; ++r) {
    const std::size_t i = out.indices[r];
    std::copy_n(ds.features.data.begin() + static_cast<std::ptrdiff_t>(i * d), d, f.begin() + static_cast<std::ptrdiff_t>(r * d));
    l[r] = static_cast<double>(ds.labels[i]);
  }
  out.features = Tensor({b, d}, std::move(f));
  out.labels = Tensor({b}, std::move(l));
  return out;
}

struct NormalizeStage {
  std::vector<double> mean;
  std::vector<double> stddev;
};

// Adds scale * N(0,1) noise drawn from (seed, sample index, column).
struct JitterStage {
  std::uint64_t seed = 0;
  double scale = 0.0;
};

using PreprocessStage = std::variant<NormalizeStage, JitterStage>;

struct PreprocessSpec {
  std::vector<PreprocessStage> stages;

  bool empty() const noexcept { return stages.empty(); }

  std::uint64_t digest() const {
    detail::ByteWriter w;
    for (const auto& s : stages) {
      if (const auto* n = std::get_if<NormalizeStage>(&s)) {
        w.put<std::uint8_t>(1);
        for (double v : n->mean) w.put<double>(v);
        for (double v : n->stddev) w.put<double>(v);
      } else {
        const auto& j = std::get<JitterStage>(s);
        w.put<std::uint8_t>(2);
        w.put<std::uint64_t>(j.seed);
        w.put<double>(j.scale);
      }
    }
    return fnv1a64(w.bytes());
  }
};

inline NormalizeStage normalize_stage_for(const Dataset& ds) {
  const std::size_t n = ds.size(), d = ds.width();
  NormalizeStage s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) s.mean[j] += ds.features.data[i * d + j];
  for (double& m : s.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = ds.features.data[i * d + j] - s.mean[j];
      s.stddev[j] += c * c;
    }
  for (double& v : s.stddev) {
    v = std::sqrt(v / static_cast<double>(n));
    if (v == 0.0) v = 1.0;
  }
  return s;
}

inline std::vector<double> preprocess_row(const PreprocessSpec& spec, std::span<const double> raw, std::uint32_t sample_index) {
  std::vector<double> row(raw.begin(), raw.end());
  for (const auto& s : spec.stages) {
    if (const auto* n = std::get_if<NormalizeStage>(&s)) {
      if (n->mean.size() != row.size() || n->stddev.size() != row.size()) throw ConfigError("preprocess", "normalize width mismatch");
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - n->mean[j]) / n->stddev[j];
    } else {
      const auto& jit = std::get<JitterStage>(s);
      Rng rng(mix_seed(jit.seed, sample_index));
      for (double& v : row) v += jit.scale * rng.normal();
    }
  }
  return row;
}

// Memo of preprocessed rows keyed by (dataset id, spec digest, sample index).
// Readers share the lock; a race on insertion may compute a row twice, which
// yields identical bytes.
class PreprocessCache {
 public:
  struct Stats {
    std::uint64_t computations = 0;
    std::uint64_t hits = 0;
  };

  static PreprocessCache& global() {
    static PreprocessCache cache;
    return cache;
  }

  std::vector<double> row(const std::string& dataset_id, const PreprocessSpec& spec, std::uint64_t digest,
                          std::span<const double> raw, std::uint32_t sample_index) {
    const Key key{dataset_id, digest, sample_index};
    {
      std::shared_lock lock(mutex_);
      const auto it = rows_.find(key);
      if (it != rows_.end()) {
        ++stats_hits_;
        return it->second;
      }
    }
    std::vector<double> out = preprocess_row(spec, raw, sample_index);
    std::unique_lock lock(mutex_);
    ++stats_computations_;
    rows_.emplace(key, out);
    return out;
  }

  Stats stats() const {
    std::shared_lock lock(mutex_);
    return {stats_computations_, stats_hits_.load()};
  }

  void clear() {
    std::unique_lock lock(mutex_);
    rows_.clear();
    stats_computations_ = 0;
    stats_hits_ = 0;
  }

 private:
  using Key = std::tuple<std::string, std::uint64_t, std::uint32_t>;
  mutable std::shared_mutex mutex_;
  std::map<Key, std::vector<double>> rows_;
  std::uint64_t stats_computations_ = 0;
  std::atomic<std::uint64_t> stats_hits_{0};
};

// Applies `spec` to a raw batch. With a cache, repeated (dataset, spec, index)
// requests are served from the memo.
inline Tensor preprocess(const PreprocessSpec& spec, const std::string& dataset_id, const Tensor& raw,
                         std::span<const std::uint32_t> indices, PreprocessCache* cache = nullptr) {
  if (spec.empty()) return raw;
  if (indices.size() != raw.rows()) throw ShapeError("preprocess", "indices and rows disagree");
  const std::size_t d = raw.cols();
  const std::uint64_t digest = spec.digest();
  Tensor out = Tensor::zeros(raw.shape);
  for (std::size_t r = 0; r < raw.rows(); ++r) {
    std::span<const double> src(raw.data.data() + r * d, d);
    std::vector<double> row = cache ? cache->row(dataset_id, spec, digest, src, indices[r]) : preprocess_row(spec, src, indices[r]);
    std::copy(row.begin(), row.end(), out.data.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  return out;
}

}  // namespace packtrain
