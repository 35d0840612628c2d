#pragma once

// Paired feature ingestion.
//
// Feature file (little-endian):
//   bytes 0..3   magic "GPLF"
//   u32          format version (1)
//   u32          n (rows)
//   u32          dim (columns)
//   n*dim f32    row-major payload
// Files ending in ".csv" are read as one comma-separated row per instance.
//
// Manifest: "key = value" lines, '#' starts a comment. Keys: image, text,
// labels (optional), train, test. Relative paths resolve against the
// manifest's directory. Rows [0, train) form the training split and rows
// [train, train + test) the test split.

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gpldan/errors.hpp"
#include "gpldan/numgrad.hpp"

namespace gpldan {

using numgrad::Matrix;
using FeatureMatrix = Matrix;

inline constexpr char kFeatureMagic[4] = {'G', 'P', 'L', 'F'};
inline constexpr std::uint32_t kFeatureVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

inline std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= std::uint32_t(static_cast<unsigned char>(p[b])) << (8 * b);
  return v;
}

inline std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(LoadError::Kind::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_all(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw LoadError(LoadError::Kind::io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw LoadError(LoadError::Kind::io, "short write to " + path.string());
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline std::string encode_feature_file(const FeatureMatrix& m) {
  std::string out(kFeatureMagic, 4);
  detail::put_u32(out, kFeatureVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(m.rows()));
  detail::put_u32(out, static_cast<std::uint32_t>(m.cols()));
  out.reserve(out.size() + 4 * static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(m.data()[i])));
  return out;
}

inline FeatureMatrix decode_feature_file(const std::string& bytes, const std::string& origin = "<memory>") {
  using K = LoadError::Kind;
  if (bytes.size() < 16) throw LoadError(K::truncated, origin + ": header needs 16 bytes, got " + std::to_string(bytes.size()));
  if (bytes.compare(0, 4, kFeatureMagic, 4) != 0) throw LoadError(K::bad_magic, origin + ": magic is not GPLF");
  const std::uint32_t version = detail::get_u32(bytes.data() + 4);
  if (version != kFeatureVersion)
    throw LoadError(K::bad_version, origin + ": unsupported feature file version " + std::to_string(version));
  const std::uint64_t n = detail::get_u32(bytes.data() + 8);
  const std::uint64_t dim = detail::get_u32(bytes.data() + 12);
  const std::uint64_t expected = 16 + 4 * n * dim;
  if (bytes.size() != expected)
    throw LoadError(bytes.size() < expected ? K::truncated : K::count_mismatch,
                    origin + ": expected " + std::to_string(expected) + " bytes for " + std::to_string(n) + "x" +
                        std::to_string(dim) + ", got " + std::to_string(bytes.size()));
  FeatureMatrix m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  const char* p = bytes.data() + 16;
  for (Eigen::Index i = 0; i < m.size(); ++i, p += 4) {
    const float f = std::bit_cast<float>(detail::get_u32(p));
    if (!std::isfinite(f))
      throw LoadError(K::non_finite, origin + ": non-finite value at element " + std::to_string(i));
    m.data()[i] = f;
  }
  return m;
}

inline FeatureMatrix read_feature_csv(const std::filesystem::path& path) {
  std::istringstream in(detail::read_all(path));
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    std::vector<double> row;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) {
      const std::string t = detail::trim(cell);
      char* end = nullptr;
      const double v = std::strtod(t.c_str(), &end);
      if (t.empty() || end != t.c_str() + t.size())
        throw LoadError(LoadError::Kind::parse, path.string() + ":" + std::to_string(line_no) + ": bad number '" + t + "'");
      if (!std::isfinite(v))
        throw LoadError(LoadError::Kind::non_finite, path.string() + ":" + std::to_string(line_no) + ": non-finite value");
      row.push_back(v);
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw LoadError(LoadError::Kind::count_mismatch, path.string() + ":" + std::to_string(line_no) + ": expected " +
                                                           std::to_string(rows.front().size()) + " columns, got " +
                                                           std::to_string(row.size()));
    rows.push_back(std::move(row));
  }
  const Eigen::Index n = Eigen::Index(rows.size()), d = rows.empty() ? 0 : Eigen::Index(rows.front().size());
  FeatureMatrix m(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = rows[std::size_t(i)][std::size_t(j)];
  return m;
}

inline FeatureMatrix read_feature_file(const std::filesystem::path& path) {
  if (path.extension() == ".csv") return read_feature_csv(path);
  return decode_feature_file(detail::read_all(path), path.string());
}

inline void write_feature_file(const std::filesystem::path& path, const FeatureMatrix& m) {
  detail::write_all(path, encode_feature_file(m));
}

inline std::vector<int> read_labels(const std::filesystem::path& path) {
  std::istringstream in(detail::read_all(path));
  std::vector<int> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    try {
      std::size_t used = 0;
      labels.push_back(std::stoi(t, &used));
      if (used != t.size()) throw std::invalid_argument(t);
    } catch (const std::exception&) {
      throw LoadError(LoadError::Kind::parse, path.string() + ":" + std::to_string(line_no) + ": bad label '" + t + "'");
    }
  }
  return labels;
}

inline void write_labels(const std::filesystem::path& path, const std::vector<int>& labels) {
  std::string out;
  for (int l : labels) out += std::to_string(l) + "\n";
  detail::write_all(path, out);
}

struct DatasetManifest {
  std::filesystem::path image_path;
  std::filesystem::path text_path;
  std::optional<std::filesystem::path> labels_path;
  std::size_t train_count = 0;
  std::size_t test_count = 0;
};

inline DatasetManifest parse_manifest(const std::filesystem::path& path) {
  std::istringstream in(detail::read_all(path));
  const std::filesystem::path base = path.parent_path();
  DatasetManifest m;
  bool has_image = false, has_text = false, has_train = false, has_test = false;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& why) {
    throw LoadError(LoadError::Kind::parse, path.string() + ":" + std::to_string(line_no) + ": " + why);
  };
  auto count = [&](const std::string& v) -> std::size_t {
    try {
      std::size_t used = 0;
      const long long x = std::stoll(v, &used);
      if (used != v.size() || x < 0) throw std::invalid_argument(v);
      return std::size_t(x);
    } catch (const std::exception&) {
      fail("bad count '" + v + "'");
    }
    return 0;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (detail::trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key == "image") {
      m.image_path = base / value;
      has_image = true;
    } else if (key == "text") {
      m.text_path = base / value;
      has_text = true;
    } else if (key == "labels") {
      m.labels_path = base / value;
    } else if (key == "train") {
      m.train_count = count(value);
      has_train = true;
    } else if (key == "test") {
      m.test_count = count(value);
      has_test = true;
    } else {
      fail("unknown key '" + key + "'");
    }
  }
  if (!has_image || !has_text) throw LoadError(LoadError::Kind::parse, path.string() + ": image and text are required");
  if (!has_train || !has_test) throw LoadError(LoadError::Kind::parse, path.string() + ": train and test sizes are required");
  return m;
}

/// Writes a manifest whose paths are stored relative to its own directory when possible.
inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  const auto base = path.parent_path();
  auto rel = [&](const std::filesystem::path& p) {
    auto r = std::filesystem::relative(p, base.empty() ? std::filesystem::path(".") : base);
    return r.empty() ? p.generic_string() : r.generic_string();
  };
  std::string out = "# gpldan dataset manifest\n";
  out += "image = " + rel(m.image_path) + "\n";
  out += "text = " + rel(m.text_path) + "\n";
  if (m.labels_path) out += "labels = " + rel(*m.labels_path) + "\n";
  out += "train = " + std::to_string(m.train_count) + "\n";
  out += "test = " + std::to_string(m.test_count) + "\n";
  detail::write_all(path, out);
}

/// Image and text features where row i of both describes the same object.
struct PairedDataset {
  FeatureMatrix image;
  FeatureMatrix text;
  std::optional<std::vector<int>> labels;
  std::size_t train_count = 0;
  std::size_t test_count = 0;

  std::size_t size() const { return std::size_t(image.rows()); }

  FeatureMatrix train_image() const { return image.topRows(Eigen::Index(train_count)); }
  FeatureMatrix train_text() const { return text.topRows(Eigen::Index(train_count)); }
  FeatureMatrix test_image() const { return image.middleRows(Eigen::Index(train_count), Eigen::Index(test_count)); }
  FeatureMatrix test_text() const { return text.middleRows(Eigen::Index(train_count), Eigen::Index(test_count)); }
  std::vector<int> test_labels() const {
    if (!labels) throw ContractError("data_io", "dataset has no labels");
    return {labels->begin() + std::ptrdiff_t(train_count), labels->begin() + std::ptrdiff_t(train_count + test_count)};
  }
  std::vector<int> train_labels() const {
    if (!labels) throw ContractError("data_io", "dataset has no labels");
    return {labels->begin(), labels->begin() + std::ptrdiff_t(train_count)};
  }

  void validate() const {
    using K = LoadError::Kind;
    if (image.rows() != text.rows())
      throw LoadError(K::count_mismatch, "image has " + std::to_string(image.rows()) + " rows, text has " +
                                             std::to_string(text.rows()));
    if (labels && labels->size() != size())
      throw LoadError(K::count_mismatch, "labels have " + std::to_string(labels->size()) + " entries, features have " +
                                             std::to_string(size()) + " rows");
    if (train_count + test_count > size())
      throw LoadError(K::count_mismatch, "split " + std::to_string(train_count) + "+" + std::to_string(test_count) +
                                             " exceeds " + std::to_string(size()) + " instances");
  }
};

inline PairedDataset load(const std::filesystem::path& manifest_path) {
  const DatasetManifest m = parse_manifest(manifest_path);
  PairedDataset ds;
  ds.image = read_feature_file(m.image_path);
  ds.text = read_feature_file(m.text_path);
  if (m.labels_path) ds.labels = read_labels(*m.labels_path);
  ds.train_count = m.train_count;
  ds.test_count = m.test_count;
  ds.validate();
  return ds;
}

/// Writes image.gplf, text.gplf, labels.txt (when present) and manifest.txt into `dir`.
inline std::filesystem::path save(const std::filesystem::path& dir, const PairedDataset& ds) {
  ds.validate();
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.image_path = dir / "image.gplf";
  m.text_path = dir / "text.gplf";
  write_feature_file(m.image_path, ds.image);
  write_feature_file(m.text_path, ds.text);
  if (ds.labels) {
    m.labels_path = dir / "labels.txt";
    write_labels(*m.labels_path, *ds.labels);
  }
  m.train_count = ds.train_count;
  m.test_count = ds.test_count;
  const auto manifest = dir / "manifest.txt";
  write_manifest(manifest, m);
  return manifest;
}

struct SyntheticSpec {
  std::size_t n_clusters = 10;
  std::size_t n_per_cluster = 100;
  std::size_t test_per_cluster = 0;  // held-out draws appended after the training rows
  Eigen::Index dim_image = 64;
  Eigen::Index dim_text = 48;
  double noise_sigma = 0.316;
  std::uint64_t seed = 0;
};

/// Each cluster gets an independent N(0, 1) image prototype and text
/// prototype; instances add N(0, sigma^2) noise to both. Values are rounded
/// to float so the dataset survives a feature-file round trip unchanged.
inline PairedDataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.n_clusters == 0 || spec.n_per_cluster == 0 || spec.dim_image <= 0 || spec.dim_text <= 0)
    throw ConfigError("data_io", "synthetic dataset counts and dimensions must be positive");
  if (!(spec.noise_sigma >= 0.0) || !std::isfinite(spec.noise_sigma))
    throw ConfigError("data_io", "noise sigma must be finite and >= 0");
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  const auto C = Eigen::Index(spec.n_clusters);
  Matrix proto_img(C, spec.dim_image), proto_txt(C, spec.dim_text);
  for (Eigen::Index i = 0; i < proto_img.size(); ++i) proto_img.data()[i] = unit(rng);
  for (Eigen::Index i = 0; i < proto_txt.size(); ++i) proto_txt.data()[i] = unit(rng);

  const std::size_t per_total = spec.n_per_cluster + spec.test_per_cluster;
  const auto n = Eigen::Index(spec.n_clusters * per_total);
  PairedDataset ds;
  ds.image.resize(n, spec.dim_image);
  ds.text.resize(n, spec.dim_text);
  ds.labels.emplace();
  ds.labels->reserve(std::size_t(n));
  auto fill = [&](Eigen::Index row, Eigen::Index c) {
    for (Eigen::Index j = 0; j < spec.dim_image; ++j)
      ds.image(row, j) = static_cast<float>(proto_img(c, j) + spec.noise_sigma * unit(rng));
    for (Eigen::Index j = 0; j < spec.dim_text; ++j)
      ds.text(row, j) = static_cast<float>(proto_txt(c, j) + spec.noise_sigma * unit(rng));
    ds.labels->push_back(int(c));
  };
  Eigen::Index row = 0;
  for (Eigen::Index c = 0; c < C; ++c)
    for (std::size_t r = 0; r < spec.n_per_cluster; ++r) fill(row++, c);
  for (Eigen::Index c = 0; c < C; ++c)
    for (std::size_t r = 0; r < spec.test_per_cluster; ++r) fill(row++, c);
  ds.train_count = spec.n_clusters * spec.n_per_cluster;
  ds.test_count = spec.n_clusters * spec.test_per_cluster;
  return ds;
}

}  // namespace gpldan
