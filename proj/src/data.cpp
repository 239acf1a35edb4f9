#include "ncmi/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "ncmi/error.hpp"
#include "ncmi/rng.hpp"

namespace ncmi {

Tensor LabeledDataset::batch(std::span<const std::size_t> idx) const {
  std::vector<double> data(idx.size() * input_dim);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto row = input_row(idx[i]);
    std::copy(row.begin(), row.end(), &data[i * input_dim]);
  }
  return Tensor::from_data({idx.size(), input_dim}, std::move(data));
}

Tensor LabeledDataset::all_inputs() const {
  return Tensor::from_data({n, input_dim}, inputs);
}

namespace {

// Per-class 80/20 split with seeded within-class and whole-split shuffles.
DatasetPair split_dataset(std::vector<std::vector<double>> rows, std::vector<int> labels,
                          std::size_t dim, int classes, Rng& rng) {
  const std::size_t n = rows.size();
  std::vector<std::size_t> train_idx, test_idx;
  for (int y = 0; y < classes; ++y) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < n; ++i) {
      if (labels[i] == y) members.push_back(i);
    }
    rng.shuffle(members);
    const std::size_t n_train = members.size() * 4 / 5;
    for (std::size_t i = 0; i < members.size(); ++i) {
      (i < n_train ? train_idx : test_idx).push_back(members[i]);
    }
  }
  rng.shuffle(train_idx);
  rng.shuffle(test_idx);

  DatasetPair pair;
  auto fill = [&](LabeledDataset& ds, const std::vector<std::size_t>& idx, const char* tag) {
    ds.n = idx.size();
    ds.input_dim = dim;
    ds.class_count = classes;
    ds.split = tag;
    ds.inputs.resize(ds.n * dim);
    ds.labels.resize(ds.n);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy(rows[idx[i]].begin(), rows[idx[i]].end(), &ds.inputs[i * dim]);
      ds.labels[i] = labels[idx[i]];
    }
  };
  fill(pair.train, train_idx, "train");
  fill(pair.test, test_idx, "test");
  return pair;
}

}  // namespace

DatasetPair gen_gaussian_blobs(int n_per_class, int classes, int dim, double separation,
                               double spread, std::uint64_t seed) {
  if (classes < 2 || dim < 2) {
    throw ContractError("gen blobs: need classes >= 2 and dim >= 2");
  }
  if (n_per_class < 5) {
    throw ContractError("gen blobs: n_per_class must be >= 5 (an 80/20 split degenerates), got " +
                        std::to_string(n_per_class));
  }
  Rng rng = stream_rng(seed, RngStream::data_gen);

  // Seeded class directions, orthonormalized when the ambient dim allows.
  std::vector<std::vector<double>> dirs(classes, std::vector<double>(dim));
  for (auto& d : dirs) {
    for (auto& x : d) x = rng.normal();
  }
  for (int y = 0; y < classes; ++y) {
    if (y < dim) {
      for (int p = 0; p < y; ++p) {
        double dot = 0.0;
        for (int j = 0; j < dim; ++j) dot += dirs[y][j] * dirs[p][j];
        for (int j = 0; j < dim; ++j) dirs[y][j] -= dot * dirs[p][j];
      }
    }
    double norm = 0.0;
    for (double x : dirs[y]) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-9) norm = 1.0;
    for (auto& x : dirs[y]) x /= norm;
  }

  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  rows.reserve(static_cast<std::size_t>(classes) * n_per_class);
  for (int y = 0; y < classes; ++y) {
    for (int k = 0; k < n_per_class; ++k) {
      std::vector<double> row(dim);
      for (int j = 0; j < dim; ++j) row[j] = separation * dirs[y][j] + spread * rng.normal();
      rows.push_back(std::move(row));
      labels.push_back(y);
    }
  }
  return split_dataset(std::move(rows), std::move(labels), static_cast<std::size_t>(dim), classes,
                       rng);
}

DatasetPair gen_rings(int n_per_class, int classes, std::uint64_t seed) {
  if (classes < 2 || classes > 6) {
    throw ContractError("gen rings: classes must lie in [2,6], got " + std::to_string(classes));
  }
  if (n_per_class < 5) {
    throw ContractError("gen rings: n_per_class must be >= 5, got " + std::to_string(n_per_class));
  }
  Rng rng = stream_rng(seed, RngStream::data_gen);
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  for (int y = 0; y < classes; ++y) {
    for (int k = 0; k < n_per_class; ++k) {
      const double angle = 2.0 * std::numbers::pi * rng.uniform();
      const double radius = static_cast<double>(y + 1) + 0.1 * rng.normal();
      rows.push_back({radius * std::cos(angle), radius * std::sin(angle)});
      labels.push_back(y);
    }
  }
  return split_dataset(std::move(rows), std::move(labels), 2, classes, rng);
}

// ---- IDX ---------------------------------------------------------------------

namespace {

std::uint32_t read_be32(std::ifstream& f, const std::string& path, std::size_t offset) {
  unsigned char buf[4];
  f.read(reinterpret_cast<char*>(buf), 4);
  if (!f) {
    throw ContractError("idx: truncated file " + path + " at offset " + std::to_string(offset) +
                        " (expected 4 more bytes)");
  }
  return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
         (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

std::vector<unsigned char> read_bytes(std::ifstream& f, std::size_t count, const std::string& path,
                                      std::size_t offset) {
  std::vector<unsigned char> buf(count);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(f.gcount()) != count) {
    throw ContractError("idx: truncated file " + path + " at offset " + std::to_string(offset) +
                        " (expected " + std::to_string(count) + " bytes, got " +
                        std::to_string(f.gcount()) + ")");
  }
  return buf;
}

}  // namespace

LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw ContractError("idx: cannot open " + images_path);
  const std::uint32_t img_magic = read_be32(imgs, images_path, 0);
  if (img_magic != 0x00000803u) {
    char msg[128];
    std::snprintf(msg, sizeof msg, "idx: magic mismatch in %s at offset 0: expected 0x00000803, got 0x%08x",
                  images_path.c_str(), img_magic);
    throw ContractError(msg);
  }
  const std::uint32_t n_images = read_be32(imgs, images_path, 4);
  const std::uint32_t rows = read_be32(imgs, images_path, 8);
  const std::uint32_t cols = read_be32(imgs, images_path, 12);

  std::ifstream lbls(labels_path, std::ios::binary);
  if (!lbls) throw ContractError("idx: cannot open " + labels_path);
  const std::uint32_t lbl_magic = read_be32(lbls, labels_path, 0);
  if (lbl_magic != 0x00000801u) {
    char msg[128];
    std::snprintf(msg, sizeof msg, "idx: magic mismatch in %s at offset 0: expected 0x00000801, got 0x%08x",
                  labels_path.c_str(), lbl_magic);
    throw ContractError(msg);
  }
  const std::uint32_t n_labels = read_be32(lbls, labels_path, 4);
  if (n_images != n_labels) {
    throw ContractError("idx: image/label count mismatch: " + images_path + " has " +
                        std::to_string(n_images) + ", " + labels_path + " has " +
                        std::to_string(n_labels));
  }

  const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
  const auto img_bytes = read_bytes(imgs, static_cast<std::size_t>(n_images) * pixels,
                                    images_path, 16);
  const auto lbl_bytes = read_bytes(lbls, n_labels, labels_path, 8);

  LabeledDataset ds;
  ds.n = n_images;
  ds.input_dim = pixels;
  ds.image_shape = {rows, cols, 1};
  ds.inputs.resize(ds.n * pixels);
  for (std::size_t i = 0; i < ds.inputs.size(); ++i) {
    ds.inputs[i] = static_cast<double>(img_bytes[i]) / 255.0;
  }
  ds.labels.resize(ds.n);
  int max_label = 0;
  for (std::size_t i = 0; i < ds.n; ++i) {
    ds.labels[i] = static_cast<int>(lbl_bytes[i]);
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.class_count = max_label + 1;
  return ds;
}

void standardize_images(DatasetPair& pair) {
  if (!pair.train.is_image()) throw ContractError("standardize: train split is not image data");
  const std::size_t ch = pair.train.image_shape[2];
  const std::size_t per_sample = pair.train.input_dim;
  std::vector<double> mean(ch, 0.0), var(ch, 0.0);
  std::vector<std::size_t> count(ch, 0);
  for (std::size_t i = 0; i < pair.train.n; ++i) {
    for (std::size_t k = 0; k < per_sample; ++k) {
      const std::size_t c = k % ch;
      mean[c] += pair.train.inputs[i * per_sample + k];
      ++count[c];
    }
  }
  for (std::size_t c = 0; c < ch; ++c) mean[c] /= static_cast<double>(count[c]);
  for (std::size_t i = 0; i < pair.train.n; ++i) {
    for (std::size_t k = 0; k < per_sample; ++k) {
      const std::size_t c = k % ch;
      const double d = pair.train.inputs[i * per_sample + k] - mean[c];
      var[c] += d * d;
    }
  }
  std::vector<double> stddev(ch);
  for (std::size_t c = 0; c < ch; ++c) {
    stddev[c] = std::max(std::sqrt(var[c] / static_cast<double>(count[c])), 1e-8);
  }
  auto apply = [&](LabeledDataset& ds) {
    for (std::size_t i = 0; i < ds.n; ++i)
      for (std::size_t k = 0; k < ds.input_dim; ++k) {
        const std::size_t c = k % ch;
        ds.inputs[i * ds.input_dim + k] = (ds.inputs[i * ds.input_dim + k] - mean[c]) / stddev[c];
      }
    ds.feat_mean = mean;
    ds.feat_std = stddev;
  };
  apply(pair.train);
  apply(pair.test);
}

// ---- CSV ---------------------------------------------------------------------

void write_dataset_csv(const LabeledDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ContractError("cannot write " + path);
  for (std::size_t j = 0; j < ds.input_dim; ++j) out << "x" << j << ",";
  out << "label\n";
  char buf[32];
  for (std::size_t i = 0; i < ds.n; ++i) {
    for (std::size_t j = 0; j < ds.input_dim; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", ds.inputs[i * ds.input_dim + j]);
      out << buf << ",";
    }
    out << ds.labels[i] << "\n";
  }
}

LabeledDataset read_dataset_csv(const std::string& path, int class_count) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot read " + path);
  std::string line;
  if (!std::getline(in, line)) throw ContractError("empty dataset file " + path);
  std::size_t dim = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));

  LabeledDataset ds;
  ds.input_dim = dim;
  int max_label = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    for (std::size_t j = 0; j < dim; ++j) {
      if (!std::getline(ss, cell, ',')) {
        throw ContractError("malformed row in " + path + ": '" + line + "'");
      }
      ds.inputs.push_back(std::stod(cell));
    }
    if (!std::getline(ss, cell)) throw ContractError("missing label in " + path);
    const int y = std::stoi(cell);
    if (y < 0) throw ContractError("negative label in " + path);
    max_label = std::max(max_label, y);
    ds.labels.push_back(y);
    ++ds.n;
  }
  ds.class_count = class_count > 0 ? class_count : max_label + 1;
  return ds;
}

}  // namespace ncmi
