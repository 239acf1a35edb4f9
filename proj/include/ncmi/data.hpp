#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ncmi/tensor.hpp"

namespace ncmi {

struct LabeledDataset {
  std::vector<double> inputs;  // row-major [n, input_dim]
  std::size_t n = 0;
  std::size_t input_dim = 0;
  std::vector<int> labels;
  int class_count = 0;
  std::array<std::size_t, 3> image_shape{0, 0, 0};  // (H, W, ch); zeros for tabular
  std::string split;
  // Per-channel standardization statistics (image data, computed on train).
  std::vector<double> feat_mean, feat_std;

  std::span<const double> input_row(std::size_t i) const { return {&inputs[i * input_dim], input_dim}; }
  bool is_image() const { return image_shape[0] > 0; }

  // Copies the selected rows into a leaf tensor [B, input_dim].
  Tensor batch(std::span<const std::size_t> idx) const;
  Tensor all_inputs() const;
};

struct DatasetPair {
  LabeledDataset train, test;
};

// Gaussian clusters at separation * u_y for seeded near-orthogonal unit
// directions u_y, isotropic noise `spread`, per-class 80/20 split, seeded
// shuffles. n_per_class counts train+test together.
DatasetPair gen_gaussian_blobs(int n_per_class, int classes, int dim, double separation,
                               double spread, std::uint64_t seed);

// Concentric 2-D annuli with radii y+1 and radial noise 0.1; not linearly
// separable. classes must lie in [2, 6].
DatasetPair gen_rings(int n_per_class, int classes, std::uint64_t seed);

// IDX image/label files (big-endian magic 0x803 / 0x801); pixels scaled to
// [0,1]. Throws distinct errors naming file and offset on magic mismatch,
// truncation, and image/label count disagreement.
LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path);

// Per-channel standardization; statistics come from the train split only and
// are stored on both splits. Stddev is floored at 1e-8.
void standardize_images(DatasetPair& pair);

// CSV with header x0..x{d-1},label.
void write_dataset_csv(const LabeledDataset& ds, const std::string& path);
LabeledDataset read_dataset_csv(const std::string& path, int class_count = 0);

}  // namespace ncmi
