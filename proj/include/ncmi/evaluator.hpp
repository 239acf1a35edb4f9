#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ncmi/simplex.hpp"
#include "ncmi/tensor.hpp"

namespace ncmi {

struct EvalResult {
  std::string protocol;  // "cc" or "lp"
  double top1 = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> precision, recall, f1;  // per class
  std::vector<std::vector<std::size_t>> confusion;  // [true][pred]
  std::size_t n_eval = 0;
};

// Nearest class centroid in KL divergence; ties break toward the lowest
// class index.
std::vector<int> classify_cc(const simplex::ProbMatrix& probs,
                             const simplex::ProbMatrix& centroids);

// Fraction of samples whose true label is among the k centroids closest in
// KL divergence.
double topk_accuracy(const simplex::ProbMatrix& probs, const simplex::ProbMatrix& centroids,
                     std::span<const int> labels, std::size_t k);

std::vector<std::vector<std::size_t>> confusion_matrix(std::span<const int> truth,
                                                       std::span<const int> predicted,
                                                       int class_count);

// Per-class precision/recall/F1 and their unweighted means; 0/0 counts as 0.
EvalResult metrics_from_confusion(const std::vector<std::vector<std::size_t>>& confusion);

EvalResult evaluate_cc(const simplex::ProbMatrix& probs, std::span<const int> labels,
                       const simplex::ProbMatrix& centroids);

EvalResult evaluate_predictions(std::span<const int> truth, std::span<const int> predicted,
                                int class_count, const std::string& protocol);

// ---- linear probing ----------------------------------------------------------

struct ProbeConfig {
  int epochs = 100;
  double lr = 0.1;  // cosine-annealed
  double momentum = 0.9;
  double weight_decay = 0.0;
  int batch_size = 128;
  std::uint64_t seed = 1;
};

struct ProbeResult {
  std::vector<double> weight;  // [feat_dim, classes], row-major
  std::vector<double> bias;    // [classes]
  double train_top1 = 0.0;
  EvalResult eval;             // on the test features
};

// Trains a linear classifier with cross-entropy on frozen feature rows and
// evaluates on test features. Test labels are only ever read to score the
// final predictions.
ProbeResult linear_probe(const Tensor& train_features, std::span<const int> train_labels,
                         const Tensor& test_features, std::span<const int> test_labels,
                         int class_count, const ProbeConfig& config);

// ---- correlation study ---------------------------------------------------------

struct PearsonReport {
  double r = 0.0;
  bool defined = false;
  std::size_t n = 0;
};

PearsonReport pearson(std::span<const double> xs, std::span<const double> ys);

}  // namespace ncmi
