#include "ncmi/metrics.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "ncmi/error.hpp"
#include "ncmi/exact_sum.hpp"

namespace ncmi::metrics {

using simplex::ProbMatrix;

// Cross-sample accumulations use ExactSum so every report field is
// bit-identical under any permutation of the samples.

namespace {

void check_labels(std::span<const int> labels, std::size_t rows, int class_count) {
  if (labels.size() != rows) {
    throw ContractError("metrics: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(rows) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= class_count) {
      throw ContractError("metrics: label " + std::to_string(y) + " out of range for " +
                          std::to_string(class_count) + " classes");
    }
  }
}

std::vector<double> per_class_cmi_sums(const ProbMatrix& probs, std::span<const int> labels,
                                       const CentroidSet& centroids) {
  const std::size_t c = centroids.counts.size();
  std::vector<ExactSum> sums(c);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    const std::size_t y = static_cast<std::size_t>(labels[i]);
    sums[y].add(simplex::kl_divergence(probs.row(i), centroids.centroids.row(y)));
  }
  std::vector<double> out(c);
  for (std::size_t y = 0; y < c; ++y) out[y] = sums[y].value();
  return out;
}

}  // namespace

CentroidSet class_centroids(const ProbMatrix& probs, std::span<const int> labels,
                            int class_count) {
  check_labels(labels, probs.rows, class_count);
  const std::size_t c = static_cast<std::size_t>(class_count);
  std::vector<ExactSum> acc(c * probs.dim);
  CentroidSet set;
  set.counts.assign(c, 0);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    const std::size_t y = static_cast<std::size_t>(labels[i]);
    ++set.counts[y];
    const auto src = probs.row(i);
    for (std::size_t j = 0; j < probs.dim; ++j) acc[y * probs.dim + j].add(src[j]);
  }
  set.centroids = ProbMatrix(c, probs.dim);
  for (std::size_t y = 0; y < c; ++y) {
    if (set.counts[y] == 0) {
      throw ContractError("class_centroids: class " + std::to_string(y) + " has no samples");
    }
    for (std::size_t j = 0; j < probs.dim; ++j) {
      set.centroids.row(y)[j] = acc[y * probs.dim + j].value() / static_cast<double>(set.counts[y]);
    }
  }
  return set;
}

double cmi(const ProbMatrix& probs, std::span<const int> labels, const CentroidSet& centroids) {
  check_labels(labels, probs.rows, static_cast<int>(centroids.counts.size()));
  if (centroids.centroids.dim != probs.dim) {
    throw ContractError("cmi: centroid dim " + std::to_string(centroids.centroids.dim) +
                        " vs prob dim " + std::to_string(probs.dim));
  }
  const auto class_sums = per_class_cmi_sums(probs, labels, centroids);
  double total = 0.0;
  for (double s : class_sums) total += s;  // fixed class order
  return total / static_cast<double>(probs.rows);
}

double gamma(const ProbMatrix& probs, std::span<const int> labels, const CentroidSet& centroids) {
  check_labels(labels, probs.rows, static_cast<int>(centroids.counts.size()));
  const double n = static_cast<double>(probs.rows);
  double total = 0.0;
  for (std::size_t y = 0; y < centroids.counts.size(); ++y) {
    if (centroids.counts[y] == 0) continue;
    ExactSum class_sum;
    for (std::size_t z = 0; z < probs.rows; ++z) {
      if (static_cast<std::size_t>(labels[z]) == y) continue;
      class_sum.add(simplex::kl_divergence(centroids.centroids.row(y), probs.row(z)));
    }
    total += static_cast<double>(centroids.counts[y]) * class_sum.value();
  }
  return total / (n * n);
}

NcmiReport ncmi_report(const ProbMatrix& probs, std::span<const int> labels, int class_count) {
  if (class_count < 2) {
    throw ContractError("ncmi_report: need at least 2 classes, got " +
                        std::to_string(class_count));
  }
  const CentroidSet set = class_centroids(probs, labels, class_count);
  NcmiReport rep;
  rep.n_samples = probs.rows;
  rep.n_classes = static_cast<std::size_t>(class_count);
  const auto class_sums = per_class_cmi_sums(probs, labels, set);
  rep.per_class_cmi.assign(rep.n_classes, 0.0);
  double total = 0.0;
  for (std::size_t y = 0; y < rep.n_classes; ++y) {
    rep.per_class_cmi[y] = class_sums[y] / static_cast<double>(set.counts[y]);
    total += class_sums[y];
  }
  rep.cmi = total / static_cast<double>(probs.rows);
  rep.gamma = gamma(probs, labels, set);
  if (rep.gamma < kGammaUndefined) {
    rep.defined = false;
    rep.ncmi = std::numeric_limits<double>::quiet_NaN();
  } else {
    rep.defined = true;
    rep.ncmi = rep.cmi / rep.gamma;
  }
  return rep;
}

}  // namespace ncmi::metrics
