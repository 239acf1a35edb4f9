#pragma once

#include <span>
#include <vector>

#include "ncmi/simplex.hpp"

namespace ncmi::metrics {

// Gamma below this is reported as undefined rather than divided by.
inline constexpr double kGammaUndefined = 1e-15;

// Per-class arithmetic means of probability rows.
struct CentroidSet {
  simplex::ProbMatrix centroids;      // one row per class
  std::vector<std::size_t> counts;    // samples per class
};

struct NcmiReport {
  double cmi = 0.0;
  double gamma = 0.0;
  double ncmi = 0.0;  // NaN when !defined
  bool defined = false;
  std::vector<double> per_class_cmi;
  std::size_t n_samples = 0;
  std::size_t n_classes = 0;
};

// Every class in [0, class_count) must have at least one sample.
CentroidSet class_centroids(const simplex::ProbMatrix& probs, std::span<const int> labels,
                            int class_count);

// Average KL divergence from each sample's row to its own class centroid:
// the intra-class concentration of the outputs.
double cmi(const simplex::ProbMatrix& probs, std::span<const int> labels,
           const CentroidSet& centroids);

// Average over all ordered cross-class sample pairs (x, z) of
// D(centroid_of_x's_class || p_z), normalized by n^2: inter-class separation.
// Computed by grouping x by class, which is exactly equal to the literal
// pairwise double sum.
double gamma(const simplex::ProbMatrix& probs, std::span<const int> labels,
             const CentroidSet& centroids);

// cmi / gamma with per-class diagnostics; flagged undefined when gamma
// vanishes instead of dividing.
NcmiReport ncmi_report(const simplex::ProbMatrix& probs, std::span<const int> labels,
                       int class_count);

}  // namespace ncmi::metrics
