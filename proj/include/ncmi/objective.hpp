#pragma once

#include <optional>
#include <span>
#include <string_view>

#include "ncmi/metrics.hpp"
#include "ncmi/simplex.hpp"
#include "ncmi/tensor.hpp"

namespace ncmi::objective {

// Minimum trusted denominator; batches below it are skipped rather than
// divided through.
inline constexpr double kMinDenominator = 1e-8;

enum class HeadKind { nsf, softmax };

// Learnable per-class centroids: unconstrained rows xi mapped to the simplex
// by the head function. q is recomputed from xi every step.
struct CentroidBank {
  Tensor xi;  // [classes, dim], requires_grad
  int class_count = 0;
  int dim = 0;
};

CentroidBank make_centroid_bank(int class_count, int dim, Rng& rng, double init_std = 0.01);

// Differentiable q = head(xi), one simplex row per class.
Tensor centroid_q_tensor(const CentroidBank& bank, HeadKind head);
// Plain values of the same.
simplex::ProbMatrix centroid_q(const CentroidBank& bank, HeadKind head);

struct BatchLossBreakdown {
  double numerator = 0.0;    // concentration term
  double denominator = 0.0;  // separation term
  double loss = 0.0;
  std::size_t pairs_used = 0;  // ordered cross-class pairs in the batch
  bool skipped = false;
  std::string_view skip_reason;
};

struct BatchLoss {
  Tensor loss;  // undefined when skipped
  BatchLossBreakdown breakdown;
};

// The trainable ratio objective on one batch:
//   numerator   = (1/B)   sum_x D(p_x || q^{c_x})
//   denominator = (1/B^2) sum over ordered pairs (x,z), c_x != c_z, of
//                         sum_i p_x[i] * ln(q^{c_x}[i] / p_z[i])
// With q fixed at the exact class centroids the ratio equals CMI/Gamma on the
// same samples. Gradients flow to both probs and q from one backward pass.
// Single-class batches and denominators below kMinDenominator are skipped
// with a reason instead of erroring.
BatchLoss batch_ncmi_loss(const Tensor& probs, std::span<const int> labels, const Tensor& q);
BatchLoss batch_ncmi_loss(const Tensor& probs, std::span<const int> labels,
                          const CentroidBank& bank, HeadKind head = HeadKind::nsf);

// Reference evaluation by the literal pairwise double sum, independent of the
// autodiff path. Numerator/denominator are always filled; `skipped` flags
// single-class label sets and out-of-range denominators.
BatchLossBreakdown ncmi_loss_value(const simplex::ProbMatrix& probs, std::span<const int> labels,
                                   const simplex::ProbMatrix& q);

// Relative gap between the ratio objective evaluated at the exact class
// centroids and cmi/gamma from the metrics module. Empty when gamma is
// undefined.
std::optional<double> theorem1_residual(const simplex::ProbMatrix& probs,
                                        std::span<const int> labels, int class_count);

// Sets xi so that head(xi) reproduces the exact class centroids of a full
// epoch of outputs. Solved in closed form. For nsf: any scale S with
// t_j*S in (0,1) makes xi_j = logit(t_j * S) exact, and S = m/2 maps the
// uniform target to the zero vector. For softmax: xi_j = ln(t_j).
void centroid_greedy_refresh(CentroidBank& bank, const simplex::ProbMatrix& epoch_probs,
                             std::span<const int> labels, HeadKind head = HeadKind::nsf);

}  // namespace ncmi::objective
