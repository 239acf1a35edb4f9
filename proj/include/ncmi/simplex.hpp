#pragma once

#include <span>
#include <vector>

#include "ncmi/tensor.hpp"

namespace ncmi::simplex {

// Log-argument floor for KL / cross-entropy. Keeps ln bounded near -27.6
// without distorting values at the scales this library works at.
inline constexpr double kEpsFloor = 1e-12;

// Rows are points on the probability simplex.
struct ProbMatrix {
  std::size_t rows = 0;
  std::size_t dim = 0;
  std::vector<double> values;

  ProbMatrix() = default;
  ProbMatrix(std::size_t r, std::size_t d) : rows(r), dim(d), values(r * d, 0.0) {}

  std::span<const double> row(std::size_t i) const { return {&values[i * dim], dim}; }
  std::span<double> row(std::size_t i) { return {&values[i * dim], dim}; }

  static ProbMatrix from_tensor(const Tensor& t);

  // Entries in [0, 1] and row sums within tol of 1; throws ContractError.
  void check_valid(double tol = 1e-9) const;
};

// sum_i p[i] * ln(p[i]/q[i]), log arguments clamped at kEpsFloor. Returns 0
// exactly when the rows are identical.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// -sum_i p[i] * ln(q[i]) with the same clamp. Satisfies
// cross_entropy(p,q) - cross_entropy(p,p) == kl_divergence(p,q).
double cross_entropy(std::span<const double> p, std::span<const double> q);

// Normalized sigmoid: elementwise sigmoid then l1-normalize. Every entry is
// strictly positive and the max/min entry ratio is bounded by 1/sigmoid(min z),
// so the output can never collapse onto a simplex vertex.
std::vector<double> nsf(std::span<const double> z);

// Max-subtracted softmax.
std::vector<double> softmax(std::span<const double> z);

// z / (||z||_2 * tau). An all-zero row maps to the uniform direction
// (1/sqrt(D) per entry, then scaled) and bumps *zero_rows when given.
std::vector<double> normalize_and_scale(std::span<const double> z, double tau,
                                        long* zero_rows = nullptr);

// EMA feature center (the anti-collapse centering state).
struct CenterState {
  std::vector<double> center;
  double momentum = 0.9;
};

CenterState make_center(std::size_t dim, double momentum);

// center <- m*center + (1-m)*column_mean(batch). Reads values only, so the
// update never contributes gradient.
void ema_center_update(CenterState& state, const Tensor& batch_features);

// z - center, broadcast across rows. The center enters as a constant.
Tensor apply_center(const Tensor& z, const CenterState& state);

// ---- differentiable row-wise versions (for the training graph) ------------

Tensor l2_normalize_rows(const Tensor& z, double tau, long* zero_rows = nullptr);
Tensor nsf_rows(const Tensor& z);
Tensor softmax_rows(const Tensor& z);
Tensor log_softmax_rows(const Tensor& z);

}  // namespace ncmi::simplex
