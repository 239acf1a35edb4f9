#include "ncmi/simplex.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ncmi/error.hpp"

namespace ncmi::simplex {

namespace {

double clamped_log(double x) { return std::log(std::max(x, kEpsFloor)); }

void check_same_dim(const char* name, std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw ContractError(std::string(name) + ": dimension mismatch " + std::to_string(p.size()) +
                        " vs " + std::to_string(q.size()));
  }
}

}  // namespace

ProbMatrix ProbMatrix::from_tensor(const Tensor& t) {
  if (t.rank() != 2) {
    throw ContractError("ProbMatrix: expected a 2-D tensor, got " + shape_str(t.shape()));
  }
  ProbMatrix m(t.rows(), t.cols());
  const auto v = t.value();
  m.values.assign(v.begin(), v.end());
  return m;
}

void ProbMatrix::check_valid(double tol) const {
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (double x : row(r)) {
      if (!(x >= 0.0) || x > 1.0 + tol) {
        throw ContractError("ProbMatrix: entry " + std::to_string(x) + " in row " +
                            std::to_string(r) + " is outside [0,1]");
      }
      s += x;
    }
    if (std::abs(s - 1.0) > tol) {
      throw ContractError("ProbMatrix: row " + std::to_string(r) + " sums to " +
                          std::to_string(s));
    }
  }
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  check_same_dim("kl_divergence", p, q);
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    s += p[i] * (clamped_log(p[i]) - clamped_log(q[i]));
  }
  return s;
}

double cross_entropy(std::span<const double> p, std::span<const double> q) {
  check_same_dim("cross_entropy", p, q);
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s -= p[i] * clamped_log(q[i]);
  return s;
}

// Sigmoid floor: keeps NSF outputs strictly positive even where exp(-z)
// overflows (z < -745 rounds sigma to exact 0, and downstream logs reject 0).
inline constexpr double kSigmoidFloor = 1e-300;

std::vector<double> nsf(std::span<const double> z) {
  std::vector<double> out(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::max(1.0 / (1.0 + std::exp(-z[i])), kSigmoidFloor);
    total += out[i];
  }
  for (auto& x : out) x /= total;
  return out;
}

std::vector<double> softmax(std::span<const double> z) {
  std::vector<double> out(z.size());
  const double m = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::max(std::exp(z[i] - m), kSigmoidFloor);
    total += out[i];
  }
  for (auto& x : out) x /= total;
  return out;
}

std::vector<double> normalize_and_scale(std::span<const double> z, double tau, long* zero_rows) {
  if (!(tau > 0.0)) throw ContractError("normalize_and_scale: tau must be > 0");
  double sq = 0.0;
  for (double x : z) sq += x * x;
  std::vector<double> out(z.size());
  if (sq == 0.0) {
    if (zero_rows) ++*zero_rows;
    const double u = 1.0 / (std::sqrt(static_cast<double>(z.size())) * tau);
    std::fill(out.begin(), out.end(), u);
    return out;
  }
  const double inv = 1.0 / (std::sqrt(sq) * tau);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] * inv;
  return out;
}

CenterState make_center(std::size_t dim, double momentum) {
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ContractError("center momentum must lie in [0,1), got " + std::to_string(momentum));
  }
  return CenterState{std::vector<double>(dim, 0.0), momentum};
}

void ema_center_update(CenterState& state, const Tensor& batch_features) {
  const std::size_t b = batch_features.rows(), d = batch_features.cols();
  if (b == 0) throw ContractError("ema_center_update: empty batch");
  if (d != state.center.size()) {
    throw ContractError("ema_center_update: feature dim " + std::to_string(d) +
                        " does not match center dim " + std::to_string(state.center.size()));
  }
  const auto v = batch_features.value();
  std::vector<double> m(d, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) m[j] += v[i * d + j];
  for (std::size_t j = 0; j < d; ++j) {
    state.center[j] = state.momentum * state.center[j] + (1.0 - state.momentum) * (m[j] / b);
  }
}

Tensor apply_center(const Tensor& z, const CenterState& state) {
  Tensor c = Tensor::from_data({state.center.size()}, state.center);
  return sub(z, c);
}

// ---- differentiable row-wise ops -------------------------------------------

Tensor l2_normalize_rows(const Tensor& z, double tau, long* zero_rows) {
  if (!(tau > 0.0)) throw ContractError("l2_normalize_rows: tau must be > 0");
  if (z.rank() != 2) {
    throw ContractError("l2_normalize_rows: expected 2-D input, got " + shape_str(z.shape()));
  }
  const std::size_t b = z.rows(), d = z.cols();
  const auto v = z.value();
  std::vector<double> out(b * d);
  std::vector<double> norms(b);  // 0 marks a substituted row
  for (std::size_t i = 0; i < b; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += v[i * d + j] * v[i * d + j];
    if (sq == 0.0) {
      if (zero_rows) ++*zero_rows;
      norms[i] = 0.0;
      const double u = 1.0 / (std::sqrt(static_cast<double>(d)) * tau);
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] = u;
      continue;
    }
    norms[i] = std::sqrt(sq);
    const double inv = 1.0 / (norms[i] * tau);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = v[i * d + j] * inv;
  }
  return make_op("l2_normalize_rows", {z}, z.shape(), std::move(out),
                 [b, d, tau, norms = std::move(norms)](TensorImpl& o,
                                                       const std::vector<Tensor>& in) {
                   if (!in[0].requires_grad()) return;
                   auto& gz = grad_buffer(in[0]);
                   const auto& g = o.grad;
                   const auto v = in[0].value();
                   // y = z/(r*tau): dz = g/(r*tau) - z (g.z)/(r^3 tau).
                   for (std::size_t i = 0; i < b; ++i) {
                     const double r = norms[i];
                     if (r == 0.0) continue;  // substituted rows are constant
                     double dot = 0.0;
                     for (std::size_t j = 0; j < d; ++j) dot += g[i * d + j] * v[i * d + j];
                     const double a = 1.0 / (r * tau);
                     const double s = dot / (r * r * r * tau);
                     for (std::size_t j = 0; j < d; ++j) {
                       gz[i * d + j] += g[i * d + j] * a - v[i * d + j] * s;
                     }
                   }
                 });
}

Tensor nsf_rows(const Tensor& z) {
  if (z.rank() != 2) {
    throw ContractError("nsf_rows: expected 2-D input, got " + shape_str(z.shape()));
  }
  const std::size_t b = z.rows(), d = z.cols();
  const auto v = z.value();
  std::vector<double> out(b * d);
  std::vector<double> sig(b * d);  // raw sigmoids, reused by backward
  std::vector<double> tot(b);
  for (std::size_t i = 0; i < b; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      sig[i * d + j] = std::max(1.0 / (1.0 + std::exp(-v[i * d + j])), kSigmoidFloor);
      s += sig[i * d + j];
    }
    tot[i] = s;
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = sig[i * d + j] / s;
  }
  return make_op("nsf_rows", {z}, z.shape(), std::move(out),
                 [b, d, sig = std::move(sig), tot = std::move(tot)](
                     TensorImpl& o, const std::vector<Tensor>& in) {
                   if (!in[0].requires_grad()) return;
                   auto& gz = grad_buffer(in[0]);
                   const auto& g = o.grad;
                   const auto& p = o.value;
                   // dz_k = s_k(1-s_k) * (g_k - sum_j g_j p_j) / S
                   for (std::size_t i = 0; i < b; ++i) {
                     double gp = 0.0;
                     for (std::size_t j = 0; j < d; ++j) gp += g[i * d + j] * p[i * d + j];
                     for (std::size_t j = 0; j < d; ++j) {
                       const double sj = sig[i * d + j];
                       gz[i * d + j] += sj * (1.0 - sj) * (g[i * d + j] - gp) / tot[i];
                     }
                   }
                 });
}

Tensor softmax_rows(const Tensor& z) {
  if (z.rank() != 2) {
    throw ContractError("softmax_rows: expected 2-D input, got " + shape_str(z.shape()));
  }
  const std::size_t b = z.rows(), d = z.cols();
  const auto v = z.value();
  std::vector<double> out(b * d);
  for (std::size_t i = 0; i < b; ++i) {
    auto row = softmax(std::span<const double>(&v[i * d], d));
    std::copy(row.begin(), row.end(), &out[i * d]);
  }
  return make_op("softmax_rows", {z}, z.shape(), std::move(out),
                 [b, d](TensorImpl& o, const std::vector<Tensor>& in) {
                   if (!in[0].requires_grad()) return;
                   auto& gz = grad_buffer(in[0]);
                   const auto& g = o.grad;
                   const auto& p = o.value;
                   for (std::size_t i = 0; i < b; ++i) {
                     double gp = 0.0;
                     for (std::size_t j = 0; j < d; ++j) gp += g[i * d + j] * p[i * d + j];
                     for (std::size_t j = 0; j < d; ++j) {
                       gz[i * d + j] += p[i * d + j] * (g[i * d + j] - gp);
                     }
                   }
                 });
}

Tensor log_softmax_rows(const Tensor& z) {
  if (z.rank() != 2) {
    throw ContractError("log_softmax_rows: expected 2-D input, got " + shape_str(z.shape()));
  }
  const std::size_t b = z.rows(), d = z.cols();
  const auto v = z.value();
  std::vector<double> out(b * d);
  for (std::size_t i = 0; i < b; ++i) {
    const double m = *std::max_element(&v[i * d], &v[i * d] + d);
    double total = 0.0;
    for (std::size_t j = 0; j < d; ++j) total += std::exp(v[i * d + j] - m);
    const double lse = m + std::log(total);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = v[i * d + j] - lse;
  }
  return make_op("log_softmax_rows", {z}, z.shape(), std::move(out),
                 [b, d](TensorImpl& o, const std::vector<Tensor>& in) {
                   if (!in[0].requires_grad()) return;
                   auto& gz = grad_buffer(in[0]);
                   const auto& g = o.grad;
                   const auto& l = o.value;
                   for (std::size_t i = 0; i < b; ++i) {
                     double gs = 0.0;
                     for (std::size_t j = 0; j < d; ++j) gs += g[i * d + j];
                     for (std::size_t j = 0; j < d; ++j) {
                       gz[i * d + j] += g[i * d + j] - std::exp(l[i * d + j]) * gs;
                     }
                   }
                 });
}

}  // namespace ncmi::simplex
