#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "ncmi/rng.hpp"
#include "ncmi/simplex.hpp"
#include "ncmi/tensor.hpp"

namespace testutil {

// Central finite differences against the autodiff gradient of `param` for a
// scalar loss rebuilt by `build_loss`. Returns the worst relative error over
// all entries.
inline double max_grad_rel_err(ncmi::Tensor param,
                               const std::function<ncmi::Tensor()>& build_loss,
                               double step = 1e-5) {
  ncmi::active_tape().clear();
  ncmi::Tensor loss = build_loss();
  param.zero_grad();
  ncmi::backward(loss);
  std::vector<double> autodiff(param.size(), 0.0);
  if (param.has_grad()) {
    const auto g = param.grad();
    autodiff.assign(g.begin(), g.end());
  }

  double worst = 0.0;
  auto values = param.mutable_value();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    double fp, fm;
    {
      ncmi::NoGradScope ng;
      values[i] = saved + step;
      fp = build_loss().item();
      values[i] = saved - step;
      fm = build_loss().item();
      values[i] = saved;
    }
    const double fd = (fp - fm) / (2.0 * step);
    const double denom = std::max({std::abs(fd), std::abs(autodiff[i]), 1e-8});
    worst = std::max(worst, std::abs(fd - autodiff[i]) / denom);
  }
  ncmi::active_tape().clear();
  return worst;
}

// Random simplex row (all-ones Dirichlet, via normalized exponentials).
inline std::vector<double> random_simplex_row(ncmi::Rng& rng, std::size_t dim) {
  std::vector<double> row(dim);
  double total = 0.0;
  for (auto& x : row) {
    x = -std::log(rng.uniform());
    total += x;
  }
  for (auto& x : row) x /= total;
  return row;
}

inline ncmi::simplex::ProbMatrix random_prob_matrix(ncmi::Rng& rng, std::size_t rows,
                                                    std::size_t dim) {
  ncmi::simplex::ProbMatrix m(rows, dim);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto row = random_simplex_row(rng, dim);
    std::copy(row.begin(), row.end(), m.row(i).begin());
  }
  return m;
}

// Balanced labels covering every class, then shuffled.
inline std::vector<int> balanced_labels(ncmi::Rng& rng, std::size_t n, int classes) {
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % classes);
  rng.shuffle(labels);
  return labels;
}

}  // namespace testutil
