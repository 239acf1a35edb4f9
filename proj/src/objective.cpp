#include "ncmi/objective.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ncmi/error.hpp"

namespace ncmi::objective {

using simplex::ProbMatrix;

CentroidBank make_centroid_bank(int class_count, int dim, Rng& rng, double init_std) {
  if (class_count < 2 || dim < 2) {
    throw ContractError("centroid bank needs >= 2 classes and dim >= 2");
  }
  CentroidBank bank;
  bank.class_count = class_count;
  bank.dim = dim;
  bank.xi = Tensor::randn({static_cast<std::size_t>(class_count), static_cast<std::size_t>(dim)},
                          rng, init_std, /*requires_grad=*/true);
  return bank;
}

Tensor centroid_q_tensor(const CentroidBank& bank, HeadKind head) {
  return head == HeadKind::nsf ? simplex::nsf_rows(bank.xi) : simplex::softmax_rows(bank.xi);
}

ProbMatrix centroid_q(const CentroidBank& bank, HeadKind head) {
  NoGradScope ng;
  return ProbMatrix::from_tensor(centroid_q_tensor(bank, head));
}

namespace {

std::vector<std::size_t> label_counts(std::span<const int> labels, int class_count) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(class_count), 0);
  for (int y : labels) {
    if (y < 0 || y >= class_count) {
      throw ContractError("batch loss: label " + std::to_string(y) + " outside bank of " +
                          std::to_string(class_count) + " classes");
    }
    ++counts[static_cast<std::size_t>(y)];
  }
  return counts;
}

std::size_t cross_pairs(const std::vector<std::size_t>& counts, std::size_t b) {
  std::size_t pairs = 0;
  for (auto c : counts) pairs += c * (b - c);
  return pairs;
}

}  // namespace

BatchLoss batch_ncmi_loss(const Tensor& probs, std::span<const int> labels, const Tensor& q) {
  if (probs.rank() != 2 || q.rank() != 2 || probs.cols() != q.cols()) {
    throw ContractError("batch loss: shapes " + shape_str(probs.shape()) + " and " +
                        shape_str(q.shape()) + " disagree");
  }
  const std::size_t b = probs.rows();
  if (labels.size() != b) {
    throw ContractError("batch loss: " + std::to_string(labels.size()) + " labels for batch of " +
                        std::to_string(b));
  }
  const int c = static_cast<int>(q.rows());
  const auto counts = label_counts(labels, c);

  BatchLoss result;
  result.breakdown.pairs_used = cross_pairs(counts, b);
  if (result.breakdown.pairs_used == 0) {
    result.breakdown.skipped = true;
    result.breakdown.skip_reason = "single_class_batch";
    return result;
  }

  const std::vector<int> idx(labels.begin(), labels.end());
  const double bf = static_cast<double>(b);

  Tensor logp = log(probs);
  Tensor logq_x = row_gather(log(q), idx);

  // (1/B) sum_x sum_i p_x[i] (ln p_x[i] - ln q^{c_x}[i])
  Tensor numerator = sum(mul(probs, sub(logp, logq_x))) / bf;

  // Grouped form of the pairwise sum:
  //   t1 = sum_x (B - |c_x|) sum_i p_x[i] ln q^{c_x}[i]
  //   t2 = sum_x sum_i p_x[i] (colsum(ln p)[i] - classsum(ln p)[c_x][i])
  std::vector<double> w(b);
  for (std::size_t i = 0; i < b; ++i) {
    w[i] = bf - static_cast<double>(counts[static_cast<std::size_t>(labels[i])]);
  }
  Tensor weights = Tensor::from_data({b}, std::move(w));
  Tensor t1 = sum(mul(sum(mul(probs, logq_x), 1), weights));
  Tensor other_logp = sub(sum(logp, 0), row_gather(class_row_sum(logp, idx, c), idx));
  Tensor t2 = sum(mul(probs, other_logp));
  Tensor denominator = sub(t1, t2) / (bf * bf);

  result.breakdown.numerator = numerator.item();
  result.breakdown.denominator = denominator.item();
  if (result.breakdown.denominator <= kMinDenominator) {
    result.breakdown.skipped = true;
    result.breakdown.skip_reason = "small_denominator";
    return result;
  }
  result.loss = div(numerator, denominator);
  result.breakdown.loss = result.loss.item();
  return result;
}

BatchLoss batch_ncmi_loss(const Tensor& probs, std::span<const int> labels,
                          const CentroidBank& bank, HeadKind head) {
  return batch_ncmi_loss(probs, labels, centroid_q_tensor(bank, head));
}

BatchLossBreakdown ncmi_loss_value(const ProbMatrix& probs, std::span<const int> labels,
                                   const ProbMatrix& q) {
  if (probs.dim != q.dim) {
    throw ContractError("ncmi_loss_value: dim mismatch " + std::to_string(probs.dim) + " vs " +
                        std::to_string(q.dim));
  }
  const std::size_t b = probs.rows;
  const auto counts = label_counts(labels, static_cast<int>(q.rows));
  BatchLossBreakdown bd;
  bd.pairs_used = cross_pairs(counts, b);
  if (bd.pairs_used == 0) {
    bd.skipped = true;
    bd.skip_reason = "single_class_batch";
    return bd;
  }
  double num = 0.0;
  for (std::size_t x = 0; x < b; ++x) {
    num += simplex::kl_divergence(probs.row(x), q.row(static_cast<std::size_t>(labels[x])));
  }
  bd.numerator = num / static_cast<double>(b);

  // Literal double loop over ordered pairs.
  double den = 0.0;
  for (std::size_t x = 0; x < b; ++x) {
    const auto px = probs.row(x);
    const auto qx = q.row(static_cast<std::size_t>(labels[x]));
    for (std::size_t z = 0; z < b; ++z) {
      if (labels[z] == labels[x]) continue;
      const auto pz = probs.row(z);
      double term = 0.0;
      for (std::size_t i = 0; i < probs.dim; ++i) {
        term += px[i] * (std::log(std::max(qx[i], simplex::kEpsFloor)) -
                         std::log(std::max(pz[i], simplex::kEpsFloor)));
      }
      den += term;
    }
  }
  bd.denominator = den / (static_cast<double>(b) * static_cast<double>(b));
  if (bd.denominator > 0.0) bd.loss = bd.numerator / bd.denominator;
  if (bd.denominator <= kMinDenominator) {
    bd.skipped = true;
    bd.skip_reason = "small_denominator";
  }
  return bd;
}

std::optional<double> theorem1_residual(const ProbMatrix& probs, std::span<const int> labels,
                                        int class_count) {
  const auto set = metrics::class_centroids(probs, labels, class_count);
  const auto report = metrics::ncmi_report(probs, labels, class_count);
  if (!report.defined) return std::nullopt;
  const auto bd = ncmi_loss_value(probs, labels, set.centroids);
  const double reference = report.ncmi;
  const double loss = bd.numerator / bd.denominator;
  return std::abs(loss - reference) / std::max(std::abs(reference), 1e-300);
}

void centroid_greedy_refresh(CentroidBank& bank, const ProbMatrix& epoch_probs,
                             std::span<const int> labels, HeadKind head) {
  if (epoch_probs.dim != static_cast<std::size_t>(bank.dim)) {
    throw ContractError("centroid_greedy_refresh: dim mismatch");
  }
  const auto set = metrics::class_centroids(epoch_probs, labels, bank.class_count);
  auto xi = bank.xi.mutable_value();
  const std::size_t m = epoch_probs.dim;
  for (int y = 0; y < bank.class_count; ++y) {
    const auto t = set.centroids.row(static_cast<std::size_t>(y));
    if (head == HeadKind::softmax) {
      for (std::size_t j = 0; j < m; ++j) {
        xi[static_cast<std::size_t>(y) * m + j] =
            std::log(std::max(t[j], simplex::kEpsFloor));
      }
      continue;
    }
    double max_t = 0.0;
    for (double v : t) max_t = std::max(max_t, v);
    max_t = std::min(max_t, 1.0 - simplex::kEpsFloor);
    // Any S with t_j*S in (0,1) inverts exactly; S = m/2 sends the uniform
    // target to the zero vector.
    const double s = std::min(static_cast<double>(m) / 2.0, 0.5 / max_t);
    for (std::size_t j = 0; j < m; ++j) {
      const double tj = std::clamp(t[j], simplex::kEpsFloor, 1.0 - simplex::kEpsFloor);
      const double p = tj * s;
      xi[static_cast<std::size_t>(y) * m + j] = std::log(p / (1.0 - p));
    }
  }
  bank.xi.zero_grad();
}

}  // namespace ncmi::objective
