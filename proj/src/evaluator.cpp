#include "ncmi/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>

#include "ncmi/error.hpp"
#include "ncmi/rng.hpp"

namespace ncmi {

using simplex::ProbMatrix;

std::vector<int> classify_cc(const ProbMatrix& probs, const ProbMatrix& centroids) {
  if (probs.dim != centroids.dim) {
    throw ContractError("classify_cc: dim mismatch " + std::to_string(probs.dim) + " vs " +
                        std::to_string(centroids.dim));
  }
  std::vector<int> out(probs.rows);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int best_v = 0;
    for (std::size_t v = 0; v < centroids.rows; ++v) {
      const double d = simplex::kl_divergence(probs.row(i), centroids.row(v));
      if (d < best) {  // strict: ties keep the lowest index
        best = d;
        best_v = static_cast<int>(v);
      }
    }
    out[i] = best_v;
  }
  return out;
}

double topk_accuracy(const ProbMatrix& probs, const ProbMatrix& centroids,
                     std::span<const int> labels, std::size_t k) {
  if (labels.size() != probs.rows) throw ContractError("topk: label count mismatch");
  k = std::min(k, centroids.rows);
  std::size_t hits = 0;
  std::vector<std::pair<double, int>> dist(centroids.rows);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    for (std::size_t v = 0; v < centroids.rows; ++v) {
      dist[v] = {simplex::kl_divergence(probs.row(i), centroids.row(v)), static_cast<int>(v)};
    }
    std::stable_sort(dist.begin(), dist.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (std::size_t j = 0; j < k; ++j) {
      if (dist[j].second == labels[i]) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(probs.rows);
}

std::vector<std::vector<std::size_t>> confusion_matrix(std::span<const int> truth,
                                                       std::span<const int> predicted,
                                                       int class_count) {
  if (truth.size() != predicted.size()) {
    throw ContractError("confusion: size mismatch");
  }
  std::vector<std::vector<std::size_t>> m(static_cast<std::size_t>(class_count),
                                          std::vector<std::size_t>(class_count, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= class_count || predicted[i] < 0 ||
        predicted[i] >= class_count) {
      throw ContractError("confusion: label out of range");
    }
    ++m[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])];
  }
  return m;
}

EvalResult metrics_from_confusion(const std::vector<std::vector<std::size_t>>& confusion) {
  const std::size_t c = confusion.size();
  EvalResult r;
  r.confusion = confusion;
  r.precision.assign(c, 0.0);
  r.recall.assign(c, 0.0);
  r.f1.assign(c, 0.0);
  std::size_t total = 0, correct = 0;
  for (std::size_t y = 0; y < c; ++y) {
    std::size_t row_sum = 0, col_sum = 0;
    for (std::size_t p = 0; p < c; ++p) {
      row_sum += confusion[y][p];
      col_sum += confusion[p][y];
    }
    total += row_sum;
    correct += confusion[y][y];
    const double tp = static_cast<double>(confusion[y][y]);
    r.precision[y] = col_sum > 0 ? tp / static_cast<double>(col_sum) : 0.0;
    r.recall[y] = row_sum > 0 ? tp / static_cast<double>(row_sum) : 0.0;
    const double pr = r.precision[y] + r.recall[y];
    r.f1[y] = pr > 0.0 ? 2.0 * r.precision[y] * r.recall[y] / pr : 0.0;
  }
  double f1_sum = 0.0;
  for (double f : r.f1) f1_sum += f;
  r.macro_f1 = c > 0 ? f1_sum / static_cast<double>(c) : 0.0;
  r.n_eval = total;
  r.top1 = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  return r;
}

EvalResult evaluate_predictions(std::span<const int> truth, std::span<const int> predicted,
                                int class_count, const std::string& protocol) {
  EvalResult r = metrics_from_confusion(confusion_matrix(truth, predicted, class_count));
  r.protocol = protocol;
  return r;
}

EvalResult evaluate_cc(const ProbMatrix& probs, std::span<const int> labels,
                       const ProbMatrix& centroids) {
  const auto preds = classify_cc(probs, centroids);
  return evaluate_predictions(labels, preds, static_cast<int>(centroids.rows), "cc");
}

// ---- linear probing --------------------------------------------------------------

ProbeResult linear_probe(const Tensor& train_features, std::span<const int> train_labels,
                         const Tensor& test_features, std::span<const int> test_labels,
                         int class_count, const ProbeConfig& config) {
  const std::size_t n = train_features.rows();
  const std::size_t d = train_features.cols();
  if (train_labels.size() != n || test_labels.size() != test_features.rows()) {
    throw ContractError("linear_probe: label/feature count mismatch");
  }
  const std::size_t c = static_cast<std::size_t>(class_count);

  // Degenerate-feature warning path: zero variance in every dimension.
  {
    bool all_flat = true;
    const auto v = train_features.value();
    for (std::size_t j = 0; j < d && all_flat; ++j) {
      for (std::size_t i = 1; i < n; ++i) {
        if (v[i * d + j] != v[j]) {
          all_flat = false;
          break;
        }
      }
    }
    if (all_flat) {
      std::fprintf(stderr, "linear_probe: features have zero variance; probe will hit chance\n");
    }
  }

  Tensor weight = Tensor::zeros({d, c}, true);
  Tensor bias = Tensor::zeros({c}, true);
  std::vector<Tensor> params = {weight, bias};
  SgdState opt;

  const std::size_t batch = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr =
        config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / config.epochs));
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng = stream_rng(config.seed, RngStream::probe, static_cast<std::uint64_t>(epoch));
    rng.shuffle(perm);
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t stop = std::min(start + batch, n);
      const std::size_t b = stop - start;
      active_tape().clear();
      std::vector<double> xb(b * d), tb(b * c, 0.0);
      const auto fv = train_features.value();
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t src = perm[start + i];
        std::copy_n(&fv[src * d], d, &xb[i * d]);
        tb[i * c + static_cast<std::size_t>(train_labels[src])] = 1.0;
      }
      Tensor x = Tensor::from_data({b, d}, std::move(xb));
      Tensor targets = Tensor::from_data({b, c}, std::move(tb));
      Tensor logits = add(matmul(x, weight), bias);
      Tensor loss = neg(sum(mul(targets, simplex::log_softmax_rows(logits)))) /
                    static_cast<double>(b);
      zero_grads(params);
      backward(loss);
      sgd_step(params, lr, config.momentum, config.weight_decay, opt);
    }
  }
  active_tape().clear();

  auto predict = [&](const Tensor& feats) {
    NoGradScope ng;
    const Tensor logits = add(matmul(feats, weight), bias);
    const auto v = logits.value();
    std::vector<int> preds(feats.rows());
    for (std::size_t i = 0; i < feats.rows(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < c; ++j) {
        if (v[i * c + j] > v[i * c + best]) best = j;
      }
      preds[i] = static_cast<int>(best);
    }
    return preds;
  };

  ProbeResult result;
  const auto wv = weight.value();
  result.weight.assign(wv.begin(), wv.end());
  const auto bv = bias.value();
  result.bias.assign(bv.begin(), bv.end());

  const auto train_preds = predict(train_features);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (train_preds[i] == train_labels[i]) ++hits;
  }
  result.train_top1 = static_cast<double>(hits) / static_cast<double>(n);
  result.eval = evaluate_predictions(test_labels, predict(test_features), class_count, "lp");
  return result;
}

PearsonReport pearson(std::span<const double> xs, std::span<const double> ys) {
  PearsonReport rep;
  if (xs.size() != ys.size()) throw ContractError("pearson: series length mismatch");
  rep.n = xs.size();
  if (rep.n < 2) return rep;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < rep.n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= static_cast<double>(rep.n);
  my /= static_cast<double>(rep.n);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < rep.n; ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  if (sxx <= 0.0 || syy <= 0.0) return rep;  // zero variance: undefined
  rep.defined = true;
  rep.r = sxy / std::sqrt(sxx * syy);
  return rep;
}

}  // namespace ncmi
