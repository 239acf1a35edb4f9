#include "ncmi/evaluator.hpp"

#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "ncmi/error.hpp"
#include "testutil.hpp"

using namespace ncmi;
using simplex::ProbMatrix;

TEST_CASE("classify_cc: exact centroid match, tie-breaking, exhaustive oracle") {
  Rng rng(3);
  ProbMatrix centroids = testutil::random_prob_matrix(rng, 4, 6);
  ProbMatrix probs(1, 6);
  std::copy(centroids.row(2).begin(), centroids.row(2).end(), probs.row(0).begin());
  CHECK(classify_cc(probs, centroids) == std::vector<int>{2});

  // Two identical centroids: the lower index wins the tie.
  ProbMatrix twins(2, 3);
  for (int i = 0; i < 2; ++i) {
    twins.row(i)[0] = 0.2;
    twins.row(i)[1] = 0.3;
    twins.row(i)[2] = 0.5;
  }
  ProbMatrix sample(1, 3);
  sample.row(0)[0] = 0.2;
  sample.row(0)[1] = 0.3;
  sample.row(0)[2] = 0.5;
  CHECK(classify_cc(sample, twins) == std::vector<int>{0});

  // 100 random samples against a brute-force loop.
  ProbMatrix many = testutil::random_prob_matrix(rng, 100, 8);
  ProbMatrix cents = testutil::random_prob_matrix(rng, 4, 8);
  const auto got = classify_cc(many, cents);
  for (std::size_t i = 0; i < 100; ++i) {
    int best = 0;
    double best_d = simplex::kl_divergence(many.row(i), cents.row(0));
    for (int v = 1; v < 4; ++v) {
      const double d = simplex::kl_divergence(many.row(i), cents.row(v));
      if (d < best_d) {
        best_d = d;
        best = v;
      }
    }
    REQUIRE(got[i] == best);
  }

  // Two evaluations agree bit-for-bit.
  CHECK(classify_cc(many, cents) == got);
}

TEST_CASE("metrics_from_confusion: diagonal, symmetric, and hand-computed cases") {
  const auto perfect = metrics_from_confusion({{7, 0}, {0, 9}});
  CHECK(perfect.top1 == 1.0);
  CHECK(perfect.macro_f1 == 1.0);

  const auto half = metrics_from_confusion({{5, 5}, {5, 5}});
  CHECK(half.top1 == 0.5);
  CHECK(half.macro_f1 == 0.5);
  for (int y = 0; y < 2; ++y) {
    CHECK(half.precision[y] == 0.5);
    CHECK(half.recall[y] == 0.5);
    CHECK(half.f1[y] == 0.5);
  }

  // [[8,2],[4,6]]: F1_0 = 2*(8/12)*(8/10)/((8/12)+(8/10)) = 8/11,
  //               F1_1 = 2*(6/8)*(6/10)/((6/8)+(6/10)) = 2/3.
  const auto mixed = metrics_from_confusion({{8, 2}, {4, 6}});
  CHECK(mixed.f1[0] == doctest::Approx(8.0 / 11.0).epsilon(1e-12));
  CHECK(mixed.recall[1] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(mixed.f1[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(mixed.macro_f1 == doctest::Approx((8.0 / 11.0 + 2.0 / 3.0) / 2).epsilon(1e-12));
  CHECK(mixed.top1 == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(mixed.n_eval == 20);

  // Empty-class conventions: 0/0 counts as 0.
  const auto degenerate = metrics_from_confusion({{4, 0}, {0, 0}});
  CHECK(degenerate.f1[1] == 0.0);
  CHECK(degenerate.macro_f1 == 0.5);
}

TEST_CASE("evaluate_cc: confusion row sums and trace match the accuracy") {
  Rng rng(7);
  const auto probs = testutil::random_prob_matrix(rng, 60, 5);
  const auto labels = testutil::balanced_labels(rng, 60, 3);
  const auto cents = testutil::random_prob_matrix(rng, 3, 5);
  const auto res = evaluate_cc(probs, labels, cents);
  std::size_t trace = 0;
  for (int y = 0; y < 3; ++y) {
    std::size_t row_sum = 0;
    for (int p = 0; p < 3; ++p) row_sum += res.confusion[y][p];
    CHECK(row_sum == 20);  // per-class sample counts
    trace += res.confusion[y][y];
  }
  CHECK(res.top1 == doctest::Approx(static_cast<double>(trace) / 60.0).epsilon(1e-15));
}

TEST_CASE("cc relabeling equivariance: consistent permutation leaves accuracy unchanged") {
  Rng rng(11);
  const auto probs = testutil::random_prob_matrix(rng, 40, 6);
  const auto labels = testutil::balanced_labels(rng, 40, 4);
  const auto cents = testutil::random_prob_matrix(rng, 4, 6);
  const auto base = evaluate_cc(probs, labels, cents);

  const std::vector<int> perm = {2, 0, 3, 1};  // new index per old class
  ProbMatrix cents2(4, 6);
  std::vector<int> labels2(labels.size());
  for (int y = 0; y < 4; ++y) {
    std::copy(cents.row(y).begin(), cents.row(y).end(),
              cents2.row(static_cast<std::size_t>(perm[y])).begin());
  }
  for (std::size_t i = 0; i < labels.size(); ++i) labels2[i] = perm[labels[i]];
  const auto mapped = evaluate_cc(probs, labels2, cents2);
  CHECK(mapped.top1 == base.top1);
  CHECK(mapped.macro_f1 == doctest::Approx(base.macro_f1).epsilon(1e-12));
}

TEST_CASE("topk accuracy: k = C is always 1 and k grows monotonically") {
  Rng rng(13);
  const auto probs = testutil::random_prob_matrix(rng, 50, 5);
  const auto labels = testutil::balanced_labels(rng, 50, 5);
  const auto cents = testutil::random_prob_matrix(rng, 5, 5);
  double prev = 0.0;
  for (std::size_t k = 1; k <= 5; ++k) {
    const double acc = topk_accuracy(probs, cents, labels, k);
    CHECK(acc >= prev);
    prev = acc;
  }
  CHECK(prev == 1.0);
}

TEST_CASE("linear_probe: one-hot features are fit perfectly within 20 epochs") {
  const std::size_t n = 64;
  const int c = 4;
  std::vector<double> feats(n * c, 0.0);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(i % c);
    feats[i * c + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  Tensor f = Tensor::from_data({n, static_cast<std::size_t>(c)}, feats);
  ProbeConfig cfg;
  cfg.epochs = 20;
  const auto res = linear_probe(f, labels, f, labels, c, cfg);
  CHECK(res.train_top1 == 1.0);
  CHECK(res.eval.top1 == 1.0);
  CHECK(res.eval.protocol == "lp");
}

TEST_CASE("linear_probe: label-independent noise features sit at chance") {
  Rng rng(17);
  const std::size_t n_train = 2000, n_test = 2000;
  Tensor train = Tensor::randn({n_train, 8}, rng, 1.0);
  Tensor test = Tensor::randn({n_test, 8}, rng, 1.0);
  const auto train_labels = testutil::balanced_labels(rng, n_train, 4);
  const auto test_labels = testutil::balanced_labels(rng, n_test, 4);
  ProbeConfig cfg;
  cfg.epochs = 30;
  const auto res = linear_probe(train, train_labels, test, test_labels, 4, cfg);
  CHECK(res.eval.top1 > 0.20);
  CHECK(res.eval.top1 < 0.30);
}

TEST_CASE("linear_probe: test labels never reach training (leakage check)") {
  Rng rng(19);
  Tensor train = Tensor::randn({64, 6}, rng, 1.0);
  Tensor test = Tensor::randn({32, 6}, rng, 1.0);
  const auto train_labels = testutil::balanced_labels(rng, 64, 3);
  auto test_labels = testutil::balanced_labels(rng, 32, 3);
  ProbeConfig cfg;
  cfg.epochs = 10;
  const auto a = linear_probe(train, train_labels, test, test_labels, 3, cfg);
  for (auto& y : test_labels) y = (y + 1) % 3;  // corrupt
  const auto b = linear_probe(train, train_labels, test, test_labels, 3, cfg);
  CHECK(a.weight == b.weight);
  CHECK(a.bias == b.bias);
  CHECK(a.eval.top1 != b.eval.top1);
}

TEST_CASE("pearson: exact linear series, undefined cases, reorder symmetry") {
  std::vector<double> ncmi_vals, accs;
  for (int k = 0; k < 9; ++k) {
    const double v = 0.1 + 0.05 * k;
    ncmi_vals.push_back(v);
    accs.push_back(2.0 - 3.0 * v);  // acc = a - b*ncmi exactly
  }
  const auto rep = pearson(ncmi_vals, accs);
  REQUIRE(rep.defined);
  CHECK(rep.r == doctest::Approx(-1.0).epsilon(1e-12));

  const std::vector<double> flat(9, 0.25);
  CHECK_FALSE(pearson(flat, accs).defined);
  CHECK_FALSE(pearson(ncmi_vals, std::vector<double>(9, 1.0)).defined);

  Rng rng(23);
  std::vector<double> xs(20), ys(20);
  for (std::size_t i = 0; i < 20; ++i) {
    xs[i] = rng.normal();
    ys[i] = rng.normal();
  }
  const double r1 = pearson(xs, ys).r;
  std::vector<std::size_t> perm(20);
  for (std::size_t i = 0; i < 20; ++i) perm[i] = i;
  rng.shuffle(perm);
  std::vector<double> xs2(20), ys2(20);
  for (std::size_t i = 0; i < 20; ++i) {
    xs2[i] = xs[perm[i]];
    ys2[i] = ys[perm[i]];
  }
  CHECK(std::abs(pearson(xs2, ys2).r - r1) < 1e-12);
}
