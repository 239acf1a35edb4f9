#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "ncmi/data.hpp"
#include "ncmi/error.hpp"
#include "ncmi/evaluator.hpp"
#include "ncmi/model.hpp"
#include "testutil.hpp"

using namespace ncmi;

namespace {

std::filesystem::path temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / "ncmi_test_data";
  std::filesystem::create_directories(dir);
  return dir;
}

// Trains the evaluator's linear probe directly on raw inputs: a plain linear
// classifier baseline without the full training loop.
double linear_accuracy_on_inputs(const DatasetPair& pair) {
  ProbeConfig cfg;
  cfg.epochs = 60;
  const auto res = linear_probe(pair.train.all_inputs(), pair.train.labels,
                                pair.test.all_inputs(), pair.test.labels,
                                pair.train.class_count, cfg);
  return res.eval.top1;
}

void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void put_be32(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>((v >> 24) & 0xff));
  s.push_back(static_cast<char>((v >> 16) & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
  s.push_back(static_cast<char>(v & 0xff));
}

}  // namespace

TEST_CASE("blobs: well-separated clusters are linearly separable") {
  const auto pair = gen_gaussian_blobs(60, 2, 4, 10.0, 0.5, 7);
  CHECK(pair.train.n == 96);  // 80% of 120
  CHECK(pair.test.n == 24);
  CHECK(linear_accuracy_on_inputs(pair) == 1.0);
}

TEST_CASE("blobs: zero separation gives chance accuracy") {
  const auto pair = gen_gaussian_blobs(500, 4, 6, 0.0, 1.0, 11);
  const double acc = linear_accuracy_on_inputs(pair);
  CHECK(acc > 0.25 - 0.05);
  CHECK(acc < 0.25 + 0.05);
}

TEST_CASE("blobs: fixed seed generates bit-identical datasets") {
  const auto a = gen_gaussian_blobs(40, 3, 5, 4.0, 1.0, 42);
  const auto b = gen_gaussian_blobs(40, 3, 5, 4.0, 1.0, 42);
  CHECK(a.train.inputs == b.train.inputs);
  CHECK(a.train.labels == b.train.labels);
  CHECK(a.test.inputs == b.test.inputs);
  CHECK(a.test.labels == b.test.labels);

  const auto c = gen_gaussian_blobs(40, 3, 5, 4.0, 1.0, 43);
  CHECK(a.train.inputs != c.train.inputs);

  CHECK_THROWS_AS(gen_gaussian_blobs(3, 2, 2, 1.0, 1.0, 1), ContractError);
}

TEST_CASE("blobs: splits are disjoint by row content and exhaustive in count") {
  const auto pair = gen_gaussian_blobs(25, 3, 4, 5.0, 1.0, 9);
  CHECK(pair.train.n + pair.test.n == 75);
  // Gaussian rows are a.s. unique; no test row may appear in train.
  std::set<std::vector<double>> train_rows;
  for (std::size_t i = 0; i < pair.train.n; ++i) {
    const auto r = pair.train.input_row(i);
    train_rows.insert(std::vector<double>(r.begin(), r.end()));
  }
  CHECK(train_rows.size() == pair.train.n);
  for (std::size_t i = 0; i < pair.test.n; ++i) {
    const auto r = pair.test.input_row(i);
    CHECK(train_rows.count(std::vector<double>(r.begin(), r.end())) == 0);
  }
}

TEST_CASE("rings: per-class counts are exact and a linear model stays near chance") {
  const auto pair = gen_rings(200, 2, 13);
  std::vector<int> counts(2, 0);
  for (int y : pair.train.labels) ++counts[y];
  for (int y : pair.test.labels) ++counts[y];
  CHECK(counts[0] == 200);
  CHECK(counts[1] == 200);

  CHECK(linear_accuracy_on_inputs(pair) < 0.6);

  CHECK_THROWS_AS(gen_rings(100, 7, 1), ContractError);
  CHECK_THROWS_AS(gen_rings(100, 1, 1), ContractError);
}

TEST_CASE("idx loader: hand-built fixture round-trips") {
  const auto dir = temp_dir();
  const auto imgs = (dir / "imgs.idx3").string();
  const auto lbls = (dir / "lbls.idx1").string();

  std::string ib;
  put_be32(ib, 0x00000803u);
  put_be32(ib, 4);   // images
  put_be32(ib, 28);  // rows
  put_be32(ib, 28);  // cols
  for (int n = 0; n < 4; ++n) {
    for (int k = 0; k < 28 * 28; ++k) ib.push_back(static_cast<char>((n * 37 + k) % 256));
  }
  write_file(imgs, ib);

  std::string lb;
  put_be32(lb, 0x00000801u);
  put_be32(lb, 4);
  for (unsigned char y : {3, 1, 4, 1}) lb.push_back(static_cast<char>(y));
  write_file(lbls, lb);

  const auto ds = load_idx(imgs, lbls);
  CHECK(ds.n == 4);
  CHECK(ds.input_dim == 28 * 28);
  CHECK(ds.image_shape[0] == 28);
  CHECK(ds.image_shape[1] == 28);
  CHECK(ds.image_shape[2] == 1);
  CHECK(ds.labels == std::vector<int>{3, 1, 4, 1});
  CHECK(ds.inputs[0] == 0.0);
  CHECK(ds.inputs[1] == doctest::Approx(1.0 / 255).epsilon(1e-15));
  for (double v : ds.inputs) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("idx loader: magic, truncation, and count errors are distinct") {
  const auto dir = temp_dir();
  const auto imgs = (dir / "bad_imgs.idx3").string();
  const auto lbls = (dir / "bad_lbls.idx1").string();

  std::string wrong_magic;
  put_be32(wrong_magic, 0x00000802u);
  put_be32(wrong_magic, 1);
  put_be32(wrong_magic, 2);
  put_be32(wrong_magic, 2);
  wrong_magic.append(4, '\0');
  write_file(imgs, wrong_magic);
  std::string lb;
  put_be32(lb, 0x00000801u);
  put_be32(lb, 1);
  lb.push_back(0);
  write_file(lbls, lb);
  CHECK_THROWS_WITH_AS(load_idx(imgs, lbls), doctest::Contains("magic mismatch"), ContractError);

  std::string ok_but_short;
  put_be32(ok_but_short, 0x00000803u);
  put_be32(ok_but_short, 2);
  put_be32(ok_but_short, 2);
  put_be32(ok_but_short, 2);
  ok_but_short.append(5, '\x7f');  // needs 8 pixel bytes
  write_file(imgs, ok_but_short);
  std::string lb2;
  put_be32(lb2, 0x00000801u);
  put_be32(lb2, 2);
  lb2.append(2, '\1');
  write_file(lbls, lb2);
  CHECK_THROWS_WITH_AS(load_idx(imgs, lbls), doctest::Contains("truncated"), ContractError);

  std::string three_images;
  put_be32(three_images, 0x00000803u);
  put_be32(three_images, 3);
  put_be32(three_images, 2);
  put_be32(three_images, 2);
  three_images.append(12, '\x10');
  write_file(imgs, three_images);
  CHECK_THROWS_WITH_AS(load_idx(imgs, lbls), doctest::Contains("count mismatch"), ContractError);
}

TEST_CASE("standardization: train-only statistics, clamped stddev, finite output") {
  DatasetPair pair;
  pair.train.n = 3;
  pair.train.input_dim = 4;
  pair.train.image_shape = {2, 2, 1};
  pair.train.inputs = {0, 0, 0, 0, 0.5, 0.5, 0.5, 0.5, 1, 1, 1, 1};
  pair.train.labels = {0, 1, 0};
  pair.train.class_count = 2;
  pair.test = pair.train;
  pair.test.inputs = {0.9, 0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.2};

  standardize_images(pair);
  CHECK(pair.train.feat_mean[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(pair.test.feat_mean[0] == doctest::Approx(0.5).epsilon(1e-15));  // reused, not recomputed
  // Test-split statistics genuinely differ from the train statistics in use.
  double test_mean = 0.0;
  for (double v : pair.test.inputs) test_mean += v;
  test_mean /= static_cast<double>(pair.test.inputs.size());
  CHECK(std::abs(test_mean) > 0.1);  // train-standardized test data is off-center

  // All-zero images: stddev clamp keeps everything finite.
  DatasetPair zeros;
  zeros.train.n = 2;
  zeros.train.input_dim = 4;
  zeros.train.image_shape = {2, 2, 1};
  zeros.train.inputs.assign(8, 0.0);
  zeros.train.labels = {0, 1};
  zeros.train.class_count = 2;
  zeros.test = zeros.train;
  standardize_images(zeros);
  for (double v : zeros.train.inputs) CHECK(std::isfinite(v));
}

TEST_CASE("forward_features: identity linear model reproduces its inputs") {
  ModelSpec spec;
  spec.arch = Arch::linear;
  spec.feature_dim = 3;
  Model model(spec, 3, {0, 0, 0}, 0);
  auto w = model.parameter("w0").mutable_value();
  std::fill(w.begin(), w.end(), 0.0);
  for (int i = 0; i < 3; ++i) w[i * 3 + i] = 1.0;

  Rng rng(3);
  Tensor x = Tensor::randn({5, 3}, rng, 2.0);
  NoGradScope ng;
  const Tensor feats = model.forward_features(x);
  const auto fv = feats.value();
  const auto xv = x.value();
  for (std::size_t i = 0; i < fv.size(); ++i) CHECK(fv[i] == xv[i]);
}

TEST_CASE("forward_features: seeded construction is deterministic") {
  ModelSpec spec;
  spec.arch = Arch::mlp;
  spec.hidden = {16, 8};
  spec.feature_dim = 4;
  spec.seed = 99;
  Model a(spec, 6, {0, 0, 0}, 0);
  Model b(spec, 6, {0, 0, 0}, 0);
  Rng rng(5);
  Tensor x = Tensor::randn({4, 6}, rng, 1.0);
  NoGradScope ng;
  const Tensor fa = a.forward_features(x);
  const Tensor fb = b.forward_features(x);
  CHECK(std::vector<double>(fa.value().begin(), fa.value().end()) ==
        std::vector<double>(fb.value().begin(), fb.value().end()));
}

TEST_CASE("forward_features: first-layer weight gradients match finite differences") {
  ModelSpec spec;
  spec.arch = Arch::mlp;
  spec.hidden = {8};
  spec.feature_dim = 4;
  spec.seed = 17;
  Model model(spec, 5, {0, 0, 0}, 0);
  Rng rng(19);
  Tensor x = Tensor::randn({6, 5}, rng, 1.0);
  Tensor w0 = model.parameter("w0");
  CHECK(testutil::max_grad_rel_err(w0, [&] { return sum(model.forward_features(x)); }) < 1e-4);
}

TEST_CASE("conv ops: values and gradients") {
  Rng rng(23);
  Tensor x = Tensor::randn({2, 6, 6, 1}, rng, 1.0, true);
  Tensor w = Tensor::randn({3, 3, 1, 2}, rng, 0.5, true);
  Tensor b = Tensor::randn({2}, rng, 0.2, true);
  Tensor mix = Tensor::randn({2, 4, 4, 2}, rng, 1.0);

  auto conv_loss = [&] { return sum(mul(conv3x3_valid(x, w, b), mix)); };
  CHECK(testutil::max_grad_rel_err(x, conv_loss) < 1e-4);
  CHECK(testutil::max_grad_rel_err(w, conv_loss) < 1e-4);
  CHECK(testutil::max_grad_rel_err(b, conv_loss) < 1e-4);

  Tensor mix2 = Tensor::randn({2, 2, 2, 2}, rng, 1.0);
  auto pool_loss = [&] { return sum(mul(maxpool2x2(conv3x3_valid(x, w, b)), mix2)); };
  CHECK(testutil::max_grad_rel_err(x, pool_loss) < 1e-4);

  // A flat kernel on a flat image: conv output = 9*value*weightsum + bias.
  Tensor ones = Tensor::full({1, 3, 3, 1}, 2.0);
  Tensor kernel = Tensor::full({3, 3, 1, 1}, 0.5);
  Tensor bias0 = Tensor::from_data({1}, {1.0});
  const Tensor out = conv3x3_valid(ones, kernel, bias0);
  CHECK(out.size() == 1);
  CHECK(out.item() == doctest::Approx(10.0).epsilon(1e-15));  // 9*2*0.5 + 1
}

TEST_CASE("tinyconv: forward shape and trainability surface") {
  ModelSpec spec;
  spec.arch = Arch::tinyconv;
  spec.feature_dim = 8;
  spec.seed = 5;
  Model model(spec, 28 * 28, {28, 28, 1}, 0);
  Rng rng(7);
  Tensor x = Tensor::rand_uniform({3, 28 * 28}, rng, 0.0, 1.0);
  NoGradScope ng;
  const Tensor feats = model.forward_features(x);
  CHECK(feats.rows() == 3);
  CHECK(feats.cols() == 8);

  ModelSpec bad = spec;
  CHECK_THROWS_AS(Model(bad, 16, {0, 0, 0}, 0), ContractError);
}

TEST_CASE("dataset csv: write/read round trip") {
  const auto dir = temp_dir();
  const auto path = (dir / "ds.csv").string();
  const auto pair = gen_gaussian_blobs(10, 2, 3, 4.0, 1.0, 3);
  write_dataset_csv(pair.train, path);
  const auto back = read_dataset_csv(path, 2);
  CHECK(back.n == pair.train.n);
  CHECK(back.input_dim == 3);
  CHECK(back.labels == pair.train.labels);
  for (std::size_t i = 0; i < back.inputs.size(); ++i) {
    CHECK(back.inputs[i] == pair.train.inputs[i]);  // %.17g round-trips exactly
  }
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "x0,x1,x2,label");
}
