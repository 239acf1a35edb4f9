// Command-line front end: dataset generation, training, evaluation, identity
// verification, the head/centering ablation grid, and correlation studies.
// Exit codes: 0 success, 1 contract/parameter error, 2 numerical failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include <nlohmann/json.hpp>

#include "ncmi/data.hpp"
#include "ncmi/error.hpp"
#include "ncmi/evaluator.hpp"
#include "ncmi/metrics.hpp"
#include "ncmi/objective.hpp"
#include "ncmi/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

std::string timestamp_utc() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

void atomic_write_text(const fs::path& path, const std::string& payload) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ncmi::ContractError("cannot write " + tmp.string());
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  }
  fs::rename(tmp, path);
}

// Run directories are created fresh; overwriting an existing non-empty one
// requires --force.
void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) {
      throw ncmi::ContractError("output directory " + dir.string() +
                                " is not empty (use --force to replace)");
    }
  } else {
    fs::create_directories(dir);
  }
}

struct ManifestWriter {
  json j;
  fs::path path;

  ManifestWriter(const std::string& command, const fs::path& dir) : path(dir / "manifest.json") {
    j["command"] = command;
    j["tool_version"] = kToolVersion;
    j["started_at"] = timestamp_utc();
    j["artifacts"] = json::object();
  }
  void artifact(const std::string& key, const fs::path& p) { j["artifacts"][key] = p.string(); }
  void finish() {
    j["finished_at"] = timestamp_utc();
    atomic_write_text(path, j.dump(2) + "\n");
  }
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ncmi::ContractError("cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ncmi::ContractError("bad JSON in " + path + ": " + e.what());
  }
}

// A dataset directory is either a gen output (meta.json + train/test CSV) or
// a directory of IDX files.
ncmi::DatasetPair load_data_dir(const std::string& dir) {
  const fs::path d(dir);
  if (fs::exists(d / "meta.json")) {
    const json meta = read_json_file((d / "meta.json").string());
    const int classes = meta.at("classes").get<int>();
    ncmi::DatasetPair pair;
    pair.train = ncmi::read_dataset_csv((d / "train.csv").string(), classes);
    pair.test = ncmi::read_dataset_csv((d / "test.csv").string(), classes);
    pair.train.split = "train";
    pair.test.split = "test";
    return pair;
  }
  if (fs::exists(d / "train-images-idx3-ubyte")) {
    ncmi::DatasetPair pair;
    pair.train = ncmi::load_idx((d / "train-images-idx3-ubyte").string(),
                                (d / "train-labels-idx1-ubyte").string());
    pair.test = ncmi::load_idx((d / "t10k-images-idx3-ubyte").string(),
                               (d / "t10k-labels-idx1-ubyte").string());
    pair.train.split = "train";
    pair.test.split = "test";
    const int classes = std::max(pair.train.class_count, pair.test.class_count);
    pair.train.class_count = classes;
    pair.test.class_count = classes;
    ncmi::standardize_images(pair);
    return pair;
  }
  throw ncmi::ContractError("no dataset found in " + dir +
                            " (expected meta.json + CSVs, or IDX files)");
}

json eval_to_json(const ncmi::EvalResult& r) {
  json j;
  j["protocol"] = r.protocol;
  j["top1"] = r.top1;
  j["macro_f1"] = r.macro_f1;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["f1"] = r.f1;
  j["confusion"] = r.confusion;
  j["n_eval"] = r.n_eval;
  return j;
}

void write_features_csv(const fs::path& path, const ncmi::Tensor& feats,
                        std::span<const int> labels) {
  std::string out;
  for (std::size_t j = 0; j < feats.cols(); ++j) out += "f" + std::to_string(j) + ",";
  out += "label\n";
  const auto v = feats.value();
  for (std::size_t i = 0; i < feats.rows(); ++i) {
    for (std::size_t j = 0; j < feats.cols(); ++j) {
      out += ncmi::format_g17(v[i * feats.cols() + j]) + ",";
    }
    out += std::to_string(labels[i]) + "\n";
  }
  atomic_write_text(path, out);
}

// ---- subcommands -------------------------------------------------------------

struct GenArgs {
  std::string kind;
  int classes = 5;
  int dim = 10;
  int per_class = 400;
  double separation = 8.0;
  double spread = 1.0;
  std::uint64_t seed = 1;
  std::string out;
  bool force = false;
};

int cmd_gen(const GenArgs& a) {
  ncmi::DatasetPair pair;
  if (a.kind == "blobs") {
    pair = ncmi::gen_gaussian_blobs(a.per_class, a.classes, a.dim, a.separation, a.spread, a.seed);
  } else if (a.kind == "rings") {
    pair = ncmi::gen_rings(a.per_class, a.classes, a.seed);
  } else {
    throw ncmi::ContractError("unknown dataset kind '" + a.kind + "' (expected blobs|rings)");
  }
  const fs::path dir(a.out);
  prepare_out_dir(dir, a.force);
  ManifestWriter manifest("gen " + a.kind, dir);

  json meta;
  meta["kind"] = a.kind;
  meta["classes"] = a.classes;
  meta["dim"] = a.kind == "rings" ? 2 : a.dim;
  meta["per_class"] = a.per_class;
  if (a.kind == "blobs") {
    meta["separation"] = a.separation;
    meta["spread"] = a.spread;
  }
  meta["seed"] = a.seed;
  atomic_write_text(dir / "meta.json", meta.dump(2) + "\n");
  ncmi::write_dataset_csv(pair.train, (dir / "train.csv").string());
  ncmi::write_dataset_csv(pair.test, (dir / "test.csv").string());
  manifest.artifact("meta", dir / "meta.json");
  manifest.artifact("train", dir / "train.csv");
  manifest.artifact("test", dir / "test.csv");
  manifest.finish();
  std::printf("{\"train_rows\": %zu, \"test_rows\": %zu}\n", pair.train.n, pair.test.n);
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, bool force) {
  const ncmi::TrainConfig config = ncmi::TrainConfig::from_json(read_json_file(config_path));
  const ncmi::DatasetPair data = load_data_dir(data_dir);
  const fs::path dir(out_dir);
  prepare_out_dir(dir, force);
  ManifestWriter manifest("train", dir);
  manifest.j["config"] = config.to_json();
  manifest.j["seed"] = config.seed;
  manifest.j["data"] = data_dir;

  const ncmi::TrainResult result = ncmi::train(config, data);
  ncmi::save_checkpoint(result.checkpoint, (dir / "checkpoint.bin").string());
  ncmi::write_metrics_csv((dir / "metrics.csv").string(), result.metrics);
  ncmi::write_steps_csv((dir / "steps.csv").string(), result.steps);
  manifest.artifact("checkpoint", dir / "checkpoint.bin");
  manifest.artifact("metrics", dir / "metrics.csv");
  manifest.artifact("steps", dir / "steps.csv");
  manifest.finish();

  const auto& last = result.metrics.back();
  std::printf("{\"steps\": %ld, \"acc_cc\": %s, \"skipped_batches\": %ld}\n", last.step,
              ncmi::format_g17(last.acc_cc).c_str(), result.skipped_batches);
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& protocol, std::string out_path) {
  if (protocol != "cc" && protocol != "lp" && protocol != "both") {
    throw ncmi::ContractError("unknown protocol '" + protocol + "' (expected cc|lp|both)");
  }
  const ncmi::Checkpoint ckpt = ncmi::load_checkpoint(ckpt_path);
  const ncmi::DatasetPair data = load_data_dir(data_dir);
  const ncmi::RestoredState state = ncmi::restore_state(ckpt, data);
  if (out_path.empty()) {
    out_path = (fs::path(ckpt_path).parent_path() / "eval.json").string();
  }

  json out;
  out["checkpoint"] = ckpt_path;
  out["step"] = ckpt.step;
  if (protocol == "cc" || protocol == "both") {
    const auto train_probs = ncmi::dataset_probs(state, data.train);
    const auto test_probs = ncmi::dataset_probs(state, data.test);
    const auto centroids =
        ncmi::metrics::class_centroids(train_probs, data.train.labels, data.train.class_count);
    out["cc"] = eval_to_json(ncmi::evaluate_cc(test_probs, data.test.labels, centroids.centroids));
    if (state.bank) {
      const auto learned = ncmi::objective::centroid_q(*state.bank, state.config.head);
      out["cc_learned"] = eval_to_json(ncmi::evaluate_cc(test_probs, data.test.labels, learned));
    }
    const auto report =
        ncmi::metrics::ncmi_report(train_probs, data.train.labels, data.train.class_count);
    out["train_cmi"] = report.cmi;
    out["train_gamma"] = report.gamma;
    if (report.defined) {
      out["train_ncmi"] = report.ncmi;
    } else {
      out["train_ncmi"] = nullptr;
    }
  }
  if (protocol == "lp" || protocol == "both") {
    const ncmi::Tensor train_feats = ncmi::dataset_features(state, data.train);
    const ncmi::Tensor test_feats = ncmi::dataset_features(state, data.test);
    ncmi::ProbeConfig probe;
    probe.seed = state.config.seed;
    const auto res = ncmi::linear_probe(train_feats, data.train.labels, test_feats,
                                        data.test.labels, data.train.class_count, probe);
    json lp = eval_to_json(res.eval);
    lp["train_top1"] = res.train_top1;
    out["lp"] = lp;
  }
  atomic_write_text(out_path, out.dump(2) + "\n");
  std::printf("%s\n", out.dump().c_str());
  return 0;
}

int cmd_verify_theorem1(std::size_t samples, int classes, std::size_t dim, std::uint64_t seed,
                        const std::string& out_path) {
  if (classes < 2) throw ncmi::ContractError("verify: need at least 2 classes");
  if (samples < 2 * static_cast<std::size_t>(classes)) {
    throw ncmi::ContractError("verify: need samples >= 2*classes");
  }
  ncmi::Rng rng = ncmi::stream_rng(seed, ncmi::RngStream::test);
  ncmi::simplex::ProbMatrix probs(samples, dim);
  for (std::size_t i = 0; i < samples; ++i) {
    double total = 0.0;
    auto row = probs.row(i);
    for (auto& x : row) {
      x = -std::log(rng.uniform());
      total += x;
    }
    for (auto& x : row) x /= total;
  }
  std::vector<int> labels(samples);
  for (std::size_t i = 0; i < samples; ++i) labels[i] = static_cast<int>(i % classes);
  rng.shuffle(labels);

  const auto residual = ncmi::objective::theorem1_residual(probs, labels, classes);
  json out;
  out["samples"] = samples;
  out["classes"] = classes;
  out["dim"] = dim;
  out["seed"] = seed;
  out["residual"] = residual ? json(*residual) : json(nullptr);

  // Minimizer check: grid search on the 2-simplex, first-order stationarity
  // otherwise.
  const auto set = ncmi::metrics::class_centroids(probs, labels, classes);
  bool minimizer_ok = true;
  if (dim == 2) {
    for (int cls = 0; cls < classes; ++cls) {
      double best_t = -1.0, best_val = 1e300;
      for (int k = 1; k < 1000; ++k) {
        auto q = set.centroids;
        q.row(cls)[0] = k * 1e-3;
        q.row(cls)[1] = 1.0 - k * 1e-3;
        const double val = ncmi::objective::ncmi_loss_value(probs, labels, q).numerator;
        if (val < best_val) {
          best_val = val;
          best_t = k * 1e-3;
        }
      }
      minimizer_ok = minimizer_ok && std::abs(best_t - set.centroids.row(cls)[0]) <= 1e-3;
    }
    out["minimizer_check"] = "grid";
  } else {
    for (int cls = 0; cls < classes; ++cls) {
      std::vector<double> g(dim, 0.0);
      for (std::size_t x = 0; x < samples; ++x) {
        if (labels[x] != cls) continue;
        for (std::size_t i = 0; i < dim; ++i) {
          g[i] -= probs.row(x)[i] / set.centroids.row(cls)[i];
        }
      }
      double mean_g = 0.0;
      for (auto& v : g) {
        v /= static_cast<double>(samples);
        mean_g += v;
      }
      mean_g /= static_cast<double>(dim);
      double norm = 0.0;
      for (double v : g) norm += (v - mean_g) * (v - mean_g);
      minimizer_ok = minimizer_ok && std::sqrt(norm) < 1e-6;
    }
    out["minimizer_check"] = "stationarity";
  }
  out["minimizer_ok"] = minimizer_ok;
  const std::string dump = out.dump();
  std::printf("%s\n", dump.c_str());
  if (!out_path.empty()) atomic_write_text(out_path, dump + "\n");
  if (!residual || *residual > 1e-9 || !minimizer_ok) {
    throw ncmi::NumericError("theorem-1 verification failed: " + dump);
  }
  return 0;
}

int cmd_ablate(const std::string& data_dir, const std::string& out_dir,
               const std::string& config_path, bool force) {
  ncmi::TrainConfig base;
  if (!config_path.empty()) {
    base = ncmi::TrainConfig::from_json(read_json_file(config_path));
  }
  if (base.loss != ncmi::LossKind::ncmi) {
    throw ncmi::ContractError("ablate: base config must use the ncmi loss");
  }
  const ncmi::DatasetPair data = load_data_dir(data_dir);
  const fs::path dir(out_dir);
  prepare_out_dir(dir, force);
  ManifestWriter manifest("ablate", dir);

  std::string csv = "head,centering,acc_cc,final_ncmi\n";
  for (const auto head : {ncmi::objective::HeadKind::nsf, ncmi::objective::HeadKind::softmax}) {
    for (const bool centering : {true, false}) {
      ncmi::TrainConfig cfg = base;
      cfg.head = head;
      cfg.centering = centering;
      const std::string tag = std::string(head == ncmi::objective::HeadKind::nsf ? "nsf" : "softmax") +
                              (centering ? "_centered" : "_plain");
      const ncmi::TrainResult result = ncmi::train(cfg, data);
      const auto& last = result.metrics.back();
      csv += std::string(head == ncmi::objective::HeadKind::nsf ? "nsf" : "softmax") + "," +
             (centering ? "1" : "0") + "," + ncmi::format_g17(last.acc_cc) + "," +
             (last.ncmi ? ncmi::format_g17(*last.ncmi) : "nan") + "\n";

      const fs::path run = dir / tag;
      fs::create_directories(run);
      ncmi::save_checkpoint(result.checkpoint, (run / "checkpoint.bin").string());
      ncmi::write_metrics_csv((run / "metrics.csv").string(), result.metrics);
      // Raw features and centers for external cluster plots.
      const auto state = ncmi::restore_state(result.checkpoint, data);
      write_features_csv(run / "features.csv", ncmi::dataset_features(state, data.test),
                         data.test.labels);
      std::string centers = "kind";
      for (int j = 0; j < cfg.feature_dim; ++j) centers += ",c" + std::to_string(j);
      centers += "\nema_center";
      for (double v : state.center.center) centers += "," + ncmi::format_g17(v);
      const auto q = ncmi::objective::centroid_q(*state.bank, cfg.head);
      for (std::size_t y = 0; y < q.rows; ++y) {
        centers += "\ncentroid_" + std::to_string(y);
        for (double v : q.row(y)) centers += "," + ncmi::format_g17(v);
      }
      centers += "\n";
      atomic_write_text(run / "centers.csv", centers);
      manifest.artifact(tag, run);
    }
  }
  atomic_write_text(dir / "ablation.csv", csv);
  manifest.artifact("grid", dir / "ablation.csv");
  manifest.finish();
  std::printf("%s", csv.c_str());
  return 0;
}

int cmd_correlate(const std::string& run_dir, std::string out_path) {
  const fs::path metrics_path = fs::path(run_dir) / "metrics.csv";
  const auto rows = ncmi::read_metrics_csv(metrics_path.string());
  std::vector<double> xs, ys;
  std::string csv = "checkpoint,step,ncmi,acc_cc\n";
  std::size_t idx = 0;
  for (const auto& r : rows) {
    if (!r.ncmi || std::isnan(*r.ncmi)) continue;
    xs.push_back(*r.ncmi);
    ys.push_back(r.acc_cc);
    csv += std::to_string(idx++) + "," + std::to_string(r.step) + "," +
           ncmi::format_g17(*r.ncmi) + "," + ncmi::format_g17(r.acc_cc) + "\n";
  }
  if (xs.size() < 5) {
    throw ncmi::ContractError("correlate: need at least 5 evaluated checkpoints, found " +
                              std::to_string(xs.size()));
  }
  if (out_path.empty()) out_path = (fs::path(run_dir) / "correlation.csv").string();
  atomic_write_text(out_path, csv);
  const auto rep = ncmi::pearson(xs, ys);
  json out;
  out["n"] = rep.n;
  out["r"] = rep.defined ? json(rep.r) : json(nullptr);
  out["pairs_csv"] = out_path;
  std::printf("%s\n", out.dump().c_str());
  if (!rep.defined) {
    throw ncmi::NumericError("correlate: correlation undefined (zero variance)");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train and evaluate classifiers with the normalized conditional mutual "
               "information surrogate loss"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* sc_gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  sc_gen->add_option("kind", gen.kind, "blobs|rings")->required();
  sc_gen->add_option("--classes", gen.classes);
  sc_gen->add_option("--dim", gen.dim, "input dimension (blobs)");
  sc_gen->add_option("--per-class", gen.per_class, "samples per class (train+test)");
  sc_gen->add_option("--separation", gen.separation);
  sc_gen->add_option("--spread", gen.spread);
  sc_gen->add_option("--seed", gen.seed);
  sc_gen->add_option("--out", gen.out)->required();
  sc_gen->add_flag("--force", gen.force, "replace a non-empty output directory");

  std::string train_config, train_data, train_out;
  bool train_force = false;
  auto* sc_train = app.add_subcommand("train", "Train a model from a JSON config");
  sc_train->add_option("--config", train_config)->required();
  sc_train->add_option("--data", train_data)->required();
  sc_train->add_option("--out", train_out)->required();
  sc_train->add_flag("--force", train_force);

  std::string eval_ckpt, eval_data, eval_protocol = "both", eval_out;
  auto* sc_eval = app.add_subcommand("eval", "Evaluate a checkpoint (cc and/or lp)");
  sc_eval->add_option("--checkpoint", eval_ckpt)->required();
  sc_eval->add_option("--data", eval_data)->required();
  sc_eval->add_option("--protocol", eval_protocol, "cc|lp|both");
  sc_eval->add_option("--out", eval_out, "eval JSON path (default: beside the checkpoint)");

  std::size_t v_samples = 64;
  int v_classes = 4;
  std::size_t v_dim = 8;
  std::uint64_t v_seed = 1;
  std::string v_out;
  auto* sc_verify = app.add_subcommand(
      "verify-theorem1", "Check the ratio-objective identity on random distributions");
  sc_verify->add_option("--samples", v_samples);
  sc_verify->add_option("--classes", v_classes);
  sc_verify->add_option("--dim", v_dim);
  sc_verify->add_option("--seed", v_seed);
  sc_verify->add_option("--out", v_out, "also write the report JSON here");

  std::string ab_data, ab_out, ab_config;
  bool ab_force = false;
  auto* sc_ablate = app.add_subcommand("ablate", "Train the 2x2 head x centering grid");
  sc_ablate->add_option("--data", ab_data)->required();
  sc_ablate->add_option("--out", ab_out)->required();
  sc_ablate->add_option("--config", ab_config, "base config (defaults otherwise)");
  sc_ablate->add_flag("--force", ab_force);

  std::string corr_run, corr_out;
  auto* sc_corr = app.add_subcommand("correlate", "Pearson r between ncmi and accuracy");
  sc_corr->add_option("--run", corr_run)->required();
  sc_corr->add_option("--out", corr_out, "pairs CSV path (default: <run>/correlation.csv)");

  try {
    app.parse(argc, argv);
    if (*sc_gen) return cmd_gen(gen);
    if (*sc_train) return cmd_train(train_config, train_data, train_out, train_force);
    if (*sc_eval) return cmd_eval(eval_ckpt, eval_data, eval_protocol, eval_out);
    if (*sc_verify) return cmd_verify_theorem1(v_samples, v_classes, v_dim, v_seed, v_out);
    if (*sc_ablate) return cmd_ablate(ab_data, ab_out, ab_config, ab_force);
    if (*sc_corr) return cmd_correlate(corr_run, corr_out);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const ncmi::NumericError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 2;
  } catch (const ncmi::ContractError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
