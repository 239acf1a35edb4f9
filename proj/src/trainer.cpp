#include "ncmi/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ncmi/error.hpp"
#include "ncmi/evaluator.hpp"

namespace ncmi {

using nlohmann::json;
using objective::HeadKind;
using simplex::CenterState;
using simplex::ProbMatrix;

LossKind loss_from_string(const std::string& s) {
  if (s == "ncmi") return LossKind::ncmi;
  if (s == "ce") return LossKind::ce;
  if (s == "ce_ls") return LossKind::ce_ls;
  throw ContractError("unknown loss '" + s + "' (expected ncmi|ce|ce_ls)");
}

std::string loss_to_string(LossKind k) {
  switch (k) {
    case LossKind::ncmi: return "ncmi";
    case LossKind::ce: return "ce";
    case LossKind::ce_ls: return "ce_ls";
  }
  return "?";
}

std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// ---- config ------------------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs < 0) throw ContractError("config: epochs must be >= 0");
  if (batch_size < 1) throw ContractError("config: batch_size must be >= 1");
  if (loss == LossKind::ncmi && batch_size < 2) {
    throw ContractError("config: ncmi needs batch_size >= 2 (cross-class pairs)");
  }
  if (!(tau > 0.0)) throw ContractError("config: tau must be > 0");
  if (!(center_momentum >= 0.0 && center_momentum < 1.0)) {
    throw ContractError("config: center_momentum must lie in [0,1)");
  }
  if (label_smoothing < 0.0 || label_smoothing > 1.0) {
    throw ContractError("config: label_smoothing must lie in [0,1]");
  }
  if (eval_every < 1) throw ContractError("config: eval_every must be >= 1");
  if (!(lr_factor > 0.0)) throw ContractError("config: lr_factor must be > 0");
  for (std::size_t i = 1; i < lr_milestones.size(); ++i) {
    if (lr_milestones[i] <= lr_milestones[i - 1]) {
      throw ContractError("config: lr_milestones must be strictly increasing");
    }
  }
  if (feature_dim < 2) throw ContractError("config: feature_dim must be >= 2");
  arch_from_string(arch);
  activation_from_string(activation);
}

ModelSpec TrainConfig::model_spec() const {
  ModelSpec spec;
  spec.arch = arch_from_string(arch);
  spec.hidden = hidden;
  spec.feature_dim = feature_dim;
  spec.activation = activation_from_string(activation);
  spec.seed = seed;
  return spec;
}

json TrainConfig::to_json() const {
  json j;
  j["loss"] = loss_to_string(loss);
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["lr_model"] = lr_model;
  j["lr_centroids"] = lr_centroids;
  j["momentum"] = momentum;
  j["weight_decay"] = weight_decay;
  j["tau"] = tau;
  j["center_momentum"] = center_momentum;
  j["lr_schedule"] = lr_schedule == Schedule::multistep ? "multistep" : "cosine";
  j["lr_milestones"] = lr_milestones;
  j["lr_factor"] = lr_factor;
  j["label_smoothing"] = label_smoothing;
  j["seed"] = seed;
  j["eval_every"] = eval_every;
  j["skip_single_class_batches"] = skip_single_class_batches;
  j["head"] = head == HeadKind::nsf ? "nsf" : "softmax";
  j["centering"] = centering;
  j["hflip"] = hflip;
  j["arch"] = arch;
  j["hidden"] = hidden;
  j["feature_dim"] = feature_dim;
  j["activation"] = activation;
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  static const char* known[] = {
      "loss",          "epochs",      "batch_size",      "lr_model",
      "lr_centroids",  "momentum",    "weight_decay",    "tau",
      "center_momentum", "lr_schedule", "lr_milestones", "lr_factor",
      "label_smoothing", "seed",      "eval_every",      "skip_single_class_batches",
      "head",          "centering",   "hflip",           "arch",
      "hidden",        "feature_dim", "activation"};
  std::string unknown;
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) {
      if (key == k) {
        ok = true;
        break;
      }
    }
    if (!ok) unknown += unknown.empty() ? key : ", " + key;
  }
  if (!unknown.empty()) {
    throw ContractError("config: unknown keys rejected: " + unknown);
  }
  TrainConfig c;
  if (j.contains("loss")) c.loss = loss_from_string(j.at("loss").get<std::string>());
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
  if (j.contains("lr_model")) c.lr_model = j.at("lr_model").get<double>();
  c.lr_centroids = j.contains("lr_centroids") ? j.at("lr_centroids").get<double>() : c.lr_model;
  if (j.contains("momentum")) c.momentum = j.at("momentum").get<double>();
  if (j.contains("weight_decay")) c.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("tau")) c.tau = j.at("tau").get<double>();
  if (j.contains("center_momentum")) c.center_momentum = j.at("center_momentum").get<double>();
  if (j.contains("lr_schedule")) {
    const auto s = j.at("lr_schedule").get<std::string>();
    if (s == "multistep") {
      c.lr_schedule = Schedule::multistep;
    } else if (s == "cosine") {
      c.lr_schedule = Schedule::cosine;
    } else {
      throw ContractError("config: unknown lr_schedule '" + s + "'");
    }
  }
  if (j.contains("lr_milestones")) c.lr_milestones = j.at("lr_milestones").get<std::vector<int>>();
  if (j.contains("lr_factor")) c.lr_factor = j.at("lr_factor").get<double>();
  if (j.contains("label_smoothing")) c.label_smoothing = j.at("label_smoothing").get<double>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("eval_every")) c.eval_every = j.at("eval_every").get<long>();
  if (j.contains("skip_single_class_batches")) {
    c.skip_single_class_batches = j.at("skip_single_class_batches").get<bool>();
  }
  if (j.contains("head")) {
    const auto s = j.at("head").get<std::string>();
    if (s == "nsf") {
      c.head = HeadKind::nsf;
    } else if (s == "softmax") {
      c.head = HeadKind::softmax;
    } else {
      throw ContractError("config: unknown head '" + s + "'");
    }
  }
  if (j.contains("centering")) c.centering = j.at("centering").get<bool>();
  if (j.contains("hflip")) c.hflip = j.at("hflip").get<bool>();
  if (j.contains("arch")) c.arch = j.at("arch").get<std::string>();
  if (j.contains("hidden")) c.hidden = j.at("hidden").get<std::vector<int>>();
  if (j.contains("feature_dim")) c.feature_dim = j.at("feature_dim").get<int>();
  if (j.contains("activation")) c.activation = j.at("activation").get<std::string>();
  c.validate();
  return c;
}

double lr_at(const TrainConfig& config, double base_lr, int epoch) {
  if (epoch < 0) throw ContractError("lr_at: negative epoch");
  if (config.lr_schedule == Schedule::multistep) {
    double lr = base_lr;
    for (int m : config.lr_milestones) {
      if (epoch >= m) lr *= config.lr_factor;
    }
    return lr;
  }
  const double total = std::max(config.epochs, 1);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / total));
}

// ---- checkpoint I/O ------------------------------------------------------------

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : arrays) {
    if (n == name) return &t;
  }
  return nullptr;
}

namespace {

void atomic_write(const std::string& path, const std::string& payload) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ContractError("cannot write " + tmp);
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw ContractError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  json manifest;
  manifest["version"] = ckpt.version;
  manifest["step"] = ckpt.step;
  manifest["epoch"] = ckpt.epoch;
  manifest["skipped_batches"] = ckpt.skipped_batches;
  manifest["config"] = ckpt.config;
  json arrays = json::array();
  for (const auto& [name, t] : ckpt.arrays) {
    arrays.push_back({{"name", name}, {"shape", t.shape()}});
  }
  manifest["arrays"] = arrays;

  std::string payload = manifest.dump();
  payload += '\n';
  for (const auto& [name, t] : ckpt.arrays) {
    const auto v = t.value();
    const std::uint64_t count = v.size();
    char hdr[8];
    for (int i = 0; i < 8; ++i) hdr[i] = static_cast<char>((count >> (8 * i)) & 0xff);
    payload.append(hdr, 8);
    const std::size_t pos = payload.size();
    payload.resize(pos + count * 8);
    std::memcpy(payload.data() + pos, v.data(), count * 8);
  }
  atomic_write(path, payload);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("checkpoint: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ContractError("checkpoint: missing manifest in " + path);
  json manifest;
  try {
    manifest = json::parse(line);
  } catch (const json::exception& e) {
    throw ContractError("checkpoint: bad manifest in " + path + ": " + e.what());
  }
  Checkpoint ckpt;
  ckpt.version = manifest.at("version").get<int>();
  if (ckpt.version != 1) {
    throw ContractError("checkpoint: version mismatch in " + path + ": got " +
                        std::to_string(ckpt.version) + ", expected 1");
  }
  ckpt.step = manifest.at("step").get<long>();
  ckpt.epoch = manifest.at("epoch").get<int>();
  ckpt.skipped_batches = manifest.value("skipped_batches", 0L);
  ckpt.config = manifest.at("config");
  for (const auto& entry : manifest.at("arrays")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    char hdr[8];
    in.read(hdr, 8);
    if (in.gcount() != 8) {
      throw ContractError("checkpoint: corrupt length for array '" + name + "' in " + path);
    }
    std::uint64_t count = 0;
    for (int i = 0; i < 8; ++i) {
      count |= static_cast<std::uint64_t>(static_cast<unsigned char>(hdr[i])) << (8 * i);
    }
    if (count != shape_numel(shape)) {
      throw ContractError("checkpoint: array '" + name + "' has " + std::to_string(count) +
                          " elements but shape " + shape_str(shape));
    }
    std::vector<double> data(count);
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * 8));
    if (static_cast<std::uint64_t>(in.gcount()) != count * 8) {
      throw ContractError("checkpoint: corrupt length (truncated blob) for array '" + name +
                          "' in " + path);
    }
    for (double x : data) {
      if (!std::isfinite(x)) {
        throw ContractError("checkpoint: non-finite value in array '" + name + "' in " + path);
      }
    }
    ckpt.arrays.emplace_back(name, Tensor::from_data(shape, std::move(data)));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw ContractError("checkpoint: corrupt length (trailing bytes) in " + path);
  }
  return ckpt;
}

// ---- training ---------------------------------------------------------------------

std::vector<std::size_t> epoch_permutation(std::uint64_t seed, int epoch, std::size_t n) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng = stream_rng(seed, RngStream::epoch_shuffle, static_cast<std::uint64_t>(epoch));
  rng.shuffle(perm);
  return perm;
}

namespace {

Tensor leaf_copy(const Tensor& t, bool requires_grad = false) {
  const auto v = t.value();
  return Tensor::from_data(t.shape(), std::vector<double>(v.begin(), v.end()), requires_grad);
}

void assign_values(Tensor& dst, const Tensor& src, const std::string& what) {
  if (dst.shape() != src.shape()) {
    throw ContractError("checkpoint: shape mismatch restoring " + what + ": " +
                        shape_str(dst.shape()) + " vs " + shape_str(src.shape()));
  }
  auto d = dst.mutable_value();
  const auto s = src.value();
  std::copy(s.begin(), s.end(), d.begin());
}

Tensor hflip_batch(const Tensor& batch, const std::array<std::size_t, 3>& shape, Rng& rng) {
  const std::size_t h = shape[0], w = shape[1], ch = shape[2];
  const auto v = batch.value();
  std::vector<double> out(v.begin(), v.end());
  const std::size_t per = h * w * ch;
  for (std::size_t n = 0; n < batch.rows(); ++n) {
    if (rng.uniform() >= 0.5) continue;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        for (std::size_t c = 0; c < ch; ++c) {
          out[n * per + (i * w + j) * ch + c] = v[n * per + (i * w + (w - 1 - j)) * ch + c];
        }
  }
  return Tensor::from_data(batch.shape(), std::move(out));
}

struct EvalContext {
  const TrainConfig& config;
  const Model& model;
  const objective::CentroidBank* bank;
  const CenterState* center;
  const DatasetPair& data;
};

ProbMatrix pipeline_probs(const TrainConfig& config, const Model& model,
                          const CenterState* center, const LabeledDataset& ds) {
  NoGradScope ng;
  ProbMatrix out(ds.n, static_cast<std::size_t>(
                           config.loss == LossKind::ncmi ? config.feature_dim
                                                         : model.head_classes()));
  const std::size_t chunk = 256;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.n; start += chunk) {
    const std::size_t stop = std::min(start + chunk, ds.n);
    idx.clear();
    for (std::size_t i = start; i < stop; ++i) idx.push_back(i);
    Tensor x = ds.batch(idx);
    Tensor p;
    if (config.loss == LossKind::ncmi) {
      Tensor feats = model.forward_features(x);
      Tensor z = config.centering ? simplex::apply_center(feats, *center) : feats;
      Tensor zp = simplex::l2_normalize_rows(z, config.tau);
      p = config.head == HeadKind::nsf ? simplex::nsf_rows(zp) : simplex::softmax_rows(zp);
    } else {
      p = simplex::softmax_rows(model.forward_logits(x));
    }
    const auto pv = p.value();
    std::copy(pv.begin(), pv.end(), &out.values[start * out.dim]);
  }
  return out;
}

double test_accuracy(const EvalContext& ctx) {
  NoGradScope ng;
  if (ctx.config.loss == LossKind::ncmi) {
    const ProbMatrix probs = pipeline_probs(ctx.config, ctx.model, ctx.center, ctx.data.test);
    const ProbMatrix q = objective::centroid_q(*ctx.bank, ctx.config.head);
    const auto preds = classify_cc(probs, q);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      if (preds[i] == ctx.data.test.labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(preds.size());
  }
  const Tensor logits = ctx.model.forward_logits(ctx.data.test.all_inputs());
  const auto v = logits.value();
  const std::size_t c = logits.cols();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (v[i * c + j] > v[i * c + best]) best = j;
    }
    if (static_cast<int>(best) == ctx.data.test.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

MetricRow make_metric_row(const EvalContext& ctx, long step, int epoch, long skipped,
                          const std::optional<StepRow>& last_step) {
  MetricRow row;
  row.step = step;
  row.epoch = epoch;
  row.lr = lr_at(ctx.config, ctx.config.lr_model, epoch);
  row.skipped_batches = skipped;
  if (last_step && !last_step->skipped) {
    row.loss = last_step->loss;
    if (ctx.config.loss == LossKind::ncmi) {
      row.numerator = last_step->numerator;
      row.denominator = last_step->denominator;
    }
  }
  const ProbMatrix train_probs =
      pipeline_probs(ctx.config, ctx.model, ctx.center, ctx.data.train);
  std::vector<std::size_t> counts(static_cast<std::size_t>(ctx.data.train.class_count), 0);
  for (int y : ctx.data.train.labels) ++counts[static_cast<std::size_t>(y)];
  const bool all_present =
      std::all_of(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; });
  if (ctx.data.train.class_count >= 2 && all_present) {
    const auto report = metrics::ncmi_report(train_probs, ctx.data.train.labels,
                                             ctx.data.train.class_count);
    row.cmi = report.cmi;
    row.gamma = report.gamma;
    if (report.defined) row.ncmi = report.ncmi;
  } else {
    row.cmi = std::numeric_limits<double>::quiet_NaN();
    row.gamma = std::numeric_limits<double>::quiet_NaN();
  }
  row.acc_cc = test_accuracy(ctx);
  return row;
}

}  // namespace

TrainResult train(const TrainConfig& config, const DatasetPair& data, const TrainHooks& hooks,
                  const Checkpoint* resume) {
  config.validate();
  if (data.train.n == 0) throw ContractError("train: empty training split");
  if (config.loss == LossKind::ncmi && data.train.class_count < 2) {
    throw ContractError("train: ncmi needs at least 2 classes");
  }

  const int classes = data.train.class_count;
  Model model(config.model_spec(), data.train.input_dim, data.train.image_shape,
              config.loss == LossKind::ncmi ? 0 : classes);

  Rng centroid_rng = stream_rng(config.seed, RngStream::centroid_init);
  std::optional<objective::CentroidBank> bank;
  if (config.loss == LossKind::ncmi) {
    bank = objective::make_centroid_bank(classes, config.feature_dim, centroid_rng);
  }
  CenterState center = simplex::make_center(static_cast<std::size_t>(config.feature_dim),
                                            config.center_momentum);

  std::vector<Tensor> model_params(model.parameters().begin(), model.parameters().end());
  SgdState model_opt, xi_opt;
  std::vector<Tensor> xi_params;
  if (bank) xi_params.push_back(bank->xi);

  long step = 0;
  int start_epoch = 0;
  long start_batch = 0;
  long skipped = 0;
  const std::size_t n = data.train.n;
  const std::size_t batch_size = static_cast<std::size_t>(config.batch_size);
  const long steps_per_epoch = static_cast<long>((n + batch_size - 1) / batch_size);

  if (resume) {
    for (std::size_t i = 0; i < model_params.size(); ++i) {
      const Tensor* src = resume->find("model." + model.parameter_names()[i]);
      if (!src) throw ContractError("checkpoint: missing array model." + model.parameter_names()[i]);
      assign_values(model_params[i], *src, model.parameter_names()[i]);
    }
    model_opt.velocity.resize(model_params.size());
    for (std::size_t i = 0; i < model_params.size(); ++i) {
      if (const Tensor* src = resume->find("opt_model.v" + std::to_string(i))) {
        const auto v = src->value();
        model_opt.velocity[i].assign(v.begin(), v.end());
      }
    }
    if (bank) {
      const Tensor* xi = resume->find("bank.xi");
      if (!xi) throw ContractError("checkpoint: missing array bank.xi");
      assign_values(xi_params[0], *xi, "bank.xi");
      if (const Tensor* v = resume->find("opt_xi.v0")) {
        const auto vv = v->value();
        xi_opt.velocity.assign(1, std::vector<double>(vv.begin(), vv.end()));
      }
      const Tensor* c = resume->find("center.c");
      if (!c) throw ContractError("checkpoint: missing array center.c");
      const auto cv = c->value();
      center.center.assign(cv.begin(), cv.end());
    }
    step = resume->step;
    start_epoch = resume->epoch;
    start_batch = step - static_cast<long>(start_epoch) * steps_per_epoch;
    skipped = resume->skipped_batches;
  }

  TrainResult result;
  EvalContext ctx{config, model, bank ? &*bank : nullptr, &center, data};
  std::optional<StepRow> last_step;

  if (step == 0) {
    result.metrics.push_back(make_metric_row(ctx, 0, 0, skipped, last_step));
  }

  // Epoch-level output dump for the exact M-step fallback below.
  std::vector<double> epoch_probs;
  std::vector<int> epoch_labels;

  for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(config, config.lr_model, epoch);
    const double lr_xi = lr_at(config, config.lr_centroids, epoch);
    const auto perm = epoch_permutation(config.seed, epoch, n);
    epoch_probs.clear();
    epoch_labels.clear();
    long epoch_batches = 0, epoch_denominator_skips = 0;
    for (long batch_idx = (epoch == start_epoch ? start_batch : 0); batch_idx < steps_per_epoch;
         ++batch_idx) {
      const std::size_t start = static_cast<std::size_t>(batch_idx) * batch_size;
      const std::size_t stop = std::min(start + batch_size, n);
      std::vector<std::size_t> idx(perm.begin() + start, perm.begin() + stop);
      std::vector<int> labels(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = data.train.labels[idx[i]];
      Tensor x = data.train.batch(idx);
      if (config.hflip && data.train.is_image()) {
        Rng aug = stream_rng(config.seed, RngStream::augment,
                             static_cast<std::uint64_t>(epoch) * 1000003ull +
                                 static_cast<std::uint64_t>(batch_idx));
        x = hflip_batch(x, data.train.image_shape, aug);
      }
      ++step;

      active_tape().clear();
      StepRow srow;
      srow.step = step;

      if (config.loss == LossKind::ncmi) {
        Tensor feats = model.forward_features(x);
        Tensor z = config.centering ? simplex::apply_center(feats, center) : feats;
        Tensor zp = simplex::l2_normalize_rows(z, config.tau, &result.zero_feature_rows);
        if (config.centering) simplex::ema_center_update(center, z);
        if (hooks.on_centered) hooks.on_centered(step, z);
        Tensor p = config.head == HeadKind::nsf ? simplex::nsf_rows(zp)
                                                : simplex::softmax_rows(zp);
        Tensor q = objective::centroid_q_tensor(*bank, config.head);
        auto [loss, bd] = objective::batch_ncmi_loss(p, labels, q);
        ++epoch_batches;
        const auto pv = p.value();
        epoch_probs.insert(epoch_probs.end(), pv.begin(), pv.end());
        epoch_labels.insert(epoch_labels.end(), labels.begin(), labels.end());
        srow.numerator = bd.numerator;
        srow.denominator = bd.denominator;
        srow.loss = bd.loss;
        srow.pairs_used = bd.pairs_used;
        srow.skipped = bd.skipped;
        if (bd.skipped) {
          if (!config.skip_single_class_batches && bd.skip_reason == "single_class_batch") {
            throw ContractError("train: single-class batch at step " + std::to_string(step) +
                                " (skip_single_class_batches=false)");
          }
          if (bd.skip_reason == "small_denominator") ++epoch_denominator_skips;
          ++skipped;
        } else {
          if (!std::isfinite(bd.loss)) {
            throw NumericError("train: non-finite loss at step " + std::to_string(step) +
                               " (numerator=" + format_g17(bd.numerator) +
                               ", denominator=" + format_g17(bd.denominator) +
                               ", pairs_used=" + std::to_string(bd.pairs_used) + ")");
          }
          zero_grads(model_params);
          zero_grads(xi_params);
          backward(loss);
          sgd_step(model_params, lr, config.momentum, config.weight_decay, model_opt);
          sgd_step(xi_params, lr_xi, config.momentum, 0.0, xi_opt);
          last_step = srow;
        }
      } else {
        const double alpha = config.loss == LossKind::ce ? 0.0 : config.label_smoothing;
        const std::size_t b = idx.size();
        const std::size_t c = static_cast<std::size_t>(classes);
        std::vector<double> tv(b * c, alpha / static_cast<double>(classes));
        for (std::size_t i = 0; i < b; ++i) {
          tv[i * c + static_cast<std::size_t>(labels[i])] += 1.0 - alpha;
        }
        Tensor targets = Tensor::from_data({b, c}, std::move(tv));
        Tensor loss = neg(sum(mul(targets, simplex::log_softmax_rows(model.forward_logits(x))))) /
                      static_cast<double>(b);
        srow.loss = loss.item();
        if (!std::isfinite(srow.loss)) {
          throw NumericError("train: non-finite loss at step " + std::to_string(step));
        }
        zero_grads(model_params);
        backward(loss);
        sgd_step(model_params, lr, config.momentum, config.weight_decay, model_opt);
        last_step = srow;
      }

      result.steps.push_back(srow);
      if (step % config.eval_every == 0) {
        result.metrics.push_back(make_metric_row(ctx, step, epoch, skipped, last_step));
      }
    }

    // Exact M-step fallback: when every batch of an epoch was rejected for a
    // non-positive separation term, the learned centroids are too far from
    // the output centroids for the ratio to be trusted and no step can ever
    // run. Resetting xi to the exact centroids of this epoch's outputs makes
    // the separation term the (nonnegative) batch-level class separation and
    // unblocks the alternating loop.
    if (bank && epoch_batches > 0 && epoch_denominator_skips == epoch_batches) {
      std::vector<std::size_t> present(static_cast<std::size_t>(classes), 0);
      for (int y : epoch_labels) ++present[static_cast<std::size_t>(y)];
      const bool complete =
          std::all_of(present.begin(), present.end(), [](std::size_t c) { return c > 0; });
      if (complete) {
        ProbMatrix dump(epoch_labels.size(), static_cast<std::size_t>(config.feature_dim));
        dump.values = epoch_probs;
        objective::centroid_greedy_refresh(*bank, dump, epoch_labels, config.head);
      }
    }
  }
  active_tape().clear();

  if (result.metrics.empty() || result.metrics.back().step != step) {
    const int last_epoch = config.epochs > 0 ? config.epochs - 1 : 0;
    result.metrics.push_back(make_metric_row(ctx, step, last_epoch, skipped, last_step));
  }
  result.skipped_batches = skipped;

  Checkpoint ckpt;
  ckpt.step = step;
  ckpt.epoch = config.epochs;
  ckpt.skipped_batches = skipped;
  ckpt.config = config.to_json();
  for (std::size_t i = 0; i < model_params.size(); ++i) {
    ckpt.arrays.emplace_back("model." + model.parameter_names()[i], leaf_copy(model_params[i]));
  }
  if (bank) {
    ckpt.arrays.emplace_back("bank.xi", leaf_copy(bank->xi));
    ckpt.arrays.emplace_back("center.c",
                             Tensor::from_data({center.center.size()}, center.center));
  }
  if (model_opt.velocity.size() < model_params.size()) {
    model_opt.velocity.resize(model_params.size());
  }
  for (std::size_t i = 0; i < model_params.size(); ++i) {
    auto v = model_opt.velocity[i];
    if (v.empty()) v.assign(model_params[i].size(), 0.0);
    ckpt.arrays.emplace_back("opt_model.v" + std::to_string(i),
                             Tensor::from_data(model_params[i].shape(), std::move(v)));
  }
  if (bank) {
    std::vector<double> v =
        xi_opt.velocity.empty() ? std::vector<double>(bank->xi.size(), 0.0) : xi_opt.velocity[0];
    ckpt.arrays.emplace_back("opt_xi.v0", Tensor::from_data(bank->xi.shape(), std::move(v)));
  }
  result.checkpoint = std::move(ckpt);
  return result;
}

// ---- restore / evaluation helpers -----------------------------------------------

RestoredState restore_state(const Checkpoint& ckpt, const DatasetPair& data) {
  TrainConfig config = TrainConfig::from_json(ckpt.config);
  const int classes = data.train.class_count;
  RestoredState state{
      config,
      Model(config.model_spec(), data.train.input_dim, data.train.image_shape,
            config.loss == LossKind::ncmi ? 0 : classes),
      std::nullopt,
      simplex::make_center(static_cast<std::size_t>(config.feature_dim),
                           config.center_momentum)};
  for (std::size_t i = 0; i < state.model.parameters().size(); ++i) {
    const auto& name = state.model.parameter_names()[i];
    const Tensor* src = ckpt.find("model." + name);
    if (!src) throw ContractError("checkpoint: missing array model." + name);
    Tensor dst = state.model.parameters()[i];
    assign_values(dst, *src, name);
  }
  if (config.loss == LossKind::ncmi) {
    const Tensor* xi = ckpt.find("bank.xi");
    if (!xi) throw ContractError("checkpoint: missing array bank.xi");
    if (xi->rows() != static_cast<std::size_t>(classes)) {
      throw ContractError("checkpoint/data class-count mismatch: checkpoint has " +
                          std::to_string(xi->rows()) + " classes, dataset has " +
                          std::to_string(classes));
    }
    objective::CentroidBank bank;
    bank.class_count = classes;
    bank.dim = config.feature_dim;
    bank.xi = leaf_copy(*xi, /*requires_grad=*/true);
    state.bank = std::move(bank);
    const Tensor* c = ckpt.find("center.c");
    if (!c) throw ContractError("checkpoint: missing array center.c");
    const auto cv = c->value();
    state.center.center.assign(cv.begin(), cv.end());
  } else if (state.model.head_classes() != classes) {
    throw ContractError("checkpoint/data class-count mismatch: checkpoint head has " +
                        std::to_string(state.model.head_classes()) + " classes, dataset has " +
                        std::to_string(classes));
  }
  return state;
}

ProbMatrix dataset_probs(const RestoredState& state, const LabeledDataset& ds) {
  return pipeline_probs(state.config, state.model,
                        state.config.centering ? &state.center : nullptr, ds);
}

Tensor dataset_features(const RestoredState& state, const LabeledDataset& ds) {
  NoGradScope ng;
  Tensor feats = state.model.forward_features(ds.all_inputs());
  if (state.config.loss != LossKind::ncmi) return feats;
  Tensor z = state.config.centering ? simplex::apply_center(feats, state.center) : feats;
  return simplex::l2_normalize_rows(z, state.config.tau);
}

// ---- CSV ---------------------------------------------------------------------------

namespace {

std::string opt_cell(const std::optional<double>& v) {
  return v ? format_g17(*v) : std::string();
}

}  // namespace

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::string out =
      "step,epoch,lr,loss,numerator,denominator,cmi,gamma,ncmi,acc_cc,acc_lp,skipped_batches\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + format_g17(r.lr) + "," +
           opt_cell(r.loss) + "," + opt_cell(r.numerator) + "," + opt_cell(r.denominator) + "," +
           format_g17(r.cmi) + "," + format_g17(r.gamma) + "," + opt_cell(r.ncmi) + "," +
           format_g17(r.acc_cc) + "," + opt_cell(r.acc_lp) + "," +
           std::to_string(r.skipped_batches) + "\n";
  }
  atomic_write(path, out);
}

void write_steps_csv(const std::string& path, const std::vector<StepRow>& rows) {
  std::string out = "step,numerator,denominator,loss,pairs_used,skipped\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + format_g17(r.numerator) + "," +
           format_g17(r.denominator) + "," + format_g17(r.loss) + "," +
           std::to_string(r.pairs_used) + "," + (r.skipped ? "1" : "0") + "\n";
  }
  atomic_write(path, out);
}

std::vector<MetricRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot read " + path);
  std::string line;
  if (!std::getline(in, line)) throw ContractError("empty metrics file " + path);
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    while (cells.size() < 12) cells.emplace_back();
    MetricRow r;
    r.step = std::stol(cells[0]);
    r.epoch = std::stoi(cells[1]);
    r.lr = std::stod(cells[2]);
    if (!cells[3].empty()) r.loss = std::stod(cells[3]);
    if (!cells[4].empty()) r.numerator = std::stod(cells[4]);
    if (!cells[5].empty()) r.denominator = std::stod(cells[5]);
    r.cmi = std::stod(cells[6]);
    r.gamma = std::stod(cells[7]);
    if (!cells[8].empty()) r.ncmi = std::stod(cells[8]);
    r.acc_cc = std::stod(cells[9]);
    if (!cells[10].empty()) r.acc_lp = std::stod(cells[10]);
    r.skipped_batches = std::stol(cells[11]);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace ncmi
