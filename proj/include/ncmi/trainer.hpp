#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ncmi/data.hpp"
#include "ncmi/metrics.hpp"
#include "ncmi/model.hpp"
#include "ncmi/objective.hpp"
#include "ncmi/simplex.hpp"

namespace ncmi {

enum class LossKind { ncmi, ce, ce_ls };
enum class Schedule { multistep, cosine };

LossKind loss_from_string(const std::string& s);
std::string loss_to_string(LossKind k);

struct TrainConfig {
  LossKind loss = LossKind::ncmi;
  int epochs = 200;
  int batch_size = 64;
  double lr_model = 0.1;
  double lr_centroids = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double tau = 0.1;
  double center_momentum = 0.9;
  Schedule lr_schedule = Schedule::multistep;
  std::vector<int> lr_milestones = {60, 120, 160};
  double lr_factor = 0.1;
  double label_smoothing = 0.0;  // ce_ls only
  std::uint64_t seed = 1;
  long eval_every = 500;  // steps
  bool skip_single_class_batches = true;
  // Ablation knobs: the simplex head and the centering stage.
  objective::HeadKind head = objective::HeadKind::nsf;
  bool centering = true;
  bool hflip = false;  // horizontal flip augmentation, image data only
  // Backbone.
  std::string arch = "mlp";
  std::vector<int> hidden = {64};
  int feature_dim = 16;
  std::string activation = "relu";

  void validate() const;
  ModelSpec model_spec() const;
  nlohmann::json to_json() const;
  // Rejects unknown keys, listing them.
  static TrainConfig from_json(const nlohmann::json& j);
};

// Piecewise / cosine learning-rate schedule, evaluated per epoch.
double lr_at(const TrainConfig& config, double base_lr, int epoch);

struct MetricRow {
  long step = 0;
  int epoch = 0;
  double lr = 0.0;
  std::optional<double> loss, numerator, denominator;
  double cmi = 0.0;
  double gamma = 0.0;
  std::optional<double> ncmi;  // empty when gamma is undefined
  double acc_cc = 0.0;
  std::optional<double> acc_lp;
  long skipped_batches = 0;
};

struct StepRow {
  long step = 0;
  double numerator = 0.0, denominator = 0.0, loss = 0.0;
  std::size_t pairs_used = 0;
  bool skipped = false;
};

struct Checkpoint {
  int version = 1;
  long step = 0;
  int epoch = 0;
  long skipped_batches = 0;
  nlohmann::json config;  // echo of the resolved TrainConfig
  std::vector<std::pair<std::string, Tensor>> arrays;

  const Tensor* find(const std::string& name) const;
};

// Single file: one-line JSON manifest, then a length-prefixed little-endian
// float64 blob per array, in manifest order.
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct TrainHooks {
  // Observes the centered (pre-normalization) feature batch each step.
  std::function<void(long step, const Tensor& centered)> on_centered;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<MetricRow> metrics;
  std::vector<StepRow> steps;
  long skipped_batches = 0;
  long zero_feature_rows = 0;
};

// The alternating loop: per batch, forward features, subtract the pre-update
// center, l2-normalize and scale by 1/tau, EMA-update the center from the
// centered features (no gradient), map features and centroid parameters
// through the head, form the ratio loss, one backward, step both optimizers.
// Cross-entropy runs the same loop with a linear head and no
// centering/normalization stage. Non-finite losses abort with a NumericError
// naming the step and the batch breakdown.
TrainResult train(const TrainConfig& config, const DatasetPair& data,
                  const TrainHooks& hooks = {}, const Checkpoint* resume = nullptr);

// The seeded batch order used for epoch `epoch`; exposed so tests can
// reconstruct batch composition.
std::vector<std::size_t> epoch_permutation(std::uint64_t seed, int epoch, std::size_t n);

// Rebuilds model / centroid bank / center state from a checkpoint.
struct RestoredState {
  TrainConfig config;
  Model model;
  std::optional<objective::CentroidBank> bank;
  simplex::CenterState center;
};
RestoredState restore_state(const Checkpoint& ckpt, const DatasetPair& data);

// Output-probability rows of a dataset under the checkpointed pipeline
// (head applied), and pre-head features (the probe's input).
simplex::ProbMatrix dataset_probs(const RestoredState& state, const LabeledDataset& ds);
Tensor dataset_features(const RestoredState& state, const LabeledDataset& ds);

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);
void write_steps_csv(const std::string& path, const std::vector<StepRow>& rows);
std::vector<MetricRow> read_metrics_csv(const std::string& path);

std::string format_g17(double v);

}  // namespace ncmi
