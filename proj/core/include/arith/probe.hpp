#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "arith/activation_store.hpp"
#include "arith/dataset.hpp"

namespace arith {

// Affine map + softmax over K classes on one layer state. When the optional
// standardization is set, inputs are shifted and scaled before the map.
struct LinearProbe {
  Eigen::MatrixXd weights;  // K x d
  Eigen::VectorXd bias;     // K
  Eigen::VectorXd input_mean;   // empty: no standardization
  Eigen::VectorXd input_scale;  // 1 / std per feature
  std::uint32_t layer = 0;
  TaskLabelSpec task;
  std::uint64_t train_seed = 0;

  static LinearProbe zeros(std::size_t num_classes, std::size_t d_model);
  std::size_t num_classes() const { return static_cast<std::size_t>(weights.rows()); }
  std::size_t input_dim() const { return static_cast<std::size_t>(weights.cols()); }
};

// softmax(W h + b). Throws DataError on a width mismatch.
Eigen::VectorXd probe_forward(const LinearProbe& probe, std::span<const float> h);
Eigen::VectorXd probe_forward(const LinearProbe& probe, const Eigen::VectorXd& h);
// Argmax class, lowest index on ties.
std::uint32_t probe_predict(const LinearProbe& probe, std::span<const float> h);

// Mean cross-entropy of softmax(X W^T + b) against `labels`, with gradients.
// Rows of `inputs` are samples. Inputs are used as given (no standardization).
struct ProbeLoss {
  double loss = 0.0;
  Eigen::MatrixXd grad_weights;
  Eigen::VectorXd grad_bias;
};
ProbeLoss probe_loss_and_grad(const Eigen::MatrixXd& weights, const Eigen::VectorXd& bias,
                              const Eigen::MatrixXd& inputs,
                              std::span<const std::uint32_t> labels);

struct ProbeTrainConfig {
  std::uint32_t epochs = 10;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  // Mini-batch size; 0 means full batch (one step per epoch).
  std::uint32_t batch_size = 32;
  bool standardize = false;
  std::vector<std::uint64_t> seeds = {42, 43, 44, 45, 46};
  SplitOptions split;
  // Worker threads for (layer, seed) jobs; results do not depend on it.
  std::uint32_t jobs = 1;
};

// "42..46" or "1,2,3".
std::vector<std::uint64_t> parse_seed_list(std::string_view text);

struct TrainedProbe {
  LinearProbe probe;
  Splits splits;
  std::uint32_t best_epoch = 0;  // 1-based; 0 when no validation data
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<double> epoch_losses;  // mean training loss per epoch
};

// Trains on the seed's stratified training split, keeps the epoch with the
// best validation accuracy (earliest on ties), and reports test accuracy.
// Refuses when the training split holds fewer than two classes.
TrainedProbe train_probe(const ActivationStore& store, std::uint32_t layer,
                         const TaskLabelSpec& task, const ProbeTrainConfig& config,
                         std::uint64_t seed);

// Fraction of `indices` whose predicted class equals the stored label.
double eval_probe(const LinearProbe& probe, const ActivationStore& store,
                  std::span<const std::size_t> indices);
double eval_probe(const LinearProbe& probe, const ActivationStore& store);

struct LayerPoint {
  std::uint32_t layer = 0;
  double mean = 0.0;
  double ci95 = 0.0;  // Student-t half-width over seeds
  std::vector<double> per_seed;
  std::optional<std::string> error;
};

struct LayerCurve {
  std::string family;  // signal family, e.g. "carry"
  std::string name;    // curve label, e.g. "carry_pos/ones"
  TaskLabelSpec task;
  double chance = 0.0;
  std::vector<std::uint64_t> seeds;
  std::vector<LayerPoint> points;
  std::optional<std::uint32_t> onset;

  std::vector<double> means() const;
};

struct MeanCi {
  double mean = 0.0;
  double half_width = 0.0;
};
// Student-t 95% interval; half-width 0 for fewer than two values.
MeanCi mean_ci95(std::span<const double> values);

// Signal family and display name for a task.
std::string family_for(const TaskLabelSpec& task);
std::string curve_name(const TaskLabelSpec& task);

LayerCurve layer_sweep(const ActivationStore& store, const TaskLabelSpec& task,
                       const ProbeTrainConfig& config);

// Probes trained per layer and seed on `train_store`, scored on every sample
// of `test_store`. Stores must agree on model, width and depth.
LayerCurve crossop_transfer(const ActivationStore& train_store,
                            const ActivationStore& test_store, const TaskLabelSpec& task,
                            const ProbeTrainConfig& config);

inline constexpr double kDefaultPlateauFraction = 0.95;
inline constexpr double kDefaultChanceMargin = 0.2;

// Shallowest layer whose mean reaches plateau_fraction * max and stays there
// through the first maximal layer, and which beats chance + chance_margin.
std::optional<std::uint32_t> onset_layer(const LayerCurve& curve,
                                         double plateau_fraction = kDefaultPlateauFraction,
                                         double chance_margin = kDefaultChanceMargin);

}  // namespace arith
