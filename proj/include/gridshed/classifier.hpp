// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gridshed/dataset.hpp"
#include "gridshed/labeler.hpp"

namespace gridshed {

/// Two same-padded 1-D convolutions, a width-2 max pool, a bidirectional
/// GRU whose final hidden states are concatenated, a small load-index
/// embedding, and a three-layer head.
struct Architecture {
  std::size_t C = 60;   // input channels
  std::size_t T = 200;  // input length
  std::size_t F1 = 32, K1 = 7;
  std::size_t F2 = 64, K2 = 5;
  std::size_t pool = 2;
  std::size_t H = 256;  // GRU hidden size per direction
  std::size_t E = 32;   // load embedding width
  std::size_t head1 = 128, head2 = 64;
  std::size_t n_classes = 2;
  std::size_t n_loads = 11;  // load index is scaled by n_loads - 1
  double dropout = 0.3;

  std::size_t pooled_length() const { return T / pool; }
  void validate() const;
};

void to_json(nlohmann::json& j, const Architecture& a);
void from_json(const nlohmann::json& j, Architecture& a);

struct TensorInfo {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size() const;
};

/// Tensor table in storage order; shapes follow (out, in, kernel) for
/// convolutions, (out, in) for dense layers and (3H, in) for GRU gate blocks
/// stacked as reset, update, candidate.
std::vector<TensorInfo> tensor_layout(const Architecture& arch);

/// Closed-form parameter count, layer by layer.
std::size_t count_params(const Architecture& arch);

struct ClassifierParams {
  Architecture arch;
  std::vector<TensorInfo> tensors;
  Eigen::VectorXd values;
  std::uint64_t seed = 0;

  const TensorInfo& info(const std::string& name) const;
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> matrix(const std::string& name);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> matrix(
      const std::string& name) const;
  Eigen::Map<const Eigen::VectorXd> vector(const std::string& name) const;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every tensor, with the GRU
/// using 1/sqrt(H).
ClassifierParams init_params(const Architecture& arch, std::uint64_t seed);
ClassifierParams zero_params(const Architecture& arch);

/// A batch: one column per sample holding channel-major C*T inputs.
struct Batch {
  Eigen::MatrixXd x;
  std::vector<int> load_index;
  std::vector<int> label;  // 0 = STABLE, 1 = UNSTABLE; may be empty for inference
  std::size_t size() const { return static_cast<std::size_t>(x.cols()); }
};

Batch make_batch(const SplitData& split, const std::vector<std::size_t>& indices, std::size_t C, std::size_t T);
Batch make_batch(const SplitData& split, std::size_t C, std::size_t T);

struct ForwardResult {
  Eigen::MatrixXd logits;         // n_classes x B
  Eigen::MatrixXd probabilities;  // n_classes x B
};

/// Inference pass; dropout is inactive.
ForwardResult forward(const ClassifierParams& params, const Batch& batch);

struct LossAndGrads {
  double loss = 0.0;
  Eigen::VectorXd grads;  // same layout as ClassifierParams::values
};

/// Mean cross-entropy over the batch and its exact gradient. With `rng`
/// set, dropout masks are drawn from it; otherwise dropout is off.
LossAndGrads loss_and_grads(const ClassifierParams& params, const Batch& batch, std::mt19937_64* rng = nullptr);

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 60;
  std::size_t patience = 10;
  std::uint64_t seed = 1;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double grad_clip = 5.0;  // global gradient norm cap; 0 disables
  bool early_stopping = true;  // false: train max_epochs and keep the last weights
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_macro_f1 = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  ClassifierParams params;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

TrainResult train(const SplitData& train_split, const SplitData& val_split, const Architecture& arch,
                  const TrainConfig& config, const EpochCallback& on_epoch = {});

/// STABLE iff p(UNSTABLE) < tau.
Verdict predict(double p_unstable, double tau);
std::vector<double> predict_unstable_probability(const ClassifierParams& params, const SplitData& split,
                                                 std::size_t batch_size = 64);

struct ClassMetrics {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  std::size_t support = 0;
};

struct EvalReport {
  double tau = 0.5;
  ClassMetrics stable, unstable;
  double accuracy = 0.0;
  ClassMetrics macro_avg, weighted_avg;
  // confusion[true][predicted], index 0 = STABLE, 1 = UNSTABLE
  std::size_t confusion[2][2] = {{0, 0}, {0, 0}};
  std::size_t total() const { return stable.support + unstable.support; }
};

/// Metrics from true labels and predicted labels (0 = STABLE, 1 = UNSTABLE).
EvalReport report_from_predictions(const std::vector<int>& truth, const std::vector<int>& predicted, double tau);
EvalReport evaluate(const std::vector<double>& p_unstable, const std::vector<int>& truth, double tau);
EvalReport evaluate(const ClassifierParams& params, const SplitData& split, double tau);

nlohmann::json to_json(const EvalReport& r);
/// Plain-text table: one row per class, then accuracy, macro and weighted
/// averages.
std::string format_report(const EvalReport& r);

struct ThresholdPoint {
  double tau = 0.0;
  double precision = 0.0;  // stable precision; 0 when nothing is predicted stable
  double recall = 0.0;     // stable recall
  std::size_t predicted_stable = 0;
};

struct ThresholdSweep {
  std::optional<double> tau;  // largest grid tau reaching the target; empty when unreachable
  double target_precision = 0.95;
  std::vector<ThresholdPoint> curve;
};

std::vector<double> default_tau_grid(std::size_t n = 100);
ThresholdSweep sweep_threshold(const std::vector<double>& p_unstable, const std::vector<int>& truth,
                               double target_precision = 0.95, const std::vector<double>& grid = default_tau_grid());
ThresholdSweep sweep_threshold(const ClassifierParams& params, const SplitData& val, double target_precision = 0.95,
                               const std::vector<double>& grid = default_tau_grid());

nlohmann::json to_json(const ThresholdSweep& s);

/// Everything needed to serve predictions from a weights file.
struct ModelBundle {
  ClassifierParams params;
  std::vector<std::string> channels;
  Eigen::VectorXd mean, stddev;  // input normalization
  double tau = 0.5;
  nlohmann::json extra = nlohmann::json::object();
};

/// `path` receives the little-endian float32 blob and `path.json` the
/// manifest (tensor names, shapes, dtype, byte offsets, architecture,
/// normalization, tau).
void save_weights(const std::filesystem::path& path, const ModelBundle& bundle);
ModelBundle load_weights(const std::filesystem::path& path);

}  // namespace gridshed
