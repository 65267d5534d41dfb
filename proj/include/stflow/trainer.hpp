#pragma once

// Training loop, Adam, evaluation metrics, the historical-average baseline
// and the multi-seed replica protocol.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "stflow/data.hpp"
#include "stflow/model.hpp"

namespace stflow {

struct TrainConfig {
  std::size_t batch_size = 16;
  double learning_rate = 1e-4;
  std::size_t epochs = 150;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  /// Throws ConfigError; batch_size must be at least 2 for batch normalization.
  void validate() const;
  nlohmann::json to_json() const;
  /// Strict: unknown keys are rejected, missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Adam with bias correction. Moments are kept in double.
class Adam {
 public:
  explicit Adam(const TrainConfig& cfg) : cfg_(cfg) {}
  /// One update from the accumulated gradients of every trainable parameter.
  void step(ParamStore<float>& store);
  std::size_t steps() const { return t_; }

 private:
  TrainConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Called after every epoch with (1-based epoch, mean training loss).
using EpochCallback = std::function<void(std::size_t, double)>;

/// Minimizes the MSE between predictions and normalized targets. Batches are
/// drawn from a per-epoch Fisher-Yates shuffle seeded by `seed`; a trailing
/// batch of a single sample is skipped (batch statistics need two). Returns
/// the per-epoch mean loss. Throws NumericalError on a non-finite loss or
/// gradient.
std::vector<double> train(Model<float>& model, const SampleSet& data, const TrainConfig& cfg, std::uint64_t seed,
                          const EpochCallback& on_epoch = {});

struct Metrics {
  double rmse = 0;
  double mape = 0;
  double ape = 0;
};

/// Tensors [..., 2] with inflow and outflow in the last axis; one region is
/// one (inflow, outflow) pair.
/// rmse = sqrt(mean over regions of (di^2 + do^2)).
double rmse(const Tensor<float>& pred, const Tensor<float>& truth);
/// 100 * mean over regions of |di + do| / max(in + out, 1), true flows in the denominator.
double mape(const Tensor<float>& pred, const Tensor<float>& truth);
/// 100 * sum over regions of the same ratio.
double ape(const Tensor<float>& pred, const Tensor<float>& truth);
Metrics compute_metrics(const Tensor<float>& pred, const Tensor<float>& truth);

/// Eval-mode predictions in normalized units, [S, N, M, 2].
Tensor<float> predict_all(const Model<float>& model, const SampleSet& data, std::size_t batch = 64);
/// Metrics on denormalized predictions and targets.
Metrics evaluate(const Model<float>& model, const SampleSet& data, const Normalizer& nrm);

/// Mean of the training frames (t < boundary) that share the target's day of
/// week and time of day; regions of an unseen key fall back to their mean over
/// all training frames. Returns raw flows [targets, N, M, 2].
Tensor<float> ha_predict(const FlowDataset& ds, std::size_t boundary, const std::vector<std::size_t>& targets);
/// HA metrics over the test targets [max(closeness, boundary), T).
Metrics ha_baseline(const FlowDataset& ds, std::size_t boundary, std::size_t closeness);

/// "4.67±0.03"
std::string format_mean_std(double mean, double std, int precision = 2);

struct ReplicaRow {
  std::uint64_t seed = 0;
  Metrics metrics;
  std::vector<double> loss;
};

struct ReplicaReport {
  std::vector<ReplicaRow> rows;
  Metrics mean, std;  ///< population standard deviation

  static ReplicaReport aggregate(std::vector<ReplicaRow> rows);
  /// seed,rmse,mape,ape rows followed by mean and std rows.
  std::string csv() const;
  std::string table() const;
};

/// Optional observers; with several threads they are called concurrently
/// from the workers. An exception thrown by a hook fails that replica.
struct ReplicaHooks {
  std::function<void(std::uint64_t seed, std::size_t epoch, double loss)> on_epoch;
  std::function<void(const ReplicaRow& row, const Model<float>& model)> on_done;
};

/// Trains and evaluates one model per seed (the seed drives initialization
/// and shuffling). Up to `threads` replicas run concurrently; the report does
/// not depend on scheduling. A failing replica is reported with its seed.
ReplicaReport run_replicas(const ModelConfig& model, const PreparedData& data, const TrainConfig& cfg,
                           std::size_t threads = 1, const ReplicaHooks& hooks = {});

/// First line of every CSV artifact.
std::string csv_header(std::uint32_t digest, std::uint64_t seed);
/// Same, for artifacts aggregating several seeds: "seed=0,1,2".
std::string csv_header(std::uint32_t digest, const std::vector<std::uint64_t>& seeds);
/// "epoch,loss" rows.
std::string loss_csv(const std::vector<double>& loss);

}  // namespace stflow
