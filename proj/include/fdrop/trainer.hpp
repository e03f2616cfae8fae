#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fdrop/analysis_types.hpp"
#include "fdrop/config.hpp"
#include "fdrop/dataset.hpp"
#include "fdrop/models.hpp"

namespace fdrop {

/// Per-batch regularizer plan for one epoch: which batches fire and the
/// weight decay in force on each step.
struct BatchPlan {
  std::vector<std::uint8_t> active;
  double base_weight_decay = 0.0;
  double mwd_weight_decay = 0.0;

  double weight_decay_for(int batch) const {
    return active[static_cast<std::size_t>(batch)] ? mwd_weight_decay : base_weight_decay;
  }

  std::int64_t active_count() const {
    std::int64_t n = 0;
    for (auto a : active) n += a;
    return n;
  }
};

/// Bernoulli(rate) per batch; with exact_fraction set, exactly
/// round(rate * num_batches) batches are chosen without replacement.
BatchPlan plan_batches(int num_batches, double rate, Rng& rng,
                       bool exact_fraction = false);

/// Step schedule: base_lr multiplied by `factor` once per milestone epoch
/// already reached ("decayed by the factor of 0.1 at 150,225").
double lr_at_epoch(double base_lr, const std::vector<int>& milestones, double factor,
                   int epoch);

/// SGD with momentum and L2 weight decay folded into the gradient:
/// v <- momentum * v + grad + wd * param;  param <- param - lr * v.
/// A non-finite gradient aborts with a diagnostic naming the parameter.
void sgd_step(Tensor& param, Tensor& velocity, double lr, double momentum,
              double weight_decay, const std::string& name);

/// Owns the trainable parameter handles and their momentum buffers.
class Optimizer {
 public:
  explicit Optimizer(std::vector<NamedParam> trainable);
  void zero_grad();
  void step(double lr, double momentum, double weight_decay);

 private:
  std::vector<NamedParam> params_;
  std::vector<Tensor> velocity_;
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double lr = 0.0;
  std::int64_t active_batches = 0;
  double mean_dropped = 0.0;
  double mean_retained = 0.0;
};

struct RunResult {
  std::vector<EpochMetrics> epochs;
  double best_test_acc = 0.0;
  int best_epoch = -1;
  KeepStats run_keep_stats;  // over every mask the run produced
  std::string output_dir;
  std::string metrics_path;
  std::string checkpoint_path;
};

/// Mean accuracy of the model over the dataset in inference mode.
double evaluate(Model& model, const Dataset& ds, const Normalization& norm,
                int batch_size);

/// Full training run per the config: writes metrics.csv (schema
/// fdrop-metrics-v1), optional steps.csv, the dataset manifest, and keeps the
/// best-accuracy checkpoint. The output directory is rooted at the
/// FDROP_OUTPUT_ROOT environment variable when set.
RunResult run_experiment(const ExperimentConfig& cfg);

/// Output directory resolution used by run_experiment and the CLI.
std::string resolve_output_dir(const std::string& dir);

}  // namespace fdrop
