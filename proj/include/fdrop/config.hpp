#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fdrop/dataset.hpp"
#include "fdrop/models.hpp"
#include "fdrop/regularizers.hpp"

namespace fdrop {

/// Full declarative description of one training run, parsed from a
/// plain-text section/key-value file. Defaults follow the conventional
/// CIFAR/ResNet setup; desk-scale configs override size and schedule.
struct ExperimentConfig {
  ModelSpec model;

  // [data]
  std::string data_source = "synthetic";  // synthetic | cifar10 | cifar100
  std::string data_path;                  // directory for the cifar binaries
  int synthetic_classes = 3;
  int synthetic_n = 300;       // train images per class
  int synthetic_n_test = 100;  // test images per class
  int synthetic_size = 16;
  bool augment_enabled = true;
  AugmentPolicy augment;

  // [train]
  int epochs = 10;
  int batch_size = 128;
  double base_lr = 0.1;
  double momentum = 0.9;
  double base_weight_decay = 5e-4;
  double mwd_weight_decay = 1e-3;  // weight decay on regularizer-active batches
  std::vector<int> lr_milestones;
  double lr_factor = 0.1;
  double participation_rate = 0.1;
  bool exact_fraction_plan = false;  // exact-count batch selection instead of Bernoulli
  bool mwd_only = false;             // magnify weight decay on planned batches, apply no mask
  bool log_steps = false;            // per-step csv (epoch, batch, active, weight decay)

  // [regularizer]
  RegularizerSpec regularizer;

  // [seeds] — separate streams so the regularizer path cannot perturb data
  // order or initialization.
  std::uint64_t seed_data = 1;
  std::uint64_t seed_init = 2;
  std::uint64_t seed_reg = 3;

  // [output]
  std::string output_dir = "run";

  void validate() const;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);

/// The randomly-MWD run variant: identical batch plan, magnified weight
/// decay on active batches, no mask applied.
ExperimentConfig randomly_mwd_variant(ExperimentConfig cfg);

}  // namespace fdrop
