#include "fdrop/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "fdrop/ops.hpp"

namespace fdrop {

BatchPlan plan_batches(int num_batches, double rate, Rng& rng, bool exact_fraction) {
  if (rate < 0.0 || rate > 1.0) {
    throw std::invalid_argument("plan_batches: rate must be in [0,1], got " +
                                std::to_string(rate));
  }
  if (num_batches < 0) throw std::invalid_argument("plan_batches: negative batch count");
  BatchPlan plan;
  plan.active.assign(static_cast<std::size_t>(num_batches), 0);
  if (exact_fraction) {
    const int k = static_cast<int>(std::lround(rate * num_batches));
    std::vector<int> order = shuffled_indices(num_batches, rng);
    for (int i = 0; i < k; ++i) plan.active[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
  } else {
    for (int b = 0; b < num_batches; ++b) {
      plan.active[static_cast<std::size_t>(b)] = rng.bernoulli(rate) ? 1 : 0;
    }
  }
  return plan;
}

double lr_at_epoch(double base_lr, const std::vector<int>& milestones, double factor,
                   int epoch) {
  double lr = base_lr;
  for (int m : milestones) {
    if (epoch >= m) lr *= factor;
  }
  return lr;
}

void sgd_step(Tensor& param, Tensor& velocity, double lr, double momentum,
              double weight_decay, const std::string& name) {
  auto p = param.data();
  auto g = param.grad();
  auto v = velocity.data();
  const float flr = static_cast<float>(lr);
  const float fmom = static_cast<float>(momentum);
  const float fwd = static_cast<float>(weight_decay);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!std::isfinite(static_cast<double>(g[i]))) {
      throw std::runtime_error("sgd_step: non-finite gradient in parameter '" + name +
                               "' at flat index " + std::to_string(i));
    }
    v[i] = fmom * v[i] + g[i] + fwd * p[i];
    p[i] -= flr * v[i];
  }
}

Optimizer::Optimizer(std::vector<NamedParam> trainable) : params_(std::move(trainable)) {
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.push_back(Tensor::zeros(p.tensor.shape()));
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Optimizer::step(double lr, double momentum, double weight_decay) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    sgd_step(params_[i].tensor, velocity_[i], lr, momentum, weight_decay,
             params_[i].name);
  }
}

double evaluate(Model& model, const Dataset& ds, const Normalization& norm,
                int batch_size) {
  const int n = ds.count();
  std::int64_t correct = 0;
  for (int start = 0; start < n; start += batch_size) {
    const int end = std::min(n, start + batch_size);
    std::vector<int> idx;
    for (int i = start; i < end; ++i) idx.push_back(i);
    const Tensor x = normalize_batch(gather_batch(ds, idx), norm);
    const Tensor logits = model.predict(x);
    const int classes = logits.dim(1);
    for (int b = 0; b < end - start; ++b) {
      int best = 0;
      for (int k = 1; k < classes; ++k) {
        if (logits.at(b, k) > logits.at(b, best)) best = k;
      }
      correct += best == ds.labels[static_cast<std::size_t>(idx[static_cast<std::size_t>(b)])];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

std::string resolve_output_dir(const std::string& dir) {
  const char* root = std::getenv("FDROP_OUTPUT_ROOT");
  std::filesystem::path p = dir;
  if (root != nullptr && *root != '\0' && p.is_relative()) {
    p = std::filesystem::path(root) / p;
  }
  return p.string();
}

namespace {

DataBundle load_bundle(const ExperimentConfig& cfg) {
  if (cfg.data_source == "synthetic") {
    return make_synthetic_bundle(cfg.synthetic_classes, cfg.synthetic_n,
                                 cfg.synthetic_n_test, cfg.synthetic_size, cfg.seed_data);
  }
  return load_cifar(cfg.data_path, cfg.data_source == "cifar10" ? 10 : 100);
}

std::string format_metrics_row(const EpochMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%lld,%.9g,%.9g", m.epoch,
                m.train_loss, m.train_acc, m.test_acc, m.lr,
                static_cast<long long>(m.active_batches), m.mean_dropped,
                m.mean_retained);
  return buf;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();

  RunResult result;
  result.output_dir = resolve_output_dir(cfg.output_dir);
  std::filesystem::create_directories(result.output_dir);

  const DataBundle bundle = load_bundle(cfg);
  if (bundle.train.num_classes != cfg.model.num_classes) {
    throw std::invalid_argument("run: model expects " + std::to_string(cfg.model.num_classes) +
                                " classes but dataset has " +
                                std::to_string(bundle.train.num_classes));
  }
  const Normalization norm = compute_normalization(bundle.train);
  write_dataset_manifest(result.output_dir + "/dataset.manifest", bundle, norm);

  Rng data_rng(cfg.seed_data);
  Rng init_rng(cfg.seed_init);
  Rng reg_rng(cfg.seed_reg);

  auto model = build_model(cfg.model, init_rng);
  model->set_regularizer(cfg.regularizer);

  std::vector<NamedParam> trainable;
  for (auto& p : model->named_state()) {
    if (p.trainable) trainable.push_back(p);
  }
  Optimizer opt(trainable);

  result.metrics_path = result.output_dir + "/metrics.csv";
  std::ofstream metrics(result.metrics_path);
  if (!metrics) throw std::runtime_error("run: cannot open " + result.metrics_path);
  metrics << "# fdrop-metrics-v1\n";
  metrics << "epoch,train_loss,train_acc,test_acc,lr,active_batches,"
             "mean_dropped_fraction,mean_retained_fraction\n";

  std::ofstream steps;
  if (cfg.log_steps) {
    steps.open(result.output_dir + "/steps.csv");
    steps << "# fdrop-steps-v1\n";
    steps << "epoch,batch,active,weight_decay,loss\n";
  }

  // The regularizer plan fires only when there is something to fire: a real
  // regularizer kind or the randomly-MWD variant.
  const bool plan_enabled = cfg.regularizer.kind != RegKind::None || cfg.mwd_only;
  const bool masks_enabled = cfg.regularizer.kind != RegKind::None && !cfg.mwd_only;

  const int n_train = bundle.train.count();
  const int num_batches = (n_train + cfg.batch_size - 1) / cfg.batch_size;

  result.checkpoint_path = result.output_dir + "/best.ckpt";

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg.base_lr, cfg.lr_milestones, cfg.lr_factor, epoch);

    Rng epoch_data_rng = data_rng.fork(static_cast<std::uint64_t>(epoch));
    const std::vector<int> perm = shuffled_indices(n_train, epoch_data_rng);

    BatchPlan plan;
    if (plan_enabled) {
      Rng plan_rng = reg_rng.fork(static_cast<std::uint64_t>(epoch));
      plan = plan_batches(num_batches, cfg.participation_rate, plan_rng,
                          cfg.exact_fraction_plan);
    } else {
      plan.active.assign(static_cast<std::size_t>(num_batches), 0);
    }
    plan.base_weight_decay = cfg.base_weight_decay;
    plan.mwd_weight_decay = cfg.mwd_weight_decay;

    double loss_sum = 0.0;
    std::int64_t correct = 0;
    KeepStats epoch_keep;

    for (int b = 0; b < num_batches; ++b) {
      const int start = b * cfg.batch_size;
      const int end = std::min(n_train, start + cfg.batch_size);
      const std::span<const int> idx(perm.data() + start, static_cast<std::size_t>(end - start));

      Tensor x = gather_batch(bundle.train, idx);
      if (cfg.augment_enabled) {
        Rng aug_rng = epoch_data_rng.fork(static_cast<std::uint64_t>(b));
        x = augment(x, cfg.augment, aug_rng);
      }
      x = normalize_batch(x, norm);

      std::vector<int> labels;
      labels.reserve(idx.size());
      for (int i : idx) labels.push_back(bundle.train.labels[static_cast<std::size_t>(i)]);

      Rng mask_rng = reg_rng.fork(static_cast<std::uint64_t>(epoch),
                                  static_cast<std::uint64_t>(b));
      std::vector<FocusMask> mask_log;
      ForwardCtx ctx;
      ctx.mode = DropoutMode::Train;
      ctx.regularizer_active = masks_enabled && plan.active[static_cast<std::size_t>(b)] != 0;
      ctx.reg_rng = &mask_rng;
      ctx.mask_log = &mask_log;

      Tape tape;
      Tensor logits = model->forward(&tape, x, ctx);
      Tensor loss = softmax_cross_entropy(logits, labels, &tape);

      opt.zero_grad();
      tape.backward(loss);
      const double wd = plan.weight_decay_for(b);
      opt.step(lr, cfg.momentum, wd);

      const double batch_loss = static_cast<double>(loss.item());
      loss_sum += batch_loss * static_cast<double>(idx.size());
      const int classes = logits.dim(1);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        int best = 0;
        for (int k = 1; k < classes; ++k) {
          if (logits.at(static_cast<int>(i), k) > logits.at(static_cast<int>(i), best)) best = k;
        }
        correct += best == labels[i];
      }
      for (const auto& m : mask_log) epoch_keep.add(m);

      if (cfg.log_steps) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%d,%d,%d,%.9g,%.9g", epoch, b,
                      plan.active[static_cast<std::size_t>(b)] ? 1 : 0, wd, batch_loss);
        steps << buf << "\n";
      }
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / static_cast<double>(n_train);
    em.train_acc = static_cast<double>(correct) / static_cast<double>(n_train);
    em.test_acc = evaluate(*model, bundle.test, norm, cfg.batch_size);
    em.lr = lr;
    em.active_batches = plan.active_count();
    em.mean_dropped = epoch_keep.mean_dropped();
    em.mean_retained = epoch_keep.mean_retained();
    metrics << format_metrics_row(em) << "\n";
    metrics.flush();
    result.epochs.push_back(em);
    result.run_keep_stats.merge(epoch_keep);

    if (em.test_acc > result.best_test_acc || result.best_epoch < 0) {
      result.best_test_acc = em.test_acc;
      result.best_epoch = epoch;
      char mb[64], sb[64];
      std::snprintf(mb, sizeof(mb), "%.9g,%.9g,%.9g", norm.mean[0], norm.mean[1], norm.mean[2]);
      std::snprintf(sb, sizeof(sb), "%.9g,%.9g,%.9g", norm.stddev[0], norm.stddev[1],
                    norm.stddev[2]);
      save_checkpoint(*model, result.checkpoint_path,
                      {{"norm_mean", mb},
                       {"norm_std", sb},
                       {"dataset", bundle.source},
                       {"best_epoch", std::to_string(epoch)}});
    }
  }
  return result;
}

}  // namespace fdrop
