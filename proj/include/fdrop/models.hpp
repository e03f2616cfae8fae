#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "fdrop/focused_dropout.hpp"
#include "fdrop/layers.hpp"
#include "fdrop/regularizers.hpp"
#include "fdrop/types.hpp"

namespace fdrop {

/// Declarative description of a network. `depth` only applies to the resnet
/// family (6n+2 layers); `base_width` is the channel count of the first stage.
struct ModelSpec {
  std::string architecture = "tiny-cnn";  // tiny-cnn | resnet | vgg-small
  int depth = 20;
  int base_width = 16;
  int num_classes = 10;
  int input_channels = 3;
};

/// Per-forward runtime context: train/inference mode, whether this batch's
/// regularizer fires, the regularizer RNG stream, mask logging, and an
/// optional stage-output capture hook (used by the analysis tooling).
struct ForwardCtx {
  DropoutMode mode = DropoutMode::Inference;
  bool regularizer_active = false;
  const Rng* reg_rng = nullptr;
  std::vector<FocusMask>* mask_log = nullptr;
  const std::string* capture_stage = nullptr;
  Tensor* captured = nullptr;
};

class Model {
 public:
  virtual ~Model() = default;

  /// Maps an (N,C,H,W) batch to (N,num_classes) logits.
  virtual Tensor forward(Tape* tape, const Tensor& x, ForwardCtx& ctx) = 0;

  /// Every named tensor in the model, parameters and buffers alike, in a
  /// stable order (defines the checkpoint layout).
  virtual std::vector<NamedParam> named_state() = 0;

  virtual std::vector<std::string> stage_names() const = 0;

  /// Final linear classifier over the pooled features (needed by CAM).
  virtual const Linear& classifier() const = 0;

  const ModelSpec& spec() const { return spec_; }

  /// Inference-mode forward without a tape.
  Tensor predict(const Tensor& x) {
    ForwardCtx ctx;
    return forward(nullptr, x, ctx);
  }

  /// Stage whose output feeds the regularizer by default ("output of
  /// penultimate group"): the second-to-last named stage.
  std::string penultimate_stage() const {
    const auto names = stage_names();
    return names[names.size() - 2];
  }

  /// Stage producing the final conv feature maps (the GAP input).
  std::string features_stage() const { return stage_names().back(); }

  /// Installs a regularizer, resolving each insertion point against the named
  /// stages ("penultimate" resolves to penultimate_stage()).
  void set_regularizer(RegularizerSpec reg) {
    reg.validate();
    std::set<std::string> resolved;
    const auto names = stage_names();
    for (const auto& point : reg.insertion_points) {
      const std::string target = point == "penultimate" ? penultimate_stage() : point;
      bool known = false;
      for (const auto& n : names) known = known || n == target;
      if (!known) {
        std::string list;
        for (const auto& n : names) list += (list.empty() ? "" : ", ") + n;
        throw std::invalid_argument("insertion point '" + point +
                                    "' does not resolve to a stage (stages: " + list + ")");
      }
      resolved.insert(target);
    }
    reg_ = std::move(reg);
    active_points_ = std::move(resolved);
  }

  const RegularizerSpec& regularizer() const { return reg_; }

  std::int64_t parameter_count() {
    std::int64_t n = 0;
    for (const auto& p : named_state()) {
      if (p.trainable) n += p.tensor.size();
    }
    return n;
  }

 protected:
  explicit Model(ModelSpec spec) : spec_(std::move(spec)) {}

  /// Called by subclasses after each named stage: handles capture and routes
  /// the activation through the regularizer on active training batches.
  Tensor route_stage(const std::string& name, Tensor h, Tape* tape, ForwardCtx& ctx) {
    if (ctx.capture_stage != nullptr && *ctx.capture_stage == name &&
        ctx.captured != nullptr) {
      *ctx.captured = h;
    }
    if (reg_.kind != RegKind::None && ctx.regularizer_active &&
        ctx.mode == DropoutMode::Train && active_points_.count(name) > 0) {
      if (ctx.reg_rng == nullptr) {
        throw std::logic_error("model: regularizer active but no rng supplied");
      }
      h = apply_regularizer(h, reg_, ctx.mode, *ctx.reg_rng, tape, ctx.mask_log);
    }
    return h;
  }

  ModelSpec spec_;
  RegularizerSpec reg_;
  std::set<std::string> active_points_;
};

/// Instantiates the architecture named in `spec`; parameters are drawn from
/// `init_rng` in a fixed order, so equal seeds give bit-identical models.
std::unique_ptr<Model> build_model(const ModelSpec& spec, Rng& init_rng);

// Checkpoint: concatenated FNT1 tensor snapshots in named_state() order plus
// a plain-text manifest (<path>.manifest) listing the model spec, any extra
// key-value entries, and one line per tensor with its name and shape.
void save_checkpoint(Model& model, const std::string& path,
                     const std::map<std::string, std::string>& extras = {});

struct LoadedCheckpoint {
  std::unique_ptr<Model> model;
  std::map<std::string, std::string> extras;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace fdrop
