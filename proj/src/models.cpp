#include "fdrop/models.hpp"

#include <fstream>
#include <sstream>

#include "fdrop/ops.hpp"
#include "fdrop/tensor_io.hpp"

namespace fdrop {

namespace {

/// Three conv stages (the last two double the width) with a GAP + linear
/// head; small enough to train on synthetic data in seconds.
class TinyCnn final : public Model {
 public:
  TinyCnn(ModelSpec spec, Rng& rng) : Model(std::move(spec)) {
    const int w = spec_.base_width;
    conv1_ = Conv2d(spec_.input_channels, w, 3, 1, 1, rng);
    bn1_ = BatchNorm2d(w);
    conv2_ = Conv2d(w, 2 * w, 3, 1, 1, rng);
    bn2_ = BatchNorm2d(2 * w);
    conv3_ = Conv2d(2 * w, 4 * w, 3, 1, 1, rng);
    bn3_ = BatchNorm2d(4 * w);
    head_ = Linear(4 * w, spec_.num_classes, rng);
  }

  Tensor forward(Tape* tape, const Tensor& x, ForwardCtx& ctx) override {
    const bool train = ctx.mode == DropoutMode::Train;
    Tensor h = relu(bn1_.forward(tape, conv1_.forward(tape, x), train), tape);
    h = maxpool2d(h, 2, 0, tape);
    h = route_stage("stage1", h, tape, ctx);
    h = relu(bn2_.forward(tape, conv2_.forward(tape, h), train), tape);
    h = maxpool2d(h, 2, 0, tape);
    h = route_stage("stage2", h, tape, ctx);
    h = relu(bn3_.forward(tape, conv3_.forward(tape, h), train), tape);
    h = route_stage("stage3", h, tape, ctx);
    return head_.forward(tape, global_avg_pool(h, tape));
  }

  std::vector<NamedParam> named_state() override {
    std::vector<NamedParam> out;
    conv1_.collect(out, "stage1.conv");
    bn1_.collect(out, "stage1.bn");
    conv2_.collect(out, "stage2.conv");
    bn2_.collect(out, "stage2.bn");
    conv3_.collect(out, "stage3.conv");
    bn3_.collect(out, "stage3.bn");
    head_.collect(out, "head");
    return out;
  }

  std::vector<std::string> stage_names() const override {
    return {"stage1", "stage2", "stage3"};
  }

  const Linear& classifier() const override { return head_; }

 private:
  Conv2d conv1_, conv2_, conv3_;
  BatchNorm2d bn1_, bn2_, bn3_;
  Linear head_;
};

/// Two 3x3 convs with identity shortcut; width/resolution changes use the
/// parameter-free subsample + zero-pad shortcut.
struct BasicBlock {
  Conv2d conv1, conv2;
  BatchNorm2d bn1, bn2;
  int in_ch = 0, out_ch = 0, stride = 1;

  BasicBlock() = default;
  BasicBlock(int in, int out, int stride_, Rng& rng)
      : conv1(in, out, 3, stride_, 1, rng),
        conv2(out, out, 3, 1, 1, rng),
        bn1(out),
        bn2(out),
        in_ch(in),
        out_ch(out),
        stride(stride_) {}

  Tensor forward(Tape* tape, const Tensor& x, bool train) {
    Tensor h = relu(bn1.forward(tape, conv1.forward(tape, x), train), tape);
    h = bn2.forward(tape, conv2.forward(tape, h), train);
    Tensor shortcut = (stride != 1 || in_ch != out_ch)
                          ? subsample_pad_channels(x, out_ch, stride, tape)
                          : x;
    return relu(add(h, shortcut, tape), tape);
  }

  void collect(std::vector<NamedParam>& out, const std::string& prefix) {
    conv1.collect(out, prefix + ".conv1");
    bn1.collect(out, prefix + ".bn1");
    conv2.collect(out, prefix + ".conv2");
    bn2.collect(out, prefix + ".bn2");
  }
};

/// CIFAR-style residual net of depth 6n+2: a stem conv and three stages of n
/// basic blocks at widths w/2w/4w, strided at the stage transitions.
class ResNetSmall final : public Model {
 public:
  ResNetSmall(ModelSpec spec, Rng& rng) : Model(std::move(spec)) {
    if (spec_.depth < 8 || (spec_.depth - 2) % 6 != 0) {
      throw std::invalid_argument("resnet: depth must be 6n+2 (20, 56, ...), got " +
                                  std::to_string(spec_.depth));
    }
    const int n = (spec_.depth - 2) / 6;
    const int w = spec_.base_width;
    stem_ = Conv2d(spec_.input_channels, w, 3, 1, 1, rng);
    stem_bn_ = BatchNorm2d(w);
    const int widths[3] = {w, 2 * w, 4 * w};
    int in_ch = w;
    for (int s = 0; s < 3; ++s) {
      std::vector<BasicBlock> blocks;
      for (int b = 0; b < n; ++b) {
        const int stride = (s > 0 && b == 0) ? 2 : 1;
        blocks.emplace_back(in_ch, widths[s], stride, rng);
        in_ch = widths[s];
      }
      stages_.push_back(std::move(blocks));
    }
    head_ = Linear(4 * w, spec_.num_classes, rng);
  }

  Tensor forward(Tape* tape, const Tensor& x, ForwardCtx& ctx) override {
    const bool train = ctx.mode == DropoutMode::Train;
    Tensor h = relu(stem_bn_.forward(tape, stem_.forward(tape, x), train), tape);
    h = route_stage("stem", h, tape, ctx);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (auto& block : stages_[s]) h = block.forward(tape, h, train);
      h = route_stage("stage" + std::to_string(s + 1), h, tape, ctx);
    }
    return head_.forward(tape, global_avg_pool(h, tape));
  }

  std::vector<NamedParam> named_state() override {
    std::vector<NamedParam> out;
    stem_.collect(out, "stem.conv");
    stem_bn_.collect(out, "stem.bn");
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (std::size_t b = 0; b < stages_[s].size(); ++b) {
        stages_[s][b].collect(out, "stage" + std::to_string(s + 1) + ".block" +
                                       std::to_string(b + 1));
      }
    }
    head_.collect(out, "head");
    return out;
  }

  std::vector<std::string> stage_names() const override {
    return {"stem", "stage1", "stage2", "stage3"};
  }

  const Linear& classifier() const override { return head_; }

 private:
  Conv2d stem_;
  BatchNorm2d stem_bn_;
  std::vector<std::vector<BasicBlock>> stages_;
  Linear head_;
};

/// Plain VGG-style stack: two conv/bn/relu pairs per stage, pooling between
/// stages, GAP + linear head (keeps CAM applicable).
class VggSmall final : public Model {
 public:
  VggSmall(ModelSpec spec, Rng& rng) : Model(std::move(spec)) {
    const int w = spec_.base_width;
    const int widths[3] = {w, 2 * w, 4 * w};
    int in_ch = spec_.input_channels;
    for (int s = 0; s < 3; ++s) {
      convs_[s][0] = Conv2d(in_ch, widths[s], 3, 1, 1, rng);
      bns_[s][0] = BatchNorm2d(widths[s]);
      convs_[s][1] = Conv2d(widths[s], widths[s], 3, 1, 1, rng);
      bns_[s][1] = BatchNorm2d(widths[s]);
      in_ch = widths[s];
    }
    head_ = Linear(4 * w, spec_.num_classes, rng);
  }

  Tensor forward(Tape* tape, const Tensor& x, ForwardCtx& ctx) override {
    const bool train = ctx.mode == DropoutMode::Train;
    Tensor h = x;
    for (int s = 0; s < 3; ++s) {
      h = relu(bns_[s][0].forward(tape, convs_[s][0].forward(tape, h), train), tape);
      h = relu(bns_[s][1].forward(tape, convs_[s][1].forward(tape, h), train), tape);
      if (s < 2) h = maxpool2d(h, 2, 0, tape);
      h = route_stage("stage" + std::to_string(s + 1), h, tape, ctx);
    }
    return head_.forward(tape, global_avg_pool(h, tape));
  }

  std::vector<NamedParam> named_state() override {
    std::vector<NamedParam> out;
    for (int s = 0; s < 3; ++s) {
      const std::string stage = "stage" + std::to_string(s + 1);
      for (int i = 0; i < 2; ++i) {
        convs_[s][i].collect(out, stage + ".conv" + std::to_string(i + 1));
        bns_[s][i].collect(out, stage + ".bn" + std::to_string(i + 1));
      }
    }
    head_.collect(out, "head");
    return out;
  }

  std::vector<std::string> stage_names() const override {
    return {"stage1", "stage2", "stage3"};
  }

  const Linear& classifier() const override { return head_; }

 private:
  Conv2d convs_[3][2];
  BatchNorm2d bns_[3][2];
  Linear head_;
};

}  // namespace

std::unique_ptr<Model> build_model(const ModelSpec& spec, Rng& init_rng) {
  if (spec.architecture == "tiny-cnn") return std::make_unique<TinyCnn>(spec, init_rng);
  if (spec.architecture == "resnet") return std::make_unique<ResNetSmall>(spec, init_rng);
  if (spec.architecture == "vgg-small") return std::make_unique<VggSmall>(spec, init_rng);
  throw std::invalid_argument("unknown architecture '" + spec.architecture +
                              "' (known: tiny-cnn, resnet, vgg-small)");
}

void save_checkpoint(Model& model, const std::string& path,
                     const std::map<std::string, std::string>& extras) {
  const auto state = model.named_state();

  std::ofstream blob(path, std::ios::binary);
  if (!blob) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  for (const auto& p : state) save_tensor(blob, p.tensor);
  if (!blob) throw std::runtime_error("checkpoint: write failed for " + path);

  std::ofstream man(path + ".manifest");
  if (!man) throw std::runtime_error("checkpoint: cannot open " + path + ".manifest");
  const ModelSpec& spec = model.spec();
  man << "# fdrop-checkpoint-v1\n";
  man << "architecture = " << spec.architecture << "\n";
  man << "depth = " << spec.depth << "\n";
  man << "base_width = " << spec.base_width << "\n";
  man << "num_classes = " << spec.num_classes << "\n";
  man << "input_channels = " << spec.input_channels << "\n";
  for (const auto& [k, v] : extras) man << "extra " << k << " = " << v << "\n";
  for (const auto& p : state) {
    man << "tensor " << p.name;
    for (int d = 0; d < p.tensor.ndim(); ++d) man << " " << p.tensor.dim(d);
    man << "\n";
  }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream man(path + ".manifest");
  if (!man) throw std::runtime_error("checkpoint: cannot open " + path + ".manifest");

  ModelSpec spec;
  std::map<std::string, std::string> extras;
  std::vector<std::string> tensor_names;
  std::string line;
  while (std::getline(man, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "tensor") {
      std::string name;
      ss >> name;
      tensor_names.push_back(name);
    } else if (key == "extra") {
      std::string name, eq;
      ss >> name >> eq;
      std::string value;
      std::getline(ss, value);
      if (!value.empty() && value[0] == ' ') value.erase(0, 1);
      extras[name] = value;
    } else {
      std::string eq, value;
      ss >> eq >> value;
      if (key == "architecture") spec.architecture = value;
      else if (key == "depth") spec.depth = std::stoi(value);
      else if (key == "base_width") spec.base_width = std::stoi(value);
      else if (key == "num_classes") spec.num_classes = std::stoi(value);
      else if (key == "input_channels") spec.input_channels = std::stoi(value);
    }
  }

  Rng dummy(0);
  LoadedCheckpoint out;
  out.model = build_model(spec, dummy);
  out.extras = std::move(extras);

  std::ifstream blob(path, std::ios::binary);
  if (!blob) throw std::runtime_error("checkpoint: cannot open " + path);
  auto state = out.model->named_state();
  if (tensor_names.size() != state.size()) {
    throw std::runtime_error("checkpoint: manifest lists " +
                             std::to_string(tensor_names.size()) + " tensors, model has " +
                             std::to_string(state.size()));
  }
  for (std::size_t i = 0; i < state.size(); ++i) {
    if (tensor_names[i] != state[i].name) {
      throw std::runtime_error("checkpoint: tensor order mismatch at '" + tensor_names[i] +
                               "' (expected '" + state[i].name + "')");
    }
    Tensor loaded = load_tensor<float>(blob);
    if (loaded.shape() != state[i].tensor.shape()) {
      throw std::runtime_error("checkpoint: shape mismatch for '" + state[i].name +
                               "': file has " + shape_str(loaded.shape()) + ", model has " +
                               shape_str(state[i].tensor.shape()));
    }
    auto dst = state[i].tensor.data();
    const auto src = loaded.data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = src[j];
  }
  return out;
}

}  // namespace fdrop
