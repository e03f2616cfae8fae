#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstring>

#include "fdrop/models.hpp"
#include "fdrop/ops.hpp"
#include "testutil.hpp"

using fdrop::DropoutMode;
using fdrop::ForwardCtx;
using fdrop::GammaRange;
using fdrop::ModelSpec;
using fdrop::RegKind;
using fdrop::RegularizerSpec;
using fdrop::Rng;
using fdrop::Shape;
using fdrop::Tensor;

namespace {

Tensor random_images(Rng& rng, int n, int ch, int side) {
  Tensor x(Shape{n, ch, side, side});
  fdrop::fill_uniform(x, rng, 0.0, 1.0);
  return x;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(),
                     a.data().size() * sizeof(float)) == 0;
}

/// Independent parameter-count formula for the resnet family (convs without
/// bias, batchnorm affine pairs, linear head).
std::int64_t resnet_param_formula(int depth, int w, int classes, int in_ch) {
  const int n = (depth - 2) / 6;
  auto conv = [](int in, int out) { return static_cast<std::int64_t>(in) * out * 9; };
  std::int64_t total = conv(in_ch, w) + 2 * w;
  int in = w;
  const int widths[3] = {w, 2 * w, 4 * w};
  for (int s = 0; s < 3; ++s) {
    for (int b = 0; b < n; ++b) {
      total += conv(in, widths[s]) + 2 * widths[s];
      total += conv(widths[s], widths[s]) + 2 * widths[s];
      in = widths[s];
    }
  }
  total += static_cast<std::int64_t>(4 * w) * classes + classes;
  return total;
}

}  // namespace

TEST_CASE("tiny-cnn maps (N,3,8,8) to (N,3) logits") {
  ModelSpec spec;
  spec.architecture = "tiny-cnn";
  spec.num_classes = 3;
  Rng rng(60);
  auto model = fdrop::build_model(spec, rng);
  Tensor x = random_images(rng, 4, 3, 8);
  Tensor logits = model->predict(x);
  CHECK(logits.shape() == Shape{4, 3});
}

TEST_CASE("resnet-20 shape contract and parameter count near 0.27M") {
  ModelSpec spec;
  spec.architecture = "resnet";
  spec.depth = 20;
  spec.num_classes = 10;
  Rng rng(61);
  auto model = fdrop::build_model(spec, rng);
  Tensor x = random_images(rng, 2, 3, 32);
  Tensor logits = model->predict(x);
  CHECK(logits.shape() == Shape{2, 10});

  const std::int64_t count = model->parameter_count();
  CHECK(count == resnet_param_formula(20, 16, 10, 3));
  CHECK(count > 260000);
  CHECK(count < 280000);

  CHECK_THROWS_AS(fdrop::build_model({.architecture = "resnet", .depth = 21}, rng),
                  std::invalid_argument);
}

TEST_CASE("vgg-small builds and classifies") {
  ModelSpec spec;
  spec.architecture = "vgg-small";
  spec.num_classes = 5;
  Rng rng(62);
  auto model = fdrop::build_model(spec, rng);
  Tensor x = random_images(rng, 2, 3, 16);
  CHECK(model->predict(x).shape() == Shape{2, 5});
}

TEST_CASE("unknown architecture error lists the known ones") {
  Rng rng(63);
  try {
    fdrop::build_model({.architecture = "alexnet"}, rng);
    FAIL("expected error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("tiny-cnn") != std::string::npos);
    CHECK(msg.find("resnet") != std::string::npos);
    CHECK(msg.find("vgg-small") != std::string::npos);
  }
}

TEST_CASE("eval forward is deterministic bit-for-bit") {
  ModelSpec spec;
  spec.architecture = "resnet";
  spec.num_classes = 10;
  Rng rng(64);
  auto model = fdrop::build_model(spec, rng);
  Tensor x = random_images(rng, 2, 3, 16);
  CHECK(bit_equal(model->predict(x), model->predict(x)));
}

TEST_CASE("same init seed gives bit-identical models") {
  ModelSpec spec;
  spec.architecture = "tiny-cnn";
  spec.num_classes = 3;
  Rng ra(65), rb(65);
  auto a = fdrop::build_model(spec, ra);
  auto b = fdrop::build_model(spec, rb);
  const auto sa = a->named_state();
  const auto sb = b->named_state();
  REQUIRE(sa.size() == sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) CHECK(bit_equal(sa[i].tensor, sb[i].tensor));
}

TEST_CASE("regularizer None and Inference mode leave the forward untouched") {
  ModelSpec spec;
  spec.architecture = "tiny-cnn";
  spec.num_classes = 3;
  Rng seed(66);
  Tensor x = random_images(seed, 2, 3, 16);

  Rng ra(67);
  auto bare = fdrop::build_model(spec, ra);
  Tensor want = bare->predict(x);

  Rng rb(67);
  auto reg = fdrop::build_model(spec, rb);
  RegularizerSpec rs;
  rs.kind = RegKind::Focused;
  rs.gamma = GammaRange(0.3, 0.6);
  reg->set_regularizer(rs);

  // Inference: identity pass-through even with the regularizer installed and
  // the active flag raised.
  Rng reg_rng(68);
  ForwardCtx ctx;
  ctx.mode = DropoutMode::Inference;
  ctx.regularizer_active = true;
  ctx.reg_rng = &reg_rng;
  CHECK(bit_equal(want, reg->forward(nullptr, x, ctx)));

  // None kind under training mode with the flag raised: still untouched.
  Rng rc(67);
  auto none = fdrop::build_model(spec, rc);
  RegularizerSpec ns;  // kind None
  none->set_regularizer(ns);
  ForwardCtx ctx2;
  ctx2.mode = DropoutMode::Train;
  ctx2.regularizer_active = true;
  ctx2.reg_rng = &reg_rng;
  Rng rd(67);
  auto none_bare = fdrop::build_model(spec, rd);
  ForwardCtx ctx3;
  ctx3.mode = DropoutMode::Train;
  CHECK(bit_equal(none_bare->forward(nullptr, x, ctx3), none->forward(nullptr, x, ctx2)));
}

TEST_CASE("degenerate all-ones mask leaves logits equal to the bare run") {
  // Zero input images: bias-free convs and zero-initialized batchnorm betas
  // keep every stage output at zero, so the focused mask degenerates to
  // all-ones and the regularized forward must match the bare one exactly.
  ModelSpec spec;
  spec.architecture = "tiny-cnn";
  spec.num_classes = 3;
  Tensor x = Tensor::zeros(Shape{2, 3, 16, 16});

  Rng ra(70);
  auto bare = fdrop::build_model(spec, ra);
  ForwardCtx bare_ctx;
  bare_ctx.mode = DropoutMode::Train;
  Tensor want = bare->forward(nullptr, x, bare_ctx);

  Rng rb(70);
  auto reg = fdrop::build_model(spec, rb);
  RegularizerSpec rs;
  rs.kind = RegKind::Focused;
  rs.gamma = GammaRange(0.3, 0.6);
  reg->set_regularizer(rs);
  Rng reg_rng(71);
  std::vector<fdrop::FocusMask> log;
  ForwardCtx ctx;
  ctx.mode = DropoutMode::Train;
  ctx.regularizer_active = true;
  ctx.reg_rng = &reg_rng;
  ctx.mask_log = &log;
  Tensor got = reg->forward(nullptr, x, ctx);

  REQUIRE(log.size() == 2);
  CHECK(log[0].degenerate);
  CHECK(bit_equal(want, got));
}

TEST_CASE("insertion points resolve or fail with the stage list") {
  ModelSpec spec;
  spec.architecture = "resnet";
  Rng rng(72);
  auto model = fdrop::build_model(spec, rng);
  CHECK(model->penultimate_stage() == "stage2");
  CHECK(model->features_stage() == "stage3");

  RegularizerSpec ok;
  ok.kind = RegKind::DropBlock;
  ok.insertion_points = {"stage1", "stage2"};
  model->set_regularizer(ok);

  RegularizerSpec bad;
  bad.kind = RegKind::Focused;
  bad.insertion_points = {"stage9"};
  try {
    model->set_regularizer(bad);
    FAIL("expected unresolvable insertion point");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("stage2") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip reproduces logits and extras") {
  ModelSpec spec;
  spec.architecture = "tiny-cnn";
  spec.num_classes = 3;
  spec.base_width = 8;
  Rng rng(73);
  auto model = fdrop::build_model(spec, rng);
  Tensor x = random_images(rng, 2, 3, 8);
  Tensor want = model->predict(x);

  const std::string path = "ckpt_roundtrip.bin";
  fdrop::save_checkpoint(*model, path, {{"note", "unit-test"}});
  auto loaded = fdrop::load_checkpoint(path);
  CHECK(loaded.extras.at("note") == "unit-test");
  CHECK(loaded.model->spec().base_width == 8);
  CHECK(bit_equal(want, loaded.model->predict(x)));
  std::remove(path.c_str());
  std::remove((path + ".manifest").c_str());
}
