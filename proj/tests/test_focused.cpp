#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <sstream>
#include <vector>

#include "fdrop/focused_dropout.hpp"
#include "fdrop/mask_io.hpp"
#include "fdrop/ops.hpp"
#include "focus_oracle.hpp"
#include "testutil.hpp"

using fdrop::DropoutMode;
using fdrop::FeatureStackT;
using fdrop::FocusMask;
using fdrop::GammaRange;
using fdrop::Rng;
using fdrop::Shape;
using fdrop::TensorT;

using FT = TensorT<float>;
using DT = TensorT<double>;
using FStack = FeatureStackT<float>;

namespace {

FT stack_tensor(int channels, int h, int w, const std::vector<float>& values) {
  return FT::from_data(Shape{1, channels, h, w}, values);
}

/// Random stack with a mix of zero and positive planes, matching the
/// post-ReLU activations the layer sees in practice.
FT random_stack(Rng& rng, int channels, int h, int w) {
  FT t(Shape{1, channels, h, w});
  auto d = t.data();
  for (int c = 0; c < channels; ++c) {
    const bool zero_plane = rng.uniform() < 0.15;
    for (int i = 0; i < h * w; ++i) {
      const std::size_t at = static_cast<std::size_t>(c * h * w + i);
      if (zero_plane) {
        d[at] = 0.f;
      } else {
        d[at] = rng.uniform() < 0.2 ? 0.f : static_cast<float>(rng.uniform(0.0, 1.0));
      }
    }
  }
  return t;
}

}  // namespace

TEST_CASE("channel_mean_activations matches direct summation") {
  FT t = stack_tensor(2, 2, 2, {1, 2, 3, 4, 0, 0, 0, 0});
  const auto weights = fdrop::channel_mean_activations(FStack::from_batch(t, 0));
  REQUIRE(weights.size() == 2);
  CHECK(weights[0] == doctest::Approx(2.5f));
  CHECK(weights[1] == 0.f);

  FT c7 = FT::full(Shape{1, 1, 3, 3}, 7.f);
  CHECK(fdrop::channel_mean_activations(FStack::from_batch(c7, 0))[0] == doctest::Approx(7.f));

  FT z = FT::zeros(Shape{1, 3, 2, 2});
  for (float wv : fdrop::channel_mean_activations(FStack::from_batch(z, 0))) CHECK(wv == 0.f);
}

TEST_CASE("select_reference_channel: argmax with lowest-index ties") {
  const std::vector<float> a = {2.5f, 0.f};
  CHECK(fdrop::select_reference_channel<float>(a) == 0);
  const std::vector<float> b = {1.f, 3.f, 3.f};
  CHECK(fdrop::select_reference_channel<float>(b) == 1);

  Rng rng(21);
  std::vector<float> v(64);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  int want = 0;
  for (int i = 1; i < 64; ++i) {
    if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(want)]) want = i;
  }
  CHECK(fdrop::select_reference_channel<float>(v) == want);
}

TEST_CASE("peak_unit: row-major first-occurrence maximum") {
  const std::vector<float> m = {1, 2, 3, 4};
  auto [pos, val] = fdrop::peak_unit(m.data(), 2, 2);
  CHECK(pos.first == 1);
  CHECK(pos.second == 1);
  CHECK(val == 4.f);

  const std::vector<float> c(6, 5.f);
  auto [cpos, cval] = fdrop::peak_unit(c.data(), 2, 3);
  CHECK(cpos.first == 0);
  CHECK(cpos.second == 0);
  CHECK(cval == 5.f);

  Rng rng(22);
  std::vector<float> plane(64);
  for (auto& x : plane) x = static_cast<float>(rng.uniform(0.0, 1.0));
  auto [rpos, rval] = fdrop::peak_unit(plane.data(), 8, 8);
  float best = plane[0];
  int by = 0, bx = 0;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      if (plane[static_cast<std::size_t>(y * 8 + x)] > best) {
        best = plane[static_cast<std::size_t>(y * 8 + x)];
        by = y;
        bx = x;
      }
  CHECK(rpos.first == by);
  CHECK(rpos.second == bx);
  CHECK(rval == best);
}

TEST_CASE("sample_gamma: degenerate range, uniform mean, determinism") {
  Rng rng(23);
  CHECK(fdrop::sample_gamma(GammaRange(0.5, 0.5), rng) == 0.5);

  GammaRange r(0.3, 0.6);
  double sum = 0.0;
  for (int i = 0; i < 10000; ++i) sum += fdrop::sample_gamma(r, rng);
  CHECK(sum / 10000.0 == doctest::Approx(0.45).epsilon(0.025));

  Rng a(7), b(7);
  for (int i = 0; i < 50; ++i) {
    CHECK(fdrop::sample_gamma(r, a) == fdrop::sample_gamma(r, b));
  }

  CHECK_THROWS_AS(GammaRange(0.0, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(GammaRange(0.6, 0.3), std::invalid_argument);
  CHECK_THROWS_AS(GammaRange(0.3, 1.0), std::invalid_argument);
}

TEST_CASE("build_focus_mask hand-enumerated cases") {
  // Means 2.5 vs 6.5 -> reference channel 1; peak 8, threshold 4; all of
  // {5,6,7,8} exceed 4 so everything is retained.
  FT two = stack_tensor(2, 2, 2, {1, 2, 3, 4, 5, 6, 7, 8});
  FocusMask m = fdrop::build_focus_mask(FStack::from_batch(two, 0), 0.5);
  CHECK(m.ref_channel == 1);
  CHECK(m.peak_value == 8.0);
  CHECK(m.threshold == 4.0);
  CHECK(m.bits == std::vector<std::uint8_t>{1, 1, 1, 1});
  CHECK_FALSE(m.degenerate);

  // Strict comparison: 2 > 2 is false, so only {3,4} survive.
  FT one = stack_tensor(1, 2, 2, {1, 2, 3, 4});
  FocusMask s = fdrop::build_focus_mask(FStack::from_batch(one, 0), 0.5);
  CHECK(s.peak_value == 4.0);
  CHECK(s.threshold == 2.0);
  CHECK(s.bits == std::vector<std::uint8_t>{0, 0, 1, 1});

  // All-zero stack degenerates to the identity mask.
  FT z = FT::zeros(Shape{1, 3, 2, 2});
  FocusMask d = fdrop::build_focus_mask(FStack::from_batch(z, 0), 0.4);
  CHECK(d.degenerate);
  CHECK(d.bits == std::vector<std::uint8_t>{1, 1, 1, 1});
}

TEST_CASE("build_focus_mask matches the brute-force oracle on random stacks") {
  Rng rng(31);
  int degenerate_seen = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(8));
    const int h = 1 + static_cast<int>(rng.uniform_int(8));
    const int w = 1 + static_cast<int>(rng.uniform_int(8));
    FT t = random_stack(rng, n, h, w);
    const double gamma = rng.uniform(0.3, 0.6);

    std::vector<std::vector<float>> channels;
    for (int c = 0; c < n; ++c) {
      const float* p = t.data().data() + static_cast<std::ptrdiff_t>(c) * h * w;
      channels.emplace_back(p, p + h * w);
    }
    const auto want = focus_oracle::brute_force_mask(channels, h, w, gamma);
    const FocusMask got = fdrop::build_focus_mask(FStack::from_batch(t, 0), gamma);
    REQUIRE(focus_oracle::masks_equal(want, got));
    if (got.degenerate) ++degenerate_seen;
  }
  CHECK(degenerate_seen > 0);  // the mix must exercise the all-zero path
}

TEST_CASE("threshold soundness and peak retention on random stacks") {
  Rng rng(32);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(4));
    const int h = 2 + static_cast<int>(rng.uniform_int(6));
    const int w = 2 + static_cast<int>(rng.uniform_int(6));
    FT t = random_stack(rng, n, h, w);
    const double gamma = rng.uniform(0.3, 0.9);
    const FocusMask m = fdrop::build_focus_mask(FStack::from_batch(t, 0), gamma);
    if (m.degenerate) continue;
    const FStack st = FStack::from_batch(t, 0);
    const float thr = static_cast<float>(m.threshold);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const float v = st.at(m.ref_channel, y, x);
        if (m.at(y, x)) {
          CHECK(v > thr);
        } else {
          CHECK(v <= thr);
        }
      }
    }
    CHECK(m.at(m.peak_row, m.peak_col) == 1);  // gamma < 1 keeps the peak
  }
}

TEST_CASE("monotonicity: retained count never grows with gamma") {
  Rng rng(33);
  const double gammas[] = {0.3, 0.45, 0.6, 0.9};
  for (int trial = 0; trial < 100; ++trial) {
    FT t = random_stack(rng, 1 + static_cast<int>(rng.uniform_int(6)),
                        2 + static_cast<int>(rng.uniform_int(7)),
                        2 + static_cast<int>(rng.uniform_int(7)));
    std::int64_t prev = -1;
    for (double g : gammas) {
      const FocusMask m = fdrop::build_focus_mask(FStack::from_batch(t, 0), g);
      if (prev >= 0) CHECK(m.ones() <= prev);
      prev = m.ones();
    }
  }
}

TEST_CASE("apply_focused_dropout is the bit-exact identity at inference") {
  Rng rng(34);
  FT batch(Shape{3, 4, 5, 5});
  fdrop::fill_uniform(batch, rng, 0.0, 1.0);
  FT out = fdrop::apply_focused_dropout(batch, DropoutMode::Inference,
                                        GammaRange(0.3, 0.6), rng.fork(1));
  CHECK(out.shares_storage_with(batch));
  CHECK(std::memcmp(out.data().data(), batch.data().data(),
                    batch.data().size() * sizeof(float)) == 0);
}

TEST_CASE("apply_focused_dropout broadcasts one mask over every channel") {
  FT batch = stack_tensor(2, 2, 2, {1, 2, 3, 4, 5, 6, 7, 8});
  // Swap channel roles: make channel 0 the reference by boosting it.
  // Here reference is channel 1 (means 2.5 vs 6.5): with gamma forced to 0.5
  // the mask is all-ones, so instead drive the single-channel case.
  FT single = stack_tensor(1, 2, 2, {1, 2, 3, 4});
  Rng rng(35);
  std::vector<FocusMask> log;
  FT out = fdrop::apply_focused_dropout(single, DropoutMode::Train,
                                        GammaRange(0.5, 0.5), rng, nullptr, &log);
  REQUIRE(log.size() == 1);
  CHECK(log[0].bits == std::vector<std::uint8_t>{0, 0, 1, 1});
  CHECK(out.data()[0] == 0.f);
  CHECK(out.data()[1] == 0.f);
  CHECK(out.data()[2] == 3.f);
  CHECK(out.data()[3] == 4.f);

  // Two-channel sample whose mask is decided by the second channel but
  // multiplies the first as well.
  FT stacked = FT::from_data(Shape{1, 2, 2, 2}, {9, 9, 9, 9, 1, 2, 3, 4});
  // channel 0 mean 9 -> reference; constant channel keeps everything.
  std::vector<FocusMask> log2;
  FT out2 = fdrop::apply_focused_dropout(stacked, DropoutMode::Train,
                                         GammaRange(0.5, 0.5), rng, nullptr, &log2);
  CHECK(log2[0].ref_channel == 0);
  CHECK(out2.data()[4] == 1.f);  // all retained: constant reference channel

  // Reference on channel 1 masking channel 0: boost channel 1's mean.
  FT ref1 = FT::from_data(Shape{1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 40});
  std::vector<FocusMask> log3;
  FT out3 = fdrop::apply_focused_dropout(ref1, DropoutMode::Train,
                                         GammaRange(0.5, 0.5), rng, nullptr, &log3);
  REQUIRE(log3[0].ref_channel == 1);
  CHECK(log3[0].bits == std::vector<std::uint8_t>{0, 0, 0, 1});  // only 40 > 20
  CHECK(out3.data()[0] == 0.f);
  CHECK(out3.data()[1] == 0.f);
  CHECK(out3.data()[2] == 0.f);
  CHECK(out3.data()[3] == 4.f);  // channel 0 masked by channel 1's template
}

TEST_CASE("per-sample gamma draws differ; equal gamma gives equal masks") {
  // Identical samples in one batch: sample index is mixed into the stream,
  // so the two gamma draws (and possibly masks) differ.
  FT batch(Shape{2, 1, 3, 3});
  Rng fill(36);
  FT one(Shape{1, 1, 3, 3});
  fdrop::fill_uniform(one, fill, 0.1, 1.0);
  for (int i = 0; i < 9; ++i) {
    batch.data()[static_cast<std::size_t>(i)] = one.data()[static_cast<std::size_t>(i)];
    batch.data()[static_cast<std::size_t>(9 + i)] = one.data()[static_cast<std::size_t>(i)];
  }
  Rng rng(37);
  auto masks = fdrop::focus_masks_for_batch(batch, GammaRange(0.3, 0.6), rng);
  REQUIRE(masks.size() == 2);
  CHECK(masks[0].gamma != masks[1].gamma);

  // Degenerate range forces the same gamma, hence identical masks.
  auto same = fdrop::focus_masks_for_batch(batch, GammaRange(0.5, 0.5), rng);
  CHECK(same[0].bits == same[1].bits);

  // Same rng handed in twice reproduces the masks exactly.
  auto again = fdrop::focus_masks_for_batch(batch, GammaRange(0.3, 0.6), rng);
  CHECK(again[0].gamma == masks[0].gamma);
  CHECK(again[0].bits == masks[0].bits);
}

TEST_CASE("invert_mask flips bits and is an involution") {
  FT one = stack_tensor(1, 2, 2, {1, 2, 3, 4});
  FocusMask m = fdrop::build_focus_mask(FStack::from_batch(one, 0), 0.5);
  FocusMask inv = fdrop::invert_mask(m);
  CHECK(inv.bits == std::vector<std::uint8_t>{1, 1, 0, 0});

  FocusMask ones;
  ones.height = 2;
  ones.width = 2;
  ones.bits = {1, 1, 1, 1};
  CHECK(fdrop::invert_mask(ones).bits == std::vector<std::uint8_t>{0, 0, 0, 0});

  Rng rng(38);
  for (int trial = 0; trial < 20; ++trial) {
    FT t = random_stack(rng, 2, 4, 4);
    FocusMask a = fdrop::build_focus_mask(FStack::from_batch(t, 0), rng.uniform(0.3, 0.9));
    CHECK(fdrop::invert_mask(fdrop::invert_mask(a)).bits == a.bits);
  }
}

TEST_CASE("gradient masking: dropped positions get exactly zero gradient") {
  Rng rng(39);
  DT x(Shape{1, 3, 4, 4});
  for (auto& v : x.data()) v = rng.uniform() < 0.3 ? 0.0 : rng.uniform(0.05, 1.0);
  x.set_requires_grad(true);

  Rng reg_rng(40);
  const GammaRange range(0.3, 0.6);

  // Masked pass: loss mixes positions via squaring so gradients vary.
  fdrop::TapeT<double> tape;
  std::vector<FocusMask> log;
  DT y = fdrop::apply_focused_dropout(x, DropoutMode::Train, range, reg_rng, &tape, &log);
  DT loss = fdrop::sum_all(fdrop::mul(y, y, &tape), &tape);
  tape.backward(loss);
  REQUIRE(log.size() == 1);
  const FocusMask& m = log[0];

  // Unmasked oracle pass on the pre-masked input.
  DT z = DT::zeros(Shape{1, 3, 4, 4});
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 16; ++i) {
      const std::size_t at = static_cast<std::size_t>(c * 16 + i);
      z.data()[at] = m.bits[static_cast<std::size_t>(i)] ? x.data()[at] : 0.0;
    }
  z.set_requires_grad(true);
  fdrop::TapeT<double> tape2;
  DT loss2 = fdrop::sum_all(fdrop::mul(z, z, &tape2), &tape2);
  tape2.backward(loss2);

  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 16; ++i) {
      const std::size_t at = static_cast<std::size_t>(c * 16 + i);
      if (m.bits[static_cast<std::size_t>(i)]) {
        CHECK(x.grad()[at] == z.grad()[at]);
      } else {
        CHECK(x.grad()[at] == 0.0);
      }
    }
}

TEST_CASE("mask export: PGM bytes and metadata CSV row") {
  FT one = stack_tensor(1, 2, 2, {1, 2, 3, 4});
  FocusMask m = fdrop::build_focus_mask(FStack::from_batch(one, 0), 0.5);

  const std::string path = "mask_test.pgm";
  fdrop::write_mask_pgm(m, path);
  std::ifstream is(path, std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  CHECK(content == std::string("P5\n2 2\n1\n") + '\0' + '\0' + '\x01' + '\x01');
  std::remove(path.c_str());

  std::ostringstream csv;
  fdrop::write_mask_csv(m, csv);
  CHECK(csv.str() == "0,0\n1,1\n");

  std::ostringstream meta;
  fdrop::append_mask_metadata_csv(meta, 3, m);
  const std::string row = meta.str();
  CHECK(row.find("3,0,0.5,2,") == 0);
}
