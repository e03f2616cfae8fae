#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <vector>

#include "fdrop/regularizers.hpp"
#include "testutil.hpp"

using fdrop::DropoutMode;
using fdrop::GammaRange;
using fdrop::RegKind;
using fdrop::RegularizerSpec;
using fdrop::Rng;
using fdrop::Shape;
using fdrop::TensorT;

using FT = TensorT<float>;

namespace {

FT random_batch(Rng& rng, Shape shape, double lo = 0.0, double hi = 1.0) {
  FT t(std::move(shape));
  fdrop::fill_uniform(t, rng, lo, hi);
  return t;
}

bool bit_equal(const FT& a, const FT& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(),
                     a.data().size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("every regularizer is the bit-exact identity at inference") {
  Rng rng(50);
  for (int trial = 0; trial < 10; ++trial) {
    FT x = random_batch(rng, Shape{2, 3, 6, 6});
    Rng r = rng.fork(static_cast<std::uint64_t>(trial));
    CHECK(bit_equal(x, fdrop::standard_dropout(x, 0.5, DropoutMode::Inference, r)));
    CHECK(bit_equal(x, fdrop::spatial_dropout(x, 0.5, DropoutMode::Inference, r)));
    CHECK(bit_equal(x, fdrop::dropblock(x, 3, 0.9, DropoutMode::Inference, r)));
    CHECK(bit_equal(x, fdrop::apply_focused_dropout(x, DropoutMode::Inference,
                                                    GammaRange(0.3, 0.6), r)));
    CHECK(bit_equal(x, fdrop::opposite_dropout(x, DropoutMode::Inference,
                                               GammaRange(0.3, 0.6), r)));
  }
}

TEST_CASE("standard dropout: p=0 identity, empirical rate, p>=1 rejected") {
  Rng rng(51);
  FT x = random_batch(rng, Shape{4, 2, 5, 5});
  CHECK(bit_equal(x, fdrop::standard_dropout(x, 0.0, DropoutMode::Train, rng)));
  CHECK_THROWS_AS(fdrop::standard_dropout(x, 1.0, DropoutMode::Train, rng),
                  std::invalid_argument);

  // 10^5 units at p=0.5: dropped fraction within 0.5 +/- 0.01.
  FT big = FT::ones(Shape{10, 10, 100, 10});
  FT out = fdrop::standard_dropout(big, 0.5, DropoutMode::Train, rng.fork(1));
  std::int64_t zeros = 0;
  for (float v : out.data()) zeros += v == 0.f;
  const double rate = static_cast<double>(zeros) / static_cast<double>(big.size());
  CHECK(rate > 0.49);
  CHECK(rate < 0.51);

  // Inverted-dropout scaling: survivors are exactly 1/(1-p).
  for (float v : out.data()) CHECK((v == 0.f || v == 2.f));
}

TEST_CASE("spatial dropout zeroes whole channels and rescales survivors") {
  Rng rng(52);
  FT x = random_batch(rng, Shape{3, 4, 4, 4}, 0.5, 1.0);
  CHECK_THROWS_AS(fdrop::spatial_dropout(x, 1.0, DropoutMode::Train, rng),
                  std::invalid_argument);
  CHECK(bit_equal(x, fdrop::spatial_dropout(x, 0.0, DropoutMode::Train, rng)));

  FT out = fdrop::spatial_dropout(x, 0.5, DropoutMode::Train, rng.fork(2));
  for (int n = 0; n < 3; ++n) {
    for (int c = 0; c < 4; ++c) {
      const std::size_t base = static_cast<std::size_t>((n * 4 + c) * 16);
      const bool dropped = out.data()[base] == 0.f;
      for (int i = 0; i < 16; ++i) {
        const std::size_t at = base + static_cast<std::size_t>(i);
        if (dropped) {
          CHECK(out.data()[at] == 0.f);  // all-or-nothing per channel
        } else {
          CHECK(out.data()[at] == doctest::Approx(2.f * x.data()[at]));
        }
      }
    }
  }

  // Channel drop fraction over many channels: 0.5 +/- 0.02.
  FT big = FT::ones(Shape{64, 64, 2, 2});
  FT bout = fdrop::spatial_dropout(big, 0.5, DropoutMode::Train, rng.fork(3));
  std::int64_t dropped_ch = 0;
  for (int n = 0; n < 64; ++n)
    for (int c = 0; c < 64; ++c)
      dropped_ch += bout.data()[static_cast<std::size_t>((n * 64 + c) * 4)] == 0.f;
  const double frac = static_cast<double>(dropped_ch) / 4096.0;
  CHECK(frac > 0.48);
  CHECK(frac < 0.52);
}

TEST_CASE("dropblock: keep_prob=1 identity, block must fit, zeroed regions are block unions") {
  Rng rng(53);
  FT x = random_batch(rng, Shape{2, 2, 8, 8}, 0.5, 1.0);
  CHECK(bit_equal(x, fdrop::dropblock(x, 3, 1.0, DropoutMode::Train, rng)));
  CHECK_THROWS_AS(fdrop::dropblock(x, 9, 0.9, DropoutMode::Train, rng),
                  std::invalid_argument);

  // Morphological oracle: every zero cell must lie inside at least one fully
  // zero block_size^2 in-bounds square.
  const int block = 3;
  FT out = fdrop::dropblock(x, block, 0.7, DropoutMode::Train, rng.fork(4));
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 2; ++c) {
      const float* plane = out.data().data() + static_cast<std::ptrdiff_t>((n * 2 + c) * 64);
      auto zero_at = [&](int y, int xx) { return plane[y * 8 + xx] == 0.f; };
      for (int y = 0; y < 8; ++y) {
        for (int xx = 0; xx < 8; ++xx) {
          if (!zero_at(y, xx)) continue;
          bool covered = false;
          for (int sy = std::max(0, y - block + 1); sy <= std::min(y, 8 - block) && !covered; ++sy) {
            for (int sx = std::max(0, xx - block + 1); sx <= std::min(xx, 8 - block) && !covered; ++sx) {
              bool all_zero = true;
              for (int by = 0; by < block && all_zero; ++by)
                for (int bx = 0; bx < block && all_zero; ++bx)
                  all_zero = zero_at(sy + by, sx + bx);
              covered = all_zero;
            }
          }
          CHECK(covered);
        }
      }
    }
  }
}

TEST_CASE("dropblock with block_size=1 reduces to per-unit dropout statistics") {
  Rng rng(54);
  FT big = FT::ones(Shape{8, 8, 40, 40});
  const double keep = 0.8;
  FT out = fdrop::dropblock(big, 1, keep, DropoutMode::Train, rng);
  std::int64_t zeros = 0;
  for (float v : out.data()) zeros += v == 0.f;
  const double frac = static_cast<double>(zeros) / static_cast<double>(big.size());
  CHECK(frac > 0.19);
  CHECK(frac < 0.21);
}

TEST_CASE("dropblock rescales survivors by the per-map count ratio") {
  Rng rng(55);
  FT x = FT::ones(Shape{1, 1, 8, 8});
  FT out = fdrop::dropblock(x, 3, 0.6, DropoutMode::Train, rng);
  std::int64_t kept = 0;
  for (float v : out.data()) kept += v != 0.f;
  if (kept > 0 && kept < 64) {
    const float want = 64.f / static_cast<float>(kept);
    for (float v : out.data()) CHECK((v == 0.f || v == doctest::Approx(want)));
  }
}

TEST_CASE("opposite dropout complements focused: exact partition") {
  Rng rng(56);
  for (int trial = 0; trial < 20; ++trial) {
    FT x = random_batch(rng, Shape{2, 3, 5, 5});
    Rng r(900 + static_cast<std::uint64_t>(trial));
    std::vector<fdrop::FocusMask> flog, olog;
    fdrop::apply_focused_dropout(x, DropoutMode::Train, GammaRange(0.3, 0.6), r,
                                 nullptr, &flog);
    fdrop::opposite_dropout(x, DropoutMode::Train, GammaRange(0.3, 0.6), r,
                            nullptr, &olog);
    REQUIRE(flog.size() == olog.size());
    for (std::size_t i = 0; i < flog.size(); ++i) {
      REQUIRE(flog[i].bits.size() == olog[i].bits.size());
      for (std::size_t j = 0; j < flog[i].bits.size(); ++j) {
        CHECK(flog[i].bits[j] + olog[i].bits[j] == 1);  // union covers, intersection empty
      }
    }
  }
}

TEST_CASE("opposite dropout hand case retains the complement") {
  FT one = FT::from_data(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  Rng rng(57);
  FT out = fdrop::opposite_dropout(one, DropoutMode::Train, GammaRange(0.5, 0.5), rng);
  CHECK(out.data()[0] == 1.f);
  CHECK(out.data()[1] == 2.f);
  CHECK(out.data()[2] == 0.f);
  CHECK(out.data()[3] == 0.f);
}

TEST_CASE("apply_regularizer dispatches every kind and validates specs") {
  Rng rng(58);
  FT x = random_batch(rng, Shape{2, 2, 4, 4});
  RegularizerSpec spec;
  spec.kind = RegKind::None;
  CHECK(bit_equal(x, fdrop::apply_regularizer(x, spec, DropoutMode::Train, rng)));

  spec.kind = RegKind::Standard;
  spec.drop_prob = 1.5;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  spec.drop_prob = 0.3;
  spec.validate();
  fdrop::apply_regularizer(x, spec, DropoutMode::Train, rng);

  spec.kind = RegKind::Focused;
  spec.gamma = GammaRange(0.3, 0.6);
  std::vector<fdrop::FocusMask> log;
  fdrop::apply_regularizer(x, spec, DropoutMode::Train, rng, nullptr, &log);
  CHECK(log.size() == 2);

  CHECK(fdrop::reg_kind_from_name("dropblock") == RegKind::DropBlock);
  CHECK_THROWS_AS(fdrop::reg_kind_from_name("bogus"), std::invalid_argument);
}
