#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "tfda/augment.hpp"
#include "tfda/rng.hpp"
#include "tfda/tensor.hpp"

namespace {

tfda::Tensor make_batch(int B, int Ch, int S, std::uint64_t stream) {
  tfda::Tensor x({B, Ch, S});
  tfda::Rng rng(stream);
  for (auto& v : x.values) v = rng.normal();
  return x;
}

}  // namespace

TEST_CASE("weak view degenerates to the identity", "[augment]") {
  tfda::Tensor x = make_batch(3, 2, 16, 1);
  tfda::WeakAugPolicy p;
  p.jitter_sigma = 0.0;
  p.scale_low = 1.0;
  p.scale_high = 1.0;
  tfda::Tensor y = tfda::augment_weak(x, p, {5, 6, 7});
  REQUIRE(y.values == x.values);
}

TEST_CASE("weak view is deterministic and bounded", "[augment]") {
  tfda::Tensor x = make_batch(4, 2, 32, 2);
  tfda::WeakAugPolicy p;
  std::vector<std::uint64_t> streams{10, 11, 12, 13};
  tfda::Tensor a = tfda::augment_weak(x, p, streams);
  tfda::Tensor b = tfda::augment_weak(x, p, streams);
  REQUIRE(a.values == b.values);
  REQUIRE(a.values != x.values);
  // With zero jitter, each channel is an exact rescale within the policy range.
  p.jitter_sigma = 0.0;
  tfda::Tensor c = tfda::augment_weak(x, p, streams);
  for (int bb = 0; bb < 4; ++bb) {
    for (int ch = 0; ch < 2; ++ch) {
      int base = -1;
      for (int s = 0; s < 32; ++s) {
        if (std::abs(x.at(bb, ch, s)) > 1e-6) {
          base = s;
          break;
        }
      }
      REQUIRE(base >= 0);
      double ratio = c.at(bb, ch, base) / x.at(bb, ch, base);
      REQUIRE(ratio >= 0.9);
      REQUIRE(ratio <= 1.1);
      for (int s = 0; s < 32; ++s) {
        REQUIRE(c.at(bb, ch, s) == Catch::Approx(ratio * x.at(bb, ch, s)).margin(1e-12));
      }
    }
  }
}

TEST_CASE("strong view permutes segments and preserves the multiset", "[augment]") {
  tfda::Tensor x = make_batch(6, 2, 40, 3);
  tfda::StrongAugPolicy p;
  p.jitter_sigma = 0.0;
  std::vector<std::uint64_t> streams{20, 21, 22, 23, 24, 25};
  tfda::Tensor y = tfda::augment_strong(x, p, streams);
  REQUIRE(y.shape == x.shape);
  for (int b = 0; b < 6; ++b) {
    for (int ch = 0; ch < 2; ++ch) {
      std::vector<double> xs, ys;
      for (int s = 0; s < 40; ++s) {
        xs.push_back(x.at(b, ch, s));
        ys.push_back(y.at(b, ch, s));
      }
      std::sort(xs.begin(), xs.end());
      std::sort(ys.begin(), ys.end());
      REQUIRE(xs == ys);
    }
  }
  // Channels of one sample share the same permutation: equal channels stay equal.
  tfda::Tensor tied({1, 2, 12});
  for (int s = 0; s < 12; ++s) {
    tied.at(0, 0, s) = s;
    tied.at(0, 1, s) = s;
  }
  tfda::Tensor ty = tfda::augment_strong(tied, p, {99});
  for (int s = 0; s < 12; ++s) REQUIRE(ty.at(0, 0, s) == ty.at(0, 1, s));
}

TEST_CASE("strong view jitter is deterministic per stream", "[augment]") {
  tfda::Tensor x = make_batch(2, 1, 24, 4);
  tfda::StrongAugPolicy p;
  tfda::Tensor a = tfda::augment_strong(x, p, {30, 31});
  tfda::Tensor b = tfda::augment_strong(x, p, {30, 31});
  tfda::Tensor c = tfda::augment_strong(x, p, {30, 32});
  REQUIRE(a.values == b.values);
  std::vector<double> a0(a.values.begin(), a.values.begin() + 24);
  std::vector<double> c0(c.values.begin(), c.values.begin() + 24);
  REQUIRE(a0 == c0);
  REQUIRE(a.values != c.values);
}

TEST_CASE("view streams separate epoch, sample, and view", "[augment]") {
  auto s1 = tfda::view_streams(7, 3, {0, 1, 2}, 0);
  auto s2 = tfda::view_streams(7, 3, {0, 1, 2}, 0);
  auto s3 = tfda::view_streams(7, 3, {0, 1, 2}, 1);
  auto s4 = tfda::view_streams(7, 4, {0, 1, 2}, 0);
  REQUIRE(s1 == s2);
  REQUIRE(s1 != s3);
  REQUIRE(s1 != s4);
  REQUIRE(s1.size() == 3);
  REQUIRE(s1[0] != s1[1]);
  // Streams follow the sample, not the batch position.
  auto swapped = tfda::view_streams(7, 3, {2, 1, 0}, 0);
  REQUIRE(swapped[0] == s1[2]);
  REQUIRE(swapped[2] == s1[0]);
}

TEST_CASE("segment cuts are distinct interior points", "[augment]") {
  tfda::Rng rng(50);
  for (int m : {1, 2, 5, 8}) {
    std::vector<int> cuts = tfda::augdetail::segment_cuts(20, m, rng);
    REQUIRE(static_cast<int>(cuts.size()) == m - 1);
    for (std::size_t i = 0; i < cuts.size(); ++i) {
      REQUIRE(cuts[i] >= 1);
      REQUIRE(cuts[i] < 20);
      if (i > 0) REQUIRE(cuts[i] > cuts[i - 1]);
    }
  }
}
