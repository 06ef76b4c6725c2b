#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "tfda/rng.hpp"
#include "tfda/tensor.hpp"

namespace tfda {

// Weak view: per-channel amplitude scaling plus elementwise Gaussian jitter.
struct WeakAugPolicy {
  double jitter_sigma = 0.05;
  double scale_low = 0.9;
  double scale_high = 1.1;
};

// Strong view: segment permutation followed by heavier jitter.
struct StrongAugPolicy {
  double jitter_sigma = 0.1;
  int max_segments = 5;
};

namespace augdetail {

// m-1 distinct cut points in [1, S), sorted. m <= S guaranteed by caller.
inline std::vector<int> segment_cuts(int S, int m, Rng& rng) {
  std::vector<char> used(static_cast<std::size_t>(S), 0);
  std::vector<int> cuts;
  for (int need = m - 1; need > 0; --need) {
    int pick;
    do {
      pick = 1 + rng.uniform_int(S - 1);
    } while (used[static_cast<std::size_t>(pick)]);
    used[static_cast<std::size_t>(pick)] = 1;
    cuts.push_back(pick);
  }
  std::sort(cuts.begin(), cuts.end());
  return cuts;
}

inline void fisher_yates(std::vector<int>& order, Rng& rng) {
  for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
    int j = rng.uniform_int(i + 1);
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
}

}  // namespace augdetail

// One weak view of a [B x Ch x S] batch. row_streams[i] seeds sample i's
// randomness, so views are reproducible per (sample, epoch, view) stream.
inline Tensor augment_weak(const Tensor& batch, const WeakAugPolicy& p, const std::vector<std::uint64_t>& row_streams) {
  require_rank(batch, 3, "augment_weak");
  int B = batch.dim(0), Ch = batch.dim(1), S = batch.dim(2);
  if (static_cast<int>(row_streams.size()) != B) {
    throw Error("augment_weak: stream count " + std::to_string(row_streams.size()) + " vs batch " + std::to_string(B));
  }
  if (p.scale_low > p.scale_high) throw Error("augment_weak: scale_low > scale_high");
  Tensor out = batch;
  for (int b = 0; b < B; ++b) {
    Rng rng(row_streams[static_cast<std::size_t>(b)]);
    for (int c = 0; c < Ch; ++c) {
      double scale_c = rng.uniform(p.scale_low, p.scale_high);
      double* row = out.values.data() + (static_cast<std::size_t>(b) * Ch + c) * S;
      for (int t = 0; t < S; ++t) row[t] = row[t] * scale_c + p.jitter_sigma * rng.normal();
    }
  }
  return out;
}

// One strong view: a random number of segments (1..max_segments) is cut and
// permuted identically across channels, then jitter is added. With sigma = 0
// the output is a permutation of the input samples along time.
inline Tensor augment_strong(const Tensor& batch, const StrongAugPolicy& p, const std::vector<std::uint64_t>& row_streams) {
  require_rank(batch, 3, "augment_strong");
  int B = batch.dim(0), Ch = batch.dim(1), S = batch.dim(2);
  if (static_cast<int>(row_streams.size()) != B) {
    throw Error("augment_strong: stream count " + std::to_string(row_streams.size()) + " vs batch " + std::to_string(B));
  }
  if (p.max_segments < 1) throw Error("augment_strong: max_segments must be >= 1");
  Tensor out({B, Ch, S});
  for (int b = 0; b < B; ++b) {
    Rng rng(row_streams[static_cast<std::size_t>(b)]);
    int max_m = std::min(p.max_segments, S);
    int m = 1 + rng.uniform_int(max_m);
    std::vector<int> cuts = augdetail::segment_cuts(S, m, rng);
    std::vector<int> starts(1, 0), ends;
    for (int c : cuts) {
      ends.push_back(c);
      starts.push_back(c);
    }
    ends.push_back(S);
    std::vector<int> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    augdetail::fisher_yates(order, rng);
    for (int c = 0; c < Ch; ++c) {
      const double* src = batch.values.data() + (static_cast<std::size_t>(b) * Ch + c) * S;
      double* dst = out.values.data() + (static_cast<std::size_t>(b) * Ch + c) * S;
      int pos = 0;
      for (int seg : order) {
        for (int t = starts[static_cast<std::size_t>(seg)]; t < ends[static_cast<std::size_t>(seg)]; ++t) dst[pos++] = src[t];
      }
    }
    if (p.jitter_sigma > 0.0) {
      for (int c = 0; c < Ch; ++c) {
        double* dst = out.values.data() + (static_cast<std::size_t>(b) * Ch + c) * S;
        for (int t = 0; t < S; ++t) dst[t] += p.jitter_sigma * rng.normal();
      }
    }
  }
  return out;
}

// Stream ids for each row of a batch, mixing (seed, epoch, sample id, view).
inline std::vector<std::uint64_t> view_streams(std::uint64_t seed, int epoch, const std::vector<int>& sample_ids,
                                               int view) {
  std::vector<std::uint64_t> out;
  out.reserve(sample_ids.size());
  for (int sid : sample_ids) {
    out.push_back(stream_id(seed, {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(sid),
                                   static_cast<std::uint64_t>(view)}));
  }
  return out;
}

}  // namespace tfda
