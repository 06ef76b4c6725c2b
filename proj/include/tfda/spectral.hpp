#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

#include "tfda/rng.hpp"
#include "tfda/tensor.hpp"

namespace tfda {

using cplx = std::complex<double>;

namespace fftdetail {

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

constexpr double kTwoPi = 6.283185307179586476925286766559;

// Iterative radix-2 Cooley-Tukey, in place. sign = -1 forward, +1 inverse
// (unnormalized either way).
inline void fft_pow2(std::vector<cplx>& a, int sign) {
  std::size_t n = a.size();
  if (n < 2) return;
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    double ang = sign * kTwoPi / static_cast<double>(len);
    cplx wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      cplx w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        cplx u = a[i + j];
        cplx v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

// Bluestein's algorithm: DFT of arbitrary length via one power-of-two
// convolution. Exact DFT values up to rounding, which is all the round-trip
// and Parseval guarantees need.
inline std::vector<cplx> fft_bluestein(const std::vector<cplx>& x, int sign) {
  std::size_t n = x.size();
  std::size_t m = 1;
  while (m < 2 * n - 1) m <<= 1;
  // chirp w_k = exp(sign * i * pi * k^2 / n); k^2 mod 2n keeps the argument small.
  std::vector<cplx> w(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::uint64_t k2 = (static_cast<std::uint64_t>(k) * k) % (2 * n);
    double ang = sign * kTwoPi * 0.5 * static_cast<double>(k2) / static_cast<double>(n);
    w[k] = cplx(std::cos(ang), std::sin(ang));
  }
  std::vector<cplx> a(m, cplx(0, 0)), b(m, cplx(0, 0));
  for (std::size_t k = 0; k < n; ++k) a[k] = x[k] * w[k];
  for (std::size_t k = 0; k < n; ++k) {
    cplx c = std::conj(w[k]);
    b[k] = c;
    if (k != 0) b[m - k] = c;
  }
  fft_pow2(a, -1);
  fft_pow2(b, -1);
  for (std::size_t i = 0; i < m; ++i) a[i] *= b[i];
  fft_pow2(a, +1);
  double inv_m = 1.0 / static_cast<double>(m);
  std::vector<cplx> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = a[k] * inv_m * w[k];
  return out;
}

}  // namespace fftdetail

// Unnormalized forward DFT: X_k = sum_t x_t exp(-2*pi*i*k*t/n). Any length.
inline std::vector<cplx> fft(std::vector<cplx> x) {
  if (x.empty()) throw Error("fft: empty input");
  if (fftdetail::is_pow2(x.size())) {
    fftdetail::fft_pow2(x, -1);
    return x;
  }
  return fftdetail::fft_bluestein(x, -1);
}

// Inverse DFT with 1/n normalization.
inline std::vector<cplx> ifft(std::vector<cplx> x) {
  if (x.empty()) throw Error("ifft: empty input");
  std::size_t n = x.size();
  if (fftdetail::is_pow2(n)) {
    fftdetail::fft_pow2(x, +1);
  } else {
    x = fftdetail::fft_bluestein(x, +1);
  }
  double inv = 1.0 / static_cast<double>(n);
  for (auto& v : x) v *= inv;
  return x;
}

inline int rfft_bins(int n) { return n / 2 + 1; }

// Real-input forward DFT, first floor(n/2)+1 bins.
inline std::vector<cplx> rfft(const std::vector<double>& x) {
  if (x.empty()) throw Error("rfft: empty input");
  std::vector<cplx> c(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) c[i] = cplx(x[i], 0.0);
  c = fft(std::move(c));
  c.resize(static_cast<std::size_t>(rfft_bins(static_cast<int>(x.size()))));
  return c;
}

// Inverse of rfft for a known original length n: rebuilds the Hermitian
// spectrum and returns the real signal.
inline std::vector<double> irfft(const std::vector<cplx>& half, int n) {
  if (n < 1) throw Error("irfft: length must be positive");
  if (static_cast<int>(half.size()) != rfft_bins(n)) {
    throw Error("irfft: got " + std::to_string(half.size()) + " bins, expected " + std::to_string(rfft_bins(n)) +
                " for length " + std::to_string(n));
  }
  std::vector<cplx> full(static_cast<std::size_t>(n));
  for (std::size_t k = 0; k < half.size(); ++k) full[k] = half[k];
  for (int k = 1; k < rfft_bins(n); ++k) {
    int mirror = n - k;
    if (mirror != k && mirror >= rfft_bins(n)) full[static_cast<std::size_t>(mirror)] = std::conj(half[static_cast<std::size_t>(k)]);
  }
  std::vector<cplx> t = ifft(std::move(full));
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = t[static_cast<std::size_t>(i)].real();
  return out;
}

// Magnitude half-spectra of a [B x Ch x S] batch: [B x Ch x (S/2+1)].
// This is the frequency branch's input representation.
inline Tensor freq_magnitude(const Tensor& batch) {
  require_rank(batch, 3, "freq_magnitude");
  int B = batch.dim(0), Ch = batch.dim(1), S = batch.dim(2);
  int Sf = rfft_bins(S);
  Tensor out({B, Ch, Sf});
  std::vector<double> row(static_cast<std::size_t>(S));
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < Ch; ++c) {
      const double* src = batch.values.data() + (static_cast<std::size_t>(b) * Ch + c) * S;
      row.assign(src, src + S);
      auto spec = rfft(row);
      double* dst = out.values.data() + (static_cast<std::size_t>(b) * Ch + c) * Sf;
      for (int k = 0; k < Sf; ++k) dst[k] = std::abs(spec[static_cast<std::size_t>(k)]);
    }
  return out;
}

enum class FreqAugMode { Add, Remove };

// Perturbs a half-spectrum by zeroing `count` random non-DC bins (Remove) or
// injecting random-phase components of magnitude amplitude_scale * mean|X|
// into `count` random non-DC bins (Add). count is clipped to the number of
// perturbable bins.
inline std::vector<cplx> freq_augment(std::vector<cplx> spectrum, FreqAugMode mode, int count,
                                      double amplitude_scale, Rng& rng) {
  if (count < 0) throw Error("freq_augment: count must be >= 0");
  int bins = static_cast<int>(spectrum.size());
  if (bins < 2) return spectrum;  // nothing perturbable beyond DC
  int avail = bins - 1;
  count = std::min(count, avail);
  // Floyd-style distinct sampling, deterministic given the rng stream.
  std::vector<int> chosen;
  std::vector<char> used(static_cast<std::size_t>(bins), 0);
  for (int need = count; need > 0; --need) {
    int pick;
    do {
      pick = 1 + rng.uniform_int(avail);
    } while (used[static_cast<std::size_t>(pick)]);
    used[static_cast<std::size_t>(pick)] = 1;
    chosen.push_back(pick);
  }
  if (mode == FreqAugMode::Remove) {
    for (int k : chosen) spectrum[static_cast<std::size_t>(k)] = cplx(0, 0);
  } else {
    double mean_mag = 0.0;
    for (const cplx& v : spectrum) mean_mag += std::abs(v);
    mean_mag /= static_cast<double>(bins);
    for (int k : chosen) {
      double ang = rng.uniform(0.0, fftdetail::kTwoPi);
      spectrum[static_cast<std::size_t>(k)] += amplitude_scale * mean_mag * cplx(std::cos(ang), std::sin(ang));
    }
  }
  return spectrum;
}

// Batch form used for the frequency-branch strong views: per (sample, channel)
// spectrum perturbation, returning the magnitude representation.
inline Tensor freq_augment_batch(const Tensor& time_batch, FreqAugMode mode, int count, double amplitude_scale,
                                 const std::vector<std::uint64_t>& row_streams) {
  require_rank(time_batch, 3, "freq_augment_batch");
  int B = time_batch.dim(0), Ch = time_batch.dim(1), S = time_batch.dim(2);
  if (static_cast<int>(row_streams.size()) != B) {
    throw Error("freq_augment_batch: stream count " + std::to_string(row_streams.size()) + " vs batch " +
                std::to_string(B));
  }
  int Sf = rfft_bins(S);
  Tensor out({B, Ch, Sf});
  std::vector<double> row(static_cast<std::size_t>(S));
  for (int b = 0; b < B; ++b) {
    Rng rng(row_streams[static_cast<std::size_t>(b)]);
    for (int c = 0; c < Ch; ++c) {
      const double* src = time_batch.values.data() + (static_cast<std::size_t>(b) * Ch + c) * S;
      row.assign(src, src + S);
      auto spec = freq_augment(rfft(row), mode, count, amplitude_scale, rng);
      double* dst = out.values.data() + (static_cast<std::size_t>(b) * Ch + c) * Sf;
      for (int k = 0; k < Sf; ++k) dst[k] = std::abs(spec[static_cast<std::size_t>(k)]);
    }
  }
  return out;
}

}  // namespace tfda
