#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tfda/rng.hpp"
#include "tfda/tensor.hpp"

namespace tfda {

struct Dataset {
  Tensor samples;           // [N x Ch x S]
  std::vector<int> labels;  // empty when unlabeled
  int classes = 0;
  std::string domain_id;
  std::uint64_t seed = 0;

  int count() const { return samples.rank() == 3 ? samples.dim(0) : 0; }
  int channels() const { return samples.dim(1); }
  int length() const { return samples.dim(2); }
  bool labeled() const { return !labels.empty(); }
};

// Domain shift applied on top of the clean generator. The identity spec
// (all zeros / scale 1) reproduces the source domain sample for sample.
struct ShiftSpec {
  double freq_shift = 0.0;   // cycles-per-window offset added to every tone
  double amp_scale = 1.0;    // global amplitude factor
  double noise_sigma = 0.0;  // extra additive Gaussian noise
  double warp = 0.0;         // per-sample frequency wobble: factor in [1-warp, 1+warp]

  static ShiftSpec identity() { return {}; }
  bool is_identity() const {
    return freq_shift == 0.0 && amp_scale == 1.0 && noise_sigma == 0.0 && warp == 0.0;
  }
};

// Multichannel tone-mixture generator. Class c carries a fundamental of
// 4 + 3c cycles per window plus two harmonics; per-sample amplitude, phase,
// wobble, and noise come from a stream derived from (seed, sample index), so
// a given (seed, index) always yields the same sample regardless of batch
// composition, and the shift is a deterministic transformation of the clean
// sample's draws.
inline Dataset generate_synthetic(int classes, int channels, int length, int per_class, const ShiftSpec& shift,
                                  std::uint64_t seed, std::string domain_id = "source") {
  if (classes < 2) throw Error("generate_synthetic: need at least 2 classes, got " + std::to_string(classes));
  if (channels < 1) throw Error("generate_synthetic: channels must be >= 1");
  if (per_class < 1) throw Error("generate_synthetic: per_class must be >= 1");
  if (length < 4 * classes) {
    throw Error("generate_synthetic: length " + std::to_string(length) + " too short to separate " +
                std::to_string(classes) + " classes (need >= " + std::to_string(4 * classes) + ")");
  }
  int n = classes * per_class;
  Dataset ds;
  ds.samples = Tensor({n, channels, length});
  ds.labels.resize(static_cast<std::size_t>(n));
  ds.classes = classes;
  ds.domain_id = std::move(domain_id);
  ds.seed = seed;

  constexpr double kTwoPi = 6.283185307179586476925286766559;
  const double harmonic_amp[3] = {1.0, 0.5, 0.25};
  const double base_noise = 0.1;

  for (int i = 0; i < n; ++i) {
    int c = i / per_class;
    ds.labels[static_cast<std::size_t>(i)] = c;
    Rng rng(stream_id(seed, {static_cast<std::uint64_t>(i)}));
    double amp = rng.uniform(0.8, 1.2) * shift.amp_scale;
    double wobble = 1.0 + shift.warp * rng.uniform(-1.0, 1.0);
    double f0 = (4.0 + 3.0 * c + shift.freq_shift) * wobble;
    for (int ch = 0; ch < channels; ++ch) {
      double phase[3];
      for (int h = 0; h < 3; ++h) phase[h] = rng.uniform(0.0, kTwoPi);
      double* row = ds.samples.values.data() + (static_cast<std::size_t>(i) * channels + ch) * length;
      for (int t = 0; t < length; ++t) {
        double x = 0.0;
        double arg = kTwoPi * f0 * static_cast<double>(t) / static_cast<double>(length);
        for (int h = 0; h < 3; ++h) x += harmonic_amp[h] * std::sin(arg * (h + 1) + phase[h]);
        row[t] = amp * x;
      }
      for (int t = 0; t < length; ++t) row[t] += base_noise * rng.normal();
      for (int t = 0; t < length; ++t) row[t] += shift.noise_sigma * rng.normal();
    }
  }
  return ds;
}

// Shuffled batch index lists for one epoch.
inline std::vector<std::vector<int>> make_batches(int n, int batch_size, std::uint64_t stream) {
  if (n < 1) throw Error("make_batches: empty dataset");
  if (batch_size < 1) throw Error("make_batches: batch_size must be >= 1");
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(stream);
  for (int i = n - 1; i > 0; --i) {
    int j = rng.uniform_int(i + 1);
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  std::vector<std::vector<int>> out;
  for (int start = 0; start < n; start += batch_size) {
    int end = std::min(n, start + batch_size);
    out.emplace_back(perm.begin() + start, perm.begin() + end);
  }
  return out;
}

// Rows of `samples` selected by index: [B x Ch x S].
inline Tensor gather_samples(const Tensor& samples, const std::vector<int>& idx) {
  require_rank(samples, 3, "gather_samples");
  int Ch = samples.dim(1), S = samples.dim(2);
  Tensor out({static_cast<int>(idx.size()), Ch, S});
  std::size_t row = static_cast<std::size_t>(Ch) * S;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    int r = idx[i];
    if (r < 0 || r >= samples.dim(0)) throw Error("gather_samples: index " + std::to_string(r) + " out of range");
    std::copy_n(samples.values.data() + static_cast<std::size_t>(r) * row, row, out.values.data() + i * row);
  }
  return out;
}

// ---- directory format -------------------------------------------------------
// <dir>/meta.txt      key=value lines (channels, classes, length, count,
//                     labeled, domain_id, seed)
// <dir>/samples.bin   f64 little-endian, sample-major then channel then time
// <dir>/labels.bin    u16 little-endian, present iff labeled=1

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  if (ds.samples.rank() != 3) throw Error("save_dataset: samples must be [N x Ch x S]");
  std::filesystem::create_directories(dir);
  {
    std::ofstream meta(dir / "meta.txt");
    if (!meta) throw Error("save_dataset: cannot write " + (dir / "meta.txt").string());
    meta << "channels=" << ds.channels() << "\n";
    meta << "classes=" << ds.classes << "\n";
    meta << "length=" << ds.length() << "\n";
    meta << "count=" << ds.count() << "\n";
    meta << "labeled=" << (ds.labeled() ? 1 : 0) << "\n";
    meta << "domain_id=" << ds.domain_id << "\n";
    meta << "seed=" << ds.seed << "\n";
  }
  {
    std::ofstream bin(dir / "samples.bin", std::ios::binary);
    if (!bin) throw Error("save_dataset: cannot write " + (dir / "samples.bin").string());
    for (double v : ds.samples.values) detail::put_f64(bin, v);
    if (!bin) throw Error("save_dataset: write failed for samples.bin");
  }
  if (ds.labeled()) {
    if (static_cast<int>(ds.labels.size()) != ds.count()) {
      throw Error("save_dataset: label count " + std::to_string(ds.labels.size()) + " vs sample count " +
                  std::to_string(ds.count()));
    }
    std::ofstream bin(dir / "labels.bin", std::ios::binary);
    if (!bin) throw Error("save_dataset: cannot write " + (dir / "labels.bin").string());
    for (int y : ds.labels) {
      if (y < 0 || y >= ds.classes) throw Error("save_dataset: label " + std::to_string(y) + " out of range");
      unsigned char b[2] = {static_cast<unsigned char>(y & 0xFF), static_cast<unsigned char>((y >> 8) & 0xFF)};
      bin.write(reinterpret_cast<const char*>(b), 2);
    }
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream meta(dir / "meta.txt");
  if (!meta) throw Error("load_dataset: missing " + (dir / "meta.txt").string());
  int channels = -1, classes = -1, length = -1;
  std::int64_t count = -1;
  int labeled = -1;
  std::string domain_id;
  bool have_domain = false;
  std::uint64_t seed = 0;
  bool have_seed = false;
  std::string line;
  while (std::getline(meta, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("load_dataset: malformed meta line '" + line + "'");
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    try {
      if (key == "channels") channels = std::stoi(val);
      else if (key == "classes") classes = std::stoi(val);
      else if (key == "length") length = std::stoi(val);
      else if (key == "count") count = std::stoll(val);
      else if (key == "labeled") labeled = std::stoi(val);
      else if (key == "domain_id") { domain_id = val; have_domain = true; }
      else if (key == "seed") { seed = std::stoull(val); have_seed = true; }
      else throw Error("load_dataset: unknown meta key '" + key + "'");
    } catch (const std::invalid_argument&) {
      throw Error("load_dataset: non-numeric value for meta key '" + key + "'");
    } catch (const std::out_of_range&) {
      throw Error("load_dataset: out-of-range value for meta key '" + key + "'");
    }
  }
  if (channels < 1 || classes < 1 || length < 1 || count < 1 || labeled < 0 || !have_domain || !have_seed) {
    throw Error("load_dataset: meta.txt is missing required keys in " + dir.string());
  }

  Dataset ds;
  ds.classes = classes;
  ds.domain_id = domain_id;
  ds.seed = seed;
  std::int64_t n_values = count * channels * length;
  {
    std::ifstream bin(dir / "samples.bin", std::ios::binary);
    if (!bin) throw Error("load_dataset: missing " + (dir / "samples.bin").string());
    std::vector<double> vals(static_cast<std::size_t>(n_values));
    for (auto& v : vals) {
      if (!detail::get_f64(bin, v)) {
        throw Error("load_dataset: samples.bin truncated, expected " + std::to_string(n_values) + " values");
      }
    }
    char extra;
    if (bin.read(&extra, 1)) throw Error("load_dataset: samples.bin larger than meta.txt count implies");
    ds.samples = Tensor({static_cast<int>(count), channels, length}, std::move(vals));
  }
  if (labeled) {
    std::ifstream bin(dir / "labels.bin", std::ios::binary);
    if (!bin) throw Error("load_dataset: labeled=1 but missing " + (dir / "labels.bin").string());
    ds.labels.resize(static_cast<std::size_t>(count));
    for (auto& y : ds.labels) {
      unsigned char b[2];
      if (!bin.read(reinterpret_cast<char*>(b), 2)) throw Error("load_dataset: labels.bin truncated");
      y = static_cast<int>(b[0]) | (static_cast<int>(b[1]) << 8);
      if (y >= classes) throw Error("load_dataset: label " + std::to_string(y) + " out of range for " +
                                    std::to_string(classes) + " classes");
    }
    char extra;
    if (bin.read(&extra, 1)) throw Error("load_dataset: labels.bin larger than meta.txt count implies");
  }
  return ds;
}

}  // namespace tfda
