#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tfda {

// Contract violations (bad shapes, malformed files, invalid arguments).
// The CLI maps these to exit code 2.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline void check_shape_valid(const Shape& s, const char* what) {
  for (int d : s) {
    if (d <= 0) throw Error(std::string(what) + ": non-positive dimension in shape " + shape_str(s));
  }
}

// Dense row-major f64 tensor. `grad`, when present, has the same layout as
// `values` and holds d(loss)/d(values).
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::optional<std::vector<double>> grad;

  Tensor() = default;

  explicit Tensor(Shape s) : shape(std::move(s)) {
    check_shape_valid(shape, "Tensor");
    values.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
  }

  Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    check_shape_valid(shape, "Tensor");
    if (static_cast<std::int64_t>(values.size()) != numel_of(shape)) {
      throw Error("Tensor: value count " + std::to_string(values.size()) +
                  " does not match shape " + shape_str(shape));
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor full(Shape s, double v) {
    Tensor t(std::move(s));
    for (double& x : t.values) x = v;
    return t;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  int dim(int i) const {
    if (i < 0 || i >= rank()) throw Error("Tensor: axis " + std::to_string(i) + " out of range for " + shape_str(shape));
    return shape[static_cast<std::size_t>(i)];
  }

  double& at(int i) { return values[static_cast<std::size_t>(i)]; }
  double at(int i) const { return values[static_cast<std::size_t>(i)]; }

  double& at(int i, int j) { return values[static_cast<std::size_t>(i) * shape[1] + j]; }
  double at(int i, int j) const { return values[static_cast<std::size_t>(i) * shape[1] + j]; }

  double& at(int i, int j, int k) {
    return values[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  double at(int i, int j, int k) const {
    return values[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

inline void require_rank(const Tensor& t, int r, const char* what) {
  if (t.rank() != r) {
    throw Error(std::string(what) + ": expected rank " + std::to_string(r) + " tensor, got shape " + shape_str(t.shape));
  }
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// Named parameter collection. std::map keeps iteration (and therefore
// initialization, serialization, and update order) deterministic.
using ParamSet = std::map<std::string, Tensor>;

// Parameters whose name contains "running_" are batch-norm statistics:
// serialized and EMA-tracked, but not touched by the optimizer.
inline bool is_trainable(const std::string& name) { return name.find("running_") == std::string::npos; }

// ---- binary serialization -------------------------------------------------
// Layout: magic "TFDA0001", then one record per parameter in map order:
//   u32 name length, name bytes, u32 rank, u32 per dimension, f64 per value.
// All integers and doubles little-endian. Records run to end of stream.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return true;
}

inline bool get_f64(std::istream& is, double& v) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  std::memcpy(&v, &u, 8);
  return true;
}

}  // namespace detail

inline constexpr char kParamMagic[8] = {'T', 'F', 'D', 'A', '0', '0', '0', '1'};

inline void save_param_set(std::ostream& os, const ParamSet& params) {
  os.write(kParamMagic, 8);
  for (const auto& [name, t] : params) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (double v : t.values) detail::put_f64(os, v);
  }
  if (!os) throw Error("save_param_set: write failed");
}

inline ParamSet load_param_set(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kParamMagic, 8) != 0) {
    throw Error("load_param_set: bad magic, not a parameter file");
  }
  ParamSet out;
  for (;;) {
    std::uint32_t name_len;
    if (!detail::get_u32(is, name_len)) break;  // clean EOF
    if (name_len == 0 || name_len > (1u << 20)) throw Error("load_param_set: corrupt name length");
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw Error("load_param_set: truncated name");
    std::uint32_t rank;
    if (!detail::get_u32(is, rank)) throw Error("load_param_set: truncated rank for " + name);
    if (rank > 8) throw Error("load_param_set: corrupt rank for " + name);
    Shape shape(rank);
    std::int64_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      std::uint32_t d;
      if (!detail::get_u32(is, d)) throw Error("load_param_set: truncated dims for " + name);
      if (d == 0) throw Error("load_param_set: zero dimension for " + name);
      shape[i] = static_cast<int>(d);
      n *= d;
    }
    std::vector<double> vals(static_cast<std::size_t>(n));
    for (auto& v : vals) {
      if (!detail::get_f64(is, v)) throw Error("load_param_set: truncated values for " + name);
    }
    if (out.count(name)) throw Error("load_param_set: duplicate parameter " + name);
    out.emplace(name, Tensor(std::move(shape), std::move(vals)));
  }
  return out;
}

}  // namespace tfda
