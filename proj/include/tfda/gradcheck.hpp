#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tfda/optimizer.hpp"
#include "tfda/rng.hpp"
#include "tfda/tensor.hpp"

namespace tfda {

struct CoordCheck {
  std::string name;
  std::int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<CoordCheck> coords;
  double max_rel_err = 0.0;
  bool pass(double tol) const { return max_rel_err <= tol; }
};

// Deterministically samples parameter coordinates: `per_tensor` from every
// trainable tensor (so every layer type is represented) plus `extra` drawn
// from the full trainable coordinate space.
inline std::vector<std::pair<std::string, std::int64_t>> sample_coords(const ParamSet& params, int per_tensor,
                                                                       int extra, std::uint64_t seed) {
  std::vector<std::pair<std::string, std::int64_t>> out;
  Rng rng(scramble64(seed));
  std::vector<std::string> names;
  for (const auto& [name, t] : params) {
    if (!is_trainable(name)) continue;
    names.push_back(name);
    for (int i = 0; i < per_tensor; ++i) {
      out.emplace_back(name, rng.uniform_int(static_cast<int>(t.numel())));
    }
  }
  for (int i = 0; i < extra && !names.empty(); ++i) {
    const std::string& name = names[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(names.size())))];
    out.emplace_back(name, rng.uniform_int(static_cast<int>(params.at(name).numel())));
  }
  return out;
}

// Central-difference check of analytic gradients at the given coordinates.
// rel_err = |a - n| / max(1, |a|, |n|).
inline GradCheckReport grad_check(const ParamSet& params, const std::function<double(const ParamSet&)>& f,
                                  const GradMap& analytic,
                                  const std::vector<std::pair<std::string, std::int64_t>>& coords,
                                  double h = 1e-5) {
  GradCheckReport rep;
  ParamSet work = params;
  for (const auto& [name, idx] : coords) {
    auto it = work.find(name);
    if (it == work.end()) throw Error("grad_check: unknown parameter " + name);
    if (idx < 0 || idx >= it->second.numel()) throw Error("grad_check: index out of range for " + name);
    auto ait = analytic.find(name);
    double a = (ait == analytic.end()) ? 0.0 : ait->second[static_cast<std::size_t>(idx)];

    double& slot = it->second.values[static_cast<std::size_t>(idx)];
    double orig = slot;
    slot = orig + h;
    double fp = f(work);
    slot = orig - h;
    double fm = f(work);
    slot = orig;
    double n = (fp - fm) / (2.0 * h);

    CoordCheck c;
    c.name = name;
    c.index = idx;
    c.analytic = a;
    c.numeric = n;
    double denom = std::max({1.0, std::abs(a), std::abs(n)});
    c.rel_err = std::abs(a - n) / denom;
    rep.max_rel_err = std::max(rep.max_rel_err, c.rel_err);
    rep.coords.push_back(std::move(c));
  }
  return rep;
}

}  // namespace tfda
