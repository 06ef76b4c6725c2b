#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tfda/tensor.hpp"

namespace tfda {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

using GradMap = std::map<std::string, std::vector<double>>;

// First/second moment buffers, keyed like the ParamSet they serve.
struct AdamState {
  GradMap m, v;
  std::int64_t step = 0;
};

// One Adam update over the parameters named in `grads`. Parameters without a
// gradient entry (e.g. batch-norm running statistics) are left untouched.
// Moment buffers are created on first use.
inline void adam_step_inplace(ParamSet& params, const GradMap& grads, AdamState& state, const AdamConfig& cfg) {
  state.step += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw Error("adam_step: gradient for unknown parameter " + name);
    Tensor& p = it->second;
    if (g.size() != p.values.size()) {
      throw Error("adam_step: gradient size " + std::to_string(g.size()) + " vs parameter " + name + " size " +
                  std::to_string(p.values.size()));
    }
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(g.size(), 0.0);
    if (v.empty()) v.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      p.values[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

// Pure variant: returns updated copies, leaves inputs alone.
inline std::pair<ParamSet, AdamState> adam_step(ParamSet params, const GradMap& grads, AdamState state,
                                                const AdamConfig& cfg) {
  adam_step_inplace(params, grads, state, cfg);
  return {std::move(params), std::move(state)};
}

}  // namespace tfda
