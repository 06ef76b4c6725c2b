#pragma once

#include <cmath>
#include <string>

#include "tfda/tensor.hpp"

namespace tfda {

// Loss-weight schedule. mu_r balances refined-label CE against label
// propagation; the auxiliary weights decay exponentially each epoch.
struct CurriculumState {
  double mu_r = 1.0;
  double mu_c = 0.5;
  double mu_cons = 0.5;
  double mu_u = 0.5;
};

struct CurriculumConfig {
  double alpha_r = 0.005;    // mu_r step size
  double beta_decay = 1e-4;  // per-epoch decay exponent for the auxiliary weights
};

// mu_r <- mu_r * (1 - alpha_r * exp(-1/d)) with d = tau_u / tau_c. tau_c must
// be positive; d = 0 (zero mean uncertainty) leaves mu_r unchanged since
// exp(-1/d) -> 0.
inline double step_mu_r(double mu_r, double tau_c, double tau_u, double alpha_r) {
  if (tau_c <= 0.0) throw Error("step_mu_r: tau_c must be positive, got " + std::to_string(tau_c));
  if (tau_u < 0.0) throw Error("step_mu_r: tau_u must be non-negative, got " + std::to_string(tau_u));
  double d = tau_u / tau_c;
  double factor = d == 0.0 ? 1.0 : 1.0 - alpha_r * std::exp(-1.0 / d);
  return mu_r * factor;
}

inline double decay_weight(double mu, double beta) { return mu * std::exp(-beta); }

// One per-epoch update from the epoch's mean thresholds.
inline CurriculumState advance_curriculum(CurriculumState s, double tau_c, double tau_u, const CurriculumConfig& cfg) {
  s.mu_r = step_mu_r(s.mu_r, tau_c, tau_u, cfg.alpha_r);
  s.mu_c = decay_weight(s.mu_c, cfg.beta_decay);
  s.mu_cons = decay_weight(s.mu_cons, cfg.beta_decay);
  s.mu_u = decay_weight(s.mu_u, cfg.beta_decay);
  return s;
}

}  // namespace tfda
