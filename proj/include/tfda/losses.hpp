#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "tfda/autodiff.hpp"
#include "tfda/tensor.hpp"

namespace tfda {

// Cross entropy with inverse-frequency class weights:
//   w_c = (sum_c' n_c') / (C * n_c),   L = (1/B) sum_i w_{y_i} * (-log p_{i,y_i})
// Classes absent from class_counts get weight 0 and must not appear in labels.
inline Var class_balanced_ce(Tape& t, Var probs, const std::vector<int>& labels,
                             const std::vector<int>& class_counts) {
  require_rank(t.val(probs), 2, "class_balanced_ce");
  int B = t.val(probs).dim(0), C = t.val(probs).dim(1);
  if (static_cast<int>(labels.size()) != B) {
    throw Error("class_balanced_ce: label count " + std::to_string(labels.size()) + " vs batch " + std::to_string(B));
  }
  if (static_cast<int>(class_counts.size()) != C) {
    throw Error("class_balanced_ce: class_counts length " + std::to_string(class_counts.size()) + " vs classes " +
                std::to_string(C));
  }
  std::int64_t total = 0;
  for (int n : class_counts) {
    if (n < 0) throw Error("class_balanced_ce: negative class count");
    total += n;
  }
  if (total == 0) throw Error("class_balanced_ce: all class counts are zero");
  std::vector<double> w(static_cast<std::size_t>(C), 0.0);
  for (int c = 0; c < C; ++c) {
    if (class_counts[static_cast<std::size_t>(c)] > 0) {
      w[static_cast<std::size_t>(c)] = static_cast<double>(total) /
                                       (static_cast<double>(C) * class_counts[static_cast<std::size_t>(c)]);
    }
  }
  Tensor pick({B, C});
  for (int i = 0; i < B; ++i) {
    int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= C) throw Error("class_balanced_ce: label " + std::to_string(y) + " out of range");
    if (class_counts[static_cast<std::size_t>(y)] == 0) {
      throw Error("class_balanced_ce: label " + std::to_string(y) + " has zero class count");
    }
    pick.at(i, y) = -w[static_cast<std::size_t>(y)] / static_cast<double>(B);
  }
  return sum(t, mul(t, log_clamped(t, probs), t.leaf(std::move(pick))));
}

// Mean over rows of ||p_i - onehot(y_i)||_2 / 2.
inline Var label_prop_loss(Tape& t, Var probs, const std::vector<int>& labels) {
  require_rank(t.val(probs), 2, "label_prop_loss");
  int B = t.val(probs).dim(0), C = t.val(probs).dim(1);
  if (static_cast<int>(labels.size()) != B) {
    throw Error("label_prop_loss: label count " + std::to_string(labels.size()) + " vs batch " + std::to_string(B));
  }
  Tensor onehot({B, C});
  for (int i = 0; i < B; ++i) {
    int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= C) throw Error("label_prop_loss: label " + std::to_string(y) + " out of range");
    onehot.at(i, y) = 1.0;
  }
  Var diff = sub(t, probs, t.leaf(std::move(onehot)));
  Var norms = sqrt_guard(t, row_sum(t, mul(t, diff, diff)));
  return scale(t, sum(t, norms), 0.5 / static_cast<double>(B));
}

// Mean over rows of KL(p||q) + KL(q||p); gradients flow into both arguments.
inline Var symmetric_kl(Tape& t, Var p, Var q) {
  opdetail::require_same_shape(t, p, q, "symmetric_kl");
  require_rank(t.val(p), 2, "symmetric_kl");
  int B = t.val(p).dim(0);
  Var lp = log_clamped(t, p);
  Var lq = log_clamped(t, q);
  Var kl_pq = sum(t, mul(t, p, sub(t, lp, lq)));
  Var kl_qp = sum(t, mul(t, q, sub(t, lq, lp)));
  return scale(t, add(t, kl_pq, kl_qp), 1.0 / static_cast<double>(B));
}

// Per-sample energies eta_i and per-class masses beta_k for the uncertainty
// loss, computed from prob values (no gradient through them).
inline Tensor tsallis_weight_matrix(const Tensor& probs, int B, int C) {
  std::vector<double> energy(static_cast<std::size_t>(B));
  double denom = 0.0;
  for (int i = 0; i < B; ++i) {
    double e = 0.0;
    for (int k = 0; k < C; ++k) {
      double h = probs.at(i, k);
      if (h > 1e-12) e -= h * std::log(h);
    }
    energy[static_cast<std::size_t>(i)] = 1.0 + std::exp(-e);
    denom += energy[static_cast<std::size_t>(i)];
  }
  std::vector<double> beta(static_cast<std::size_t>(C), 0.0);
  for (int i = 0; i < B; ++i)
    for (int k = 0; k < C; ++k) beta[static_cast<std::size_t>(k)] += probs.at(i, k);
  Tensor w({B, C});
  for (int i = 0; i < B; ++i) {
    double eta = static_cast<double>(B) * energy[static_cast<std::size_t>(i)] / denom;
    for (int k = 0; k < C; ++k) {
      double bk = beta[static_cast<std::size_t>(k)];
      w.at(i, k) = bk > 1e-12 ? eta / bk : 0.0;
    }
  }
  return w;
}

// Sharpening objective: L = -(1/(a-1)) * (1/C) * sum_{i,k} W_ik * h_ik^a with
// W supplied (detached). Minimized when mass concentrates per class.
inline Var tsallis_sharpness_with_weights(Tape& t, Var probs, const Tensor& weights, double a = 2.0) {
  require_rank(t.val(probs), 2, "tsallis_sharpness");
  if (a <= 1.0) throw Error("tsallis_sharpness: entropic index must exceed 1");
  int C = t.val(probs).dim(1);
  if (weights.shape != t.val(probs).shape) {
    throw Error("tsallis_sharpness: weight shape " + shape_str(weights.shape) + " vs probs " +
                shape_str(t.val(probs).shape));
  }
  Var hp = pow_const(t, probs, a);
  Var s = sum(t, mul(t, hp, t.leaf(weights)));
  return scale(t, s, -1.0 / ((a - 1.0) * static_cast<double>(C)));
}

// Standard form: weights computed from the current prob values and frozen.
inline Var tsallis_sharpness(Tape& t, Var probs, double a = 2.0) {
  require_rank(t.val(probs), 2, "tsallis_sharpness");
  int B = t.val(probs).dim(0), C = t.val(probs).dim(1);
  return tsallis_sharpness_with_weights(t, probs, tsallis_weight_matrix(t.val(probs), B, C), a);
}

// ---- plain-value wrappers (single evaluation, no caller-visible tape) --------

inline double class_balanced_ce_value(const Tensor& probs, const std::vector<int>& labels,
                                      const std::vector<int>& class_counts) {
  Tape t;
  return t.scalar(class_balanced_ce(t, t.leaf(probs), labels, class_counts));
}

inline double label_prop_loss_value(const Tensor& probs, const std::vector<int>& labels) {
  Tape t;
  return t.scalar(label_prop_loss(t, t.leaf(probs), labels));
}

inline double symmetric_kl_value(const Tensor& p, const Tensor& q) {
  Tape t;
  return t.scalar(symmetric_kl(t, t.leaf(p), t.leaf(q)));
}

inline double tsallis_sharpness_value(const Tensor& probs, double a = 2.0) {
  Tape t;
  return t.scalar(tsallis_sharpness(t, t.leaf(probs), a));
}

// Single-pair InfoNCE against an explicit negative index set; the positive
// similarity sits in the denominator next to the admitted negatives, and an
// empty negative set yields exactly 0.
inline double info_nce_value(const std::vector<double>& q, const std::vector<double>& kpos,
                             const std::vector<std::vector<double>>& keys, const std::vector<int>& neg_idx,
                             double tau) {
  if (q.size() != kpos.size()) throw Error("info_nce_value: query/key dimension mismatch");
  if (neg_idx.empty()) return 0.0;
  int D = static_cast<int>(q.size());
  auto keys_t = std::make_shared<Tensor>(Tensor({static_cast<int>(keys.size()), D}));
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (static_cast<int>(keys[i].size()) != D) throw Error("info_nce_value: key dimension mismatch");
    for (int d = 0; d < D; ++d) keys_t->at(static_cast<int>(i), d) = keys[i][static_cast<std::size_t>(d)];
  }
  auto neg = std::make_shared<std::vector<std::vector<int>>>(1, neg_idx);
  Tape t;
  Var qv = t.leaf(Tensor({1, D}, q));
  Var kv = t.leaf(Tensor({1, D}, kpos));
  Var l = info_nce_masked(t, qv, kv, keys_t, neg, tau);
  return t.val(l).at(0);
}

}  // namespace tfda
