#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "tfda/augment.hpp"
#include "tfda/gradcheck.hpp"
#include "tfda/losses.hpp"
#include "tfda/model.hpp"
#include "tfda/rng.hpp"
#include "tfda/spectral.hpp"

namespace tfda {

// Frozen scene for the full-model gradient check: inputs, views, label
// structure, negative sets, and the uncertainty-loss weights are all fixed up
// front so the checked map params -> loss is pure and smooth (up to the usual
// relu/max kinks, which random data keeps away from the sampled points).
struct CheckScene {
  Arch arch;
  Tensor xb, fb;        // clean time batch and its magnitude spectra
  Tensor xs1, xs2;      // strong time views
  Tensor ff1, ff2;      // perturbed-spectrum magnitude views
  std::vector<int> rows_r, rows_nr;
  std::vector<int> labels_r, labels_nr;
  std::vector<int> counts;
  std::shared_ptr<Tensor> snap_time, snap_freq, snap_joint;
  std::shared_ptr<std::vector<std::vector<int>>> neg_time, neg_freq, neg_joint;
  Tensor tsallis_w;  // weights frozen at the base parameters
  double temperature = 0.07;
  std::uint64_t dropout_seed = 0;
};

namespace checkdetail {

inline std::shared_ptr<Tensor> random_unit_keys(int n, int dim, Rng& rng) {
  auto t = std::make_shared<Tensor>(Tensor({n, dim}));
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int d = 0; d < dim; ++d) {
      double v = rng.normal();
      t->at(i, d) = v;
      s += v * v;
    }
    double inv = 1.0 / std::sqrt(s);
    for (int d = 0; d < dim; ++d) t->at(i, d) *= inv;
  }
  return t;
}

}  // namespace checkdetail

// The adaptation-shaped composite loss over a frozen scene. Touches every
// layer type: conv, batch norm (batch statistics), relu, max pool, global
// pool, dropout, dense heads, softmax, fusion, the projector with L2
// normalization, and all five loss families.
inline double scene_loss(const ParamSet& params, const CheckScene& sc, GradMap* grads_out = nullptr) {
  DualBranchModel m{sc.arch, params};
  Tape t;
  TapeParams tp = lift_params(t, m.params);
  ForwardOpts o;
  o.batch_stats = true;
  o.update_running = false;  // keep the map pure
  o.dropout_on = true;

  o.dropout_stream = hash_combine(sc.dropout_seed, 0);
  BranchOut s_time = branch_forward(t, m, tp, Branch::Time, t.leaf(sc.xb), o);
  o.dropout_stream = hash_combine(sc.dropout_seed, 1);
  BranchOut s_freq = branch_forward(t, m, tp, Branch::Freq, t.leaf(sc.fb), o);
  Var fused = fuse_tape(t, s_time.probs, s_freq.probs);

  Var l_ce = class_balanced_ce(t, select_rows(t, fused, sc.rows_r), sc.labels_r, sc.counts);
  Var l_lp = label_prop_loss(t, select_rows(t, fused, sc.rows_nr), sc.labels_nr);

  o.dropout_stream = hash_combine(sc.dropout_seed, 2);
  BranchOut v1 = branch_forward(t, m, tp, Branch::Time, t.leaf(sc.xs1), o);
  o.dropout_stream = hash_combine(sc.dropout_seed, 3);
  BranchOut v2 = branch_forward(t, m, tp, Branch::Time, t.leaf(sc.xs2), o);
  Var q_t = projector_forward(t, tp, Branch::Time, v1.features);
  Var k_t = projector_forward(t, tp, Branch::Time, v2.features);
  int B = sc.xb.dim(0);
  Var l_cl_time = scale(t, sum(t, info_nce_masked(t, q_t, k_t, sc.snap_time, sc.neg_time, sc.temperature)),
                        1.0 / static_cast<double>(B));

  o.dropout_stream = hash_combine(sc.dropout_seed, 4);
  BranchOut f1 = branch_forward(t, m, tp, Branch::Freq, t.leaf(sc.ff1), o);
  o.dropout_stream = hash_combine(sc.dropout_seed, 5);
  BranchOut f2 = branch_forward(t, m, tp, Branch::Freq, t.leaf(sc.ff2), o);
  Var q_f = projector_forward(t, tp, Branch::Freq, f1.features);
  Var k_f = projector_forward(t, tp, Branch::Freq, f2.features);
  Var l_cl_freq = scale(t, sum(t, info_nce_masked(t, q_f, k_f, sc.snap_freq, sc.neg_freq, sc.temperature)),
                        1.0 / static_cast<double>(B));

  Var q_j = projector_forward(t, tp, Branch::Time, s_time.features);
  Var k_j = projector_forward(t, tp, Branch::Freq, s_freq.features);
  Var l_cl_joint = scale(t, sum(t, info_nce_masked(t, q_j, k_j, sc.snap_joint, sc.neg_joint, sc.temperature)),
                         1.0 / static_cast<double>(B));

  Var l_cons = symmetric_kl(t, s_time.probs, s_freq.probs);
  Var l_ul = tsallis_sharpness_with_weights(t, fused, sc.tsallis_w);

  Var total = add(t, l_ce, l_lp);
  total = add(t, total, scale(t, add(t, add(t, l_cl_time, l_cl_freq), l_cl_joint), 0.5));
  total = add(t, total, l_cons);
  total = add(t, total, l_ul);

  double value = t.scalar(total);
  if (grads_out) {
    t.backward(total);
    for (const auto& [name, var] : tp.vars) (*grads_out)[name] = t.grad(var);
  }
  return value;
}

inline CheckScene make_check_scene(std::uint64_t seed) {
  CheckScene sc;
  sc.arch.channels = 2;
  sc.arch.length = 16;
  sc.arch.classes = 3;
  sc.arch.filters = {4, 6, 6};
  sc.arch.kernel = 8;
  sc.arch.proj_dim = 8;
  sc.arch.dropout_rate = 0.5;
  sc.dropout_seed = scramble64(seed ^ 0xDD5EEDULL);

  int B = 6;
  Rng rng(stream_id(seed, {0x5CE17EULL}));
  sc.xb = Tensor({B, sc.arch.channels, sc.arch.length});
  for (double& v : sc.xb.values) v = rng.normal();
  sc.fb = freq_magnitude(sc.xb);
  StrongAugPolicy strong;
  sc.xs1 = augment_strong(sc.xb, strong, view_streams(seed, 1, {0, 1, 2, 3, 4, 5}, 100));
  sc.xs2 = augment_strong(sc.xb, strong, view_streams(seed, 1, {0, 1, 2, 3, 4, 5}, 101));
  sc.ff1 = freq_augment_batch(sc.xb, FreqAugMode::Remove, 2, 0.1, view_streams(seed, 1, {0, 1, 2, 3, 4, 5}, 200));
  sc.ff2 = freq_augment_batch(sc.xb, FreqAugMode::Add, 2, 0.1, view_streams(seed, 1, {0, 1, 2, 3, 4, 5}, 201));

  sc.rows_r = {0, 2, 4};
  sc.rows_nr = {1, 3, 5};
  sc.labels_r = {0, 1, 2};
  sc.labels_nr = {2, 0, 1};
  sc.counts = {1, 1, 1};

  int n_keys = 8;
  sc.snap_time = checkdetail::random_unit_keys(n_keys, sc.arch.proj_dim, rng);
  sc.snap_freq = checkdetail::random_unit_keys(n_keys, sc.arch.proj_dim, rng);
  sc.snap_joint = checkdetail::random_unit_keys(n_keys, sc.arch.proj_dim, rng);
  auto negs = [&](int empty_row) {
    auto v = std::make_shared<std::vector<std::vector<int>>>(static_cast<std::size_t>(B));
    for (int i = 0; i < B; ++i) {
      if (i == empty_row) continue;  // exercise the empty-negative-set path
      for (int j = 0; j < n_keys; ++j) {
        if ((i + j) % 3 != 0) (*v)[static_cast<std::size_t>(i)].push_back(j);
      }
    }
    return v;
  };
  sc.neg_time = negs(5);
  sc.neg_freq = negs(1);
  sc.neg_joint = negs(3);
  return sc;
}

struct StandardCheckResult {
  GradCheckReport report;
  double seconds = 0.0;
  int coords = 0;
};

// >= 100 coordinates across every trainable tensor of the dual-branch model,
// checked against central differences of the frozen-scene composite loss.
inline StandardCheckResult run_standard_grad_checks(std::uint64_t seed = 0) {
  auto t0 = std::chrono::steady_clock::now();
  CheckScene sc = make_check_scene(seed);
  DualBranchModel base = build_model(sc.arch, seed);

  // Freeze the uncertainty-loss weights at the base parameters.
  {
    DualBranchModel m = base;
    Tape t;
    TapeParams tp = lift_params(t, m.params);
    ForwardOpts o;
    o.batch_stats = true;
    o.dropout_on = true;
    o.dropout_stream = hash_combine(sc.dropout_seed, 0);
    BranchOut bt = branch_forward(t, m, tp, Branch::Time, t.leaf(sc.xb), o);
    o.dropout_stream = hash_combine(sc.dropout_seed, 1);
    BranchOut bf = branch_forward(t, m, tp, Branch::Freq, t.leaf(sc.fb), o);
    Tensor fused = t.val(fuse_tape(t, bt.probs, bf.probs));
    sc.tsallis_w = tsallis_weight_matrix(fused, fused.dim(0), fused.dim(1));
  }

  GradMap analytic;
  scene_loss(base.params, sc, &analytic);
  auto coords = sample_coords(base.params, 2, 48, seed);
  StandardCheckResult res;
  res.report = grad_check(base.params, [&](const ParamSet& p) { return scene_loss(p, sc); }, analytic, coords);
  res.coords = static_cast<int>(coords.size());
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace tfda
