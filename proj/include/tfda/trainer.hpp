#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tfda/augment.hpp"
#include "tfda/curriculum.hpp"
#include "tfda/data.hpp"
#include "tfda/losses.hpp"
#include "tfda/metrics.hpp"
#include "tfda/model.hpp"
#include "tfda/pseudo.hpp"
#include "tfda/select.hpp"
#include "tfda/spectral.hpp"

namespace tfda {

struct AdaptConfig {
  int epochs = 40;
  int batch_size = 32;
  int bank_capacity = 0;  // 0 resolves to min(N, 1024)
  int queue_capacity = 512;
  int history_epochs = 5;  // label-history depth for negative exclusion
  int neighbors = 10;      // K for bank refinement
  int views = 4;           // weak views per sample for the uncertainty score
  double temperature = 0.07;
  double lr = 1e-6;
  double ema_alpha = 0.999;
  double alpha1 = 0.5;  // weight on the within-domain contrastive pair
  double alpha2 = 0.5;  // weight on the cross-domain (time/freq) pair
  std::uint64_t seed = 0;
  WeakAugPolicy weak{};
  StrongAugPolicy strong{};
  int freq_aug_count = 5;
  double freq_aug_scale = 0.1;
  CurriculumConfig curriculum{};
  CurriculumState curriculum_init{};
  AdamConfig adam{};
  bool freq_branch_enabled = true;

  void validate() const {
    if (epochs < 0) throw Error("AdaptConfig: epochs must be >= 0");
    if (batch_size < 1) throw Error("AdaptConfig: batch_size must be >= 1");
    if (bank_capacity < 0) throw Error("AdaptConfig: bank_capacity must be >= 0");
    if (queue_capacity < 1) throw Error("AdaptConfig: queue_capacity must be >= 1");
    if (history_epochs < 1) throw Error("AdaptConfig: history_epochs must be >= 1");
    if (neighbors < 1) throw Error("AdaptConfig: neighbors must be >= 1");
    if (views < 2) throw Error("AdaptConfig: views must be >= 2");
    if (temperature <= 0.0) throw Error("AdaptConfig: temperature must be positive");
    if (lr <= 0.0) throw Error("AdaptConfig: lr must be positive");
    if (ema_alpha < 0.0 || ema_alpha > 1.0) throw Error("AdaptConfig: ema_alpha must be in [0,1]");
    if (freq_aug_count < 0) throw Error("AdaptConfig: freq_aug_count must be >= 0");
  }
};

struct EpochLosses {
  double ce = 0.0, lp = 0.0;
  double cl_time = 0.0, cl_freq = 0.0, cl_joint = 0.0, cl = 0.0;
  double cons = 0.0, ul = 0.0;
  double total = 0.0;
};

struct AdaptReport {
  std::vector<EpochLosses> losses;           // per-epoch batch means
  std::vector<CurriculumState> weights;      // weights in force during each epoch
  std::vector<double> eval_f1;               // per-epoch teacher macro F1, if eval data given
  std::vector<double> seconds;               // wall clock per epoch (not part of any report file)
};

struct AdaptState {
  TeacherStudent ts;
  AdamState opt;
  MemoryBank bank;
  TemporalQueue q_time, q_freq, q_joint;
  LabelHistoryTable history;
  CurriculumState curriculum;
};

namespace traindetail {

struct TeacherBatchView {
  Tensor fused_clean;          // [B x C]
  std::vector<double> confidence;
  std::vector<double> uncertainty;
  Tensor bank_features;        // [B x D] time-branch features of weak view 0
  Tensor bank_probs;           // [B x C] fused predictions of weak view 0
};

// All teacher passes for one batch: clean fused prediction plus `views` weak
// views for the stability score. Teacher normalizes with batch statistics but
// never updates its running buffers; its running buffers track the student's
// through the EMA instead.
inline TeacherBatchView teacher_views(DualBranchModel& teacher, const Tensor& xb, const std::vector<int>& ids,
                                      const AdaptConfig& cfg, int epoch) {
  int B = xb.dim(0);
  TeacherBatchView out;
  ForwardOpts opts;
  opts.batch_stats = true;
  {
    Tape t;
    TapeParams tp = lift_params(t, teacher.params);
    BranchOut bt = branch_forward(t, teacher, tp, Branch::Time, t.leaf(xb), opts);
    if (cfg.freq_branch_enabled) {
      BranchOut bf = branch_forward(t, teacher, tp, Branch::Freq, t.leaf(freq_magnitude(xb)), opts);
      out.fused_clean = t.val(fuse_tape(t, bt.probs, bf.probs));
    } else {
      out.fused_clean = t.val(bt.probs);
    }
  }
  out.confidence.resize(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) {
    double m = out.fused_clean.at(i, 0);
    for (int c = 1; c < out.fused_clean.dim(1); ++c) m = std::max(m, out.fused_clean.at(i, c));
    out.confidence[static_cast<std::size_t>(i)] = m;
  }

  std::vector<std::vector<double>> view_conf(static_cast<std::size_t>(B));
  for (int v = 0; v < cfg.views; ++v) {
    Tensor xv = augment_weak(xb, cfg.weak, view_streams(cfg.seed, epoch, ids, v));
    Tape t;
    TapeParams tp = lift_params(t, teacher.params);
    BranchOut bt = branch_forward(t, teacher, tp, Branch::Time, t.leaf(xv), opts);
    Tensor fused;
    if (cfg.freq_branch_enabled) {
      BranchOut bf = branch_forward(t, teacher, tp, Branch::Freq, t.leaf(freq_magnitude(xv)), opts);
      fused = t.val(fuse_tape(t, bt.probs, bf.probs));
    } else {
      fused = t.val(bt.probs);
    }
    for (int i = 0; i < B; ++i) {
      double m = fused.at(i, 0);
      for (int c = 1; c < fused.dim(1); ++c) m = std::max(m, fused.at(i, c));
      view_conf[static_cast<std::size_t>(i)].push_back(m);
    }
    if (v == 0) {
      out.bank_features = t.val(bt.features);
      out.bank_probs = std::move(fused);
    }
  }
  out.uncertainty.resize(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) {
    out.uncertainty[static_cast<std::size_t>(i)] = view_uncertainty(view_conf[static_cast<std::size_t>(i)]);
  }
  return out;
}

inline void check_component(double v, const char* name, int epoch) {
  if (!std::isfinite(v)) {
    throw Error(std::string("adapt: non-finite ") + name + " at epoch " + std::to_string(epoch));
  }
}

}  // namespace traindetail

// Batched eval-mode inference; returns fused argmax labels.
inline std::vector<int> predict_labels(DualBranchModel& model, const Tensor& samples, int batch_size = 64,
                                       bool freq_branch_enabled = true) {
  require_rank(samples, 3, "predict_labels");
  int n = samples.dim(0);
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int start = 0; start < n; start += batch_size) {
    std::vector<int> idx;
    for (int i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
    Tensor xb = gather_samples(samples, idx);
    Tape t;
    TapeParams tp = lift_params(t, model.params);
    ForwardOpts opts = eval_opts();
    BranchOut bt = branch_forward(t, model, tp, Branch::Time, t.leaf(xb), opts);
    Tensor fused;
    if (freq_branch_enabled) {
      BranchOut bf = branch_forward(t, model, tp, Branch::Freq, t.leaf(freq_magnitude(xb)), opts);
      fused = t.val(fuse_tape(t, bt.probs, bf.probs));
    } else {
      fused = t.val(bt.probs);
    }
    for (int y : argmax_rows(fused)) out.push_back(y);
  }
  return out;
}

inline double eval_macro_f1(DualBranchModel& model, const Dataset& data, bool freq_branch_enabled = true) {
  if (!data.labeled()) throw Error("eval_macro_f1: dataset is unlabeled");
  std::vector<int> pred = predict_labels(model, data.samples, 64, freq_branch_enabled);
  return macro_f1(data.labels, pred, data.classes);
}

// One adaptation epoch (epoch numbers start at 1; the warm-up sweep is epoch 0).
inline EpochLosses adapt_epoch(AdaptState& st, const Dataset& target, const AdaptConfig& cfg, int epoch) {
  int N = target.count();
  int C = st.ts.student.arch.classes;
  auto batches = make_batches(N, cfg.batch_size, stream_id(cfg.seed, {0xE90C5ULL, static_cast<std::uint64_t>(epoch)}));
  EpochLosses mean;
  double tau_c_sum = 0.0, tau_u_sum = 0.0;

  for (std::size_t bi = 0; bi < batches.size(); ++bi) {
    const std::vector<int>& ids = batches[bi];
    int B = static_cast<int>(ids.size());
    Tensor xb = gather_samples(target.samples, ids);

    // Teacher: clean prediction, stability scores, bank query features.
    auto tv = traindetail::teacher_views(st.ts.teacher, xb, ids, cfg, epoch);

    // Neighborhood-refined pseudo-labels from the current bank.
    std::vector<int> refined(static_cast<std::size_t>(B));
    for (int i = 0; i < B; ++i) {
      std::vector<double> q(tv.bank_features.values.begin() + static_cast<std::ptrdiff_t>(i) * tv.bank_features.dim(1),
                            tv.bank_features.values.begin() + static_cast<std::ptrdiff_t>(i + 1) * tv.bank_features.dim(1));
      refined[static_cast<std::size_t>(i)] = st.bank.refine(q, cfg.neighbors).label;
    }

    Thresholds th = batch_thresholds(tv.confidence, tv.uncertainty);
    tau_c_sum += th.tau_c;
    tau_u_sum += th.tau_u;
    ReliabilityPartition part = partition(tv.confidence, tv.uncertainty, th.tau_c, th.tau_u, refined, C);

    for (int i = 0; i < B; ++i) st.history.append(ids[static_cast<std::size_t>(i)], epoch, refined[static_cast<std::size_t>(i)]);

    // Negative sets against the queues as they stood before this batch.
    auto snap_time = std::make_shared<Tensor>(st.q_time.keys_snapshot());
    auto snap_freq = std::make_shared<Tensor>(st.q_freq.keys_snapshot());
    auto snap_joint = std::make_shared<Tensor>(st.q_joint.keys_snapshot());
    auto neg_time = std::make_shared<std::vector<std::vector<int>>>(static_cast<std::size_t>(B));
    auto neg_freq = std::make_shared<std::vector<std::vector<int>>>(static_cast<std::size_t>(B));
    auto neg_joint = std::make_shared<std::vector<std::vector<int>>>(static_cast<std::size_t>(B));
    for (int i = 0; i < B; ++i) {
      const auto& h = st.history.history(ids[static_cast<std::size_t>(i)]);
      (*neg_time)[static_cast<std::size_t>(i)] = st.q_time.exclusion_complement(h);
      (*neg_freq)[static_cast<std::size_t>(i)] = st.q_freq.exclusion_complement(h);
      (*neg_joint)[static_cast<std::size_t>(i)] = st.q_joint.exclusion_complement(h);
    }

    st.bank.update(tv.bank_features, tv.bank_probs);

    // Student pass: every loss term on one tape.
    Tape t;
    TapeParams tp = lift_params(t, st.ts.student.params);
    auto dstream = [&](std::uint64_t slot) {
      return stream_id(cfg.seed, {0xD0ULL, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(bi), slot});
    };
    ForwardOpts clean_opts;  // clean passes maintain the running statistics
    clean_opts.batch_stats = true;
    clean_opts.update_running = true;
    clean_opts.dropout_on = true;
    ForwardOpts aug_opts;
    aug_opts.batch_stats = true;
    aug_opts.update_running = false;
    aug_opts.dropout_on = true;

    ForwardOpts o = clean_opts;
    o.dropout_stream = dstream(0);
    BranchOut s_time = branch_forward(t, st.ts.student, tp, Branch::Time, t.leaf(xb), o);
    Var fused_student = s_time.probs;
    BranchOut s_freq;
    if (cfg.freq_branch_enabled) {
      o = clean_opts;
      o.dropout_stream = dstream(1);
      s_freq = branch_forward(t, st.ts.student, tp, Branch::Freq, t.leaf(freq_magnitude(xb)), o);
      fused_student = fuse_tape(t, s_time.probs, s_freq.probs);
    }

    // Supervision split: refined-label CE on the reliable rows, label
    // propagation toward the pseudo-labels on the rest.
    std::vector<int> labels_r, labels_nr;
    std::vector<int> counts(static_cast<std::size_t>(C), 0);
    for (int r : part.reliable) {
      labels_r.push_back(refined[static_cast<std::size_t>(r)]);
      counts[static_cast<std::size_t>(refined[static_cast<std::size_t>(r)])]++;
    }
    for (int r : part.non_reliable) labels_nr.push_back(refined[static_cast<std::size_t>(r)]);

    Var l_ce = class_balanced_ce(t, select_rows(t, fused_student, part.reliable), labels_r, counts);
    Var l_lp = part.non_reliable.empty()
                   ? t.leaf(Tensor::scalar(0.0))
                   : label_prop_loss(t, select_rows(t, fused_student, part.non_reliable), labels_nr);

    // Contrastive views.
    o = aug_opts;
    o.dropout_stream = dstream(2);
    Tensor xs1 = augment_strong(xb, cfg.strong, view_streams(cfg.seed, epoch, ids, 100));
    BranchOut v1 = branch_forward(t, st.ts.student, tp, Branch::Time, t.leaf(std::move(xs1)), o);
    o = aug_opts;
    o.dropout_stream = dstream(3);
    Tensor xs2 = augment_strong(xb, cfg.strong, view_streams(cfg.seed, epoch, ids, 101));
    BranchOut v2 = branch_forward(t, st.ts.student, tp, Branch::Time, t.leaf(std::move(xs2)), o);
    Var q_t = projector_forward(t, tp, Branch::Time, v1.features);
    Var k_t = projector_forward(t, tp, Branch::Time, v2.features);
    Var l_cl_time = scale(t, sum(t, info_nce_masked(t, q_t, k_t, snap_time, neg_time, cfg.temperature)),
                          1.0 / static_cast<double>(B));

    Var l_cl_freq = t.leaf(Tensor::scalar(0.0));
    Var l_cl_joint = t.leaf(Tensor::scalar(0.0));
    Var k_f = -1, k_j = -1;
    if (cfg.freq_branch_enabled) {
      o = aug_opts;
      o.dropout_stream = dstream(4);
      Tensor ff1 = freq_augment_batch(xb, FreqAugMode::Remove, cfg.freq_aug_count, cfg.freq_aug_scale,
                                      view_streams(cfg.seed, epoch, ids, 200));
      BranchOut f1 = branch_forward(t, st.ts.student, tp, Branch::Freq, t.leaf(std::move(ff1)), o);
      o = aug_opts;
      o.dropout_stream = dstream(5);
      Tensor ff2 = freq_augment_batch(xb, FreqAugMode::Add, cfg.freq_aug_count, cfg.freq_aug_scale,
                                      view_streams(cfg.seed, epoch, ids, 201));
      BranchOut f2 = branch_forward(t, st.ts.student, tp, Branch::Freq, t.leaf(std::move(ff2)), o);
      Var q_f = projector_forward(t, tp, Branch::Freq, f1.features);
      k_f = projector_forward(t, tp, Branch::Freq, f2.features);
      l_cl_freq = scale(t, sum(t, info_nce_masked(t, q_f, k_f, snap_freq, neg_freq, cfg.temperature)),
                        1.0 / static_cast<double>(B));

      // Cross-representation pair: clean time embedding vs clean frequency embedding.
      Var q_j = projector_forward(t, tp, Branch::Time, s_time.features);
      k_j = projector_forward(t, tp, Branch::Freq, s_freq.features);
      l_cl_joint = scale(t, sum(t, info_nce_masked(t, q_j, k_j, snap_joint, neg_joint, cfg.temperature)),
                         1.0 / static_cast<double>(B));
    }

    Var l_cl = add(t, scale(t, add(t, l_cl_freq, l_cl_time), cfg.alpha1), scale(t, l_cl_joint, cfg.alpha2));
    Var l_cons = cfg.freq_branch_enabled ? symmetric_kl(t, s_time.probs, s_freq.probs) : t.leaf(Tensor::scalar(0.0));
    Var l_ul = tsallis_sharpness(t, fused_student);

    const CurriculumState& mu = st.curriculum;
    Var total = scale(t, l_ce, mu.mu_r);
    total = add(t, total, scale(t, l_lp, 1.0 - mu.mu_r));
    total = add(t, total, scale(t, l_cl, mu.mu_c));
    total = add(t, total, scale(t, l_cons, mu.mu_cons));
    total = add(t, total, scale(t, l_ul, mu.mu_u));

    EpochLosses bl;
    bl.ce = t.scalar(l_ce);
    bl.lp = t.scalar(l_lp);
    bl.cl_time = t.scalar(l_cl_time);
    bl.cl_freq = t.scalar(l_cl_freq);
    bl.cl_joint = t.scalar(l_cl_joint);
    bl.cl = t.scalar(l_cl);
    bl.cons = t.scalar(l_cons);
    bl.ul = t.scalar(l_ul);
    bl.total = t.scalar(total);
    traindetail::check_component(bl.ce, "refined-label CE", epoch);
    traindetail::check_component(bl.lp, "label propagation loss", epoch);
    traindetail::check_component(bl.cl, "contrastive loss", epoch);
    traindetail::check_component(bl.cons, "consistency loss", epoch);
    traindetail::check_component(bl.ul, "uncertainty loss", epoch);
    traindetail::check_component(bl.total, "total loss", epoch);

    t.backward(total);
    GradMap grads;
    for (const auto& [name, var] : tp.vars) grads[name] = t.grad(var);
    AdamConfig adam = cfg.adam;
    adam.lr = cfg.lr;
    adam_step_inplace(st.ts.student.params, grads, st.opt, adam);
    ema_update_inplace(st.ts.teacher, st.ts.student, cfg.ema_alpha);

    // Refresh the queues with this batch's (detached) keys and labels.
    std::vector<std::int64_t> ids64(ids.begin(), ids.end());
    st.q_time.record(ids64, t.val(k_t), refined, epoch);
    if (cfg.freq_branch_enabled) {
      st.q_freq.record(ids64, t.val(k_f), refined, epoch);
      st.q_joint.record(ids64, t.val(k_j), refined, epoch);
    }

    mean.ce += bl.ce;
    mean.lp += bl.lp;
    mean.cl_time += bl.cl_time;
    mean.cl_freq += bl.cl_freq;
    mean.cl_joint += bl.cl_joint;
    mean.cl += bl.cl;
    mean.cons += bl.cons;
    mean.ul += bl.ul;
    mean.total += bl.total;
  }

  double nb = static_cast<double>(batches.size());
  mean.ce /= nb;
  mean.lp /= nb;
  mean.cl_time /= nb;
  mean.cl_freq /= nb;
  mean.cl_joint /= nb;
  mean.cl /= nb;
  mean.cons /= nb;
  mean.ul /= nb;
  mean.total /= nb;

  st.curriculum = advance_curriculum(st.curriculum, tau_c_sum / nb, tau_u_sum / nb, cfg.curriculum);
  return mean;
}

using EpochCallback = std::function<void(int epoch, const EpochLosses&, const CurriculumState&, double eval_f1,
                                         double seconds)>;

// Source-free adaptation: warm-up bank fill, then `epochs` rounds of
// pseudo-label refinement, contrastive alignment, consistency, and
// uncertainty reduction with mean-teacher tracking.
inline std::pair<TeacherStudent, AdaptReport> run_adaptation(const DualBranchModel& source_model,
                                                             const Dataset& target, const AdaptConfig& cfg,
                                                             const Dataset* eval_data = nullptr,
                                                             const EpochCallback& on_epoch = nullptr) {
  cfg.validate();
  const Arch& arch = source_model.arch;
  if (target.channels() != arch.channels || target.length() != arch.length) {
    throw Error("run_adaptation: target [Ch x S] = [" + std::to_string(target.channels()) + " x " +
                std::to_string(target.length()) + "] vs model [" + std::to_string(arch.channels) + " x " +
                std::to_string(arch.length) + "]");
  }
  int N = target.count();
  int bank_cap = cfg.bank_capacity > 0 ? cfg.bank_capacity : std::min(N, 1024);
  int bank_fill = std::min(N, bank_cap);
  if (cfg.neighbors > bank_fill) {
    throw Error("run_adaptation: neighbors = " + std::to_string(cfg.neighbors) + " exceeds bank fill " +
                std::to_string(bank_fill));
  }

  AdaptState st{
      TeacherStudent{source_model, source_model, cfg.ema_alpha},
      AdamState{},
      MemoryBank(bank_cap, arch.feature_dim(), arch.classes),
      TemporalQueue(cfg.queue_capacity, cfg.history_epochs, arch.proj_dim),
      TemporalQueue(cfg.queue_capacity, cfg.history_epochs, arch.proj_dim),
      TemporalQueue(cfg.queue_capacity, cfg.history_epochs, arch.proj_dim),
      LabelHistoryTable(N, cfg.history_epochs),
      cfg.curriculum_init,
  };

  // Warm-up sweep: eval-mode teacher fills the bank before the first epoch.
  for (int start = 0; start < N; start += cfg.batch_size) {
    std::vector<int> idx;
    for (int i = start; i < std::min(N, start + cfg.batch_size); ++i) idx.push_back(i);
    Tensor xb = gather_samples(target.samples, idx);
    Tape t;
    TapeParams tp = lift_params(t, st.ts.teacher.params);
    ForwardOpts opts = eval_opts();
    BranchOut bt = branch_forward(t, st.ts.teacher, tp, Branch::Time, t.leaf(xb), opts);
    Tensor fused;
    if (cfg.freq_branch_enabled) {
      BranchOut bf = branch_forward(t, st.ts.teacher, tp, Branch::Freq, t.leaf(freq_magnitude(xb)), opts);
      fused = t.val(fuse_tape(t, bt.probs, bf.probs));
    } else {
      fused = t.val(bt.probs);
    }
    st.bank.update(t.val(bt.features), fused);
  }

  AdaptReport report;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto start = std::chrono::steady_clock::now();
    report.weights.push_back(st.curriculum);  // weights in force this epoch
    EpochLosses el = adapt_epoch(st, target, cfg, epoch);
    report.losses.push_back(el);
    if (eval_data) {
      report.eval_f1.push_back(eval_macro_f1(st.ts.teacher, *eval_data, cfg.freq_branch_enabled));
    }
    report.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    if (on_epoch) {
      on_epoch(epoch, el, report.weights.back(), eval_data ? report.eval_f1.back() : -1.0, report.seconds.back());
    }
  }
  return {std::move(st.ts), std::move(report)};
}

// ---- complexity benchmark ------------------------------------------------------

struct BenchRow {
  int n = 0;
  double seconds = 0.0;
  double per_sample = 0.0;
};

// Times one full adaptation epoch (including warm-up amortized out: warm-up is
// excluded) per grid point on synthetic data of the given size. Constant
// batch size, bank, and queue caps make the work per sample flat in N.
inline std::vector<BenchRow> bench_complexity(const std::vector<int>& grid, const Arch& arch, AdaptConfig cfg,
                                              std::uint64_t seed = 0) {
  arch.validate();
  cfg.epochs = 1;
  std::vector<BenchRow> rows;
  for (int n : grid) {
    if (n < arch.classes) throw Error("bench_complexity: grid point " + std::to_string(n) + " smaller than class count");
    int per_class = n / arch.classes;
    Dataset target = generate_synthetic(arch.classes, arch.channels, arch.length, per_class, ShiftSpec::identity(),
                                        seed, "bench");
    DualBranchModel model = build_model(arch, seed);
    // Warm-up happens inside run_adaptation; time only the adaptation epoch.
    cfg.seed = seed;
    auto t0 = std::chrono::steady_clock::now();
    auto [ts, rep] = run_adaptation(model, target, cfg);
    double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    BenchRow row;
    row.n = target.count();
    row.seconds = rep.seconds.empty() ? total : rep.seconds[0];
    row.per_sample = row.seconds / static_cast<double>(target.count());
    rows.push_back(row);
  }
  return rows;
}

}  // namespace tfda
