#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "tfda/autodiff.hpp"
#include "tfda/data.hpp"
#include "tfda/losses.hpp"
#include "tfda/optimizer.hpp"
#include "tfda/rng.hpp"
#include "tfda/spectral.hpp"
#include "tfda/tensor.hpp"

namespace tfda {

enum class Branch { Time, Freq };

struct Arch {
  int channels = 1;
  int length = 128;
  int classes = 2;
  std::array<int, 3> filters{64, 128, 128};
  int kernel = 8;
  int proj_dim = 128;
  double dropout_rate = 0.5;

  int feature_dim() const { return filters[2]; }
  int freq_length() const { return rfft_bins(length); }

  void validate() const {
    if (channels < 1) throw Error("Arch: channels must be >= 1, got " + std::to_string(channels));
    if (length < 1) throw Error("Arch: length must be >= 1, got " + std::to_string(length));
    if (classes < 2) throw Error("Arch: classes must be >= 2, got " + std::to_string(classes));
    for (int f : filters) {
      if (f < 1) throw Error("Arch: filter count must be >= 1, got " + std::to_string(f));
    }
    if (kernel < 1) throw Error("Arch: kernel must be >= 1, got " + std::to_string(kernel));
    if (proj_dim < 1) throw Error("Arch: proj_dim must be >= 1, got " + std::to_string(proj_dim));
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw Error("Arch: dropout_rate must be in [0,1)");
    // Three conv(pad k/2) + pool-2 stages: any positive length survives, but
    // the pooled length must stay >= 1 at each stage, which holds for S >= 1.
  }
};

struct DualBranchModel {
  Arch arch;
  ParamSet params;
};

namespace modeldetail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// He-uniform over [-sqrt(6/fan_in), +sqrt(6/fan_in)], stream derived from the
// parameter name so initialization is independent of construction order.
inline Tensor he_uniform(Shape shape, int fan_in, std::uint64_t seed, const std::string& name) {
  Tensor t(std::move(shape));
  Rng rng(stream_id(seed, {fnv1a(name)}));
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : t.values) v = rng.uniform(-limit, limit);
  return t;
}

inline std::string branch_prefix(Branch b) { return b == Branch::Time ? "time." : "freq."; }
inline std::string proj_prefix(Branch b) { return b == Branch::Time ? "proj_time." : "proj_freq."; }

}  // namespace modeldetail

inline DualBranchModel build_model(const Arch& arch, std::uint64_t seed) {
  arch.validate();
  DualBranchModel m;
  m.arch = arch;
  for (Branch b : {Branch::Time, Branch::Freq}) {
    std::string bp = modeldetail::branch_prefix(b);
    int in_ch = arch.channels;
    for (int i = 0; i < 3; ++i) {
      int f = arch.filters[static_cast<std::size_t>(i)];
      std::string conv = bp + "conv" + std::to_string(i + 1);
      std::string bn = bp + "bn" + std::to_string(i + 1);
      m.params[conv + ".weight"] = modeldetail::he_uniform({f, in_ch, arch.kernel}, in_ch * arch.kernel, seed, conv + ".weight");
      m.params[conv + ".bias"] = Tensor({f});
      m.params[bn + ".gamma"] = Tensor::full({f}, 1.0);
      m.params[bn + ".beta"] = Tensor({f});
      m.params[bn + ".running_mean"] = Tensor({f});
      m.params[bn + ".running_var"] = Tensor::full({f}, 1.0);
      in_ch = f;
    }
    int D = arch.feature_dim();
    std::string head = bp + "head";
    m.params[head + ".weight"] = modeldetail::he_uniform({D, arch.classes}, D, seed, head + ".weight");
    m.params[head + ".bias"] = Tensor({arch.classes});
    std::string pp = modeldetail::proj_prefix(b);
    m.params[pp + "fc1.weight"] = modeldetail::he_uniform({D, arch.proj_dim}, D, seed, pp + "fc1.weight");
    m.params[pp + "fc1.bias"] = Tensor({arch.proj_dim});
    m.params[pp + "fc2.weight"] = modeldetail::he_uniform({arch.proj_dim, arch.proj_dim}, arch.proj_dim, seed, pp + "fc2.weight");
    m.params[pp + "fc2.bias"] = Tensor({arch.proj_dim});
  }
  return m;
}

// ---- forward ----------------------------------------------------------------

struct ForwardOpts {
  bool batch_stats = false;     // batch-norm from the current batch vs running buffers
  bool update_running = false;  // fold batch statistics into the running buffers
  bool dropout_on = false;
  std::uint64_t dropout_stream = 0;
};

inline ForwardOpts train_opts(std::uint64_t dropout_stream) { return {true, true, true, dropout_stream}; }
inline ForwardOpts eval_opts() { return {}; }

// Tape handles for every trainable parameter; running stats stay in the model.
struct TapeParams {
  std::map<std::string, Var> vars;
  Var at(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw Error("TapeParams: unknown parameter " + name);
    return it->second;
  }
};

inline TapeParams lift_params(Tape& t, const ParamSet& params) {
  TapeParams tp;
  for (const auto& [name, tensor] : params) {
    if (is_trainable(name)) tp.vars.emplace(name, t.leaf(tensor));
  }
  return tp;
}

struct BranchOut {
  Var features = -1;  // [B x D]
  Var logits = -1;    // [B x C]
  Var probs = -1;     // [B x C]
};

// Conv backbone + classifier head for one branch. `model` is non-const only
// so batch statistics can be folded into its running buffers when requested.
inline BranchOut branch_forward(Tape& t, DualBranchModel& model, const TapeParams& tp, Branch branch, Var input,
                                const ForwardOpts& opts) {
  const Arch& a = model.arch;
  int want_len = branch == Branch::Time ? a.length : a.freq_length();
  require_rank(t.val(input), 3, "branch_forward");
  if (t.val(input).dim(1) != a.channels || t.val(input).dim(2) != want_len) {
    throw Error("branch_forward: input shape " + shape_str(t.val(input).shape) + " does not match [B x " +
                std::to_string(a.channels) + " x " + std::to_string(want_len) + "]");
  }
  std::string bp = modeldetail::branch_prefix(branch);
  Var x = input;
  for (int i = 0; i < 3; ++i) {
    std::string conv = bp + "conv" + std::to_string(i + 1);
    std::string bn = bp + "bn" + std::to_string(i + 1);
    x = conv1d(t, x, tp.at(conv + ".weight"), tp.at(conv + ".bias"), 1, a.kernel / 2);
    x = batchnorm1d(t, x, tp.at(bn + ".gamma"), tp.at(bn + ".beta"), &model.params.at(bn + ".running_mean"),
                    &model.params.at(bn + ".running_var"), 0.1, 1e-5, opts.batch_stats, opts.update_running);
    x = relu(t, x);
    x = maxpool1d(t, x, 2, 2);
    if (opts.dropout_on && a.dropout_rate > 0.0) {
      x = dropout(t, x, a.dropout_rate,
                  hash_combine(opts.dropout_stream, modeldetail::fnv1a(bp) + static_cast<std::uint64_t>(i)));
    }
  }
  BranchOut out;
  out.features = global_avg_pool(t, x);
  std::string head = bp + "head";
  out.logits = bias_add_row(t, matmul(t, out.features, tp.at(head + ".weight")), tp.at(head + ".bias"));
  out.probs = softmax(t, out.logits);
  return out;
}

// Two-layer projection head; rows come out L2-normalized.
inline Var projector_forward(Tape& t, const TapeParams& tp, Branch branch, Var features) {
  std::string pp = modeldetail::proj_prefix(branch);
  Var h = bias_add_row(t, matmul(t, features, tp.at(pp + "fc1.weight")), tp.at(pp + "fc1.bias"));
  h = relu(t, h);
  h = bias_add_row(t, matmul(t, h, tp.at(pp + "fc2.weight")), tp.at(pp + "fc2.bias"));
  return l2_normalize(t, h);
}

// Confidence-weighted combination of the two branch predictions:
//   alpha = max(p) / (max(p) + max(p_f)),  fused = alpha * p + (1-alpha) * p_f.
inline Var fuse_tape(Tape& t, Var p_time, Var p_freq) {
  opdetail::require_same_shape(t, p_time, p_freq, "fuse");
  Var mt = row_max(t, p_time);
  Var mf = row_max(t, p_freq);
  Var alpha = div_elem(t, mt, add(t, mt, mf));
  Var one_minus = add_const(t, scale(t, alpha, -1.0), 1.0);
  return add(t, scale_rows(t, p_time, alpha), scale_rows(t, p_freq, one_minus));
}

inline Tensor fuse_predictions(const Tensor& p_time, const Tensor& p_freq) {
  Tape t;
  return t.val(fuse_tape(t, t.leaf(p_time), t.leaf(p_freq)));
}

// ---- plain inference ----------------------------------------------------------

struct Prediction {
  Tensor probs_time, probs_freq, fused;  // each [B x C]
  Tensor features_time, features_freq;   // each [B x D]
};

// Eval-mode inference from a time-domain batch; the frequency input is the
// magnitude half-spectrum of the same batch.
inline Prediction predict(DualBranchModel& model, const Tensor& time_batch) {
  Tape t;
  TapeParams tp = lift_params(t, model.params);
  ForwardOpts opts = eval_opts();
  BranchOut bt = branch_forward(t, model, tp, Branch::Time, t.leaf(time_batch), opts);
  BranchOut bf = branch_forward(t, model, tp, Branch::Freq, t.leaf(freq_magnitude(time_batch)), opts);
  Var fused = fuse_tape(t, bt.probs, bf.probs);
  Prediction p;
  p.probs_time = t.val(bt.probs);
  p.probs_freq = t.val(bf.probs);
  p.fused = t.val(fused);
  p.features_time = t.val(bt.features);
  p.features_freq = t.val(bf.features);
  return p;
}

inline std::vector<int> argmax_rows(const Tensor& probs) {
  require_rank(probs, 2, "argmax_rows");
  std::vector<int> out(static_cast<std::size_t>(probs.dim(0)));
  for (int i = 0; i < probs.dim(0); ++i) {
    int best = 0;
    for (int j = 1; j < probs.dim(1); ++j) {
      if (probs.at(i, j) > probs.at(i, best)) best = j;
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

// ---- teacher / student ----------------------------------------------------------

struct TeacherStudent {
  DualBranchModel teacher;
  DualBranchModel student;
  double alpha = 0.999;
};

// theta_te <- alpha * theta_te + (1 - alpha) * theta_st, over every parameter
// including batch-norm running statistics.
inline void ema_update_inplace(DualBranchModel& teacher, const DualBranchModel& student, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw Error("ema_update: alpha must be in [0,1]");
  for (auto& [name, tt] : teacher.params) {
    auto it = student.params.find(name);
    if (it == student.params.end()) throw Error("ema_update: student missing parameter " + name);
    const Tensor& st = it->second;
    if (st.shape != tt.shape) throw Error("ema_update: shape mismatch for " + name);
    for (std::size_t i = 0; i < tt.values.size(); ++i) {
      tt.values[i] = alpha * tt.values[i] + (1.0 - alpha) * st.values[i];
    }
  }
  if (teacher.params.size() != student.params.size()) {
    throw Error("ema_update: teacher/student parameter sets differ in size");
  }
}

inline TeacherStudent ema_update(TeacherStudent ts) {
  ema_update_inplace(ts.teacher, ts.student, ts.alpha);
  return ts;
}

// ---- model file -----------------------------------------------------------------
// Header: u32 channels, length, classes, filters[3], kernel, proj_dim, then the
// dropout rate as f64, then the parameter blob.

inline void save_model(std::ostream& os, const DualBranchModel& m) {
  detail::put_u32(os, static_cast<std::uint32_t>(m.arch.channels));
  detail::put_u32(os, static_cast<std::uint32_t>(m.arch.length));
  detail::put_u32(os, static_cast<std::uint32_t>(m.arch.classes));
  for (int f : m.arch.filters) detail::put_u32(os, static_cast<std::uint32_t>(f));
  detail::put_u32(os, static_cast<std::uint32_t>(m.arch.kernel));
  detail::put_u32(os, static_cast<std::uint32_t>(m.arch.proj_dim));
  detail::put_f64(os, m.arch.dropout_rate);
  save_param_set(os, m.params);
}

inline DualBranchModel load_model(std::istream& is) {
  auto get_dim = [&](const char* what) {
    std::uint32_t v;
    if (!detail::get_u32(is, v)) throw Error(std::string("load_model: truncated header at ") + what);
    return static_cast<int>(v);
  };
  DualBranchModel m;
  m.arch.channels = get_dim("channels");
  m.arch.length = get_dim("length");
  m.arch.classes = get_dim("classes");
  for (int i = 0; i < 3; ++i) m.arch.filters[static_cast<std::size_t>(i)] = get_dim("filters");
  m.arch.kernel = get_dim("kernel");
  m.arch.proj_dim = get_dim("proj_dim");
  if (!detail::get_f64(is, m.arch.dropout_rate)) throw Error("load_model: truncated header at dropout");
  m.arch.validate();
  m.params = load_param_set(is);
  DualBranchModel ref = build_model(m.arch, 0);
  if (ref.params.size() != m.params.size()) throw Error("load_model: parameter count does not match architecture");
  for (const auto& [name, t] : ref.params) {
    auto it = m.params.find(name);
    if (it == m.params.end()) throw Error("load_model: missing parameter " + name);
    if (it->second.shape != t.shape) {
      throw Error("load_model: parameter " + name + " has shape " + shape_str(it->second.shape) + ", expected " +
                  shape_str(t.shape));
    }
  }
  return m;
}

// ---- source pretraining -----------------------------------------------------------

struct PretrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  AdamConfig adam{};
};

struct PretrainReport {
  std::vector<double> step_losses;
  std::vector<double> epoch_losses;
};

// Supervised training of both branches plus the fused head on labelled data.
// Loss per batch: balanced CE on fused, time, and frequency predictions.
inline DualBranchModel pretrain_source(DualBranchModel model, const Dataset& source, const PretrainConfig& cfg,
                                       PretrainReport* report = nullptr) {
  if (!source.labeled()) throw Error("pretrain_source: source dataset is unlabeled");
  if (source.channels() != model.arch.channels || source.length() != model.arch.length) {
    throw Error("pretrain_source: dataset [Ch x S] = [" + std::to_string(source.channels()) + " x " +
                std::to_string(source.length()) + "] vs model [" + std::to_string(model.arch.channels) + " x " +
                std::to_string(model.arch.length) + "]");
  }
  if (source.classes != model.arch.classes) {
    throw Error("pretrain_source: dataset classes " + std::to_string(source.classes) + " vs model " +
                std::to_string(model.arch.classes));
  }
  AdamConfig adam = cfg.adam;
  adam.lr = cfg.lr;
  AdamState opt;
  Tensor freq_all = freq_magnitude(source.samples);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_sum = 0.0;
    auto batches = make_batches(source.count(), cfg.batch_size, stream_id(cfg.seed, {0xBA7C4ULL, static_cast<std::uint64_t>(epoch)}));
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& idx = batches[bi];
      Tensor xb = gather_samples(source.samples, idx);
      Tensor fb = gather_samples(freq_all, idx);
      std::vector<int> yb(idx.size());
      std::vector<int> counts(static_cast<std::size_t>(source.classes), 0);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        yb[i] = source.labels[static_cast<std::size_t>(idx[i])];
        counts[static_cast<std::size_t>(yb[i])]++;
      }
      Tape t;
      TapeParams tp = lift_params(t, model.params);
      ForwardOpts opts = train_opts(stream_id(cfg.seed, {0xD80ULL, static_cast<std::uint64_t>(epoch), bi}));
      BranchOut bt = branch_forward(t, model, tp, Branch::Time, t.leaf(std::move(xb)), opts);
      BranchOut bf = branch_forward(t, model, tp, Branch::Freq, t.leaf(std::move(fb)), opts);
      Var fused = fuse_tape(t, bt.probs, bf.probs);
      Var loss = add(t, class_balanced_ce(t, fused, yb, counts),
                     add(t, class_balanced_ce(t, bt.probs, yb, counts), class_balanced_ce(t, bf.probs, yb, counts)));
      double lv = t.scalar(loss);
      if (!std::isfinite(lv)) {
        throw Error("pretrain_source: non-finite loss at epoch " + std::to_string(epoch) + " batch " + std::to_string(bi));
      }
      t.backward(loss);
      GradMap grads;
      for (const auto& [name, var] : tp.vars) grads[name] = t.grad(var);
      adam_step_inplace(model.params, grads, opt, adam);
      if (report) report->step_losses.push_back(lv);
      epoch_sum += lv;
    }
    if (report) report->epoch_losses.push_back(epoch_sum / static_cast<double>(batches.size()));
  }
  return model;
}

}  // namespace tfda
