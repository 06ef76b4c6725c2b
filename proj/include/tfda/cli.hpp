#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tfda/checks.hpp"
#include "tfda/config.hpp"
#include "tfda/data.hpp"
#include "tfda/metrics.hpp"
#include "tfda/model.hpp"
#include "tfda/trainer.hpp"

namespace tfda {

namespace clidetail {

inline std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

inline std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

inline DualBranchModel read_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open model file " + path);
  return load_model(in);
}

inline void write_model(const std::string& path, const DualBranchModel& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write model file " + path);
  save_model(out, m);
  if (!out) throw Error("write failed for model file " + path);
}

inline void write_adapt_report(const std::string& path, const AdaptReport& rep, bool with_eval) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write report file " + path);
  out << "epoch,ce,lp,cl_time,cl_freq,cl_joint,cl,cons,ul,total,mu_r,mu_c,mu_cons,mu_u";
  if (with_eval) out << ",eval_f1";
  out << "\n";
  for (std::size_t e = 0; e < rep.losses.size(); ++e) {
    const EpochLosses& l = rep.losses[e];
    const CurriculumState& w = rep.weights[e];
    out << (e + 1) << ',' << num(l.ce) << ',' << num(l.lp) << ',' << num(l.cl_time) << ',' << num(l.cl_freq) << ','
        << num(l.cl_joint) << ',' << num(l.cl) << ',' << num(l.cons) << ',' << num(l.ul) << ',' << num(l.total) << ','
        << num(w.mu_r) << ',' << num(w.mu_c) << ',' << num(w.mu_cons) << ',' << num(w.mu_u);
    if (with_eval) out << ',' << num(rep.eval_f1[e]);
    out << "\n";
  }
  if (!out) throw Error("write failed for report file " + path);
}

// Eval-mode embeddings and predictions for a whole dataset, stored in the
// parameter-record format.
inline void export_embeddings(const std::string& path, DualBranchModel& model, const Dataset& data) {
  int n = data.count();
  int D = model.arch.feature_dim(), P = model.arch.proj_dim, C = model.arch.classes;
  ParamSet out;
  out["features_time"] = Tensor({n, D});
  out["features_freq"] = Tensor({n, D});
  out["proj_time"] = Tensor({n, P});
  out["proj_freq"] = Tensor({n, P});
  out["probs_time"] = Tensor({n, C});
  out["probs_freq"] = Tensor({n, C});
  out["probs_fused"] = Tensor({n, C});
  int bs = 64;
  for (int start = 0; start < n; start += bs) {
    std::vector<int> idx;
    for (int i = start; i < std::min(n, start + bs); ++i) idx.push_back(i);
    Tensor xb = gather_samples(data.samples, idx);
    Tape t;
    TapeParams tp = lift_params(t, model.params);
    ForwardOpts opts = eval_opts();
    BranchOut bt = branch_forward(t, model, tp, Branch::Time, t.leaf(xb), opts);
    BranchOut bf = branch_forward(t, model, tp, Branch::Freq, t.leaf(freq_magnitude(xb)), opts);
    Var fused = fuse_tape(t, bt.probs, bf.probs);
    Var pt = projector_forward(t, tp, Branch::Time, bt.features);
    Var pf = projector_forward(t, tp, Branch::Freq, bf.features);
    auto blit = [&](Tensor& dst, const Tensor& src, int width) {
      for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy_n(src.values.begin() + static_cast<std::ptrdiff_t>(i) * width, width,
                    dst.values.begin() + static_cast<std::ptrdiff_t>(idx[i]) * width);
      }
    };
    blit(out["features_time"], t.val(bt.features), D);
    blit(out["features_freq"], t.val(bf.features), D);
    blit(out["proj_time"], t.val(pt), P);
    blit(out["proj_freq"], t.val(pf), P);
    blit(out["probs_time"], t.val(bt.probs), C);
    blit(out["probs_freq"], t.val(bf.probs), C);
    blit(out["probs_fused"], t.val(fused), C);
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write embeddings file " + path);
  save_param_set(os, out);
}

}  // namespace clidetail

// All subcommands; returns the process exit code (0 ok, 1 usage, 2 data or
// contract error). Factored out of main so tests can drive it in-process.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"time-frequency source-free domain adaptation toolkit"};
  app.require_subcommand(1);

  struct SubOpts {
    std::string config;
    std::uint64_t seed = 0;
  };
  auto add_common = [&](CLI::App* sub, SubOpts& o) {
    sub->add_option("--config", o.config, "flat key=value config file");
    sub->add_option("--seed", o.seed, "global seed for this run");
  };

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset directory");
  SubOpts synth_o;
  std::string synth_out, synth_domain = "source";
  bool synth_shifted = false, synth_unlabeled = false;
  synth->add_option("--out", synth_out, "output dataset directory")->required();
  synth->add_option("--domain-id", synth_domain, "domain_id recorded in meta.txt");
  synth->add_flag("--shifted", synth_shifted, "apply the configured domain shift");
  synth->add_flag("--unlabeled", synth_unlabeled, "omit labels.bin");
  add_common(synth, synth_o);

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "train a source model on a labelled dataset");
  SubOpts pre_o;
  std::string pre_source, pre_out;
  pretrain->add_option("--source", pre_source, "labelled source dataset directory")->required();
  pretrain->add_option("--out", pre_out, "output model file")->required();
  add_common(pretrain, pre_o);

  // adapt
  auto* adapt = app.add_subcommand("adapt", "adapt a source model to an unlabelled target dataset");
  SubOpts adapt_o;
  std::string adapt_model, adapt_target, adapt_out, adapt_report, adapt_eval;
  bool adapt_no_freq = false;
  adapt->add_option("--model", adapt_model, "source model file")->required();
  adapt->add_option("--target", adapt_target, "target dataset directory (labels ignored)")->required();
  adapt->add_option("--out", adapt_out, "output model file (teacher)")->required();
  adapt->add_option("--report", adapt_report, "per-epoch CSV report path");
  adapt->add_option("--eval", adapt_eval, "labelled dataset to score after each epoch");
  adapt->add_flag("--no-freq-branch", adapt_no_freq, "disable the frequency branch (ablation)");
  add_common(adapt, adapt_o);

  // eval
  auto* eval = app.add_subcommand("eval", "macro F1 of a model on a labelled dataset");
  SubOpts eval_o;
  std::string eval_model, eval_data;
  eval->add_option("--model", eval_model, "model file")->required();
  eval->add_option("--data", eval_data, "labelled dataset directory")->required();
  add_common(eval, eval_o);

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "central-difference check of the full model");
  SubOpts gc_o;
  add_common(gradcheck, gc_o);

  // bench
  auto* bench = app.add_subcommand("bench", "adaptation cost versus dataset size");
  SubOpts bench_o;
  add_common(bench, bench_o);

  // export-embeddings
  auto* exporte = app.add_subcommand("export-embeddings", "dump per-sample features and predictions");
  SubOpts exp_o;
  std::string exp_model, exp_data, exp_out;
  exporte->add_option("--model", exp_model, "model file")->required();
  exporte->add_option("--data", exp_data, "dataset directory")->required();
  exporte->add_option("--out", exp_out, "output file (parameter-record format)")->required();
  add_common(exporte, exp_o);

  std::vector<const char*> argv;
  argv.push_back("tfda");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) {
      RunConfig cfg = synth_o.config.empty() ? RunConfig{} : load_config(synth_o.config);
      ShiftSpec shift = synth_shifted ? cfg.shift() : ShiftSpec::identity();
      Dataset ds = generate_synthetic(cfg.classes, cfg.channels, cfg.length, cfg.per_class, shift, synth_o.seed,
                                      synth_domain);
      if (synth_unlabeled) ds.labels.clear();
      save_dataset(synth_out, ds);
      out << "wrote " << ds.count() << " samples to " << synth_out << "\n";
    } else if (*pretrain) {
      RunConfig cfg = pre_o.config.empty() ? RunConfig{} : load_config(pre_o.config);
      Dataset src = load_dataset(pre_source);
      Arch arch = cfg.arch();
      arch.channels = src.channels();
      arch.length = src.length();
      arch.classes = src.classes;
      DualBranchModel model = build_model(arch, pre_o.seed);
      PretrainReport rep;
      model = pretrain_source(std::move(model), src, cfg.pretrain(pre_o.seed), &rep);
      clidetail::write_model(pre_out, model);
      out << "pretrained " << cfg.pretrain_epochs << " epochs, final loss "
          << clidetail::num(rep.epoch_losses.empty() ? 0.0 : rep.epoch_losses.back()) << ", wrote " << pre_out << "\n";
    } else if (*adapt) {
      RunConfig cfg = adapt_o.config.empty() ? RunConfig{} : load_config(adapt_o.config);
      if (adapt_no_freq) cfg.freq_branch = 0;
      DualBranchModel model = clidetail::read_model(adapt_model);
      Dataset target = load_dataset(adapt_target);
      Dataset eval_ds;
      bool with_eval = !adapt_eval.empty();
      if (with_eval) {
        eval_ds = load_dataset(adapt_eval);
        if (!eval_ds.labeled()) throw Error("--eval dataset has no labels");
      }
      auto printer = [&](int epoch, const EpochLosses& l, const CurriculumState& w, double f1, double secs) {
        out << "epoch " << epoch << " total=" << clidetail::num(l.total) << " mu_r=" << clidetail::num(w.mu_r);
        if (f1 >= 0.0) out << " eval_f1=" << clidetail::fixed6(f1);
        out << " seconds=" << clidetail::fixed6(secs) << "\n";
      };
      auto [ts, rep] = run_adaptation(model, target, cfg.adapt(adapt_o.seed), with_eval ? &eval_ds : nullptr, printer);
      clidetail::write_model(adapt_out, ts.teacher);
      if (!adapt_report.empty()) clidetail::write_adapt_report(adapt_report, rep, with_eval);
      out << "adapted " << cfg.epochs << " epochs, wrote " << adapt_out << "\n";
    } else if (*eval) {
      DualBranchModel model = clidetail::read_model(eval_model);
      Dataset ds = load_dataset(eval_data);
      if (!ds.labeled()) throw Error("eval dataset has no labels");
      double f1 = eval_macro_f1(model, ds);
      out << "macro_f1=" << clidetail::fixed6(f1) << "\n";
    } else if (*gradcheck) {
      StandardCheckResult res = run_standard_grad_checks(gc_o.seed);
      out << "checked " << res.coords << " coordinates, max rel err " << clidetail::num(res.report.max_rel_err)
          << ", " << clidetail::fixed6(res.seconds) << " s\n";
      bool ok = res.report.pass(1e-4);
      out << (ok ? "PASS" : "FAIL") << " (tolerance 0.0001)\n";
      if (!ok) return 2;
    } else if (*bench) {
      RunConfig cfg = bench_o.config.empty() ? RunConfig{} : load_config(bench_o.config);
      std::vector<int> grid = parse_grid(cfg.bench_grid);
      auto rows = bench_complexity(grid, cfg.arch(), cfg.adapt(bench_o.seed), bench_o.seed);
      for (const auto& r : rows) {
        out << "n=" << r.n << " seconds=" << clidetail::fixed6(r.seconds)
            << " per_sample=" << clidetail::fixed6(r.per_sample) << "\n";
      }
      if (rows.size() >= 2) {
        double ratio = rows.back().per_sample / rows.front().per_sample;
        out << "per_sample_ratio=" << clidetail::fixed6(ratio) << " linear=" << (ratio <= 1.25 ? 1 : 0) << "\n";
      }
    } else if (*exporte) {
      DualBranchModel model = clidetail::read_model(exp_model);
      Dataset ds = load_dataset(exp_data);
      if (ds.channels() != model.arch.channels || ds.length() != model.arch.length) {
        throw Error("dataset [Ch x S] = [" + std::to_string(ds.channels()) + " x " + std::to_string(ds.length()) +
                    "] vs model [" + std::to_string(model.arch.channels) + " x " + std::to_string(model.arch.length) + "]");
      }
      clidetail::export_embeddings(exp_out, model, ds);
      out << "wrote embeddings for " << ds.count() << " samples to " << exp_out << "\n";
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace tfda
