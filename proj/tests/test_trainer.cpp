#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "tfda/data.hpp"
#include "tfda/model.hpp"
#include "tfda/trainer.hpp"

namespace {

tfda::Arch tiny_arch() {
  tfda::Arch a;
  a.channels = 2;
  a.length = 32;
  a.classes = 3;
  a.filters = {4, 6, 6};
  a.kernel = 8;
  a.proj_dim = 8;
  return a;
}

tfda::AdaptConfig tiny_cfg() {
  tfda::AdaptConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 6;
  cfg.queue_capacity = 16;
  cfg.neighbors = 3;
  cfg.views = 2;
  cfg.lr = 1e-4;
  cfg.adam.lr = 1e-4;
  cfg.seed = 5;
  return cfg;
}

tfda::DualBranchModel quick_source_model(const tfda::Arch& arch, const tfda::Dataset& src) {
  tfda::PretrainConfig pc;
  pc.epochs = 3;
  pc.batch_size = 6;
  pc.lr = 3e-3;
  pc.adam.lr = 3e-3;
  pc.seed = 5;
  return tfda::pretrain_source(tfda::build_model(arch, 5), src, pc);
}

}  // namespace

TEST_CASE("adaptation produces finite losses and tracked weights", "[trainer][slow]") {
  tfda::Arch arch = tiny_arch();
  tfda::Dataset src = tfda::generate_synthetic(3, 2, 32, 4, tfda::ShiftSpec::identity(), 5);
  tfda::ShiftSpec shift;
  shift.freq_shift = 0.5;
  shift.noise_sigma = 0.1;
  tfda::Dataset tgt = tfda::generate_synthetic(3, 2, 32, 4, shift, 6, "target");
  tfda::DualBranchModel model = quick_source_model(arch, src);

  tfda::AdaptConfig cfg = tiny_cfg();
  auto [ts, rep] = tfda::run_adaptation(model, tgt, cfg, &tgt);

  REQUIRE(rep.losses.size() == 2);
  REQUIRE(rep.weights.size() == 2);
  REQUIRE(rep.eval_f1.size() == 2);
  REQUIRE(rep.seconds.size() == 2);
  for (const auto& l : rep.losses) {
    for (double v : {l.ce, l.lp, l.cl_time, l.cl_freq, l.cl_joint, l.cl, l.cons, l.ul, l.total}) {
      REQUIRE(std::isfinite(v));
    }
    REQUIRE(l.cl == Catch::Approx(0.5 * (l.cl_time + l.cl_freq) + 0.5 * l.cl_joint).margin(1e-9));
  }
  // The first epoch runs at the initial weights; later epochs decay them.
  // mu_r may hold at 1.0 when view uncertainty is tiny relative to confidence
  // (the stability ratio underflows the update), so it is only non-increasing.
  REQUIRE(rep.weights[0].mu_r == 1.0);
  REQUIRE(rep.weights[0].mu_c == 0.5);
  REQUIRE(rep.weights[1].mu_r <= rep.weights[0].mu_r);
  REQUIRE(rep.weights[1].mu_r > 0.0);
  REQUIRE(rep.weights[1].mu_c == Catch::Approx(0.5 * std::exp(-1e-4)).epsilon(1e-12));
  REQUIRE(rep.weights[1].mu_u == Catch::Approx(0.5 * std::exp(-1e-4)).epsilon(1e-12));
  for (double f1 : rep.eval_f1) {
    REQUIRE(f1 >= 0.0);
    REQUIRE(f1 <= 1.0);
  }
  for (const auto& [name, p] : ts.teacher.params) {
    REQUIRE(tfda::all_finite(p));
  }
}

TEST_CASE("adaptation is deterministic", "[trainer][slow]") {
  tfda::Arch arch = tiny_arch();
  tfda::Dataset src = tfda::generate_synthetic(3, 2, 32, 4, tfda::ShiftSpec::identity(), 5);
  tfda::Dataset tgt = tfda::generate_synthetic(3, 2, 32, 4, tfda::ShiftSpec::identity(), 9, "target");
  tfda::DualBranchModel model = quick_source_model(arch, src);
  tfda::AdaptConfig cfg = tiny_cfg();
  auto [ts1, rep1] = tfda::run_adaptation(model, tgt, cfg);
  auto [ts2, rep2] = tfda::run_adaptation(model, tgt, cfg);
  for (const auto& [name, p] : ts1.teacher.params) {
    REQUIRE(ts2.teacher.params.at(name).values == p.values);
  }
  for (std::size_t e = 0; e < rep1.losses.size(); ++e) {
    REQUIRE(rep1.losses[e].total == rep2.losses[e].total);
  }
  // A different seed takes a different path.
  cfg.seed = 6;
  auto [ts3, rep3] = tfda::run_adaptation(model, tgt, cfg);
  REQUIRE(rep3.losses[0].total != rep1.losses[0].total);
}

TEST_CASE("zero-epoch adaptation returns the input model unchanged", "[trainer]") {
  tfda::Arch arch = tiny_arch();
  tfda::Dataset src = tfda::generate_synthetic(3, 2, 32, 4, tfda::ShiftSpec::identity(), 5);
  tfda::Dataset tgt = tfda::generate_synthetic(3, 2, 32, 4, tfda::ShiftSpec::identity(), 9, "target");
  tfda::DualBranchModel model = quick_source_model(arch, src);
  tfda::AdaptConfig cfg = tiny_cfg();
  cfg.epochs = 0;
  auto [ts, rep] = tfda::run_adaptation(model, tgt, cfg);
  REQUIRE(rep.losses.empty());
  for (const auto& [name, p] : model.params) {
    REQUIRE(ts.teacher.params.at(name).values == p.values);
    REQUIRE(ts.student.params.at(name).values == p.values);
  }
}

TEST_CASE("teacher moves slowly behind the student", "[trainer][slow]") {
  tfda::Arch arch = tiny_arch();
  tfda::Dataset src = tfda::generate_synthetic(3, 2, 32, 4, tfda::ShiftSpec::identity(), 5);
  tfda::Dataset tgt = tfda::generate_synthetic(3, 2, 32, 4, tfda::ShiftSpec::identity(), 9, "target");
  tfda::DualBranchModel model = quick_source_model(arch, src);
  tfda::AdaptConfig cfg = tiny_cfg();
  cfg.epochs = 1;
  cfg.lr = 1e-3;
  cfg.adam.lr = 1e-3;
  auto [ts, rep] = tfda::run_adaptation(model, tgt, cfg);
  double d_teacher = 0.0, d_student = 0.0;
  for (const auto& [name, p] : model.params) {
    if (!tfda::is_trainable(name)) continue;
    const auto& th = ts.teacher.params.at(name).values;
    const auto& st = ts.student.params.at(name).values;
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      d_teacher += std::abs(th[i] - p.values[i]);
      d_student += std::abs(st[i] - p.values[i]);
    }
  }
  REQUIRE(d_student > 0.0);
  REQUIRE(d_teacher > 0.0);
  REQUIRE(d_teacher < d_student);
}

TEST_CASE("adaptation validates its inputs", "[trainer]") {
  tfda::Arch arch = tiny_arch();
  tfda::DualBranchModel model = tfda::build_model(arch, 1);
  tfda::Dataset tgt = tfda::generate_synthetic(3, 2, 32, 2, tfda::ShiftSpec::identity(), 1);
  tfda::AdaptConfig cfg = tiny_cfg();
  cfg.neighbors = 100;  // exceeds the 6-sample bank
  REQUIRE_THROWS_AS(tfda::run_adaptation(model, tgt, cfg), tfda::Error);

  tfda::Dataset wrong = tfda::generate_synthetic(3, 2, 64, 2, tfda::ShiftSpec::identity(), 1);
  REQUIRE_THROWS_AS(tfda::run_adaptation(model, wrong, tiny_cfg()), tfda::Error);

  tfda::AdaptConfig bad = tiny_cfg();
  bad.views = 1;
  REQUIRE_THROWS_AS(tfda::run_adaptation(model, tgt, bad), tfda::Error);
}

TEST_CASE("frequency branch can be disabled", "[trainer][slow]") {
  tfda::Arch arch = tiny_arch();
  tfda::Dataset src = tfda::generate_synthetic(3, 2, 32, 4, tfda::ShiftSpec::identity(), 5);
  tfda::Dataset tgt = tfda::generate_synthetic(3, 2, 32, 4, tfda::ShiftSpec::identity(), 9, "target");
  tfda::DualBranchModel model = quick_source_model(arch, src);
  tfda::AdaptConfig cfg = tiny_cfg();
  cfg.epochs = 1;
  cfg.freq_branch_enabled = false;
  auto [ts, rep] = tfda::run_adaptation(model, tgt, cfg, &tgt);
  REQUIRE(rep.losses.size() == 1);
  REQUIRE(rep.losses[0].cl_freq == 0.0);
  REQUIRE(rep.losses[0].cl_joint == 0.0);
  REQUIRE(std::isfinite(rep.losses[0].total));
  REQUIRE(rep.eval_f1[0] >= 0.0);
}

TEST_CASE("epoch callback streams progress", "[trainer][slow]") {
  tfda::Arch arch = tiny_arch();
  tfda::Dataset src = tfda::generate_synthetic(3, 2, 32, 4, tfda::ShiftSpec::identity(), 5);
  tfda::Dataset tgt = tfda::generate_synthetic(3, 2, 32, 4, tfda::ShiftSpec::identity(), 9, "target");
  tfda::DualBranchModel model = quick_source_model(arch, src);
  tfda::AdaptConfig cfg = tiny_cfg();
  std::vector<int> seen;
  tfda::run_adaptation(model, tgt, cfg, nullptr,
                       [&](int epoch, const tfda::EpochLosses&, const tfda::CurriculumState&, double f1, double) {
                         seen.push_back(epoch);
                         REQUIRE(f1 == -1.0);
                       });
  REQUIRE(seen == std::vector<int>{1, 2});
}

TEST_CASE("per-sample cost stays flat as the dataset grows", "[trainer][slow]") {
  tfda::Arch arch = tiny_arch();
  tfda::AdaptConfig cfg = tiny_cfg();
  cfg.batch_size = 8;
  auto rows = tfda::bench_complexity({24, 96}, arch, cfg, 3);
  REQUIRE(rows.size() == 2);
  REQUIRE(rows[0].n == 24);
  REQUIRE(rows[1].n == 96);
  for (const auto& r : rows) {
    REQUIRE(r.seconds > 0.0);
    REQUIRE(r.per_sample > 0.0);
  }
}
