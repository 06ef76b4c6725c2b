#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "graph_check.hpp"
#include "tfda/data.hpp"
#include "tfda/model.hpp"

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

}  // namespace

TEST_CASE("prediction fusion hand values", "[model]") {
  tfda::Tensor pt({1, 2}, {0.7, 0.3});
  tfda::Tensor pf({1, 2}, {0.6, 0.4});
  tfda::Tensor fused = tfda::fuse_predictions(pt, pf);
  // alpha = 0.7 / (0.7 + 0.6) = 7/13
  double alpha = 7.0 / 13.0;
  REQUIRE(fused.at(0, 0) == Catch::Approx(alpha * 0.7 + (1 - alpha) * 0.6).epsilon(1e-12));
  REQUIRE(fused.at(0, 0) == Catch::Approx(0.6538461538).epsilon(1e-9));
  REQUIRE(fused.at(0, 1) == Catch::Approx(0.3461538462).epsilon(1e-9));
  REQUIRE(fused.at(0, 0) + fused.at(0, 1) == Catch::Approx(1.0).epsilon(1e-12));

  tfda::Tensor pt2({1, 2}, {1.0, 0.0});
  tfda::Tensor pf2({1, 2}, {0.5, 0.5});
  tfda::Tensor fused2 = tfda::fuse_predictions(pt2, pf2);
  // alpha = 1 / 1.5: the confident branch dominates.
  REQUIRE(fused2.at(0, 0) == Catch::Approx(5.0 / 6.0).epsilon(1e-12));
  REQUIRE(fused2.at(0, 1) == Catch::Approx(1.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("fusion gradient", "[model][gradcheck]") {
  tfda::ParamSet ps;
  ps["a"] = testutil::filled({3, 4}, 41);
  ps["b"] = testutil::filled({3, 4}, 42);
  testutil::check_graph(ps, [](tfda::Tape& t, std::map<std::string, tfda::Var>& v) {
    tfda::Var pt = tfda::softmax(t, v["a"]);
    tfda::Var pf = tfda::softmax(t, v["b"]);
    tfda::Var f = tfda::fuse_tape(t, pt, pf);
    return tfda::sum(t, tfda::mul(t, f, f));
  });
}

TEST_CASE("model construction is deterministic and complete", "[model]") {
  tfda::Arch arch = tiny_arch();
  tfda::DualBranchModel m1 = tfda::build_model(arch, 5);
  tfda::DualBranchModel m2 = tfda::build_model(arch, 5);
  tfda::DualBranchModel m3 = tfda::build_model(arch, 6);
  REQUIRE(m1.params.size() == m2.params.size());
  bool all_equal = true, any_diff_seed = false;
  for (const auto& [k, v] : m1.params) {
    REQUIRE(m2.params.count(k) == 1);
    all_equal = all_equal && (v.values == m2.params.at(k).values);
    if (tfda::is_trainable(k)) any_diff_seed = any_diff_seed || (v.values != m3.params.at(k).values);
  }
  REQUIRE(all_equal);
  REQUIRE(any_diff_seed);
  // Both branches, three conv blocks, head, two projectors.
  for (const std::string& name :
       {"time.conv1.weight", "time.bn3.running_var", "freq.conv2.bias", "time.head.weight", "freq.head.bias",
        "proj_time.fc1.weight", "proj_freq.fc2.bias"}) {
    REQUIRE(m1.params.count(name) == 1);
  }
  REQUIRE(m1.params.at("time.head.weight").shape == tfda::Shape{arch.feature_dim(), arch.classes});
}

TEST_CASE("forward pass shapes and probability rows", "[model]") {
  tfda::Arch arch = tiny_arch();
  tfda::DualBranchModel model = tfda::build_model(arch, 1);
  tfda::Dataset ds = tfda::generate_synthetic(3, 2, 32, 2, tfda::ShiftSpec::identity(), 2);
  tfda::Prediction p = tfda::predict(model, ds.samples);
  REQUIRE(p.fused.shape == tfda::Shape{6, 3});
  REQUIRE(p.features_time.shape == tfda::Shape{6, arch.feature_dim()});
  for (int i = 0; i < 6; ++i) {
    double st = 0.0, sf = 0.0, su = 0.0;
    for (int c = 0; c < 3; ++c) {
      st += p.probs_time.at(i, c);
      sf += p.probs_freq.at(i, c);
      su += p.fused.at(i, c);
      REQUIRE(p.fused.at(i, c) >= 0.0);
    }
    REQUIRE(st == Catch::Approx(1.0).epsilon(1e-9));
    REQUIRE(sf == Catch::Approx(1.0).epsilon(1e-9));
    REQUIRE(su == Catch::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("eval forward treats rows independently", "[model]") {
  tfda::Arch arch = tiny_arch();
  tfda::DualBranchModel model = tfda::build_model(arch, 3);
  tfda::Dataset ds = tfda::generate_synthetic(3, 2, 32, 2, tfda::ShiftSpec::identity(), 4);
  tfda::Prediction all = tfda::predict(model, ds.samples);
  tfda::Tensor one = tfda::gather_samples(ds.samples, {3});
  tfda::Prediction single = tfda::predict(model, one);
  for (int c = 0; c < 3; ++c) {
    REQUIRE(single.fused.at(0, c) == Catch::Approx(all.fused.at(3, c)).epsilon(1e-12));
  }
}

TEST_CASE("argmax breaks ties toward the lower index", "[model]") {
  tfda::Tensor p({2, 3}, {0.4, 0.4, 0.2, 0.1, 0.2, 0.7});
  REQUIRE(tfda::argmax_rows(p) == std::vector<int>{0, 2});
}

TEST_CASE("teacher tracking follows the closed form", "[model]") {
  tfda::Arch arch = tiny_arch();
  tfda::TeacherStudent ts;
  ts.teacher = tfda::build_model(arch, 7);
  ts.student = tfda::build_model(arch, 8);
  ts.alpha = 0.9;
  // Separate the running statistics so their tracking is observable.
  for (auto& v : ts.student.params.at("time.bn1.running_var").values) v += 0.5;
  // After k steps against a fixed student: th_k = a^k th_0 + (1 - a^k) st.
  tfda::DualBranchModel th0 = ts.teacher;
  int k = 5;
  for (int i = 0; i < k; ++i) tfda::ema_update_inplace(ts.teacher, ts.student, ts.alpha);
  double ak = std::pow(0.9, k);
  double worst = 0.0;
  for (const auto& [name, v] : ts.teacher.params) {
    const auto& t0 = th0.params.at(name).values;
    const auto& st = ts.student.params.at(name).values;
    for (std::size_t i = 0; i < v.values.size(); ++i) {
      double want = ak * t0[i] + (1.0 - ak) * st[i];
      worst = std::max(worst, std::abs(v.values[i] - want));
    }
  }
  REQUIRE(worst <= 1e-9);
  // Running statistics are tracked too.
  const auto& rv = ts.teacher.params.at("time.bn1.running_var").values;
  const auto& rv0 = th0.params.at("time.bn1.running_var").values;
  for (std::size_t i = 0; i < rv.size(); ++i) {
    REQUIRE(rv[i] == Catch::Approx(ak * rv0[i] + (1.0 - ak) * (rv0[i] + 0.5)).epsilon(1e-12));
  }
}

TEST_CASE("model files round trip byte for byte", "[model]") {
  tfda::Arch arch = tiny_arch();
  tfda::DualBranchModel m = tfda::build_model(arch, 9);
  std::stringstream buf;
  tfda::save_model(buf, m);
  tfda::DualBranchModel back = tfda::load_model(buf);
  REQUIRE(back.arch.channels == arch.channels);
  REQUIRE(back.arch.filters == arch.filters);
  REQUIRE(back.params.size() == m.params.size());
  for (const auto& [k, v] : m.params) REQUIRE(back.params.at(k).values == v.values);
  std::stringstream buf2, buf3;
  tfda::save_model(buf2, back);
  tfda::save_model(buf3, m);
  REQUIRE(buf2.str() == buf3.str());
}

TEST_CASE("model loader rejects corrupt headers", "[model]") {
  tfda::DualBranchModel m = tfda::build_model(tiny_arch(), 10);
  std::stringstream buf;
  tfda::save_model(buf, m);
  std::string bytes = buf.str();
  std::stringstream bad(bytes.substr(0, 16));
  REQUIRE_THROWS_AS(tfda::load_model(bad), tfda::Error);
}

TEST_CASE("source pretraining drives the loss down", "[model][slow]") {
  tfda::Arch arch = tiny_arch();
  tfda::Dataset src = tfda::generate_synthetic(3, 2, 32, 8, tfda::ShiftSpec::identity(), 11);
  tfda::DualBranchModel model = tfda::build_model(arch, 11);
  tfda::PretrainConfig cfg;
  cfg.epochs = 15;
  cfg.batch_size = 8;
  cfg.lr = 3e-3;
  cfg.seed = 11;
  cfg.adam.lr = 3e-3;
  tfda::PretrainReport rep;
  model = tfda::pretrain_source(std::move(model), src, cfg, &rep);
  REQUIRE(rep.epoch_losses.size() == 15);
  REQUIRE(rep.epoch_losses.back() < rep.epoch_losses.front());
  // The pretrained model should fit its own training data.
  tfda::Prediction p = tfda::predict(model, src.samples);
  std::vector<int> yhat = tfda::argmax_rows(p.fused);
  int hits = 0;
  for (int i = 0; i < src.count(); ++i) hits += yhat[static_cast<std::size_t>(i)] == src.labels[static_cast<std::size_t>(i)];
  REQUIRE(hits >= src.count() * 3 / 4);
}

TEST_CASE("pretraining is deterministic", "[model][slow]") {
  tfda::Arch arch = tiny_arch();
  tfda::Dataset src = tfda::generate_synthetic(3, 2, 32, 4, tfda::ShiftSpec::identity(), 12);
  tfda::PretrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 6;
  cfg.seed = 12;
  tfda::DualBranchModel a = tfda::pretrain_source(tfda::build_model(arch, 12), src, cfg);
  tfda::DualBranchModel b = tfda::pretrain_source(tfda::build_model(arch, 12), src, cfg);
  for (const auto& [k, v] : a.params) REQUIRE(b.params.at(k).values == v.values);
}
