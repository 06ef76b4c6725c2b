#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "graph_check.hpp"
#include "tfda/losses.hpp"

namespace {

using tfda::ParamSet;
using tfda::Tape;
using tfda::Tensor;
using tfda::Var;
using testutil::check_graph;
using testutil::filled;

}  // namespace

TEST_CASE("class balanced cross entropy hand value", "[losses]") {
  // One sample of the rare class (1 of 4): weight 4 / (2 * 1) = 2.
  Tensor probs({1, 2}, {0.5, 0.5});
  double got = tfda::class_balanced_ce_value(probs, {1}, {3, 1});
  REQUIRE(got == Catch::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
  // Balanced counts reduce to plain cross entropy.
  Tensor p2({2, 2}, {0.25, 0.75, 0.75, 0.25});
  double plain = tfda::class_balanced_ce_value(p2, {1, 0}, {2, 2});
  REQUIRE(plain == Catch::Approx(-std::log(0.75)).epsilon(1e-12));
}

TEST_CASE("class balanced cross entropy rejects degenerate counts", "[losses]") {
  Tensor probs({1, 2}, {0.5, 0.5});
  REQUIRE_THROWS_AS(tfda::class_balanced_ce_value(probs, {1}, {0, 0}), tfda::Error);
  REQUIRE_THROWS_AS(tfda::class_balanced_ce_value(probs, {1}, {3, 0}), tfda::Error);
}

TEST_CASE("class balanced cross entropy gradient", "[losses][gradcheck]") {
  ParamSet ps;
  ps["z"] = filled({4, 3}, 31);
  check_graph(ps, [](Tape& t, std::map<std::string, Var>& v) {
    Var p = tfda::softmax(t, v["z"]);
    return tfda::class_balanced_ce(t, p, {0, 2, 1, 2}, {1, 1, 2});
  });
}

TEST_CASE("label propagation distance hand value", "[losses]") {
  Tensor probs({1, 2}, {0.6, 0.4});
  double got = tfda::label_prop_loss_value(probs, {0});
  REQUIRE(got == Catch::Approx(std::sqrt(0.32) / 2.0).epsilon(1e-12));
}

TEST_CASE("label propagation gradient", "[losses][gradcheck]") {
  ParamSet ps;
  ps["z"] = filled({3, 3}, 32);
  check_graph(ps, [](Tape& t, std::map<std::string, Var>& v) {
    Var p = tfda::softmax(t, v["z"]);
    return tfda::label_prop_loss(t, p, {1, 0, 2});
  });
}

TEST_CASE("symmetric kl hand value", "[losses]") {
  Tensor p({1, 2}, {0.5, 0.5});
  Tensor q({1, 2}, {0.25, 0.75});
  double got = tfda::symmetric_kl_value(p, q);
  double kl_pq = 0.5 * std::log(0.5 / 0.25) + 0.5 * std::log(0.5 / 0.75);
  double kl_qp = 0.25 * std::log(0.25 / 0.5) + 0.75 * std::log(0.75 / 0.5);
  REQUIRE(kl_pq == Catch::Approx(0.143841036226).epsilon(1e-9));
  REQUIRE(kl_qp == Catch::Approx(0.130812035941).epsilon(1e-9));
  REQUIRE(got == Catch::Approx(kl_pq + kl_qp).epsilon(1e-12));
  REQUIRE(got == Catch::Approx(0.274653072167).epsilon(1e-9));
  // Identical distributions have zero divergence.
  REQUIRE(tfda::symmetric_kl_value(p, p) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("symmetric kl gradient", "[losses][gradcheck]") {
  ParamSet ps;
  ps["a"] = filled({3, 4}, 33);
  ps["b"] = filled({3, 4}, 34);
  check_graph(ps, [](Tape& t, std::map<std::string, Var>& v) {
    Var p = tfda::softmax(t, v["a"]);
    Var q = tfda::softmax(t, v["b"]);
    return tfda::symmetric_kl(t, p, q);
  });
}

TEST_CASE("sharpness objective closed forms", "[losses]") {
  // A single row always scores -1/C.
  Tensor one({1, 4}, {0.1, 0.2, 0.3, 0.4});
  REQUIRE(tfda::tsallis_sharpness_value(one) == Catch::Approx(-0.25).epsilon(1e-12));
  Tensor one3({1, 3}, {0.2, 0.5, 0.3});
  REQUIRE(tfda::tsallis_sharpness_value(one3) == Catch::Approx(-1.0 / 3.0).epsilon(1e-12));

  // Two one-hot rows on different classes.
  Tensor sharp({2, 2}, {1.0, 0.0, 0.0, 1.0});
  REQUIRE(tfda::tsallis_sharpness_value(sharp) == Catch::Approx(-1.0).epsilon(1e-12));

  // A one-hot row next to a uniform row.
  Tensor mixed({2, 2}, {1.0, 0.0, 0.5, 0.5});
  REQUIRE(tfda::tsallis_sharpness_value(mixed) == Catch::Approx(-2.0 / 3.0).epsilon(1e-12));

  // Sharper batches score lower.
  Tensor soft({2, 2}, {0.6, 0.4, 0.4, 0.6});
  REQUIRE(tfda::tsallis_sharpness_value(sharp) < tfda::tsallis_sharpness_value(soft));
}

TEST_CASE("sharpness weight matrix favors confident rows", "[losses]") {
  Tensor probs({2, 2}, {1.0, 0.0, 0.5, 0.5});
  Tensor w = tfda::tsallis_weight_matrix(probs, 2, 2);
  // Confident rows carry more weight, and crowded classes less.
  REQUIRE(w.at(0, 0) == Catch::Approx((8.0 / 7.0) / 1.5).epsilon(1e-12));
  REQUIRE(w.at(1, 0) == Catch::Approx((6.0 / 7.0) / 1.5).epsilon(1e-12));
  REQUIRE(w.at(1, 1) == Catch::Approx((6.0 / 7.0) / 0.5).epsilon(1e-12));
  // Row weights average to one over the batch.
  Tensor probs2({3, 3}, {0.7, 0.2, 0.1, 0.3, 0.4, 0.3, 0.1, 0.1, 0.8});
  Tensor w2 = tfda::tsallis_weight_matrix(probs2, 3, 3);
  std::vector<double> beta(3, 0.0);
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) beta[static_cast<std::size_t>(k)] += probs2.at(i, k);
  double eta_sum = 0.0;
  for (int i = 0; i < 3; ++i) eta_sum += w2.at(i, 0) * beta[0];
  REQUIRE(eta_sum == Catch::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("sharpness gradient with frozen weights", "[losses][gradcheck]") {
  ParamSet ps;
  ps["z"] = filled({4, 3}, 35);
  // Freeze the weight matrix at the base point; the check then measures only
  // the direct dependence on the probabilities.
  Tensor base;
  {
    Tape t;
    Var p = tfda::softmax(t, t.leaf(ps["z"]));
    base = tfda::tsallis_weight_matrix(t.val(p), 4, 3);
  }
  check_graph(ps, [base](Tape& t, std::map<std::string, Var>& v) {
    Var p = tfda::softmax(t, v["z"]);
    return tfda::tsallis_sharpness_with_weights(t, p, base);
  });
}

TEST_CASE("contrastive value closed forms", "[losses]") {
  // One negative at similarity zero, positive at similarity one.
  double l1 = tfda::info_nce_value({1.0, 0.0}, {1.0, 0.0}, {{0.0, 1.0}}, {0}, 1.0);
  REQUIRE(l1 == Catch::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));
  // Two negatives at similarity zero.
  double l2 = tfda::info_nce_value({1.0, 0.0}, {1.0, 0.0}, {{0.0, 1.0}, {0.0, -1.0}}, {0, 1}, 1.0);
  REQUIRE(l2 == Catch::Approx(std::log((std::exp(1.0) + 2.0) / std::exp(1.0))).epsilon(1e-12));
  // Empty negative set contributes exactly zero.
  double l0 = tfda::info_nce_value({1.0, 0.0}, {1.0, 0.0}, {{0.0, 1.0}}, {}, 1.0);
  REQUIRE(l0 == 0.0);
  // Excluding a same-class negative lowers the loss.
  double with_hard = tfda::info_nce_value({1.0, 0.0}, {0.9, 0.1}, {{1.0, 0.1}, {0.0, 1.0}}, {0, 1}, 0.5);
  double without = tfda::info_nce_value({1.0, 0.0}, {0.9, 0.1}, {{1.0, 0.1}, {0.0, 1.0}}, {1}, 0.5);
  REQUIRE(without < with_hard);
}

TEST_CASE("loss values match their tape forms", "[losses]") {
  Tensor probs({2, 3}, {0.5, 0.3, 0.2, 0.1, 0.6, 0.3});
  std::vector<int> labels{  0, 1 };
  std::vector<int> counts{ 1, 1, 0 };
  {
    Tape t;
    Var l = tfda::class_balanced_ce(t, t.leaf(probs), labels, counts);
    REQUIRE(t.val(l).at(0) == Catch::Approx(tfda::class_balanced_ce_value(probs, labels, counts)).epsilon(1e-14));
  }
  {
    Tape t;
    Var l = tfda::label_prop_loss(t, t.leaf(probs), labels);
    REQUIRE(t.val(l).at(0) == Catch::Approx(tfda::label_prop_loss_value(probs, labels)).epsilon(1e-14));
  }
  {
    Tape t;
    Var l = tfda::tsallis_sharpness(t, t.leaf(probs));
    REQUIRE(t.val(l).at(0) == Catch::Approx(tfda::tsallis_sharpness_value(probs)).epsilon(1e-14));
  }
}
