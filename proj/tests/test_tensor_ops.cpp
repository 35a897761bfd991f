#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "ipslt/ops.hpp"
#include "ipslt/tensor.hpp"

using namespace ipslt;

using Tf = Tensor<float>;
using Td = Tensor<double>;

TEST_CASE("tensor basics and invariants") {
  Tf t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.shape() == std::vector<int>{2, 3});
  CHECK(t.shape_str() == "[2x3]");
  CHECK_THROWS_AS(Tf({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tf({2, 2}, {1.f, 2.f, 3.f}), ShapeError);
  Tf s = Tf::scalar(4.f);
  CHECK(s.scalar_value() == 4.f);
  CHECK_THROWS_AS(t.scalar_value(), UsageError);
}

TEST_CASE("copies alias, clone and detach do not") {
  Tf a({2}, {1.f, 2.f});
  Tf alias = a;
  alias.at(0) = 9.f;
  CHECK(a.at(0) == 9.f);
  Tf c = a.clone();
  c.at(0) = 1.f;
  CHECK(a.at(0) == 9.f);
  a.set_requires_grad(true);
  CHECK_FALSE(a.detach().requires_grad());
}

TEST_CASE("matmul identity and selection examples") {
  Td eye({2, 2}, {1, 0, 0, 1});
  Td m({2, 2}, {1, 2, 3, 4});
  Td r = matmul<double>(nullptr, eye, m);
  CHECK(r.values() == m.values());

  Td sel({1, 2}, {1, 0});
  Td col({2, 1}, {5, 7});
  Td picked = matmul<double>(nullptr, sel, col);
  CHECK(picked.size() == 1);
  CHECK(picked.scalar_value() == 5.0);
}

TEST_CASE("matmul hand example and shape errors name both shapes") {
  Td a({2, 2}, {1, 2, 3, 4});
  Td b({2, 2}, {2, 0, 1, 2});
  Td c = matmul<double>(nullptr, a, b);
  CHECK(c.values() == std::vector<double>{4, 4, 10, 8});

  Td bad({3, 2});
  try {
    matmul<double>(nullptr, a, bad);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x2]") != std::string::npos);
    CHECK(msg.find("[3x2]") != std::string::npos);
  }
}

TEST_CASE("softmax frozen examples") {
  Td z({1, 2}, {0, 0});
  auto y = softmax<double>(nullptr, z);
  CHECK(y.at(0, 0) == doctest::Approx(0.5));
  CHECK(y.at(0, 1) == doctest::Approx(0.5));

  Td hot({1, 2}, {1000, 0});
  auto ys = softmax<double>(nullptr, hot);
  CHECK(ys.at(0, 0) == doctest::Approx(1.0));
  CHECK(ys.at(0, 1) == doctest::Approx(0.0));
  CHECK(std::isfinite(ys.at(0, 0)));

  Td x({1, 3}, {1, 2, 3});
  auto yy = softmax<double>(nullptr, x);
  CHECK(yy.at(0, 0) == doctest::Approx(0.0900305731704).epsilon(1e-9));
  CHECK(yy.at(0, 1) == doctest::Approx(0.244728471055).epsilon(1e-9));
  CHECK(yy.at(0, 2) == doctest::Approx(0.665240955775).epsilon(1e-9));
}

TEST_CASE("softmax rows sum to one and shifts cancel") {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    Td x({3, 5});
    for (auto& v : x.values()) v = rng.normal() * 3.0;
    auto y = softmax<double>(nullptr, x);
    for (int i = 0; i < 3; ++i) {
      double s = 0;
      for (int j = 0; j < 5; ++j) {
        s += y.at(i, j);
        CHECK(y.at(i, j) >= 0.0);
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    Td shifted = x.clone();
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 5; ++j) shifted.at(i, j) += 7.25;
    }
    auto y2 = softmax<double>(nullptr, shifted);
    for (std::size_t i = 0; i < y.size(); ++i) {
      CHECK(y2.values()[i] == doctest::Approx(y.values()[i]).epsilon(1e-9));
    }
  }
}

TEST_CASE("softmax rejects NaN input") {
  Td x({1, 2}, {std::numeric_limits<double>::quiet_NaN(), 0.0});
  CHECK_THROWS_AS(softmax<double>(nullptr, x), NumericError);
}

TEST_CASE("softmax along axis 0 matches transposed last-axis result") {
  Td x({2, 3}, {1, 4, 2, 3, 0, 5});
  auto y0 = softmax<double>(nullptr, x, 0);
  auto xt = transpose<double>(nullptr, x);
  auto yt = softmax<double>(nullptr, xt, -1);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 3; ++j) {
      CHECK(y0.at(i, j) == doctest::Approx(yt.at(j, i)).epsilon(1e-12));
    }
  }
}

TEST_CASE("layer_norm frozen examples") {
  Td gain({3}, {1, 1, 1});
  Td bias({3}, {0, 0, 0});

  Td constant({1, 3}, {4, 4, 4});
  auto y = layer_norm<double>(nullptr, constant, gain, bias);
  for (int j = 0; j < 3; ++j) CHECK(y.at(0, j) == doctest::Approx(0.0));

  Td pair2({1, 2}, {1, -1});
  Td g2({2}, {1, 1}), b2({2}, {0, 0});
  auto y2 = layer_norm<double>(nullptr, pair2, g2, b2, 1e-12);
  CHECK(y2.at(0, 0) == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(y2.at(0, 1) == doctest::Approx(-1.0).epsilon(1e-5));

  Td x({1, 3}, {0, 2, 4});
  auto y3 = layer_norm<double>(nullptr, x, gain, bias, 1e-12);
  CHECK(y3.at(0, 0) == doctest::Approx(-1.22474487139).epsilon(1e-7));
  CHECK(y3.at(0, 1) == doctest::Approx(0.0));
  CHECK(y3.at(0, 2) == doctest::Approx(1.22474487139).epsilon(1e-7));
}

TEST_CASE("layer_norm is invariant to constant shifts") {
  Rng rng(31);
  Td gain({4}, {1, 1, 1, 1});
  Td bias({4}, {0, 0, 0, 0});
  Td x({2, 4});
  for (auto& v : x.values()) v = rng.normal();
  auto y = layer_norm<double>(nullptr, x, gain, bias);
  Td xs = x.clone();
  for (auto& v : xs.values()) v += 3.5;
  auto y2 = layer_norm<double>(nullptr, xs, gain, bias);
  for (std::size_t i = 0; i < y.size(); ++i) {
    CHECK(y2.values()[i] == doctest::Approx(y.values()[i]).epsilon(1e-6));
  }
}

TEST_CASE("layer_norm requires at least two channels") {
  Td x({2, 1});
  Td g({1}, std::vector<double>{1.0}), b({1}, std::vector<double>{0.0});
  CHECK_THROWS_AS(layer_norm<double>(nullptr, x, g, b), UsageError);
}

TEST_CASE("cross entropy frozen examples") {
  // uniform logits over V=4 -> ln 4
  Td uniform({1, 4}, {0.3, 0.3, 0.3, 0.3});
  auto l = cross_entropy_from_logits<double>(nullptr, uniform, {2}, /*pad=*/0);
  CHECK(l.scalar_value() == doctest::Approx(1.38629436112).epsilon(1e-9));

  // +30 on the correct class -> ~0
  Td confident({1, 3}, {30, 0, 0});
  auto l2 = cross_entropy_from_logits<double>(nullptr, confident, {0}, 9);
  CHECK(l2.scalar_value() == doctest::Approx(0.0).epsilon(1e-9));

  // derived: -log softmax([1,2,3])[0]
  Td x({1, 3}, {1, 2, 3});
  auto l3 = cross_entropy_from_logits<double>(nullptr, x, {0}, 9);
  CHECK(l3.scalar_value() == doctest::Approx(2.40760596444).epsilon(1e-9));
}

TEST_CASE("cross entropy skips pad rows and validates targets") {
  Td x({3, 2}, {5, 0, 1, 1, 0, 5});
  auto full = cross_entropy_from_logits<double>(nullptr, x, {0, 0, 1}, -1);
  auto padded = cross_entropy_from_logits<double>(nullptr, x, {0, 7, 1}, 7);
  // row 1 dropped: mean over rows {0, 2}
  auto only02 = 0.5 * (cross_entropy_from_logits<double>(
                           nullptr, Td({1, 2}, {5, 0}), {0}, -1)
                           .scalar_value() +
                       cross_entropy_from_logits<double>(
                           nullptr, Td({1, 2}, {0, 5}), {1}, -1)
                           .scalar_value());
  CHECK(padded.scalar_value() == doctest::Approx(only02).epsilon(1e-12));
  CHECK(full.scalar_value() > padded.scalar_value());
  CHECK_THROWS_AS(
      cross_entropy_from_logits<double>(nullptr, x, {0, 5, 1}, 7), IndexError);
}

TEST_CASE("KL divergence frozen examples and direction") {
  Td a({1, 2}, {10, 0});
  Td b({1, 2}, {0, 10});
  auto zero = kl_divergence_from_logits<double>(nullptr, a, a, {false});
  CHECK(zero.scalar_value() == doctest::Approx(0.0));
  // teacher [10,0], student [0,10]: sum p log(p/q) = 10*tanh(5)
  auto kl = kl_divergence_from_logits<double>(nullptr, /*student=*/b,
                                              /*teacher=*/a, {false});
  CHECK(kl.scalar_value() == doctest::Approx(9.99909204263).epsilon(1e-9));
}

TEST_CASE("KL divergence is non-negative both ways, zero iff equal") {
  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    Td s({2, 5}), t({2, 5});
    for (auto& v : s.values()) v = rng.normal() * 2;
    for (auto& v : t.values()) v = rng.normal() * 2;
    std::vector<bool> pads{false, false};
    auto ab = kl_divergence_from_logits<double>(nullptr, s, t, pads);
    auto ba = kl_divergence_from_logits<double>(nullptr, t, s, pads);
    CHECK(ab.scalar_value() >= -1e-12);
    CHECK(ba.scalar_value() >= -1e-12);
    // equal distributions via a constant logit shift -> zero
    Td shifted = s.clone();
    for (auto& v : shifted.values()) v += 2.5;
    auto equal_kl = kl_divergence_from_logits<double>(nullptr, s, shifted, pads);
    CHECK(equal_kl.scalar_value() == doctest::Approx(0.0).epsilon(1e-10));
    // distinct distributions -> strictly positive
    if (s.values() != t.values()) CHECK(ab.scalar_value() > 0.0);
  }
}

TEST_CASE("KL rejects mismatched shapes") {
  Td s({1, 3}), t({1, 4});
  CHECK_THROWS_AS(kl_divergence_from_logits<double>(nullptr, s, t, {false}),
                  ShapeError);
}

TEST_CASE("dropout eval mode is the identity, train mode rescales") {
  Rng rng(5);
  Tf x({4, 4});
  for (auto& v : x.values()) v = 1.f;
  Tf eval_out = dropout<float>(nullptr, x, 0.4f, /*training=*/false, nullptr);
  CHECK(eval_out.values() == x.values());
  CHECK(dropout<float>(nullptr, x, 0.f, true, &rng).values() == x.values());
  CHECK_THROWS_AS(dropout<float>(nullptr, x, 0.4f, true, nullptr), UsageError);
  CHECK_THROWS_AS(dropout<float>(nullptr, x, 1.f, true, &rng), UsageError);

  // kept entries are scaled by 1/(1-p); the empirical keep rate is ~1-p
  int kept = 0, total = 0;
  for (int trial = 0; trial < 200; ++trial) {
    Tf out = dropout<float>(nullptr, x, 0.4f, true, &rng);
    for (float v : out.values()) {
      CHECK((v == 0.f || v == doctest::Approx(1.f / 0.6f)));
      kept += v != 0.f;
      ++total;
    }
  }
  CHECK(static_cast<double>(kept) / total == doctest::Approx(0.6).epsilon(0.05));
}

TEST_CASE("backward frozen examples") {
  // loss = sum(x) -> grad all ones
  {
    Tape<double> tape;
    Td x({3}, {1, 2, 3}, true);
    auto loss = sum<double>(&tape, x);
    tape.backward(loss);
    CHECK(x.grad() == std::vector<double>{1, 1, 1});
  }
  // loss = sum(x*x), x=[1,2] -> grad [2,4]
  {
    Tape<double> tape;
    Td x({2}, {1, 2}, true);
    auto loss = sum<double>(&tape, mul<double>(&tape, x, x));
    tape.backward(loss);
    CHECK(x.grad() == std::vector<double>{2, 4});
  }
  // non-scalar loss is a usage error
  {
    Tape<double> tape;
    Td x({2}, {1, 2}, true);
    auto y = mul<double>(&tape, x, x);
    CHECK_THROWS_AS(tape.backward(y), UsageError);
  }
}

TEST_CASE("attention mask rejects fully masked rows and fills -inf") {
  Td scores({2, 2}, {1, 2, 3, 4});
  AttentionMaskSpec m;
  m.rows = 2;
  m.cols = 2;
  m.allow = {1, 0, 1, 1};
  auto out = apply_attention_mask<double>(nullptr, scores, m);
  CHECK(out.at(0, 0) == 1.0);
  CHECK(std::isinf(out.at(0, 1)));
  CHECK(out.at(0, 1) < 0);

  AttentionMaskSpec dead;
  dead.rows = 2;
  dead.cols = 2;
  dead.allow = {0, 0, 1, 1};
  CHECK_THROWS_AS(apply_attention_mask<double>(nullptr, scores, dead),
                  UsageError);

  // masked softmax puts zero mass on the -inf entry
  auto sm = softmax<double>(nullptr, out);
  CHECK(sm.at(0, 0) == doctest::Approx(1.0));
  CHECK(sm.at(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("concat and slice are inverses along both axes") {
  Td a({2, 2}, {1, 2, 3, 4});
  Td b({2, 3}, {5, 6, 7, 8, 9, 10});
  auto cols = concat<double>(nullptr, {a, b}, 1);
  CHECK(cols.shape() == std::vector<int>{2, 5});
  CHECK(slice<double>(nullptr, cols, 1, 0, 2).values() == a.values());
  CHECK(slice<double>(nullptr, cols, 1, 2, 3).values() == b.values());

  Td c({1, 2}, {11, 12});
  auto rows = concat<double>(nullptr, {a, c}, 0);
  CHECK(rows.shape() == std::vector<int>{3, 2});
  CHECK(slice<double>(nullptr, rows, 0, 2, 1).values() == c.values());
  CHECK_THROWS_AS(slice<double>(nullptr, rows, 0, 2, 2), UsageError);
  CHECK_THROWS_AS(concat<double>(nullptr, {a, b}, 0), ShapeError);
}

TEST_CASE("embedding lookup gathers rows and validates ids") {
  Td table({3, 2}, {0, 1, 10, 11, 20, 21});
  auto rows = embedding_lookup<double>(nullptr, table, {2, 0, 2});
  CHECK(rows.values() == std::vector<double>{20, 21, 0, 1, 20, 21});
  CHECK_THROWS_AS(embedding_lookup<double>(nullptr, table, {3}), IndexError);
  CHECK_THROWS_AS(embedding_lookup<double>(nullptr, table, {-1}), IndexError);
}
