#include <doctest.h>

#include <cmath>
#include <random>

#include <lap/gradcheck.hpp>
#include <lap/ops.hpp>
#include <lap/tape.hpp>
#include <lap/tensor.hpp>

#include "oracles.hpp"

using namespace lap;

TEST_CASE("tensor shape bookkeeping") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.at({1, 2}) == 1.5);
  CHECK_THROWS_AS(t.at({2, 0}), std::out_of_range);
  CHECK_THROWS_AS(t.at({0}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), ShapeError);
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});

  const Tensor s = Tensor::scalar(4.0);
  CHECK(s.rank() == 0);
  CHECK(s.item() == 4.0);
  CHECK_THROWS_AS(t.item(), ShapeError);

  Tensor rows({3, 2}, {1, 2, 3, 4, 5, 6});
  CHECK(rows.slice_rows(1, 3) == Tensor({2, 2}, {3, 4, 5, 6}));
  CHECK_THROWS_AS(rows.slice_rows(2, 4), ShapeError);
}

TEST_CASE("tensor arithmetic rejects mismatched shapes") {
  Tensor a({2}, {1, 2}), b({2}, {3, 5});
  CHECK((a + b) == Tensor({2}, {4, 7}));
  CHECK((b - a) == Tensor({2}, {2, 3}));
  CHECK((2.0 * a) == Tensor({2}, {2, 4}));
  CHECK_THROWS_AS(a += Tensor({3}), ShapeError);
  Tensor bad({1}, {std::nan("")});
  CHECK_FALSE(bad.all_finite());
  CHECK_THROWS_AS(require_finite(bad, "x"), NumericError);
}

TEST_CASE("backward of a quadratic is 2x") {
  std::mt19937_64 rng(1);
  const Tensor x = oracle::random_tensor({1, 5}, rng);
  Tape tape;
  const NodeId p = tape.parameter(0, x);
  const auto g = tape.backward(ops::row_sq_norm_mean(tape, p));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(g[0][i] == doctest::Approx(2.0 * x[i]).epsilon(1e-15));
}

TEST_CASE("disconnected leaf gets an exact zero gradient") {
  Tape tape;
  const NodeId a = tape.parameter(0, Tensor({1, 2}, {1.0, 2.0}));
  const NodeId b = tape.parameter(1, Tensor({1, 2}, {3.0, 4.0}));
  (void)b;
  const auto g = tape.backward(ops::row_sq_norm_mean(tape, a));
  REQUIRE(g.has(1));
  CHECK(g[1] == Tensor({1, 2}, 0.0));
}

TEST_CASE("backward requires a scalar and leaves the tape reusable") {
  Tape tape;
  const NodeId a = tape.parameter(0, Tensor({2, 2}, {1, -2, 3, -4}));
  const NodeId r = ops::relu(tape, a);
  CHECK_THROWS_AS(tape.backward(r), ShapeError);
  const NodeId loss = ops::row_sq_norm_mean(tape, r);
  const auto g1 = tape.backward(loss);
  const auto g2 = tape.backward(loss);
  CHECK(g1[0] == g2[0]);
  CHECK(tape.size() == 3);
}

TEST_CASE("affine matches a naive matmul and its gradient") {
  std::mt19937_64 rng(2);
  const Tensor x = oracle::random_tensor({4, 3}, rng);
  const Tensor w = oracle::random_tensor({3, 5}, rng);
  const Tensor b = oracle::random_tensor({5}, rng);
  Tape tape;
  const NodeId y = ops::affine(tape, tape.parameter(0, x), tape.parameter(1, w), tape.parameter(2, b));
  const Tensor expect = oracle::matmul_bias(x, w, b);
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(tape.value(y)[i] == doctest::Approx(expect[i]).epsilon(1e-14));

  const auto grads = tape.backward(ops::row_sq_norm_mean(tape, y));
  auto f_w = [&](const Tensor& wv) {
    const Tensor out = oracle::matmul_bias(x, wv, b);
    double s = 0.0;
    for (double v : out.data()) s += v * v;
    return s / 4.0;
  };
  CHECK(oracle::max_rel_error(grads[1], oracle::numeric_gradient(f_w, w)) < 1e-7);

  Tape bad;
  CHECK_THROWS_WITH_AS(ops::affine(bad, bad.constant(Tensor({2, 3})), bad.constant(Tensor({4, 2})),
                                   bad.constant(Tensor({2}))),
                       doctest::Contains("[2,3]"), ShapeError);
}

TEST_CASE("conv2d agrees with a six-loop correlation") {
  std::mt19937_64 rng(3);
  for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 1}, {1, 0}}) {
    const Tensor x = oracle::random_tensor({2, 3, 8, 8}, rng);
    const Tensor k = oracle::random_tensor({4, 3, 3, 3}, rng);
    Tape tape;
    const NodeId y = ops::conv2d(tape, tape.constant(x), tape.constant(k), {stride, pad});
    const Tensor expect = oracle::conv_six_loop(x, k, stride, pad);
    REQUIRE(tape.value(y).shape() == expect.shape());
    for (std::size_t i = 0; i < expect.size(); ++i)
      CHECK(tape.value(y)[i] == doctest::Approx(expect[i]).epsilon(1e-13));
    const Tensor direct = conv2d_direct(x, k, {stride, pad});
    for (std::size_t i = 0; i < expect.size(); ++i)
      CHECK(direct[i] == doctest::Approx(expect[i]).epsilon(1e-13));
  }
}

TEST_CASE("1x1 unit kernel is the identity") {
  std::mt19937_64 rng(11);
  const Tensor x = oracle::random_tensor({2, 1, 5, 5}, rng);
  Tape tape;
  const NodeId y = ops::conv2d(tape, tape.constant(x), tape.constant(Tensor({1, 1, 1, 1}, 1.0)), {});
  CHECK(tape.value(y) == x);
}

TEST_CASE("conv2d gradients against finite differences") {
  std::mt19937_64 rng(4);
  const Tensor x = oracle::random_tensor({2, 2, 5, 5}, rng);
  const Tensor k = oracle::random_tensor({3, 2, 3, 3}, rng);
  Tape tape;
  const NodeId y = ops::conv2d(tape, tape.parameter(0, x), tape.parameter(1, k), {2, 1});
  const auto g = tape.backward(ops::row_sq_norm_mean(tape, y));
  auto loss = [](const Tensor& out) {
    double s = 0.0;
    for (double v : out.data()) s += v * v;
    return s / static_cast<double>(out.dim(0));
  };
  CHECK(oracle::max_rel_error(g[0], oracle::numeric_gradient(
                                        [&](const Tensor& xv) { return loss(oracle::conv_six_loop(xv, k, 2, 1)); }, x)) < 1e-7);
  CHECK(oracle::max_rel_error(g[1], oracle::numeric_gradient(
                                        [&](const Tensor& kv) { return loss(oracle::conv_six_loop(x, kv, 2, 1)); }, k)) < 1e-7);
}

TEST_CASE("conv2d rejects malformed input") {
  Tape tape;
  const NodeId x = tape.constant(Tensor({1, 2, 5, 5}));
  CHECK_THROWS_AS(ops::conv2d(tape, x, tape.constant(Tensor({1, 3, 3, 3})), {}), ShapeError);
  CHECK_THROWS_AS(ops::conv2d(tape, x, tape.constant(Tensor({1, 2, 2, 2})), {}), ShapeError);
  CHECK_THROWS_AS(conv_output_extent(2, 5, {1, 1}), ShapeError);
  CHECK_THROWS_AS(conv_output_extent(8, 3, {0, 1}), ShapeError);
  CHECK(conv_output_extent(28, 3, {2, 1}) == 14);
  CHECK(conv_output_extent(8, 3, {2, 1}) == 4);
}

TEST_CASE("softmax cross entropy matches log-sum-exp and stays finite for huge logits") {
  std::mt19937_64 rng(5);
  const Tensor z = oracle::random_tensor({3, 4}, rng, -3, 3);
  const std::vector<int> labels{0, 3, 1};
  Tape tape;
  const NodeId loss = ops::softmax_cross_entropy(tape, tape.parameter(0, z), labels);
  CHECK(tape.value(loss).item() == doctest::Approx(oracle::cross_entropy(z, labels)).epsilon(1e-14));
  const auto g = tape.backward(loss);
  const Tensor fd =
      oracle::numeric_gradient([&](const Tensor& zv) { return oracle::cross_entropy(zv, labels); }, z);
  CHECK(oracle::max_rel_error(g[0], fd) < 1e-7);

  Tape big;
  const NodeId l2 = ops::softmax_cross_entropy(big, big.constant(Tensor({1, 2}, {1000.0, 0.0})),
                                               std::vector<int>{1});
  CHECK(big.value(l2).item() == doctest::Approx(1000.0));

  Tape bad;
  CHECK_THROWS_AS(ops::softmax_cross_entropy(bad, bad.constant(Tensor({1, 2})), std::vector<int>{2}),
                  std::out_of_range);
}

TEST_CASE("relu derivative at exactly zero is zero") {
  Tape tape;
  const NodeId x = tape.parameter(0, Tensor({1, 3}, {-1.0, 0.0, 2.0}));
  const auto g = tape.backward(ops::row_sq_norm_mean(tape, ops::add(tape, ops::relu(tape, x), x)));
  // d/dx (relu(x) + x)^2 = 2 (relu(x) + x) (relu'(x) + 1)
  CHECK(g[0][0] == doctest::Approx(-2.0));
  CHECK(g[0][1] == 0.0);
  CHECK(g[0][2] == doctest::Approx(2.0 * 4.0 * 2.0));
}

TEST_CASE("batch norm train statistics and running averages") {
  Tensor x({4, 2}, {1, 10, 2, 20, 3, 30, 6, 40});
  BatchNormState st(2);
  Tape tape;
  const NodeId y = ops::batch_norm(tape, tape.constant(x), tape.constant(Tensor({2}, 1.0)),
                                   tape.constant(Tensor({2}, 0.0)), st, Mode::train);
  // channel 0: mean 3, biased var 3.5, unbiased 14/3
  for (std::size_t b = 0; b < 4; ++b)
    CHECK(tape.value(y)[b * 2] == doctest::Approx((x[b * 2] - 3.0) / std::sqrt(3.5 + 1e-5)));
  CHECK(st.running_mean[0] == doctest::Approx(0.3));
  CHECK(st.running_var[0] == doctest::Approx(0.9 + 0.1 * 14.0 / 3.0));

  Tape eval;
  const NodeId ye = ops::batch_norm(eval, eval.constant(x), eval.constant(Tensor({2}, 1.0)),
                                    eval.constant(Tensor({2}, 0.0)), st, Mode::eval);
  CHECK(eval.value(ye)[0] == doctest::Approx((1.0 - st.running_mean[0]) /
                                             std::sqrt(st.running_var[0] + 1e-5)));

  BatchNormState frozen(2);
  Tape nu;
  ops::batch_norm(nu, nu.constant(x), nu.constant(Tensor({2}, 1.0)), nu.constant(Tensor({2}, 0.0)),
                  frozen, Mode::train, false);
  CHECK(frozen.running_mean == Tensor({2}, 0.0));

  Tape one;
  CHECK_THROWS_AS(ops::batch_norm(one, one.constant(Tensor({1, 2})), one.constant(Tensor({2}, 1.0)),
                                  one.constant(Tensor({2}, 0.0)), st, Mode::train),
                  ShapeError);
}

TEST_CASE("every primitive passes grad_check at a random non-kink point") {
  std::mt19937_64 rng(6);
  Tensor x = oracle::random_tensor({3, 2, 4, 4}, rng);
  Tensor k = oracle::random_tensor({2, 2, 3, 3}, rng);
  Tensor gamma = oracle::random_tensor({2}, rng, 0.5, 1.5);
  Tensor beta = oracle::random_tensor({2}, rng);
  Tensor w = oracle::random_tensor({32, 3}, rng);
  Tensor b = oracle::random_tensor({3}, rng);
  BatchNormState st(2);
  const std::vector<int> labels{2, 0, 1};
  std::vector<Tensor*> leaves{&x, &k, &gamma, &beta, &w, &b};
  TapeFn f = [&](Tape& tape) {
    NodeId h = ops::conv2d(tape, tape.parameter(0, x), tape.parameter(1, k), {1, 1});
    h = ops::batch_norm(tape, h, tape.parameter(2, gamma), tape.parameter(3, beta), st, Mode::train,
                        false);
    h = ops::relu(tape, h);
    const NodeId flat = ops::reshape(tape, h, {3, 32});
    const NodeId z = ops::affine(tape, flat, tape.parameter(4, w), tape.parameter(5, b));
    return ops::add(tape, ops::softmax_cross_entropy(tape, z, labels),
                    ops::scale(tape, ops::row_sq_norm_mean(tape, flat), 0.3));
  };
  const auto r = grad_check(f, leaves);
  CHECK(r.kink_crossings == 0);
  CHECK(r.coordinates == x.size() + k.size() + gamma.size() + beta.size() + w.size() + b.size());
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("grad_check on an affine-only function and the zero function") {
  std::mt19937_64 rng(7);
  Tensor w = oracle::random_tensor({3, 2}, rng);
  Tensor b = oracle::random_tensor({2}, rng);
  const Tensor x = oracle::random_tensor({4, 3}, rng);
  std::vector<Tensor*> leaves{&w, &b};
  TapeFn affine = [&](Tape& tape) {
    return ops::row_sq_norm_mean(
        tape, ops::affine(tape, tape.constant(x), tape.parameter(0, w), tape.parameter(1, b)));
  };
  CHECK(grad_check(affine, leaves).max_rel_error < 1e-7);

  TapeFn zero = [&](Tape& tape) {
    tape.parameter(0, w);
    tape.parameter(1, b);
    return tape.constant(Tensor::scalar(0.0));
  };
  CHECK(grad_check(zero, leaves).max_rel_error == 0.0);

  CHECK_THROWS_AS(grad_check(zero, leaves, {0.0}), std::invalid_argument);
  const Tensor w_before = w;
  grad_check(affine, leaves);
  CHECK(w == w_before);
}

TEST_CASE("grad_check leaves out coordinates whose step straddles a ReLU kink") {
  Tensor x({3}, {0.5, 3e-6, -0.7});
  std::vector<Tensor*> leaves{&x};
  TapeFn f = [&](Tape& tape) {
    return ops::row_sq_norm_mean(tape, ops::relu(tape, ops::reshape(tape, tape.parameter(0, x), {1, 3})));
  };
  const auto skipped = grad_check(f, leaves);
  CHECK(skipped.kink_crossings == 1);
  CHECK(skipped.coordinates == 2);
  CHECK(skipped.max_rel_error < 1e-9);

  GradCheckOptions raw;
  raw.skip_kinks = false;
  const auto naive = grad_check(f, leaves, raw);
  CHECK(naive.coordinates == 3);
  CHECK(naive.worst_index == 1);
  CHECK(naive.max_rel_error > 0.1);
}

TEST_CASE("grad_check samples a seeded subset above the coordinate cap") {
  std::mt19937_64 rng(8);
  Tensor w = oracle::random_tensor({50, 50}, rng);
  std::vector<Tensor*> leaves{&w};
  TapeFn f = [&](Tape& tape) { return ops::row_sq_norm_mean(tape, tape.parameter(0, w)); };
  const auto a = grad_check(f, leaves, {1e-5, 100, 3});
  const auto b = grad_check(f, leaves, {1e-5, 100, 3});
  CHECK(a.coordinates == 100);
  CHECK(a.max_rel_error == b.max_rel_error);
  CHECK(a.worst_index == b.worst_index);

  Tensor small = oracle::random_tensor({2}, rng);
  std::vector<Tensor*> two{&w, &small};
  TapeFn g = [&](Tape& tape) {
    return ops::add(tape, ops::row_sq_norm_mean(tape, tape.parameter(0, w)),
                    ops::row_sq_norm_mean(tape, tape.parameter(1, small)));
  };
  CHECK(grad_check(g, two, {1e-5, 100, 3}).coordinates == 100 + 2);
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(9);
  const Tensor x = oracle::random_tensor({3, 4}, rng);
  const Tensor w = oracle::random_tensor({4, 2}, rng);
  const Tensor b = oracle::random_tensor({2}, rng);
  const std::vector<int> labels{1, 0, 1};
  Tape tape;
  const NodeId z = ops::affine(tape, tape.constant(x), tape.parameter(0, w), tape.parameter(1, b));
  const NodeId l1 = ops::softmax_cross_entropy(tape, z, labels);
  const NodeId l2 = ops::row_sq_norm_mean(tape, z);
  const NodeId combo = ops::add(tape, ops::scale(tape, l1, 0.7), ops::scale(tape, l2, -1.3));
  const auto g1 = tape.backward(l1), g2 = tape.backward(l2), gc = tape.backward(combo);
  for (std::size_t i = 0; i < w.size(); ++i)
    CHECK(std::abs(gc[0][i] - (0.7 * g1[0][i] - 1.3 * g2[0][i])) < 1e-12);
}

TEST_CASE("identical tapes give bit-identical values and gradients") {
  std::mt19937_64 rng(10);
  const Tensor x = oracle::random_tensor({2, 1, 6, 6}, rng);
  const Tensor k = oracle::random_tensor({3, 1, 3, 3}, rng);
  auto run = [&] {
    Tape tape;
    const NodeId y = ops::conv2d(tape, tape.constant(x), tape.parameter(0, k), {2, 1});
    const NodeId l = ops::row_sq_norm_mean(tape, ops::relu(tape, y));
    return std::pair{tape.value(l).item(), tape.backward(l)[0]};
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("non-finite values are rejected when recorded") {
  Tape tape;
  CHECK_THROWS_AS(tape.constant(Tensor({1}, {INFINITY})), NumericError);
  const NodeId big = tape.constant(Tensor({1, 1}, {1e200}));
  CHECK_THROWS_AS(ops::row_sq_norm_mean(tape, big), NumericError);
}
