#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "test_support.hpp"

using namespace charlm;
using charlm::testing::random_tensor;
using TD = Tensor<double>;

namespace {

constexpr double kGradTol = 1e-4;

void expect_values(const TD& t, const std::vector<double>& want, double tol = 1e-12) {
  ASSERT_EQ(t.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t.values()[i], want[i], tol) << "index " << i;
}

// Weighted sum with fixed random weights so every output coordinate gets a
// distinct upstream gradient.
TD probe(const TD& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  auto w = random_tensor<double>(y.shape(), rng, 1.0, false);
  return sum(mul(y, w));
}

}  // namespace

TEST(Tensor, ConstructionChecksShape) {
  EXPECT_THROW(TD({2, 2}, {1, 2, 3}), ShapeMismatch);
  const TD t({2, 3}, {0, 1, 2, 3, 4, 5});
  EXPECT_EQ(t.at({1, 2}), 5.0);
  EXPECT_THROW(t.at({2, 0}), IndexOutOfRange);
  EXPECT_THROW(t.at({0}), ShapeMismatch);
  EXPECT_EQ(t.dim(-1), 3u);
  EXPECT_THROW(t.dim(2), ShapeMismatch);
}

TEST(Tensor, ItemRequiresScalar) {
  EXPECT_THROW(TD::zeros({2}).item(), NotScalar);
  EXPECT_EQ(TD::scalar(4.0).item(), 4.0);
}

TEST(Tensor, DetachCutsGraph) {
  auto x = TD::scalar(2.0, true);
  const auto y = mul(x, x);
  const auto d = y.detach();
  EXPECT_TRUE(y.has_graph_link());
  EXPECT_FALSE(d.has_graph_link());
  EXPECT_FALSE(d.requires_grad());
}

TEST(Ops, SigmoidAndTanhAtZero) {
  const auto z = TD::zeros({1});
  EXPECT_DOUBLE_EQ(sigmoid(z).values()[0], 0.5);
  EXPECT_DOUBLE_EQ(charlm::tanh(z).values()[0], 0.0);
}

TEST(Ops, SigmoidDerivativeAtZero) {
  auto x = TD::zeros({1}, true);
  backward(sum(sigmoid(x)));
  EXPECT_NEAR(x.grad()[0], 0.25, 1e-15);
  const auto r = grad_check<double>([&] { return sum(sigmoid(x)); }, {x});
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(Ops, SigmoidStableAtExtremes) {
  const TD x({2}, {-800.0, 800.0});
  expect_values(sigmoid(x), {0.0, 1.0});
}

TEST(Ops, BroadcastTrailingSuffixOnly) {
  const TD a({2, 3}, {1, 2, 3, 4, 5, 6});
  const TD b({3}, {10, 20, 30});
  expect_values(add(a, b), {11, 22, 33, 14, 25, 36});
  expect_values(add(b, a), {11, 22, 33, 14, 25, 36});
  EXPECT_THROW(add(a, TD::zeros({2})), ShapeMismatch);
}

TEST(Ops, BroadcastGradientSumsOverLeadingAxes) {
  Rng rng(1);
  auto a = random_tensor<double>({2, 3}, rng);
  auto b = random_tensor<double>({3}, rng);
  for (auto op : {0, 1, 2, 3}) {
    auto f = [&] {
      switch (op) {
        case 0: return probe(add(a, b));
        case 1: return probe(sub(a, b));
        case 2: return probe(mul(a, b));
        default: return probe(div(a, add(mul(b, b), TD::scalar(1.0))));
      }
    };
    EXPECT_LT(grad_check<double>(f, {a, b}).max_rel_error, kGradTol) << "op " << op;
  }
}

TEST(Ops, UnaryGradients) {
  Rng rng(2);
  auto x = random_tensor<double>({3, 4}, rng);
  auto pos = TD({4}, {0.5, 1.5, 2.0, 3.0}, true);
  EXPECT_LT(grad_check<double>([&] { return probe(charlm::tanh(x)); }, {x}).max_rel_error, kGradTol);
  EXPECT_LT(grad_check<double>([&] { return probe(sigmoid(x)); }, {x}).max_rel_error, kGradTol);
  EXPECT_LT(grad_check<double>([&] { return probe(charlm::exp(x)); }, {x}).max_rel_error, kGradTol);
  EXPECT_LT(grad_check<double>([&] { return probe(charlm::log(pos)); }, {pos}).max_rel_error, kGradTol);
  EXPECT_LT(grad_check<double>([&] { return probe(relu(x)); }, {x}).max_rel_error, kGradTol);
  EXPECT_LT(grad_check<double>([&] { return probe(scale(x, -2.5)); }, {x}).max_rel_error, kGradTol);
  EXPECT_LT(grad_check<double>([&] { return mean(mul(x, x)); }, {x}).max_rel_error, kGradTol);
}

TEST(Ops, NonFiniteForwardFailsLoudly) {
  EXPECT_THROW(charlm::log(TD({1}, {-1.0})), NonFiniteValue);
  EXPECT_THROW(div(TD({1}, {1.0}), TD({1}, {0.0})), NonFiniteValue);
  EXPECT_THROW(charlm::exp(TD({1}, {1000.0})), NonFiniteValue);
}

TEST(Ops, ShapeOpsGradients) {
  Rng rng(3);
  auto x = random_tensor<double>({2, 3, 4}, rng);
  auto y = random_tensor<double>({2, 1, 4}, rng);
  EXPECT_LT(grad_check<double>([&] { return probe(reshape(x, {6, 4})); }, {x}).max_rel_error, kGradTol);
  EXPECT_LT(grad_check<double>([&] { return probe(permute(x, {2, 0, 1})); }, {x}).max_rel_error, kGradTol);
  EXPECT_LT(grad_check<double>([&] { return probe(transpose_last2(x)); }, {x}).max_rel_error, kGradTol);
  EXPECT_LT(grad_check<double>([&] { return probe(concat<double>({x, y}, 1)); }, {x, y}).max_rel_error, kGradTol);
  EXPECT_LT(grad_check<double>([&] { return probe(slice(x, 2, 1, 3)); }, {x}).max_rel_error, kGradTol);
  EXPECT_THROW(reshape(x, {5, 5}), ShapeMismatch);
  EXPECT_THROW(slice(x, 1, 2, 4), ShapeMismatch);
  EXPECT_THROW(concat<double>({x, y}, 2), ShapeMismatch);
}

TEST(Ops, PermuteValues) {
  const TD x({2, 3}, {0, 1, 2, 3, 4, 5});
  expect_values(permute(x, {1, 0}), {0, 3, 1, 4, 2, 5});
  expect_values(slice(x, 1, 1, 3), {1, 2, 4, 5});
  expect_values(concat<double>({x, x}, 0), {0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5});
}

TEST(Matmul, IdentityAndHandProduct) {
  const TD eye({2, 2}, {1, 0, 0, 1});
  const TD a({2, 2}, {1, 2, 3, 4});
  expect_values(matmul(eye, a), {1, 2, 3, 4});
  const TD ones({2, 1}, {1, 1});
  const auto p = matmul(a, ones);
  EXPECT_EQ(p.shape(), (Shape{2, 1}));
  expect_values(p, {3, 7});
}

TEST(Matmul, GradientCheck) {
  Rng rng(4);
  auto a = random_tensor<double>({3, 4}, rng);
  auto b = random_tensor<double>({4, 2}, rng);
  const auto r = grad_check<double>([&] { return probe(matmul(a, b)); }, {a, b});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Matmul, BatchedAndBroadcastGradients) {
  Rng rng(5);
  auto a = random_tensor<double>({2, 3, 4}, rng);
  auto b = random_tensor<double>({2, 4, 5}, rng);
  auto w = random_tensor<double>({4, 5}, rng);
  EXPECT_EQ(matmul(a, b).shape(), (Shape{2, 3, 5}));
  EXPECT_LT(grad_check<double>([&] { return probe(matmul(a, b)); }, {a, b}).max_rel_error, 1e-6);
  EXPECT_LT(grad_check<double>([&] { return probe(matmul(a, w)); }, {a, w}).max_rel_error, 1e-6);
}

TEST(Matmul, MismatchedInnerDimensionThrows) {
  EXPECT_THROW(matmul(TD::zeros({2, 3}), TD::zeros({2, 3})), ShapeMismatch);
  EXPECT_THROW(matmul(TD::zeros({3}), TD::zeros({3, 1})), ShapeMismatch);
}

TEST(Softmax, KnownValues) {
  expect_values(softmax(TD({2}, {0, 0})), {0.5, 0.5});
  expect_values(softmax(TD({3}, {std::log(1.0), std::log(2.0), std::log(3.0)})), {1.0 / 6, 2.0 / 6, 3.0 / 6}, 1e-15);
}

TEST(Softmax, ShiftInvarianceAndRowSums) {
  Rng rng(6);
  const auto x = random_tensor<double>({4, 7}, rng, 3.0, false);
  const auto shifted = add(x, TD::scalar(123.0));
  const auto a = softmax(x), b = softmax(shifted);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(a.values()[i], b.values()[i], 1e-12);
    EXPECT_GE(a.values()[i], 0.0);
    EXPECT_LE(a.values()[i], 1.0);
  }
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) s += a.at({r, c});
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, AxisAndGradient) {
  Rng rng(7);
  auto x = random_tensor<double>({3, 4, 2}, rng);
  EXPECT_LT(grad_check<double>([&] { return probe(softmax(x, 1)); }, {x}).max_rel_error, kGradTol);
  EXPECT_LT(grad_check<double>([&] { return probe(softmax(x, -1)); }, {x}).max_rel_error, kGradTol);
}

TEST(Softmax, MaskedEntriesAreExactlyZero) {
  Rng rng(8);
  auto x = random_tensor<double>({2, 3, 3}, rng);
  const auto w = masked_softmax(x, causal_mask(3));
  for (std::size_t b = 0; b < 2; ++b) {
    EXPECT_EQ(w.at({b, 0, 1}), 0.0);
    EXPECT_EQ(w.at({b, 0, 2}), 0.0);
    EXPECT_EQ(w.at({b, 1, 2}), 0.0);
    EXPECT_DOUBLE_EQ(w.at({b, 0, 0}), 1.0);
  }
  EXPECT_LT(grad_check<double>([&] { return probe(masked_softmax(x, causal_mask(3))); }, {x}).max_rel_error, kGradTol);
  EXPECT_THROW(masked_softmax(x, causal_mask(2)), ShapeMismatch);
}

TEST(Softmax, CausalMaskWithMemory) {
  const auto m = causal_mask(2, 3);  // 2 queries over 5 keys
  EXPECT_EQ(m, (std::vector<std::uint8_t>{1, 1, 1, 1, 0, 1, 1, 1, 1, 1}));
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  const auto logits = TD::zeros({2, 3, 102});
  const std::vector<std::int32_t> targets = {0, 5, 101, 7, 9, 50};
  EXPECT_NEAR(cross_entropy(logits, std::span<const std::int32_t>(targets)).item(), std::log(102.0), 1e-12);
}

TEST(CrossEntropy, HugeMarginNearZero) {
  const TD logits({1, 3}, {0.0, 60.0, 0.0});
  const std::vector<std::int32_t> t = {1};
  EXPECT_LT(cross_entropy(logits, std::span<const std::int32_t>(t)).item(), 1e-20);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHot) {
  Rng rng(9);
  auto logits = random_tensor<double>({4, 5}, rng);
  const std::vector<std::int32_t> t = {0, 4, 2, 2};
  backward(cross_entropy(logits, std::span<const std::int32_t>(t)));
  const auto p = softmax(logits.detach());
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 5; ++c) {
      const double want = (p.at({r, c}) - (static_cast<std::int32_t>(c) == t[r] ? 1.0 : 0.0)) / 4.0;
      EXPECT_NEAR(logits.grad()[r * 5 + c], want, 1e-14);
    }
  }
  const auto r = grad_check<double>([&] { return cross_entropy(logits, std::span<const std::int32_t>(t)); }, {logits});
  EXPECT_LT(r.max_rel_error, kGradTol);
}

TEST(CrossEntropy, ErrorContracts) {
  const auto logits = TD::zeros({2, 3});
  const std::vector<std::int32_t> bad = {0, 3};
  const std::vector<std::int32_t> short_t = {0};
  EXPECT_THROW(cross_entropy(logits, std::span<const std::int32_t>(bad)), IndexOutOfRange);
  EXPECT_THROW(cross_entropy(logits, std::span<const std::int32_t>(short_t)), ShapeMismatch);
}

TEST(Backward, IdentityAndFanOut) {
  auto x = TD::scalar(3.0, true);
  backward(x);
  EXPECT_EQ(x.grad()[0], 1.0);
  x.zero_grad();
  backward(add(x, x));
  EXPECT_EQ(x.grad()[0], 2.0);
}

TEST(Backward, AccumulatesAcrossCallsUntilZeroed) {
  auto x = TD::scalar(3.0, true);
  backward(mul(x, x));
  backward(mul(x, x));
  EXPECT_EQ(x.grad()[0], 12.0);
}

TEST(Backward, NonScalarThrows) { EXPECT_THROW(backward(TD::zeros({2}, true)), NotScalar); }

TEST(Backward, NoGradGuardRecordsNothing) {
  auto x = TD::scalar(3.0, true);
  NoGradGuard guard;
  const auto y = mul(x, x);
  EXPECT_FALSE(y.has_graph_link());
  EXPECT_FALSE(grad_enabled());
}

TEST(GradCheck, Quadratic) {
  auto x = TD::scalar(3.0, true);
  const auto r = grad_check<double>([&] { return mul(x, x); }, {x});
  EXPECT_NEAR(r.analytic, 6.0, 1e-12);
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, ConstantFunction) {
  auto x = TD({2}, {1.0, -4.0}, true);
  const auto r = grad_check<double>([&] { return TD::scalar(5.0); }, {x});
  EXPECT_EQ(r.max_rel_error, 0.0);
}

TEST(GradCheck, DetectsWrongGradient) {
  // A function whose backward rule is deliberately inconsistent: the value
  // path goes through x but the graph path is cut by detach.
  auto x = TD::scalar(2.0, true);
  const auto r = grad_check<double>([&] { return add(mul(x.detach(), x.detach()), x); }, {x});
  EXPECT_GT(r.max_rel_error, 0.5);
}

TEST(LayerNorm, NormalizesRowsAndChecksGradient) {
  Rng rng(10);
  auto x = random_tensor<double>({3, 6}, rng, 4.0);
  const auto y = layer_norm(x, TD::full({6}, 1.0), TD::zeros({6}));
  for (std::size_t r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 6; ++c) m += y.at({r, c});
    m /= 6;
    for (std::size_t c = 0; c < 6; ++c) v += (y.at({r, c}) - m) * (y.at({r, c}) - m);
    v /= 6;
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v, 1.0, 1e-4);
  }
  auto g = random_tensor<double>({6}, rng);
  auto b = random_tensor<double>({6}, rng);
  EXPECT_LT(grad_check<double>([&] { return probe(layer_norm(x, g, b)); }, {x, g, b}).max_rel_error, kGradTol);
}

TEST(Embedding, GatherAndScatter) {
  auto table = TD({3, 2}, {0, 1, 10, 11, 20, 21}, true);
  const std::vector<std::int32_t> ids = {2, 0, 2};
  const auto e = embedding(std::span<const std::int32_t>(ids), {1, 3}, table);
  EXPECT_EQ(e.shape(), (Shape{1, 3, 2}));
  expect_values(e, {20, 21, 0, 1, 20, 21});
  backward(sum(e));
  expect_values(TD({3, 2}, {table.grad().begin(), table.grad().end()}), {1, 1, 0, 0, 2, 2});
  const std::vector<std::int32_t> bad = {3};
  EXPECT_THROW(embedding(std::span<const std::int32_t>(bad), {1}, table), IndexOutOfRange);
}

TEST(Dropout, ScalesKeptUnitsAndIsSeeded) {
  const auto x = TD::full({1000}, 1.0);
  Rng a(1), b(1);
  const auto ya = dropout(x, 0.25, a), yb = dropout(x, 0.25, b);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    EXPECT_EQ(ya.values()[i], yb.values()[i]);
    if (ya.values()[i] != 0.0) {
      ++kept;
      EXPECT_NEAR(ya.values()[i], 1.0 / 0.75, 1e-12);
    }
  }
  EXPECT_NEAR(static_cast<double>(kept) / 1000.0, 0.75, 0.05);
  Rng c(2);
  expect_values(dropout(x, 0.0, c), std::vector<double>(1000, 1.0));
}

TEST(RelativeShift, MapsDistanceColumnsToKeyOrder) {
  // scores[i][d] = 10*i + d, memory 1, 2 queries, 3 keys.
  const TD s({2, 3}, {0, 1, 2, 10, 11, 12});
  const auto out = relative_shift(s, 1);
  // out[i][j] = s[i][1 + i - j] for j <= 1 + i, else 0
  expect_values(out, {1, 0, 0, 12, 11, 10});
  Rng rng(12);
  auto x = random_tensor<double>({2, 3, 5}, rng);
  EXPECT_LT(grad_check<double>([&] { return probe(relative_shift(x, 2)); }, {x}).max_rel_error, kGradTol);
  EXPECT_THROW(relative_shift(x, 1), ShapeMismatch);
}

TEST(Rng, SeededStreamsAgree) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto va = a.uniform();
    EXPECT_EQ(va, b.uniform());
    EXPECT_GE(va, 0.0);
    EXPECT_LT(va, 1.0);
  }
  EXPECT_NE(Rng(42).uniform(), c.uniform());
}

TEST(Rng, SerializeRestoresState) {
  Rng a(7);
  for (int i = 0; i < 10; ++i) a.normal();
  Rng b = Rng::deserialize(a.serialize());
  EXPECT_EQ(a, b);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.uniform_int(0, 1000), b.uniform_int(0, 1000));
}
