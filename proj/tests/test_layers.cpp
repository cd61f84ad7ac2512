#include <gtest/gtest.h>

#include <cmath>

#include "nlvt/attention.hpp"
#include "nlvt/ops.hpp"
#include "oracles.hpp"

using namespace nlvt;
using oracle::D;

namespace {

std::vector<double> values(const D& t) { return {t.data().begin(), t.data().end()}; }

void fill(D t, double v) {
  for (double& x : t.mutable_data()) x = v;
}

}  // namespace

TEST(Conv2d, DeltaKernelIsIdentity) {
  std::mt19937_64 rng(1);
  const D x = oracle::random_tensor({1, 1, 3, 3}, rng);
  D w({1, 1, 3, 3});
  w.mutable_data()[4] = 1.0;
  EXPECT_EQ(values(conv2d(x, w, D(), 1, 1, 1)), values(x));
}

TEST(Conv2d, PointwiseScaling) {
  const D x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  const D w({1, 1, 1, 1}, std::vector<double>{2});
  EXPECT_EQ(values(conv2d(x, w, D(), 1, 0, 1)), (std::vector<double>{2, 4, 6, 8}));
}

TEST(Conv2d, MatchesNaiveLoops) {
  std::mt19937_64 rng(2);
  for (const auto& [groups, stride, pad, k] : std::vector<std::array<std::size_t, 4>>{
           {3, 1, 1, 3}, {1, 1, 0, 1}, {1, 2, 1, 4}, {6, 2, 0, 2}, {2, 1, 2, 5}}) {
    const std::size_t cin = 6, cout = 6;
    const D x = oracle::random_tensor({2, cin, 8, 8}, rng);
    const D w = oracle::random_tensor({cout, cin / groups, k, k}, rng);
    const D b = oracle::random_tensor({cout}, rng);
    EXPECT_LT(oracle::max_abs_diff(conv2d(x, w, b, stride, pad, groups), oracle::conv2d(x, w, b, stride, pad, groups)),
              1e-12);
  }
  const D x = oracle::random_tensor({2, 3, 8, 8}, rng), w = oracle::random_tensor({3, 1, 3, 3}, rng);
  EXPECT_LT(oracle::max_abs_diff(conv2d(x, w, D(), 1, 1, 3), oracle::conv2d(x, w, D(), 1, 1, 3)), 1e-9);
}

TEST(Conv2d, RejectsBadShapes) {
  EXPECT_THROW(conv2d(D({1, 2, 4, 4}), D({2, 3, 1, 1}), D(), 1, 0, 1), ShapeError);
  EXPECT_THROW(conv2d(D({1, 3, 4, 4}), D({2, 1, 1, 1}), D(), 1, 0, 2), ShapeError);
}

TEST(Linear, Examples) {
  const D eye({2, 2}, std::vector<double>{1, 0, 0, 1});
  EXPECT_EQ(values(linear(D({2}, std::vector<double>{1, 2}), eye, D({2}))), (std::vector<double>{1, 2}));
  const D w({2, 1}, std::vector<double>{1, 1});
  EXPECT_EQ(values(linear(D({2}, std::vector<double>{1, 1}), w, D({1}, std::vector<double>{-2}))),
            (std::vector<double>{0}));
  std::mt19937_64 rng(3);
  const D x = oracle::random_tensor({4, 5}, rng), W = oracle::random_tensor({5, 3}, rng),
          b = oracle::random_tensor({3}, rng);
  EXPECT_EQ(values(linear(x, W, b)), values(add_bias(matmul(x, W), b, 1)));
}

TEST(LayerNorm, Examples) {
  const D ones({3}, 1.0), zeros3({3});
  EXPECT_EQ(values(layer_norm(D({3}, 1.0), ones, zeros3, 1e-5)), (std::vector<double>{0, 0, 0}));
  const D y = layer_norm(D({2}, std::vector<double>{-1, 1}), D({2}, 1.0), D({2}), 1e-5);
  EXPECT_NEAR(y[0], -1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
  EXPECT_NEAR(y[1], 1.0 / std::sqrt(1.0 + 1e-5), 1e-15);
  std::mt19937_64 rng(4);
  const D z = layer_norm(oracle::random_tensor({2, 5}, rng), D({5}), D({5}, 5.0), 1e-5);
  for (double v : z.data()) EXPECT_EQ(v, 5.0);
}

TEST(LayerNorm, MatchesOracle) {
  std::mt19937_64 rng(5);
  const D x = oracle::random_tensor({3, 4, 6}, rng), g = oracle::random_tensor({6}, rng), b = oracle::random_tensor({6}, rng);
  EXPECT_LT(oracle::max_abs_diff(layer_norm(x, g, b, 1e-5), oracle::layer_norm(x, g, b, 1e-5)), 1e-12);
}

TEST(AvgPool, Examples) {
  std::mt19937_64 rng(6);
  const D x = oracle::random_tensor({2, 3, 5, 5}, rng);
  EXPECT_EQ(values(avg_pool2d(x, 1)), values(x));
  EXPECT_EQ(values(avg_pool2d(D({1, 1, 2, 2}, std::vector<double>{1, 3, 5, 7}), 2)), (std::vector<double>{4}));
  D ramp({1, 1, 8, 8});
  for (std::size_t i = 0; i < 64; ++i) ramp.mutable_data()[i] = static_cast<double>(i);
  EXPECT_LT(oracle::max_abs_diff(avg_pool2d(ramp, 2), oracle::avg_pool(ramp, 2)), 1e-12);
  // Ragged edge windows average only their in-bounds cells.
  EXPECT_LT(oracle::max_abs_diff(avg_pool2d(x, 2), oracle::avg_pool(x, 2)), 1e-12);
  EXPECT_LT(oracle::max_abs_diff(avg_pool2d(x, 3), oracle::avg_pool(x, 3)), 1e-12);
}

TEST(BatchNorm, Examples) {
  BatchNorm2d<double> bn(2);
  D x({2, 2, 2, 2});
  for (std::size_t i = 0; i < x.numel(); ++i) x.mutable_data()[i] = (i / 4) % 2 == 0 ? 3.0 : -7.0;
  const D normed = bn.forward(x, true);
  for (double v : normed.data()) EXPECT_EQ(v, 0.0);

  BatchNorm2d<double> fresh(2);
  std::mt19937_64 rng(7);
  const D r = oracle::random_tensor({2, 2, 3, 3}, rng);
  const D y = fresh.forward(r, false);
  for (std::size_t i = 0; i < r.numel(); ++i) EXPECT_NEAR(y[i], r[i] / std::sqrt(1.0 + 1e-5), 1e-15);
}

TEST(BatchNorm, TrainingUpdatesRunningStatistics) {
  BatchNorm2d<double> bn(1);
  const D x({2, 1, 1, 2}, std::vector<double>{1, 2, 3, 4});
  (void)bn.forward(x, true);
  EXPECT_NEAR(bn.running_mean[0], 0.1 * 2.5, 1e-15);
  // Unbiased variance of {1, 2, 3, 4} is 5/3.
  EXPECT_NEAR(bn.running_var[0], 0.9 + 0.1 * 5.0 / 3.0, 1e-15);
  std::mt19937_64 rng(8);
  const D r = oracle::random_tensor({3, 1, 4, 4}, rng);
  EXPECT_LT(oracle::max_abs_diff(bn.forward(r, false), oracle::batch_norm(r, bn, false)), 1e-12);
}

TEST(Tokens, GridRoundTripIsExact) {
  std::mt19937_64 rng(9);
  const D x = oracle::random_tensor({2, 5, 3, 4}, rng);
  const D t = grid_to_tokens(x);
  EXPECT_EQ(t.shape(), (Shape{2, 12, 5}));
  EXPECT_EQ(values(t), values(oracle::to_tokens(x)));
  EXPECT_EQ(values(tokens_to_grid(t, 3, 4)), values(x));
}

// ---- attention --------------------------------------------------------------

TEST(Sdpa, SingleTokenOutputIsProjectedValue) {
  Rng rng(1);
  Sdpa<double> p(4, 2, rng);
  std::mt19937_64 g(2);
  const D x = oracle::random_tensor({1, 1, 4}, g);
  D probs;
  const D y = p.forward(x, &probs);
  for (double w : probs.data()) EXPECT_EQ(w, 1.0);
  const D expected = oracle::linear(oracle::linear(x, p.w_v.weight, p.w_v.bias), p.w_o.weight, p.w_o.bias);
  EXPECT_LT(oracle::max_abs_diff(y, expected), 1e-12);
}

TEST(Sdpa, ZeroQueriesGiveUniformWeights) {
  Rng rng(3);
  Sdpa<double> p(4, 1, rng);
  fill(p.w_q.weight, 0.0);
  fill(p.w_q.bias, 0.0);
  std::mt19937_64 g(4);
  const D x = oracle::random_tensor({1, 5, 4}, g);
  D probs;
  const D y = p.forward(x, &probs);
  for (double w : probs.data()) EXPECT_NEAR(w, 0.2, 1e-15);
  const D v = oracle::linear(x, p.w_v.weight, p.w_v.bias);
  D mean_v({1, 1, 4});
  for (std::size_t j = 0; j < 5; ++j)
    for (std::size_t d = 0; d < 4; ++d) mean_v.mutable_data()[d] += v[j * 4 + d] / 5.0;
  const D out = oracle::linear(mean_v, p.w_o.weight, p.w_o.bias);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(y[i * 4 + d], out[d], 1e-12);
}

TEST(Sdpa, HandSetWeightsMatchDirectEvaluation) {
  Rng rng(5);
  Sdpa<double> p(2, 1, rng);
  const auto set = [](D t, std::vector<double> v) { std::copy(v.begin(), v.end(), t.mutable_data().begin()); };
  set(p.w_q.weight, {1, 0, 0, 1});
  set(p.w_k.weight, {0, 1, 1, 0});
  set(p.w_v.weight, {2, 0, 0, 1});
  set(p.w_o.weight, {1, 1, 0, 1});
  for (auto* l : {&p.w_q, &p.w_k, &p.w_v, &p.w_o}) fill(l->bias, 0.0);
  const D x({1, 2, 2}, std::vector<double>{1, 0, 0, 1});
  // q = x, k = swap(x) = [[0,1],[1,0]], v = [[2,0],[0,1]].
  // token 0: logits [0, 1]/sqrt2; token 1: logits [1, 0]/sqrt2.
  const double a = std::exp(1 / std::sqrt(2.0)), p1 = a / (1 + a), p0 = 1 / (1 + a);
  const double z00 = 2 * p0, z01 = p1, z10 = 2 * p1, z11 = p0;
  // o = z W_o with W_o = [[1,1],[0,1]].
  const std::vector<double> expected{z00, z00 + z01, z10, z10 + z11};
  const D y = p.forward(x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], expected[i], 1e-12);
}

TEST(Sdpa, MatchesDirectEvaluation) {
  std::mt19937_64 g(6);
  for (std::size_t heads : {1, 2, 4}) {
    Rng rng(heads);
    Sdpa<double> p(8, heads, rng);
    const D x = oracle::random_tensor({2, 6, 8}, g);
    EXPECT_LT(oracle::max_abs_diff(p.forward(x), oracle::sdpa(x, p)), 1e-12);
  }
}

TEST(Sdpa, RejectsWrongWidth) {
  Rng rng(1);
  Sdpa<double> p(4, 2, rng);
  EXPECT_THROW(p.forward(D({1, 3, 5})), ShapeError);
}

TEST(EMhsa, StrideOneIsBitwiseSdpa) {
  Rng r1(7), r2(7);
  Sdpa<double> s(8, 2, r1);
  EMhsa<double> e(8, 2, 1, r2);
  std::mt19937_64 g(8);
  const D x = oracle::random_tensor({2, 16, 8}, g);
  EXPECT_EQ(values(e.forward(x, 4, 4)), values(s.forward(x)));
}

TEST(EMhsa, ConstantInputGivesConstantTokens) {
  Rng rng(9);
  EMhsa<double> e(4, 2, 2, rng);
  D x({1, 16, 4});
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t d = 0; d < 4; ++d) x.mutable_data()[t * 4 + d] = 0.3 * static_cast<double>(d) - 0.4;
  const D y = e.forward(x, 4, 4);
  for (std::size_t t = 1; t < 16; ++t)
    for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(y[t * 4 + d], y[d], 1e-14);
}

TEST(EMhsa, MatchesPoolThenAttendOracle) {
  std::mt19937_64 g(10);
  for (std::size_t stride : {1, 2, 4}) {
    Rng rng(stride);
    EMhsa<double> e(8, 2, stride, rng);
    const D x = oracle::random_tensor({2, 16, 8}, g);
    D probs;
    const D y = e.forward(x, 4, 4, &probs);
    EXPECT_EQ(probs.shape(), (Shape{2, 2, 16, 16 / (stride * stride)}));
    EXPECT_LT(oracle::max_abs_diff(y, oracle::e_mhsa(x, 4, 4, e)), 1e-9);
  }
}

TEST(EMhsa, RejectsStrideThatDoesNotDivideGrid) {
  Rng rng(1);
  EMhsa<double> e(4, 1, 3, rng);
  EXPECT_THROW(e.forward(D({1, 16, 4}), 4, 4), ConfigError);
  EXPECT_THROW(e.forward(D({1, 15, 4}), 4, 4), ShapeError);
}

TEST(Mhca, DeltaKernelGivesRelu) {
  Rng rng(1);
  Mhca<double> m(1, 1, 3, false, Activation::relu, rng);
  fill(m.ca.weight, 0.0);
  m.ca.weight.mutable_data()[4] = 1.0;
  fill(m.projection.weight, 1.0);
  fill(m.projection.bias, 0.0);
  std::mt19937_64 g(2);
  const D x = oracle::random_tensor({2, 1, 4, 4}, g);
  const D y = m.forward(x, true);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], std::max(x[i], 0.0));
  const D pos = oracle::random_tensor({2, 1, 4, 4}, g, 0.0, 1.0);
  EXPECT_EQ(values(m.forward(pos, true)), values(pos));
}

TEST(Mhca, BoxKernelGivesNeighbourhoodMean) {
  Rng rng(3);
  Mhca<double> m(1, 1, 3, false, Activation::relu, rng);
  fill(m.ca.weight, 1.0 / 9.0);
  fill(m.projection.weight, 1.0);
  fill(m.projection.bias, 0.0);
  std::mt19937_64 g(4);
  const D x = oracle::random_tensor({1, 1, 5, 5}, g, 0.0, 1.0);
  const D y = m.forward(x, true);
  for (long i = 0; i < 5; ++i)
    for (long j = 0; j < 5; ++j) {
      double s = 0;
      for (long u = -1; u <= 1; ++u)
        for (long v = -1; v <= 1; ++v)
          if (i + u >= 0 && i + u < 5 && j + v >= 0 && j + v < 5) s += x[(i + u) * 5 + j + v];
      EXPECT_NEAR(y[i * 5 + j], s / 9.0, 1e-15);
    }
}

TEST(Mhca, HeadsActIndependentlyBeforeProjection) {
  Rng rng(5);
  Mhca<double> two(4, 2, 3, true, Activation::relu, rng);
  // Identity projection exposes the per-head outputs.
  fill(two.projection.weight, 0.0);
  for (std::size_t c = 0; c < 4; ++c) two.projection.weight.mutable_data()[c * 4 + c] = 1.0;
  fill(two.projection.bias, 0.0);
  std::mt19937_64 g(6);
  const D x = oracle::random_tensor({2, 4, 5, 5}, g);
  const D y = two.forward(x, true);
  for (std::size_t head = 0; head < 2; ++head) {
    Rng r(9);
    Mhca<double> one(2, 1, 3, true, Activation::relu, r);
    std::copy_n(two.ca.weight.data().begin() + head * 36, 36, one.ca.weight.mutable_data().begin());
    fill(one.projection.weight, 0.0);
    one.projection.weight.mutable_data()[0] = one.projection.weight.mutable_data()[3] = 1.0;
    fill(one.projection.bias, 0.0);
    const D part = slice(x, 1, head * 2, 2);
    const D out = one.forward(part, true);
    EXPECT_LT(oracle::max_abs_diff(out, slice(y, 1, head * 2, 2)), 1e-12);
  }
}

TEST(Mhca, MatchesOracleAndPreservesShape) {
  std::mt19937_64 g(7);
  for (bool training : {true, false}) {
    Rng rng(8);
    Mhca<double> m(8, 4, 3, true, Activation::relu, rng);
    const D x = oracle::random_tensor({2, 8, 6, 6}, g);
    const D expected = oracle::mhca(x, m, training);
    const D y = m.forward(x, training);
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_LT(oracle::max_abs_diff(y, expected), 1e-9);
  }
}
