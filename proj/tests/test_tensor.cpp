#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "nlvt/kernels.hpp"
#include "nlvt/ops.hpp"
#include "oracles.hpp"

using namespace nlvt;
using oracle::D;

namespace {

D mat(Shape s, std::vector<double> v) { return D(std::move(s), std::move(v)); }

std::vector<double> values(const D& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(D({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(D(Shape{2, 0}), ShapeError);
  EXPECT_EQ(D({2, 3}).numel(), 6u);
}

TEST(Tensor, CopiesShareStorageCloneDoesNot) {
  D a({2}, std::vector<double>{1, 2});
  D b = a;
  D c = a.clone();
  a.mutable_data()[0] = 7;
  EXPECT_EQ(b[0], 7);
  EXPECT_EQ(c[0], 1);
}

TEST(Matmul, Examples) {
  const D eye = mat({2, 2}, {1, 0, 0, 1});
  const D b = mat({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(values(matmul(eye, b)), (std::vector<double>{5, 6, 7, 8}));
  EXPECT_EQ(values(matmul(mat({2, 2}, {1, 2, 3, 4}), b)), (std::vector<double>{19, 22, 43, 50}));
  EXPECT_EQ(values(matmul(mat({2, 2}, {1, 0, 0, 0}), mat({2, 2}, {0, 0, 0, 1}))),
            (std::vector<double>{0, 0, 0, 0}));
}

TEST(Matmul, RejectsNonConformingShapes) {
  EXPECT_THROW(matmul(D({2, 3}), D({2, 3})), ShapeError);
}

TEST(Matmul, MatchesTripleLoopAndIsAssociative) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const D a = oracle::random_tensor({4, 5}, rng), b = oracle::random_tensor({5, 3}, rng),
            c = oracle::random_tensor({3, 6}, rng);
    EXPECT_LT(oracle::max_abs_diff(matmul(a, b), oracle::matmul(a, b)), 1e-12);
    EXPECT_LT(oracle::max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))), 1e-9);
  }
}

TEST(Softmax, Examples) {
  const D s = softmax(mat({2}, {0, 0}), 0);
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
  const D big = softmax(mat({3}, {1000, 1000, 1000}), 0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(big[i], 1.0 / 3.0, 1e-15);
  // e^0 / (e^0 + 3) and 3 / (1 + 3).
  const D r = softmax(mat({2}, {0, std::log(3.0)}), 0);
  EXPECT_NEAR(r[0], 0.25, 1e-15);
  EXPECT_NEAR(r[1], 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(5);
  const D x = oracle::random_tensor({7, 9}, rng, -50, 50);
  const D s = softmax(x, 1);
  for (std::size_t r = 0; r < 7; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 9; ++c) total += s[r * 9 + c];
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Backward, SumOfSquares) {
  D x = mat({3}, {1, -2, 3});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  tape.backward(sum(mul(x, x)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, -4, 6}));
}

TEST(Backward, SumOfSoftmaxHasZeroGradient) {
  std::mt19937_64 rng(1);
  D x = oracle::random_tensor({5}, rng);
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  tape.backward(sum(softmax(x, 0)));
  for (double g : x.grad()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Backward, MatmulMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  D a = oracle::random_tensor({3, 3}, rng), b = oracle::random_tensor({3, 3}, rng);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(sum(matmul(a, b)));
  }
  const double h = 1e-5;
  for (D* t : {&a, &b}) {
    for (std::size_t i = 0; i < 9; ++i) {
      const double orig = t->mutable_data()[i];
      t->mutable_data()[i] = orig + h;
      const double fp = sum(matmul(a, b)).item();
      t->mutable_data()[i] = orig - h;
      const double fm = sum(matmul(a, b)).item();
      t->mutable_data()[i] = orig;
      const double num = (fp - fm) / (2 * h);
      EXPECT_LT(std::abs(num - t->grad()[i]) / std::max(1.0, std::abs(num)), 1e-6);
    }
  }
}

TEST(Backward, SecondBackwardIsRejected) {
  D x = mat({2}, {1, 2});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  const D loss = sum(mul(x, x));
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), ContractError);
  EXPECT_THROW(tape.backward(loss), ContractError);
  tape.reset();
  x.zero_grad();
  tape.backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad()[1], 4);
}

TEST(Backward, NonScalarLossIsRejected) {
  D x = mat({2}, {1, 2});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  EXPECT_THROW(tape.backward(mul(x, x)), ContractError);
}

TEST(Backward, NoGradScopeRecordsNothing) {
  D x = mat({2}, {1, 2});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  {
    NoGradScope<double> ng;
    (void)sum(mul(x, x));
  }
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Backward, GradientsAccumulateAcrossUses) {
  D x = mat({1}, {3});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  tape.backward(add(sum(mul(x, x)), sum(scale(x, 5.0))));
  EXPECT_EQ(x.grad()[0], 11);
}

TEST(Ops, OverflowIsAnError) {
  const D big = mat({1}, {1e200});
  EXPECT_THROW(mul(big, big), NumericError);
  EXPECT_THROW(matmul(mat({1, 1}, {1e200}), mat({1, 1}, {1e200})), NumericError);
}

TEST(Ops, PermuteConcatSliceRoundTrip) {
  std::mt19937_64 rng(9);
  const D x = oracle::random_tensor({2, 3, 4}, rng);
  const D p = permute(permute(x, {2, 0, 1}), {1, 2, 0});
  EXPECT_EQ(values(p), values(x));
  const D c = concat<double>({slice(x, 1, 0, 1), slice(x, 1, 1, 2)}, 1);
  EXPECT_EQ(values(c), values(x));
}

TEST(Kernels, SerialAndOmpGemmAgree) {
  std::mt19937_64 rng(4);
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      kernels::GemmShape s{7, 5, 6, ta, tb, false};
      const D a = oracle::random_tensor({42}, rng), b = oracle::random_tensor({30}, rng);
      std::vector<double> c1(35), c2(35);
      kernels::gemm_serial<double>(s, a.data(), b.data(), c1);
      kernels::gemm_omp<double>(s, a.data(), b.data(), c2);
      for (std::size_t i = 0; i < 35; ++i) EXPECT_NEAR(c1[i], c2[i], 1e-12);
    }
}

TEST(Kernels, SerialAndOmpConvAgree) {
  std::mt19937_64 rng(6);
  kernels::ConvGeometry g;
  g.batch = 2;
  g.in_channels = 4;
  g.in_h = g.in_w = 7;
  g.out_channels = 6;
  g.kernel = 3;
  g.stride = 2;
  g.padding = 1;
  g.groups = 2;
  const D x = oracle::random_tensor({2 * 4 * 49}, rng), w = oracle::random_tensor({g.weight_size()}, rng),
          b = oracle::random_tensor({6}, rng);
  const std::size_t ny = 2 * 6 * g.out_h() * g.out_w();
  std::vector<double> y1(ny), y2(ny);
  kernels::conv2d_forward_serial<double>(g, x.data(), w.data(), b.data(), y1);
  kernels::conv2d_forward_omp<double>(g, x.data(), w.data(), b.data(), y2);
  for (std::size_t i = 0; i < ny; ++i) EXPECT_NEAR(y1[i], y2[i], 1e-12);

  const D dy = oracle::random_tensor({ny}, rng);
  std::vector<double> dx1(x.numel()), dx2(x.numel()), dw1(w.numel()), dw2(w.numel()), db1(6), db2(6);
  kernels::conv2d_backward_serial<double>(g, x.data(), w.data(), dy.data(), dx1, dw1, db1);
  kernels::conv2d_backward_omp<double>(g, x.data(), w.data(), dy.data(), dx2, dw2, db2);
  for (std::size_t i = 0; i < dx1.size(); ++i) EXPECT_NEAR(dx1[i], dx2[i], 1e-12);
  for (std::size_t i = 0; i < dw1.size(); ++i) EXPECT_NEAR(dw1[i], dw2[i], 1e-12);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(db1[i], db2[i], 1e-12);
}

TEST(Kernels, ResultsDoNotDependOnThreadCount) {
  std::mt19937_64 rng(8);
  kernels::GemmShape s{33, 17, 29, false, false, false};
  const D a = oracle::random_tensor({33 * 29}, rng), b = oracle::random_tensor({29 * 17}, rng);
  std::vector<double> c1(33 * 17), c2(33 * 17);
  const int before = kernels::max_threads();
  kernels::set_max_threads(1);
  kernels::gemm_omp<double>(s, a.data(), b.data(), c1);
  kernels::set_max_threads(4);
  kernels::gemm_omp<double>(s, a.data(), b.data(), c2);
  kernels::set_max_threads(before);
  EXPECT_EQ(c1, c2);
}
