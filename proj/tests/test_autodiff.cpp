#include <gtest/gtest.h>

#include <cmath>

#include "debs/autodiff.hpp"
#include "test_util.hpp"

using debs::contract_error;
using debs::cosine_similarity;
using debs::numeric_error;
using debs::rng;
using debs::shape_t;
using debs::tape;
using debs::tensor;
using debs::testing::avoid_kink;
using debs::testing::fd_case;
using debs::testing::rand_tensor;

using dten = tensor<double>;
using dtape = tape<double>;
using ften = tensor<float>;

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(dten({2, 3}, {1.0, 2.0}), contract_error);
  dten t({2, 3});
  EXPECT_EQ(t.numel(), 6u);
}

TEST(Cosine, IdenticalVectors) {
  ften a = ften::of({3.f, 4.f});
  EXPECT_FLOAT_EQ(cosine_similarity(a, a), 1.0f);
}

TEST(Cosine, Orthogonal) {
  ften a = ften::of({1.f, 0.f}), b = ften::of({0.f, 1.f});
  EXPECT_FLOAT_EQ(cosine_similarity(a, b), 0.0f);
}

TEST(Cosine, ZeroVectorFloorsDenominator) {
  ften a = ften::of({0.f, 0.f}), b = ften::of({1.f, 1.f});
  EXPECT_FLOAT_EQ(cosine_similarity(a, b), 0.0f);
}

TEST(Cosine, LengthMismatch) {
  ften a = ften::of({1.f, 2.f}), b = ften::of({1.f, 2.f, 3.f});
  EXPECT_THROW(cosine_similarity(a, b), contract_error);
}

TEST(Cosine, Symmetric) {
  rng r(7);
  for (int k = 0; k < 50; ++k) {
    dten a = rand_tensor({8}, r), b = rand_tensor({8}, r);
    EXPECT_EQ(cosine_similarity(a, b), cosine_similarity(b, a));
  }
}

TEST(Cosine, ScaleInvariant) {
  rng r(8);
  dten a = rand_tensor({16}, r), b = rand_tensor({16}, r);
  const double c0 = cosine_similarity(a, b);
  for (double lam : {0.5, 2.0, 10.0}) {
    dten a2 = a;
    for (auto& v : a2.data) v *= lam;
    EXPECT_NEAR(cosine_similarity(a2, b), c0, 1e-6);
  }
}

TEST(Backward, SumOfSquares) {
  dtape tp;
  auto w = tp.leaf(dten::of({1.0, 2.0}), true);
  auto sq = tp.mul(w, w);
  auto loss = tp.affine(tp.mean_all(sq), 2.0, 0.0);  // mean * n == sum
  tp.backward(loss);
  ASSERT_FALSE(tp.grad(w).empty());
  EXPECT_DOUBLE_EQ(tp.grad(w)[0], 2.0);
  EXPECT_DOUBLE_EQ(tp.grad(w)[1], 4.0);
}

TEST(Backward, ConstantOnlyLossGivesEmptyMap) {
  dtape tp;
  auto c = tp.constant(dten::of({1.0, 2.0}));
  auto loss = tp.mean_all(tp.mul(c, c));
  tp.backward(loss);
  EXPECT_TRUE(tp.gradient_map().empty());
}

TEST(Backward, NonScalarLossRejected) {
  dtape tp;
  auto w = tp.leaf(dten::of({1.0, 2.0}), true);
  auto y = tp.mul(w, w);
  EXPECT_THROW(tp.backward(y), contract_error);
}

TEST(Backward, ConstantMarkedNodeBlocksGradient) {
  dtape tp;
  auto w = tp.leaf(dten::of({1.0, -2.0, 3.0}), true);
  auto c = tp.constant(dten::of({5.0, 5.0, 5.0}));
  auto mixed = tp.mul(w, c);
  auto const_path = tp.mul(c, c);
  auto loss = tp.add(tp.mean_all(mixed), tp.mean_all(const_path));
  tp.backward(loss);
  EXPECT_TRUE(tp.grad(c).empty());
  ASSERT_FALSE(tp.grad(w).empty());
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(tp.grad(w)[i], 5.0 / 3.0);
  auto gm = tp.gradient_map();
  ASSERT_EQ(gm.size(), 1u);
  EXPECT_EQ(gm[0].first, w);
}

TEST(FiniteDifference, QuadraticIsTight) {
  dten w = dten::of({1.0});
  auto loss_fn = std::function<double()>([&]() { return w[0] * w[0]; });
  auto grad_fn =
      std::function<std::vector<dten>()>([&]() { return std::vector<dten>{dten::of({2.0 * w[0]})}; });
  auto rep = debs::finite_difference_check<double>(loss_fn, grad_fn, {&w}, 1e-4);
  EXPECT_LT(rep.max_rel_dev, 1e-6);
}

TEST(FiniteDifference, DetectsSignFlippedGradient) {
  dten w = dten::of({1.5});
  auto loss_fn = std::function<double()>([&]() { return w[0] * w[0]; });
  auto grad_fn =
      std::function<std::vector<dten>()>([&]() { return std::vector<dten>{dten::of({-2.0 * w[0]})}; });
  auto rep = debs::finite_difference_check<double>(loss_fn, grad_fn, {&w}, 1e-4);
  EXPECT_NEAR(rep.max_rel_dev, 2.0, 0.05);
}

TEST(FiniteDifference, NonDeterministicObjectiveIsDiagnosed) {
  dten w = dten::of({1.0});
  int calls = 0;
  auto loss_fn = std::function<double()>([&]() { return w[0] + 1e-3 * (calls++); });
  auto grad_fn = std::function<std::vector<dten>()>([&]() { return std::vector<dten>{dten::of({1.0})}; });
  EXPECT_THROW(debs::finite_difference_check<double>(loss_fn, grad_fn, {&w}, 1e-4), numeric_error);
}

// ---------------------------------------------------------------------------
// Property: analytic gradients of every primitive op match central finite
// differences on random small tensors. 100 random cases per op.
// ---------------------------------------------------------------------------

namespace {

constexpr int kCases = 100;
constexpr double kTol = 1e-3;

shape_t rand_shape2(rng& r) { return {2 + r.below(3), 2 + r.below(4)}; }

}  // namespace

TEST(OpGradients, Add) {
  rng r(100);
  for (int k = 0; k < kCases; ++k) {
    auto s = rand_shape2(r);
    fd_case c{{rand_tensor(s, r), rand_tensor(s, r)},
              [](dtape& tp, const auto& ids) { return tp.add(ids[0], ids[1]); },
              rand_tensor(s, r)};
    EXPECT_LT(c.run(), kTol);
  }
}

TEST(OpGradients, Mul) {
  rng r(101);
  for (int k = 0; k < kCases; ++k) {
    auto s = rand_shape2(r);
    fd_case c{{rand_tensor(s, r), rand_tensor(s, r)},
              [](dtape& tp, const auto& ids) { return tp.mul(ids[0], ids[1]); },
              rand_tensor(s, r)};
    EXPECT_LT(c.run(), kTol);
  }
}

TEST(OpGradients, Affine) {
  rng r(102);
  for (int k = 0; k < kCases; ++k) {
    auto s = rand_shape2(r);
    const double kk = r.normal(), m = r.normal();
    fd_case c{{rand_tensor(s, r)},
              [kk, m](dtape& tp, const auto& ids) { return tp.affine(ids[0], kk, m); },
              rand_tensor(s, r)};
    EXPECT_LT(c.run(), kTol);
  }
}

TEST(OpGradients, AddBroadcast) {
  rng r(103);
  for (int k = 0; k < kCases; ++k) {
    const std::size_t b = 2 + r.below(3), t = 2 + r.below(3), d = 2 + r.below(4);
    fd_case c{{rand_tensor({b, t, d}, r), rand_tensor({t, d}, r)},
              [](dtape& tp, const auto& ids) { return tp.add_broadcast(ids[0], ids[1]); },
              rand_tensor({b, t, d}, r)};
    EXPECT_LT(c.run(), kTol);
  }
}

TEST(OpGradients, ReluAwayFromKink) {
  rng r(104);
  for (int k = 0; k < kCases; ++k) {
    auto s = rand_shape2(r);
    auto x = rand_tensor(s, r);
    avoid_kink(x, 0.05);
    fd_case c{{std::move(x)}, [](dtape& tp, const auto& ids) { return tp.relu(ids[0]); },
              rand_tensor(s, r)};
    EXPECT_LT(c.run(), kTol);
  }
}

TEST(OpGradients, Gelu) {
  rng r(105);
  for (int k = 0; k < kCases; ++k) {
    auto s = rand_shape2(r);
    fd_case c{{rand_tensor(s, r)}, [](dtape& tp, const auto& ids) { return tp.gelu(ids[0]); },
              rand_tensor(s, r)};
    EXPECT_LT(c.run(), kTol);
  }
}

TEST(OpGradients, ReshapeTranspose) {
  rng r(106);
  for (int k = 0; k < kCases; ++k) {
    const std::size_t a = 2 + r.below(3), b = 2 + r.below(3);
    fd_case c{{rand_tensor({a, b}, r)},
              [a, b](dtape& tp, const auto& ids) {
                return tp.transpose_last2(tp.reshape(ids[0], {1, a, b}));
              },
              rand_tensor({1, b, a}, r)};
    EXPECT_LT(c.run(), kTol);
  }
}

TEST(OpGradients, SplitMergeHeads) {
  rng r(107);
  for (int k = 0; k < kCases; ++k) {
    const std::size_t b = 1 + r.below(3), t = 2 + r.below(3), h = 2, d = 2 + r.below(3);
    fd_case split{{rand_tensor({b, t, h * d}, r)},
                  [h](dtape& tp, const auto& ids) { return tp.split_heads(ids[0], h); },
                  rand_tensor({b * h, t, d}, r)};
    EXPECT_LT(split.run(), kTol);
    fd_case merge{{rand_tensor({b * h, t, d}, r)},
                  [h](dtape& tp, const auto& ids) { return tp.merge_heads(ids[0], h); },
                  rand_tensor({b, t, h * d}, r)};
    EXPECT_LT(merge.run(), kTol);
  }
}

TEST(OpGradients, LinearAndMatmul) {
  rng r(108);
  for (int k = 0; k < kCases; ++k) {
    const std::size_t m = 2 + r.below(3), kk = 2 + r.below(3), n = 2 + r.below(3);
    fd_case lin{{rand_tensor({m, kk}, r), rand_tensor({kk, n}, r), rand_tensor({n}, r)},
                [](dtape& tp, const auto& ids) { return tp.linear(ids[0], ids[1], ids[2]); },
                rand_tensor({m, n}, r)};
    EXPECT_LT(lin.run(), kTol);
    fd_case mm{{rand_tensor({m, kk}, r), rand_tensor({kk, n}, r)},
               [](dtape& tp, const auto& ids) { return tp.matmul(ids[0], ids[1]); },
               rand_tensor({m, n}, r)};
    EXPECT_LT(mm.run(), kTol);
  }
}

TEST(OpGradients, BatchedMatmul) {
  rng r(109);
  for (int k = 0; k < kCases; ++k) {
    const std::size_t b = 1 + r.below(3), m = 2 + r.below(2), kk = 2 + r.below(2),
                      n = 2 + r.below(2);
    fd_case c{{rand_tensor({b, m, kk}, r), rand_tensor({b, kk, n}, r)},
              [](dtape& tp, const auto& ids) { return tp.bmm(ids[0], ids[1]); },
              rand_tensor({b, m, n}, r)};
    EXPECT_LT(c.run(), kTol);
  }
}

TEST(OpGradients, SoftmaxLast) {
  rng r(110);
  for (int k = 0; k < kCases; ++k) {
    auto s = rand_shape2(r);
    fd_case c{{rand_tensor(s, r)},
              [](dtape& tp, const auto& ids) { return tp.softmax_last(ids[0]); },
              rand_tensor(s, r)};
    EXPECT_LT(c.run(), kTol);
  }
}

TEST(OpGradients, LayerNorm) {
  rng r(111);
  for (int k = 0; k < kCases; ++k) {
    const std::size_t rows = 2 + r.below(3), cdim = 3 + r.below(4);
    fd_case c{{rand_tensor({rows, cdim}, r), rand_tensor({cdim}, r), rand_tensor({cdim}, r)},
              [](dtape& tp, const auto& ids) {
                return tp.layer_norm_last(ids[0], ids[1], ids[2], 1e-5);
              },
              rand_tensor({rows, cdim}, r)};
    EXPECT_LT(c.run(), kTol);
  }
}

TEST(OpGradients, BatchNormTrain) {
  rng r(112);
  for (int k = 0; k < kCases; ++k) {
    const std::size_t b = 3 + r.below(4), f = 2 + r.below(4);
    fd_case c{{rand_tensor({b, f}, r), rand_tensor({f}, r), rand_tensor({f}, r)},
              [](dtape& tp, const auto& ids) {
                return tp.batch_norm_train(ids[0], ids[1], ids[2], 1e-5).out;
              },
              rand_tensor({b, f}, r)};
    EXPECT_LT(c.run(), kTol);
  }
}

TEST(OpGradients, BatchNormEval) {
  rng r(113);
  for (int k = 0; k < kCases; ++k) {
    const std::size_t b = 2 + r.below(4), f = 2 + r.below(4);
    dten rm = rand_tensor({f}, r);
    dten rv = rand_tensor({f}, r);
    for (auto& v : rv.data) v = std::abs(v) + 0.5;
    fd_case c{{rand_tensor({b, f}, r), rand_tensor({f}, r), rand_tensor({f}, r)},
              [rm, rv](dtape& tp, const auto& ids) {
                return tp.batch_norm_eval(ids[0], ids[1], ids[2], rm, rv, 1e-5);
              },
              rand_tensor({b, f}, r)};
    EXPECT_LT(c.run(), kTol);
  }
}

TEST(OpGradients, Means) {
  rng r(114);
  for (int k = 0; k < kCases; ++k) {
    const std::size_t b = 2 + r.below(3), t = 2 + r.below(3), d = 2 + r.below(3);
    fd_case c{{rand_tensor({b, t, d}, r)},
              [](dtape& tp, const auto& ids) { return tp.mean_axis1(ids[0]); },
              rand_tensor({b, d}, r)};
    EXPECT_LT(c.run(), kTol);
    fd_case m{{rand_tensor({b, d}, r)},
              [](dtape& tp, const auto& ids) { return tp.mean_all(ids[0]); },
              rand_tensor({1}, r)};
    EXPECT_LT(m.run(), kTol);
  }
}

TEST(OpGradients, CosineRows) {
  rng r(115);
  for (int k = 0; k < kCases; ++k) {
    const std::size_t rows = 1 + r.below(4), d = 2 + r.below(6);
    auto a = rand_tensor({rows, d}, r);
    auto b = rand_tensor({rows, d}, r);
    // keep norms well above the floor so the derivative branch is smooth
    for (auto* t : {&a, &b})
      for (std::size_t row = 0; row < rows; ++row) {
        double n2 = 0;
        for (std::size_t j = 0; j < d; ++j) n2 += (*t)[row * d + j] * (*t)[row * d + j];
        if (n2 < 0.25)
          for (std::size_t j = 0; j < d; ++j) (*t)[row * d + j] += 1.0;
      }
    fd_case c{{std::move(a), std::move(b)},
              [](dtape& tp, const auto& ids) { return tp.cosine_rows(ids[0], ids[1]); },
              rand_tensor({rows}, r)};
    EXPECT_LT(c.run(), kTol);
  }
}

TEST(OpGradients, CosineRowsShapeMismatch) {
  dtape tp;
  auto a = tp.leaf(dten({2, 3}), true);
  auto b = tp.leaf(dten({2, 4}), true);
  EXPECT_THROW(tp.cosine_rows(a, b), contract_error);
}

// The tape op agrees with the plain function, including the floored case.
TEST(CosineRows, MatchesScalarFunction) {
  rng r(116);
  dtape tp;
  dten a = rand_tensor({3, 5}, r), b = rand_tensor({3, 5}, r);
  for (std::size_t j = 0; j < 5; ++j) a[2 * 5 + j] = 0.0;  // zero row hits the floor
  auto c = tp.cosine_rows(tp.constant(a), tp.constant(b));
  for (std::size_t row = 0; row < 3; ++row) {
    dten ar({5}), br({5});
    for (std::size_t j = 0; j < 5; ++j) {
      ar[j] = a[row * 5 + j];
      br[j] = b[row * 5 + j];
    }
    EXPECT_DOUBLE_EQ(tp.value(c)[row], cosine_similarity(ar, br));
  }
  EXPECT_DOUBLE_EQ(tp.value(c)[2], 0.0);
}
