#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "care/ad/gradcheck.hpp"
#include "care/ad/graph.hpp"
#include "care/ad/kernels.hpp"
#include "care/ad/ops.hpp"
#include "support/random_tensor.hpp"

namespace care::ad {
namespace {

using care::testing::random_tensor;
using care::testing::random_tensor_off_zero;
using D = double;
using Builder = std::function<Var<D>(Graph<D>&, const std::vector<Var<D>>&)>;

constexpr double kTol = 1e-6;

// A fixed random projection turns any output into a scalar loss with
// non-uniform upstream gradients.
Var<D> probe(Var<D> y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Var<D> w = y.graph->constant(random_tensor<D>(y.shape(), rng));
  return sum(mul(y, w));
}

GradCheckReport check(const Builder& build, std::vector<BasicTensor<D>> inputs) {
  return finite_diff_check_graph<D>(build, std::move(inputs), {1e-5, 0, 1});
}

TEST(Kernels, GemmMatchesNaiveProduct) {
  std::mt19937_64 rng(1);
  const std::size_t m = 5, k = 7, n = 3;
  auto a = random_tensor<D>({m, k}, rng);
  auto b = random_tensor<D>({k, n}, rng);
  std::vector<D> c(m * n);
  kernels::gemm_nn(a.data(), b.data(), c.data(), m, k, n, false);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double ref = 0.0;
      for (std::size_t p = 0; p < k; ++p) ref += a.at(i, p) * b.at(p, j);
      EXPECT_NEAR(c[i * n + j], ref, 1e-12);
    }
  }
  std::vector<D> ct(m * n);
  auto bt = kernels::transpose(b.data(), k, n);
  kernels::gemm_nt(a.data(), bt.data(), ct.data(), m, k, n, false);
  for (std::size_t i = 0; i < m * n; ++i) EXPECT_NEAR(ct[i], c[i], 1e-12);
}

TEST(Kernels, FloatGemmAccumulatesInDouble) {
  // 1 + 1e-8 * 1e4 terms: a float running sum would lose every small term.
  const std::size_t k = 10001;
  std::vector<float> a(k, 1.0F), b(k, 1e-8F), c(1);
  b[0] = 1.0F;
  kernels::gemm_nn(a.data(), b.data(), c.data(), 1, k, 1, false);
  EXPECT_NEAR(c[0], 1.0001F, 1e-6F);
}

TEST(Kernels, Im2colCol2imAreAdjoint) {
  std::mt19937_64 rng(4);
  kernels::ConvGeometry geo{2, 5, 6, 3, 2, 1};
  auto img = random_tensor<D>({2, 5, 6}, rng);
  auto cols = random_tensor<D>({geo.patch(), geo.out_h() * geo.out_w()}, rng);
  std::vector<D> unfolded(cols.size()), folded(img.size(), 0.0);
  kernels::im2col(img.data(), geo, unfolded.data());
  kernels::col2im(cols.data(), geo, folded.data());
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < cols.size(); ++i) lhs += unfolded[i] * cols[i];
  for (std::size_t i = 0; i < img.size(); ++i) rhs += img[i] * folded[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(Graph, SharedInputGradientsAccumulate) {
  Graph<D> g;
  Var<D> x = g.leaf(BasicTensor<D>({3}, {1.0, -2.0, 0.5}));
  Var<D> y = sum(add(mul(x, x), x));
  g.backward(y);
  auto gx = g.grad(x);
  EXPECT_DOUBLE_EQ(gx[0], 3.0);
  EXPECT_DOUBLE_EQ(gx[1], -3.0);
  EXPECT_DOUBLE_EQ(gx[2], 2.0);
}

TEST(Graph, BackwardTwiceGivesSameLeafGradient) {
  Graph<D> g;
  Var<D> x = g.leaf(BasicTensor<D>({2}, {0.3, 0.7}));
  Var<D> y = sum(mul(x, x));
  g.backward(y);
  auto first = g.grad(x);
  g.backward(y);
  EXPECT_EQ(g.grad(x), first);
}

TEST(Graph, ParameterGradientsAccumulateAcrossGraphs) {
  Parameter<D> p(BasicTensor<D>({2}, {1.0, 2.0}));
  for (int round = 0; round < 2; ++round) {
    Graph<D> g;
    Var<D> w = g.parameter(p);
    g.backward(sum(scale(w, 3.0)));
  }
  EXPECT_DOUBLE_EQ(p.grad[0], 6.0);
  EXPECT_DOUBLE_EQ(p.grad[1], 6.0);
  p.zero_grad();
  EXPECT_DOUBLE_EQ(p.grad[0], 0.0);
}

TEST(Graph, ConstantsReceiveNoGradient) {
  Graph<D> g;
  Var<D> c = g.constant(BasicTensor<D>({2}, 1.0));
  Var<D> x = g.leaf(BasicTensor<D>({2}, 2.0));
  Var<D> y = sum(mul(c, x));
  EXPECT_FALSE(c.requires_grad());
  g.backward(y);
  EXPECT_DOUBLE_EQ(g.grad(c)[0], 0.0);
  EXPECT_DOUBLE_EQ(g.grad(x)[0], 1.0);
}

TEST(Graph, NonScalarLossRejected) {
  Graph<D> g;
  Var<D> x = g.leaf(BasicTensor<D>({2}, 1.0));
  EXPECT_THROW(g.backward(x), UsageError);
}

TEST(Graph, MixingGraphsRejected) {
  Graph<D> g1, g2;
  Var<D> a = g1.leaf(BasicTensor<D>({2}, 1.0));
  Var<D> b = g2.leaf(BasicTensor<D>({2}, 1.0));
  EXPECT_THROW(add(a, b), UsageError);
}

TEST(Ops, ShapeErrorsNameTheOp) {
  Graph<D> g;
  Var<D> a = g.leaf(BasicTensor<D>({2, 3}));
  Var<D> b = g.leaf(BasicTensor<D>({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected a shape error";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos) << e.what();
  }
}

TEST(Ops, LogOfNonPositiveIsNumericError) {
  Graph<D> g;
  Var<D> a = g.leaf(BasicTensor<D>({2}, {1.0, 0.0}));
  EXPECT_THROW(log(a), NumericError);
}

TEST(Ops, ForwardValues) {
  Graph<D> g;
  Var<D> a = g.constant(BasicTensor<D>({2, 2}, {1, 2, 3, 4}));
  Var<D> b = g.constant(BasicTensor<D>({2, 2}, {5, 6, 7, 8}));
  EXPECT_EQ(matmul(a, b).value(), BasicTensor<D>({2, 2}, {19, 22, 43, 50}));
  EXPECT_EQ(concat<D>({a, b}, 1).value(), BasicTensor<D>({2, 4}, {1, 2, 5, 6, 3, 4, 7, 8}));
  EXPECT_EQ(concat<D>({a, b}, 0).value(), BasicTensor<D>({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8}));
  EXPECT_EQ(slice(a, 1, 1, 2).value(), BasicTensor<D>({2, 1}, {2, 4}));
  EXPECT_DOUBLE_EQ(mean(a).value()[0], 2.5);
  auto sm = softmax_rows(a).value();
  EXPECT_NEAR(sm.at(0, 1), 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
  auto n = l2_normalize_rows(a).value();
  EXPECT_NEAR(n.at(1, 0), 0.6, 1e-9);
  EXPECT_NEAR(n.at(1, 1), 0.8, 1e-9);
}

TEST(Ops, SigmoidIsStableForLargeInputs) {
  Graph<D> g;
  auto y = sigmoid(g.constant(BasicTensor<D>({2}, {-800.0, 800.0}))).value();
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 1.0);
}

TEST(Ops, ReluAndMaxPoolPropagateNaN) {
  Graph<D> g;
  const D nan = std::numeric_limits<D>::quiet_NaN();
  auto r = relu(g.constant(BasicTensor<D>({3}, {nan, -1.0, 2.0}))).value();
  EXPECT_TRUE(std::isnan(r[0]));
  EXPECT_EQ(r[1], 0.0);
  auto p = maxpool2d(g.constant(BasicTensor<D>({1, 1, 2, 2}, {3.0, nan, 1.0, 0.0})), 2, 2).value();
  EXPECT_TRUE(std::isnan(p[0]));
}

TEST(Ops, MaxPoolTakesFirstMaximum) {
  Graph<D> g;
  Var<D> x = g.leaf(BasicTensor<D>({1, 1, 2, 2}, {1.0, 1.0, 0.0, 1.0}));
  Var<D> y = maxpool2d(x, 2, 2);
  EXPECT_DOUBLE_EQ(y.value()[0], 1.0);
  g.backward(sum(y));
  EXPECT_EQ(g.grad(x), BasicTensor<D>({1, 1, 2, 2}, {1.0, 0.0, 0.0, 0.0}));
}

TEST(Ops, Conv2dMatchesDirectSum) {
  std::mt19937_64 rng(3);
  auto x = random_tensor<D>({2, 2, 5, 4}, rng);
  auto w = random_tensor<D>({3, 2, 3, 3}, rng);
  auto b = random_tensor<D>({3}, rng);
  Graph<D> g;
  auto y = conv2d(g.constant(x), g.constant(w), g.constant(b), 2, 1).value();
  ASSERT_EQ(y.shape(), (Shape{2, 3, 3, 2}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 3; ++o)
      for (std::size_t oy = 0; oy < 3; ++oy)
        for (std::size_t ox = 0; ox < 2; ++ox) {
          double ref = b[o];
          for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const long iy = static_cast<long>(oy * 2 + ky) - 1;
                const long ix = static_cast<long>(ox * 2 + kx) - 1;
                if (iy < 0 || ix < 0 || iy >= 5 || ix >= 4) continue;
                ref += x[((n * 2 + c) * 5 + iy) * 4 + ix] * w[((o * 2 + c) * 3 + ky) * 3 + kx];
              }
          EXPECT_NEAR(y[((n * 3 + o) * 3 + oy) * 2 + ox], ref, 1e-12);
        }
}

// ---- finite-difference checks per op -------------------------------------

TEST(GradCheck, ElementwiseOps) {
  std::mt19937_64 rng(10);
  auto x = random_tensor<D>({3, 4}, rng);
  auto y = random_tensor<D>({3, 4}, rng);
  auto bias = random_tensor<D>({4}, rng);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(add(v[0], v[1])); }, {x, y}).max_rel_error, kTol);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(add(v[0], v[1])); }, {x, bias}).max_rel_error, kTol);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(sub(v[0], v[1])); }, {x, y}).max_rel_error, kTol);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(mul(v[0], v[1])); }, {x, y}).max_rel_error, kTol);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(scale(v[0], -1.7)); }, {x}).max_rel_error, kTol);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(tanh(v[0])); }, {x}).max_rel_error, kTol);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(sigmoid(v[0])); }, {x}).max_rel_error, kTol);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(exp(v[0])); }, {x}).max_rel_error, kTol);
  auto pos = random_tensor<D>({3, 4}, rng, 0.5, 2.0);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(log(v[0])); }, {pos}).max_rel_error, kTol);
  auto off = random_tensor_off_zero<D>({3, 4}, rng);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(relu(v[0])); }, {off}).max_rel_error, kTol);
}

TEST(GradCheck, ShapeOps) {
  std::mt19937_64 rng(11);
  auto x = random_tensor<D>({3, 4}, rng);
  auto y = random_tensor<D>({3, 2}, rng);
  auto z = random_tensor<D>({2, 4}, rng);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(concat<D>({v[0], v[1]}, 1)); }, {x, y}).max_rel_error, kTol);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(concat<D>({v[0], v[1]}, 0)); }, {x, z}).max_rel_error, kTol);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(slice(v[0], 1, 1, 3)); }, {x}).max_rel_error, kTol);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(slice(v[0], 0, 2, 3)); }, {x}).max_rel_error, kTol);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(reshape(v[0], {4, 3})); }, {x}).max_rel_error, kTol);
  EXPECT_LT(check([](auto&, const auto& v) { return sum(v[0]); }, {x}).max_rel_error, kTol);
  EXPECT_LT(check([](auto&, const auto& v) { return mean(v[0]); }, {x}).max_rel_error, kTol);
}

TEST(GradCheck, MatmulAndRowOps) {
  std::mt19937_64 rng(12);
  auto a = random_tensor<D>({3, 5}, rng);
  auto b = random_tensor<D>({5, 2}, rng);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(matmul(v[0], v[1])); }, {a, b}).max_rel_error, kTol);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(softmax_rows(v[0])); }, {a}).max_rel_error, kTol);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(l2_normalize_rows(v[0])); }, {a}).max_rel_error, kTol);
}

TEST(GradCheck, ImageOps) {
  std::mt19937_64 rng(13);
  auto x = random_tensor<D>({2, 2, 6, 4}, rng);
  auto w = random_tensor<D>({3, 2, 3, 3}, rng);
  auto b = random_tensor<D>({3}, rng);
  for (std::size_t stride : {1, 2}) {
    for (std::size_t pad : {0, 1}) {
      auto r = check([=](auto&, const auto& v) { return probe(conv2d(v[0], v[1], v[2], stride, pad)); },
                     {x, w, b});
      EXPECT_LT(r.max_rel_error, kTol) << "stride " << stride << " pad " << pad;
    }
  }
  EXPECT_LT(check([](auto&, const auto& v) { return probe(maxpool2d(v[0], 2, 2)); }, {x}).max_rel_error, kTol);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(avg_pool2d(v[0], 2)); }, {x}).max_rel_error, kTol);
  EXPECT_LT(check([](auto&, const auto& v) { return probe(global_avg_pool(v[0])); }, {x}).max_rel_error, kTol);
}

TEST(GradCheck, ComposedNetworkAtDefaultStep) {
  std::mt19937_64 rng(14);
  auto x = random_tensor<D>({4, 3}, rng);
  auto w1 = random_tensor<D>({3, 5}, rng);
  auto w2 = random_tensor<D>({5, 2}, rng);
  auto r = finite_diff_check_graph<D>(
      [](auto&, const auto& v) {
        return mean(softmax_rows(matmul(tanh(matmul(v[0], v[1])), v[2])));
      },
      {x, w1, w2}, {1e-3, 16, 5});
  EXPECT_EQ(r.coords_checked, 16U);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(GradCheck, DetectsAWrongGradient) {
  std::vector<double> p{1.0, 2.0};
  std::vector<double> wrong{2.0, 0.0};  // true gradient of x0^2 + x1^2 is (2, 4)
  auto f = [&]() { return p[0] * p[0] + p[1] * p[1]; };
  auto r = finite_diff_check<double>(f, std::span<double>(p), std::span<const double>(wrong));
  EXPECT_GT(r.max_rel_error, 0.5);
  EXPECT_EQ(r.worst_coord, 1U);
  EXPECT_DOUBLE_EQ(p[0], 1.0);  // restored
}

TEST(BranchTrace, SignatureFollowsReluAndMaxPoolChoices) {
  auto signature = [](std::vector<D> xs) {
    Graph<D> g;
    g.enable_branch_trace();
    auto x = g.constant(BasicTensor<D>({1, 1, 2, 2}, xs));
    maxpool2d(relu(x), 2, 2);
    return g.branch_signature();
  };
  EXPECT_EQ(signature({1, -2, 3, 0.5}), signature({2, -1, 4, 0.1}));
  EXPECT_NE(signature({1, -2, 3, 0.5}), signature({1, 2, 3, 0.5}));   // relu flips
  EXPECT_NE(signature({1, -2, 3, 0.5}), signature({5, -2, 3, 0.5}));  // argmax moves
  Graph<D> quiet;
  relu(quiet.constant(BasicTensor<D>({2}, {1, -1})));
  EXPECT_EQ(quiet.branch_signature(), Graph<D>().branch_signature());
}

TEST(GradCheck, PiecewiseSkipsCoordinatesAcrossAKink) {
  // f = sum relu(p); p[1] sits 1e-4 from the kink, closer than the step.
  std::vector<D> p{0.5, 1e-4, -0.7};
  const std::vector<D> analytic{1.0, 1.0, 0.0};
  auto probe = [&]() {
    Graph<D> g;
    g.enable_branch_trace();
    auto v = sum(relu(g.constant(BasicTensor<D>({3}, p))));
    return Probe{v.value()[0], g.branch_signature()};
  };
  auto r = finite_diff_check_piecewise<D>(probe, std::span<D>(p), std::span<const D>(analytic), {1e-3, 0, 0});
  EXPECT_EQ(r.coords_skipped, 1U);
  EXPECT_EQ(r.coords_checked, 2U);
  EXPECT_LT(r.max_rel_error, 1e-9);
  auto plain = finite_diff_check<D>([&] { return probe().value; }, std::span<D>(p),
                                    std::span<const D>(analytic), {1e-3, 0, 0});
  EXPECT_GT(plain.max_rel_error, 0.1);
}

TEST(GradCheck, PiecewiseSamplingRefillsSkippedCoordinates) {
  std::vector<D> p(200);
  std::vector<D> analytic(200);
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = (i % 2 == 0) ? 1.0 : 1e-5;  // odd coordinates straddle the kink
    analytic[i] = 1.0;
  }
  auto probe = [&]() {
    Graph<D> g;
    g.enable_branch_trace();
    auto v = sum(relu(g.constant(BasicTensor<D>({p.size()}, p))));
    return Probe{v.value()[0], g.branch_signature()};
  };
  auto r = finite_diff_check_piecewise<D>(probe, std::span<D>(p), std::span<const D>(analytic), {1e-3, 64, 3});
  EXPECT_EQ(r.coords_checked, 64U);
  EXPECT_GT(r.coords_skipped, 0U);
  EXPECT_LT(r.max_rel_error, 1e-9);
}

}  // namespace
}  // namespace care::ad
