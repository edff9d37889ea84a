#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>

#include "care/ad/gradcheck.hpp"
#include "care/objective.hpp"
#include "support/random_tensor.hpp"
#include "support/sica_oracle.hpp"

namespace care {
namespace {

using testing::Rows;
using D = double;

ad::BasicTensor<D> to_tensor(const Rows& rows) {
  std::vector<D> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return ad::BasicTensor<D>({rows.size(), rows[0].size()}, flat);
}

Rows random_unit_rows(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Rows out(n, std::vector<double>(d));
  for (auto& r : out) {
    double norm = 0;
    for (auto& v : r) {
      v = g(rng);
      norm += v * v;
    }
    for (auto& v : r) v /= std::sqrt(norm);
  }
  return out;
}

double sica_value(const Rows& zs, const Rows& zi, const std::vector<std::size_t>& y,
                  const ContrastiveConfig& cfg) {
  ad::Graph<D> g;
  return sica_loss(g.constant(to_tensor(zs)), g.constant(to_tensor(zi)), y, cfg).value()[0];
}

ContrastiveConfig config(double tau, ContrastiveMode mode = ContrastiveMode::kCrossView) {
  ContrastiveConfig c;
  c.temperature = tau;
  c.mode = mode;
  return c;
}

// ---- positive sets ---------------------------------------------------------

TEST(PositiveSets, TwoClassesCrossView) {
  auto p = build_positive_sets({0, 1}, ContrastiveMode::kCrossView, 0);
  EXPECT_TRUE(p.same_view.empty());
  EXPECT_EQ(p.other_view, (std::vector<std::size_t>{2}));
  EXPECT_EQ(p.denominator.size(), 3U);
}

TEST(PositiveSets, OneClass) {
  auto p = build_positive_sets({0, 0}, ContrastiveMode::kCrossView, 0);
  EXPECT_EQ(p.same_view, (std::vector<std::size_t>{1}));
  EXPECT_EQ(p.other_view, (std::vector<std::size_t>{2, 3}));
}

TEST(PositiveSets, WithinViewDropsOtherView) {
  auto p = build_positive_sets({0, 1}, ContrastiveMode::kWithinView, 0);
  EXPECT_EQ(p.positives(), 0U);
  EXPECT_EQ(p.denominator.size(), 3U);
  auto q = build_positive_sets({0, 1, 0}, ContrastiveMode::kWithinView, 5);
  EXPECT_EQ(q.same_view, (std::vector<std::size_t>{3}));
  EXPECT_TRUE(q.other_view.empty());
}

TEST(PositiveSets, Errors) {
  EXPECT_THROW(build_positive_sets({0}, ContrastiveMode::kCrossView, 0), UsageError);
  EXPECT_THROW(build_positive_sets({0, 1}, ContrastiveMode::kOff, 0), UsageError);
}

TEST(PositiveSets, CrossViewAnchorsAlwaysHaveAPositive) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::size_t> y(2 + rng() % 7);
    for (auto& v : y) v = rng() % 4;
    for (std::size_t i = 0; i < 2 * y.size(); ++i) {
      auto p = build_positive_sets(y, ContrastiveMode::kCrossView, i);
      const std::size_t twin = i < y.size() ? i + y.size() : i - y.size();
      EXPECT_NE(std::find(p.other_view.begin(), p.other_view.end(), twin), p.other_view.end());
    }
  }
}

// ---- sica values -------------------------------------------------------------

const Rows kE1 = {{1, 0}, {0, 1}};

TEST(Sica, OrthogonalPairExample) {
  const double expected = testing::oracle_sica(kE1, kE1, {0, 1}, 1.0, true);
  EXPECT_NEAR(expected, std::log(1.0 + 2.0 / std::exp(1.0)), 1e-12);
  EXPECT_NEAR(expected, 0.5514, 1e-4);
  EXPECT_NEAR(sica_value(kE1, kE1, {0, 1}, config(1.0)), expected, 1e-12);
}

TEST(Sica, LargeTemperatureTendsToLog3) {
  const double expected = testing::oracle_sica(kE1, kE1, {0, 1}, 1e6, true);
  EXPECT_NEAR(expected, std::log(3.0), 1e-5);
  EXPECT_NEAR(sica_value(kE1, kE1, {0, 1}, config(1e6)), expected, 1e-12);
}

TEST(Sica, DuplicateSingleClassBatch) {
  const Rows same = {{0.6, 0.8}, {0.6, 0.8}};
  const double expected = testing::oracle_sica(same, same, {0, 0}, 0.5, true);
  EXPECT_NEAR(expected, std::log(3.0), 1e-12);  // every ratio is 1/3
  EXPECT_NEAR(sica_value(same, same, {0, 0}, config(0.5)), expected, 1e-12);
}

TEST(Sica, MatchesOracleOnRandomBatches) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t b = 2 + rng() % 7, d = 2 + rng() % 3, c = 2 + rng() % 3;
    const double tau = std::vector<double>{0.05, 0.1, 0.5, 1.0}[rng() % 4];
    std::vector<std::size_t> y(b);
    for (auto& v : y) v = rng() % c;
    auto zs = random_unit_rows(b, d, rng), zi = random_unit_rows(b, d, rng);
    for (bool cross : {true, false}) {
      const auto mode = cross ? ContrastiveMode::kCrossView : ContrastiveMode::kWithinView;
      EXPECT_NEAR(sica_value(zs, zi, y, config(tau, mode)), testing::oracle_sica(zs, zi, y, tau, cross),
                  1e-9);
    }
  }
}

TEST(Sica, WithinViewSkipsAnchorsWithoutPositives) {
  // labels [0,1]: no anchor has a same-view positive.
  EXPECT_EQ(sica_value(kE1, kE1, {0, 1}, config(1.0, ContrastiveMode::kWithinView)), 0.0);
  const Rows three = {{1, 0}, {0, 1}, {0.6, 0.8}};
  auto losses = sica_anchor_losses(to_tensor(three), to_tensor(three), {0, 1, 0},
                                   config(1.0, ContrastiveMode::kWithinView));
  ASSERT_EQ(losses.size(), 6U);
  EXPECT_EQ(losses[1], 0.0);
  EXPECT_EQ(losses[4], 0.0);
  for (std::size_t i : {0, 2, 3, 5}) EXPECT_GT(losses[i], 0.0);
}

TEST(Sica, PermutationAndViewSwapInvariance) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t b = 2 + rng() % 7, d = 2 + rng() % 3;
    std::vector<std::size_t> y(b);
    for (auto& v : y) v = rng() % 3;
    auto zs = random_unit_rows(b, d, rng), zi = random_unit_rows(b, d, rng);
    const auto cfg = config(0.2);
    const double base = sica_value(zs, zi, y, cfg);
    std::vector<std::size_t> perm(b);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Rows ps, pi;
    std::vector<std::size_t> py;
    for (std::size_t k : perm) {
      ps.push_back(zs[k]);
      pi.push_back(zi[k]);
      py.push_back(y[k]);
    }
    EXPECT_NEAR(sica_value(ps, pi, py, cfg), base, 1e-9);
    EXPECT_NEAR(sica_value(zi, zs, y, cfg), base, 1e-9);
  }
}

Rows rotate_toward(Rows z, std::size_t row, const std::vector<double>& target, double step) {
  double norm = 0;
  for (std::size_t k = 0; k < target.size(); ++k) {
    z[row][k] += step * (target[k] - z[row][k]);
    norm += z[row][k] * z[row][k];
  }
  for (auto& v : z[row]) v /= std::sqrt(norm);
  return z;
}

// With a single positive, d L_i / d s_ip = softmax_ip - 1 < 0.
TEST(Sica, RaisingTheOnlyPositiveLowersItsAnchorTerm) {
  std::mt19937_64 rng(9);
  const std::vector<std::size_t> y{0, 1, 2, 3};
  const auto cfg = config(0.5);
  for (int trial = 0; trial < 100; ++trial) {
    auto zs = random_unit_rows(4, 3, rng), zi = random_unit_rows(4, 3, rng);
    const double before = sica_anchor_losses(to_tensor(zs), to_tensor(zi), y, cfg)[0];
    auto moved = rotate_toward(zi, 0, zs[0], 0.2);
    ASSERT_GT(testing::cosine(zs[0], moved[0]), testing::cosine(zs[0], zi[0]));
    EXPECT_LT(sica_anchor_losses(to_tensor(zs), to_tensor(moved), y, cfg)[0], before);
  }
}

// With several positives the slope is softmax_ip - 1/|P(i)|, so raising one
// positive lowers L_i only while its softmax weight is under 1/|P(i)|.
TEST(Sica, PositiveSlopeFollowsSoftmaxShare) {
  std::mt19937_64 rng(19);
  const std::vector<std::size_t> y{0, 0, 1, 1};
  const auto cfg = config(0.5);
  int lowered = 0, raised = 0;
  for (int trial = 0; trial < 200; ++trial) {
    auto zs = random_unit_rows(4, 3, rng), zi = random_unit_rows(4, 3, rng);
    // anchor z_1^S, positives {z_2^S, z_1^I, z_2^I}; perturb z_2^S.
    Rows all(zs);
    all.insert(all.end(), zi.begin(), zi.end());
    double denom = 0;
    for (std::size_t a = 1; a < 8; ++a) denom += std::exp(testing::cosine(all[0], all[a]) / 0.5);
    const double share = std::exp(testing::cosine(all[0], all[1]) / 0.5) / denom;
    if (std::abs(share - 1.0 / 3.0) < 0.02) continue;
    const double before = sica_anchor_losses(to_tensor(zs), to_tensor(zi), y, cfg)[0];
    auto moved = rotate_toward(zs, 1, zs[0], 1e-3);
    const double after = sica_anchor_losses(to_tensor(moved), to_tensor(zi), y, cfg)[0];
    if (share < 1.0 / 3.0) {
      EXPECT_LT(after, before);
      ++lowered;
    } else {
      EXPECT_GT(after, before);
      ++raised;
    }
  }
  EXPECT_GT(lowered, 0);
  EXPECT_GT(raised, 0);
}

TEST(Sica, Errors) {
  ad::Graph<D> g;
  auto one = g.constant(ad::BasicTensor<D>({1, 2}, {1, 0}));
  EXPECT_THROW(sica_loss(one, one, {0}, config(0.1)), UsageError);
  auto bad = g.constant(ad::BasicTensor<D>({2, 2}, {1, 0, NAN, 0}));
  auto ok = g.constant(to_tensor(kE1));
  EXPECT_THROW(sica_loss(bad, ok, {0, 1}, config(0.1)), NumericError);
  EXPECT_THROW(sica_loss(ok, ok, {0, 1}, config(0.0)), UsageError);
  EXPECT_THROW(sica_loss(ok, ok, {0, 1}, config(0.1, ContrastiveMode::kOff)), UsageError);
}

TEST(Sica, GradientThroughNormalization) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t b = 5, d = 4;
    std::vector<std::size_t> y{0, 1, 0, 2, 1};
    for (auto mode : {ContrastiveMode::kCrossView, ContrastiveMode::kWithinView}) {
      auto r = ad::finite_diff_check_graph<D>(
          [&](auto&, const auto& v) {
            return sica_loss(ad::l2_normalize_rows(v[0]), ad::l2_normalize_rows(v[1]), y,
                             config(0.3, mode));
          },
          {testing::random_tensor<D>({b, d}, rng), testing::random_tensor<D>({b, d}, rng)},
          {1e-3, 0, 0});
      EXPECT_LT(r.max_rel_error, 1e-3);
    }
  }
}

// ---- cross-entropy -----------------------------------------------------------

double ce_value(std::vector<double> logits, std::size_t c, std::vector<std::size_t> y) {
  ad::Graph<D> g;
  auto v = g.constant(ad::BasicTensor<D>({logits.size() / c, c}, logits));
  return ce_loss(v, y).value()[0];
}

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(ce_value({0, 0}, 2, {0}), std::log(2.0), 1e-12);
  EXPECT_NEAR(ce_value({1000, 0}, 2, {0}), 0.0, 1e-12);
  EXPECT_NEAR(ce_value({0, 1000}, 2, {0}), 1000.0, 1e-9);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(ce_value({0, 0, 0, 0}, 4, {k}), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, Errors) {
  EXPECT_THROW(ce_value({0, 0}, 2, {2}), DataError);
  EXPECT_THROW(ce_value({0}, 1, {0}), UsageError);
}

TEST(CrossEntropy, PermutationInvariance) {
  std::mt19937_64 rng(12);
  auto logits = testing::random_tensor<D>({6, 3}, rng, -3, 3);
  std::vector<std::size_t> y{0, 1, 2, 2, 1, 0};
  std::vector<double> flat(logits.values().begin(), logits.values().end());
  const double base = ce_value(flat, 3, y);
  std::vector<double> rev;
  std::vector<std::size_t> ry;
  for (std::size_t r = 6; r-- > 0;) {
    rev.insert(rev.end(), flat.begin() + static_cast<long>(r * 3), flat.begin() + static_cast<long>(r * 3 + 3));
    ry.push_back(y[r]);
  }
  EXPECT_NEAR(ce_value(rev, 3, ry), base, 1e-12);
}

TEST(CrossEntropy, GradientCheck) {
  std::mt19937_64 rng(13);
  std::vector<std::size_t> y{0, 2, 1, 2};
  auto r = ad::finite_diff_check_graph<D>(
      [&](auto&, const auto& v) { return ce_loss(v[0], y); },
      {testing::random_tensor<D>({4, 3}, rng, -2, 2)}, {1e-3, 0, 0});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

// Single precision end to end: a two-layer tanh network under cross-entropy.
// The loss itself is a 32-bit value, so a central difference carries an
// absolute error near ulp(loss)/h; coordinates whose gradient is comparable
// to that floor cannot reach 1e-3 relative agreement. Each coordinate must
// agree to 1e-3 relative or sit within a few rounding floors.
TEST(CrossEntropy, FloatTwoLayerNetGradientCheck) {
  using F = float;
  const double h = 1e-3;
  std::vector<std::size_t> y{0, 1, 2, 1};
  auto net = [&](const std::vector<ad::BasicTensor<F>>& in, std::vector<ad::BasicTensor<F>>* grads) {
    ad::Graph<F> g;
    std::vector<ad::Var<F>> v;
    for (const auto& t : in) v.push_back(g.leaf(t));
    auto loss = ce_loss(ad::matmul(ad::tanh(ad::matmul(v[0], v[1])), v[2]), y);
    if (grads) {
      g.backward(loss);
      for (const auto& x : v) grads->push_back(g.grad(x));
    }
    return static_cast<double>(loss.value()[0]);
  };
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<ad::BasicTensor<F>> in{testing::random_tensor<F>({4, 3}, rng, -2, 2),
                                       testing::random_tensor<F>({3, 6}, rng, -1, 1),
                                       testing::random_tensor<F>({6, 3}, rng, -1, 1)};
    std::vector<ad::BasicTensor<F>> grads;
    const double base = net(in, &grads);
    const double floor = 4.0 * std::numeric_limits<F>::epsilon() * std::max(1.0, base) / (2.0 * h);
    for (std::size_t t = 0; t < in.size(); ++t) {
      for (std::size_t k = 0; k < in[t].size(); ++k) {
        const F keep = in[t][k];
        const F hi = static_cast<F>(keep + h), lo = static_cast<F>(keep - h);
        in[t][k] = hi;
        const double up = net(in, nullptr);
        in[t][k] = lo;
        const double down = net(in, nullptr);
        in[t][k] = keep;
        const double numeric = (up - down) / (static_cast<double>(hi) - static_cast<double>(lo));
        const double analytic = grads[t][k];
        const double tol = std::max(1e-3 * std::max(std::abs(analytic), std::abs(numeric)), floor);
        EXPECT_LE(std::abs(analytic - numeric), tol) << "seed " << seed << " input " << t << " coord " << k;
      }
    }
  }
}

// ---- blend -------------------------------------------------------------------

TEST(CareLoss, Endpoints) {
  EXPECT_EQ(care_loss(0.5514, 0.6931, 0.0), 0.6931);
  EXPECT_EQ(care_loss(0.5514, 0.6931, 1.0), 0.5514);
  EXPECT_NEAR(care_loss(0.5514, 0.6931, 0.5), 0.62225, 1e-12);
  EXPECT_THROW(care_loss(0.1, 0.2, 1.5), UsageError);
}

TEST(CareLoss, GraphBlendAndGradient) {
  std::mt19937_64 rng(15);
  std::vector<std::size_t> y{0, 1, 1};
  for (double beta : {0.0, 0.5, 1.0}) {
    auto r = ad::finite_diff_check_graph<D>(
        [&](auto&, const auto& v) {
          auto sica = sica_loss(ad::l2_normalize_rows(v[0]), ad::l2_normalize_rows(v[1]), y, config(0.5));
          return care_loss(sica, ce_loss(v[2], y), beta);
        },
        {testing::random_tensor<D>({3, 3}, rng), testing::random_tensor<D>({3, 3}, rng),
         testing::random_tensor<D>({3, 2}, rng)},
        {1e-3, 0, 0});
    EXPECT_LT(r.max_rel_error, 1e-3) << "beta " << beta;
  }
}

}  // namespace
}  // namespace care
