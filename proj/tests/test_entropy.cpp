#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "iblm/entropy.hpp"
#include "iblm/grad_check.hpp"
#include "test_util.hpp"

using namespace iblm;
using iblm::testing::random_matrix;
using iblm::testing::random_orthogonal;
using iblm::testing::reference_mbe;

namespace {

double mbe_of(const Tensor& r, double alpha, bool normalize = false) {
  Tape tape;
  return mbe(tape.constant(r), MbeConfig{alpha, normalize}).item();
}

}  // namespace

TEST(Oracle, ReferenceSpectrumMatchesJacobi) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor r = random_matrix(7, 7, seed);
    const auto ref = iblm::testing::reference_gram_spectrum(r);
    Tensor k({7, 7});
    k.mat() = r.mat() * r.mat().transpose();
    const auto got = jacobi_eigen(k).values;
    for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(got[i], ref[i], 1e-10 * ref[0]);
  }
}

TEST(Mbe, IdentityIsLogTwoForEveryOrder) {
  for (double alpha : {0.5, 1.0, 2.0, 3.0}) {
    const double v = mbe_of(Tensor::identity(2), alpha);
    EXPECT_NEAR(v, std::log(2.0), 1e-12) << alpha;
    EXPECT_NEAR(nats_to_bits(v), 1.0, 1e-12);
  }
}

TEST(Mbe, IdenticalRowsGiveZero) {
  EXPECT_NEAR(mbe_of(Tensor::matrix({{1, 1}, {1, 1}}), 2.0), 0.0, 1e-10);
  EXPECT_NEAR(mbe_of(Tensor::matrix({{1, 1}, {1, 1}}), 1.0), 0.0, 1e-9);
}

TEST(Mbe, RandomMatrixMatchesFrobeniusForm) {
  const Tensor r = random_matrix(6, 4, 17);
  const Eigen::MatrixXd k = r.mat() * r.mat().transpose();
  const double expected = -std::log(k.squaredNorm() / (k.trace() * k.trace()));
  EXPECT_NEAR(mbe_of(r, 2.0), expected, 1e-10);
  EXPECT_NEAR(reference_mbe(r, 2.0), expected, 1e-10);
}

TEST(Mbe, MatchesDenseOracleAcrossOrders) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor r = random_matrix(5 + seed % 4, 3 + seed % 5, 100 + seed);
    for (double alpha : {0.5, 1.0, 2.0, 3.5}) EXPECT_NEAR(mbe_of(r, alpha), reference_mbe(r, alpha), 1e-9);
  }
}

TEST(Mbe, Errors) {
  Tape tape;
  EXPECT_THROW(mbe(tape.constant(Tensor({3, 2}, 0.0))), DomainError);
  Tensor bad = random_matrix(3, 2, 1);
  bad[4] = std::nan("");
  EXPECT_THROW(mbe(tape.constant(bad)), NonFiniteError);
  EXPECT_THROW(mbe(tape.constant(random_matrix(3, 2, 1)), MbeConfig{-1.0}), DomainError);
  EXPECT_THROW(mbe_alpha2_fast(tape.constant(Tensor({3, 2}, 0.0))), DomainError);
}

TEST(Mbe, GradientMatchesFiniteDifferences) {
  for (double alpha : {2.0, 1.0, 0.7}) {
    const Tensor r = random_matrix(6, 4, 23);
    EXPECT_LE(grad_check([alpha](Var x) { return mbe(x, MbeConfig{alpha}); }, r), 1e-4) << alpha;
  }
  // wide matrix exercises the feature-side Gram
  EXPECT_LE(grad_check([](Var x) { return mbe(x, MbeConfig{2.0, true}); }, random_matrix(3, 7, 5)), 1e-4);
}

TEST(Mbe, GradientFiniteOnRankDeficientInput) {
  Tape tape;
  Var r = tape.leaf(Tensor::matrix({{1, 2}, {2, 4}, {3, 6}}));
  tape.backward(mbe(r, MbeConfig{1.0}));
  EXPECT_TRUE(r.grad().all_finite());
}

TEST(MbeFast, EqualSpectrumAndRankOne) {
  Tape tape;
  EXPECT_NEAR(mbe_alpha2_fast(tape.constant(Tensor::identity(3))).item(), std::log(3.0), 1e-12);
  EXPECT_NEAR(mbe_alpha2_fast(tape.constant(Tensor::matrix({{1, 2}, {2, 4}}))).item(), 0.0, 1e-12);
}

TEST(MbeFast, MatchesEigenPathOnHundredMatrices) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Tensor r = random_matrix(8, 5, 7000 + seed);
    Tape tape;
    const double fast = mbe_alpha2_fast(tape.constant(r)).item();
    EXPECT_NEAR(fast, mbe_of(r, 2.0), 1e-10);
    EXPECT_NEAR(mbe_alpha2_value(r), fast, 1e-12);
  }
}

TEST(MbeFast, GradientMatchesFiniteDifferences) {
  EXPECT_LE(grad_check([](Var x) { return mbe_alpha2_fast(x, true); }, random_matrix(8, 5, 3)), 1e-4);
}

TEST(MbeProperties, ScaleInvariance) {
  const Tensor r = random_matrix(9, 6, 31);
  const double base = mbe_of(r, 2.0);
  for (double c : {1e-3, 1.0, 1e3}) {
    Tensor scaled = r;
    for (auto& v : scaled.storage()) v *= c;
    EXPECT_NEAR(mbe_of(scaled, 2.0), base, 1e-9);
    EXPECT_NEAR(mbe_of(scaled, 1.0), mbe_of(r, 1.0), 1e-9);
  }
}

TEST(MbeProperties, OrthogonalInvariance) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor r = random_matrix(10, 6, 50 + seed);
    const Tensor q = random_orthogonal(6, 90 + seed);
    const Tensor rq = from_matrix(r.mat() * q.mat());
    EXPECT_NEAR(mbe_of(rq, 2.0), mbe_of(r, 2.0), 1e-8);
    EXPECT_NEAR(mbe_of(rq, 1.0), mbe_of(r, 1.0), 1e-8);
  }
}

TEST(MbeProperties, RangeAndNormalizedRange) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const Tensor r = random_matrix(4 + seed % 7, 2 + seed % 9, 300 + seed);
    const double cap = std::log(static_cast<double>(std::min(r.dim(0), r.dim(1))));
    for (double alpha : {0.5, 1.0, 2.0}) {
      const double v = mbe_of(r, alpha);
      EXPECT_GE(v, -1e-12);
      EXPECT_LE(v, cap + 1e-9);
      const double n = mbe_of(r, alpha, true);
      EXPECT_GE(n, -1e-12);
      EXPECT_LE(n, 1.0 + 1e-9);
    }
  }
}

TEST(MbeProperties, AlphaLimitApproachesShannonForm) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor r = random_matrix(7, 5, 900 + seed);
    EXPECT_LE(std::abs(mbe_of(r, 1.0001) - mbe_of(r, 1.0)), 1e-3);
  }
}

TEST(SpectrumReport, NormalizedSpectrumIsADistribution) {
  const auto rep = spectrum_report(random_matrix(12, 5, 8));
  double total = 0.0;
  for (double p : rep.normalized_spectrum) total += p;
  EXPECT_NEAR(total, 1.0, 1e-8);
  ASSERT_EQ(rep.eigenvalues.size(), 5u);
  for (std::size_t i = 1; i < rep.eigenvalues.size(); ++i) EXPECT_GE(rep.eigenvalues[i - 1], rep.eigenvalues[i]);
  std::size_t above = 0;
  for (double l : rep.eigenvalues) above += l > 1e-12 * rep.trace ? 1 : 0;
  EXPECT_LE(rep.mbe, std::log(static_cast<double>(above)) + 1e-9);
}

TEST(Shannon, Examples) {
  const std::vector<double> uniform(8, 0.125);
  EXPECT_DOUBLE_EQ(shannon_entropy(uniform), 3.0);
  const std::vector<double> point = {0.0, 1.0, 0.0};
  EXPECT_DOUBLE_EQ(shannon_entropy(point), 0.0);
  const std::vector<double> dyadic = {0.5, 0.25, 0.25};
  EXPECT_DOUBLE_EQ(shannon_entropy(dyadic), 1.5);
}

TEST(Shannon, Errors) {
  const std::vector<double> negative = {1.2, -0.2};
  EXPECT_THROW(shannon_entropy(negative), DomainError);
  const std::vector<double> short_sum = {0.5, 0.4};
  EXPECT_THROW(shannon_entropy(short_sum), DomainError);
}

TEST(MinProbBound, Examples) {
  EXPECT_NEAR(min_prob_entropy_bound(2, 0.5).exact, 1.0, 1e-12);
  EXPECT_NEAR(min_prob_entropy_bound(1024, 1e-4).approx, 1.024, 1e-12);
  EXPECT_THROW(min_prob_entropy_bound(4, 0.3), DomainError);
  EXPECT_THROW(min_prob_entropy_bound(4, 0.0), DomainError);
  EXPECT_THROW(min_prob_entropy_bound(1, 0.5), DomainError);
}

TEST(MinProbBound, BelowEverySampledDistribution) {
  // Distributions with every mass >= alpha_min: alpha_min plus a Dirichlet(1)
  // share of the remaining 1 - n alpha_min.
  constexpr int n = 16;
  constexpr double am = 0.01;
  const double bound = min_prob_entropy_bound(n, am).exact;
  std::mt19937_64 rng(2024);
  std::exponential_distribution<double> expo(1.0);
  std::vector<double> p(n);
  double lowest = std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < 100000; ++trial) {
    double z = 0.0;
    for (auto& v : p) z += (v = expo(rng));
    for (auto& v : p) v = am + (1.0 - n * am) * v / z;
    lowest = std::min(lowest, shannon_entropy(p));
  }
  EXPECT_LE(bound, lowest);
  // The extremal distribution attains it.
  std::vector<double> extremal(n, am);
  extremal[0] = 1.0 - am * (n - 1);
  EXPECT_NEAR(shannon_entropy(extremal), bound, 1e-12);
}

TEST(Beta, Examples) {
  const std::vector<double> uniform(5, 0.2);
  EXPECT_NEAR(beta_for_distribution(uniform), 1.0, 1e-12);
  const std::vector<double> dyadic = {0.5, 0.25, 0.25};
  EXPECT_NEAR(beta_for_distribution(dyadic), 1.5 / std::log2(3.0), 1e-12);
  EXPECT_NEAR(beta_for_distribution(dyadic), 0.946, 5e-4);
  const double e = 1e-6;
  const std::vector<double> peaked = {1 - 3 * e, e, e, e};
  EXPECT_LT(beta_for_distribution(peaked), 0.01);
  EXPECT_GT(beta_for_distribution(peaked), 0.0);
  const std::vector<double> zero = {0.5, 0.5, 0.0};
  EXPECT_THROW(beta_for_distribution(zero), DomainError);
}

TEST(GapBound, Examples) {
  BoundInputs in;
  in.sample_count = 1024;
  in.layer_entropy_bits = {0.0};
  EXPECT_DOUBLE_EQ(generalization_gap_bound(in), 0.3125);
  in.layer_entropy_bits = {2.0, 3.0};
  EXPECT_DOUBLE_EQ(generalization_gap_bound(in), 1.25);
  in.layer_entropy_bits = {3.0, 2.0};
  EXPECT_DOUBLE_EQ(generalization_gap_bound(in), 1.25);
  in.sample_count = 1;
  EXPECT_THROW(generalization_gap_bound(in), DomainError);
  in.sample_count = 16;
  in.alpha_exponent = 0.5;
  EXPECT_THROW(generalization_gap_bound(in), DomainError);
}

TEST(GapBound, MonotonicityGrid) {
  BoundInputs in;
  for (std::size_t n = 16; n <= 4096; n *= 2) {
    for (double h = 0.0; h <= 8.0; h += 0.25) {
      in.sample_count = n;
      in.layer_entropy_bits = {h, h + 1.0};
      const double base = generalization_gap_bound(in);
      in.layer_entropy_bits = {h + 0.25, h + 1.0};
      EXPECT_GT(generalization_gap_bound(in), base) << n << ' ' << h;
      in.layer_entropy_bits = {h, h + 1.0};
      in.sample_count = n + 1;
      EXPECT_LT(generalization_gap_bound(in), base) << n << ' ' << h;
    }
  }
}
