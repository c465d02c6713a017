#include <gtest/gtest.h>

#include "test_support.hpp"

using namespace mebal;
using namespace mebal::testing;

namespace {

Eigen::MatrixXd random_spd(std::mt19937_64& rng, Eigen::Index p, double scale) {
  const Eigen::MatrixXd a = Eigen::MatrixXd::NullaryExpr(p, p, [&] { return std::normal_distribution<>()(rng); });
  return scale * (a * a.transpose() / static_cast<double>(p) + 0.2 * Eigen::MatrixXd::Identity(p, p));
}

// Dataset with the given per-subject replicate blocks, alternating arms.
Dataset with_replicates(const std::vector<Eigen::MatrixXd>& x, Eigen::Index p2 = 1) {
  std::vector<int> treat;
  for (std::size_t i = 0; i < x.size(); ++i) treat.push_back(static_cast<int>(i % 2));
  Eigen::MatrixXd u = Eigen::MatrixXd::Ones(static_cast<Eigen::Index>(x.size()), p2);
  for (Eigen::Index i = 0; i < u.rows(); ++i) u.row(i) *= static_cast<double>(i);
  return Dataset(treat, std::nullopt, u, x);
}

// Checks grad M and hess M against central differences at 20 random points.
void check_mgf_derivatives(const ErrorModel& model, Eigen::Index p, std::mt19937_64& rng) {
  for (int k = 0; k < 20; ++k) {
    Eigen::VectorXd t = random_vector(rng, p);
    if (t.norm() > 2.0) t *= 2.0 / t.norm();
    const MgfValue v = mgf(model, t);
    auto value = [&](const Eigen::VectorXd& x) { return mgf(model, x).value; };
    auto grad = [&](const Eigen::VectorXd& x) { return mgf(model, x).grad; };
    EXPECT_LT(max_rel_err(v.grad, fd_gradient(value, t, 1e-5)), 1e-5);
    EXPECT_LT(max_rel_err(v.hess, fd_jacobian(grad, t, 1e-5)), 1e-5);
    const MgfValue lv = log_mgf(model, t);
    auto lvalue = [&](const Eigen::VectorXd& x) { return log_mgf(model, x).value; };
    auto lgrad = [&](const Eigen::VectorXd& x) { return log_mgf(model, x).grad; };
    EXPECT_LT(max_rel_err(lv.grad, fd_gradient(lvalue, t, 1e-5)), 1e-5);
    EXPECT_LT(max_rel_err(lv.hess, fd_jacobian(lgrad, t, 1e-5)), 1e-5);
  }
}

}  // namespace

TEST(Mgf, OriginIsOne) {
  for (const ErrorModel& m : {ErrorModel::normal(Eigen::MatrixXd::Identity(2, 2)),
                              ErrorModel::uniform(0.3 * Eigen::MatrixXd::Identity(2, 2))}) {
    const MgfValue v = mgf(m, Eigen::VectorXd::Zero(3));
    EXPECT_DOUBLE_EQ(v.value, 1.0);
    EXPECT_TRUE(v.grad.isZero(0.0));
  }
}

TEST(Mgf, NormalClosedForm) {
  const ErrorModel m = ErrorModel::normal(Eigen::MatrixXd::Constant(1, 1, 0.5));
  const MgfValue v = mgf(m, Eigen::Vector2d(-3.0, 1.5));
  EXPECT_NEAR(v.value, std::exp(0.5 * 0.5 * 9.0), 1e-12);
  EXPECT_NEAR(v.grad(0), std::exp(2.25) * 0.5 * -3.0, 1e-12);
  EXPECT_EQ(v.grad(1), 0.0);  // exactly measured coordinate
  EXPECT_TRUE(v.hess.row(1).isZero(0.0));
}

TEST(Mgf, UniformMatchesQuadrature) {
  const ErrorModel m = ErrorModel::uniform(Eigen::MatrixXd::Constant(1, 1, 0.1));
  const double a = std::sqrt(0.3);
  const double quad = simpson([](double e) { return std::exp(e); }, -a, a, 2000) / (2.0 * a);
  EXPECT_NEAR(mgf(m, Eigen::VectorXd::Constant(1, 1.0)).value, quad, 1e-8);
  // two independent coordinates multiply
  Eigen::MatrixXd s(2, 2);
  s << 0.1, 0.0, 0.0, 0.4;
  const double b = std::sqrt(1.2);
  const double quad2 = simpson([](double e) { return std::exp(-0.7 * e); }, -b, b, 2000) / (2.0 * b);
  EXPECT_NEAR(mgf(ErrorModel::uniform(s), Eigen::Vector2d(1.0, -0.7)).value, quad * quad2, 1e-8);
}

TEST(Mgf, UniformNearZeroIsSmooth) {
  const ErrorModel m = ErrorModel::uniform(Eigen::MatrixXd::Constant(1, 1, 0.2));
  for (double t : {1e-12, 1e-9, 1e-6, 1e-4}) {
    const MgfValue v = mgf(m, Eigen::VectorXd::Constant(1, t));
    EXPECT_NEAR(v.value, 1.0 + 0.5 * 0.2 * t * t, 1e-12);
    EXPECT_NEAR(v.grad(0), 0.2 * t, 1e-10);
    EXPECT_NEAR(v.hess(0, 0), 0.2, 1e-6);
  }
}

TEST(Mgf, DerivativesMatchFiniteDifferences) {
  std::mt19937_64 rng(101);
  check_mgf_derivatives(ErrorModel::normal(random_spd(rng, 3, 0.5)), 5, rng);
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(2, 2);
  s.diagonal() << 0.3, 0.8;
  check_mgf_derivatives(ErrorModel::uniform(s), 4, rng);
  // Laplace errors with variance 2b^2: M(t) = prod 1 / (1 - b^2 t_j^2), |t_j| < 1/b.
  const double b = 0.3;
  CustomMgf laplace{
      [b](const Eigen::VectorXd& t) { return 1.0 / (1.0 - b * b * t(0) * t(0)); },
      [b](const Eigen::VectorXd& t) {
        const double d = 1.0 - b * b * t(0) * t(0);
        return Eigen::VectorXd::Constant(1, 2.0 * b * b * t(0) / (d * d));
      },
      [b](const Eigen::VectorXd& t) {
        const double d = 1.0 - b * b * t(0) * t(0), b2 = b * b;
        return Eigen::MatrixXd::Constant(1, 1, 2.0 * b2 / (d * d) + 8.0 * b2 * b2 * t(0) * t(0) / (d * d * d));
      }};
  check_mgf_derivatives(ErrorModel::custom(Eigen::MatrixXd::Constant(1, 1, 2 * b * b), laplace), 2, rng);
}

TEST(Mgf, SymmetricFamiliesAreEven) {
  std::mt19937_64 rng(3);
  const ErrorModel n = ErrorModel::normal(random_spd(rng, 2, 0.4));
  const ErrorModel u = ErrorModel::uniform(0.25 * Eigen::MatrixXd::Identity(2, 2));
  for (int k = 0; k < 20; ++k) {
    const Eigen::VectorXd t = random_vector(rng, 3);
    EXPECT_NEAR(mgf(n, t).value, mgf(n, Eigen::VectorXd(-t)).value, 1e-12 * mgf(n, t).value);
    EXPECT_NEAR(mgf(u, t).value, mgf(u, Eigen::VectorXd(-t)).value, 1e-12 * mgf(u, t).value);
  }
}

TEST(Mgf, ExponentClampRaisesNonFiniteExp) {
  const ErrorModel m = ErrorModel::normal(Eigen::MatrixXd::Identity(1, 1));
  try {
    mgf(m, Eigen::VectorXd::Constant(1, 40.0));  // 0.5 * 1600 = 800 > 700
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteExp);
  }
}

TEST(Mgf, CustomDivergenceIsMgfUndefined) {
  CustomMgf bad{[](const Eigen::VectorXd&) { return std::numeric_limits<double>::infinity(); },
                [](const Eigen::VectorXd&) { return Eigen::VectorXd::Zero(1); },
                [](const Eigen::VectorXd&) { return Eigen::MatrixXd::Zero(1, 1); }};
  const ErrorModel m = ErrorModel::custom(Eigen::MatrixXd::Identity(1, 1), bad);
  try {
    mgf(m, Eigen::VectorXd::Constant(1, 1.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MgfUndefined);
  }
}

TEST(ErrorModel, RejectsNonSymmetricOrIndefinite) {
  Eigen::MatrixXd a(2, 2);
  a << 1.0, 0.5, 0.0, 1.0;
  EXPECT_THROW(ErrorModel::normal(a), Error);
  a << 1.0, 2.0, 2.0, 1.0;
  EXPECT_THROW(ErrorModel::normal(a), Error);
}

TEST(EstimateSigma, IdenticalReplicatesGiveZero) {
  std::vector<Eigen::MatrixXd> x;
  for (int i = 0; i < 6; ++i) x.push_back(Eigen::MatrixXd::Constant(3, 2, 0.5 * i));
  const Eigen::MatrixXd s = estimate_sigma(with_replicates(x));
  EXPECT_TRUE(s.isZero(0.0));
  EXPECT_EQ(s.rows(), 3);
}

TEST(EstimateSigma, HandComputation) {
  std::vector<Eigen::MatrixXd> x{(Eigen::MatrixXd(2, 1) << 0.0, 2.0).finished(), Eigen::MatrixXd::Constant(1, 1, 7.0)};
  const Eigen::MatrixXd s = estimate_sigma(with_replicates(x));
  EXPECT_DOUBLE_EQ(s(0, 0), 2.0);
  EXPECT_EQ(s(1, 1), 0.0);
  EXPECT_EQ(s(0, 1), 0.0);
}

TEST(EstimateSigma, NoReplicates) {
  std::vector<Eigen::MatrixXd> x{Eigen::MatrixXd::Constant(1, 1, 1.0), Eigen::MatrixXd::Constant(1, 1, 2.0)};
  try {
    estimate_sigma(with_replicates(x));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoReplicates);
  }
}

TEST(EstimateSigma, ConsistentUnderSimulation) {
  std::mt19937_64 rng(2024);
  const auto inst = random_instance(rng, 5000, 2, 2, 2, 0.5);
  const Eigen::MatrixXd s = estimate_sigma(inst.data);
  EXPECT_NEAR(s(0, 0), 0.5, 0.05);
  EXPECT_NEAR(s(1, 1), 0.5, 0.05);
  EXPECT_TRUE(s.bottomRows(2).isZero(0.0));
  EXPECT_TRUE(s.rightCols(2).isZero(0.0));
  EXPECT_TRUE(s.isApprox(s.transpose()));
  EXPECT_GE(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(s).eigenvalues().minCoeff(), -1e-12);
}

TEST(Eta0Hat, IdenticalReplicatesAndOrigin) {
  std::vector<Eigen::MatrixXd> same;
  for (int i = 0; i < 4; ++i) same.push_back(Eigen::MatrixXd::Constant(2, 1, 1.0 + i));
  const EtaHat e = eta0_hat(Eigen::Vector2d(1.3, -0.4), with_replicates(same));
  EXPECT_DOUBLE_EQ(e.eta0, 1.0);
  EXPECT_TRUE(e.eta1.isZero(0.0));

  std::mt19937_64 rng(8);
  const auto inst = random_instance(rng, 50, 2, 1, 3, 0.4);
  EXPECT_DOUBLE_EQ(eta0_hat(Eigen::VectorXd::Zero(3), inst.data).eta0, 1.0);
}

TEST(Eta0Hat, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  const auto inst = random_instance(rng, 60, 2, 1, 3, 0.4);
  for (int k = 0; k < 20; ++k) {
    const Eigen::VectorXd t = random_vector(rng, 3);
    const EtaHat e = eta0_hat(t, inst.data);
    auto f = [&](const Eigen::VectorXd& x) { return eta0_hat(x, inst.data).eta0; };
    EXPECT_LT(max_rel_err(e.eta1, fd_gradient(f, t, 1e-6)), 1e-6);
    EXPECT_LT(max_rel_err(e.ratio, e.eta1 / e.eta0), 1e-12);
  }
}

TEST(Eta0Hat, NormalClosedForm) {
  std::mt19937_64 rng(77);
  const auto inst = random_instance(rng, 2000, 2, 1, 2, 0.1);
  const EtaHat e = eta0_hat(Eigen::Vector3d(1.0, 0.0, 0.0), inst.data);
  EXPECT_NEAR(e.eta0, std::exp(0.05), 0.02);
}

TEST(Eta0Hat, NoReplicates) {
  std::mt19937_64 rng(1);
  const auto inst = random_instance(rng, 20, 1, 1, 1, 0.1);
  EXPECT_THROW(eta0_hat(Eigen::Vector2d(1.0, 0.0), inst.data), Error);
}
