#pragma once

// Additive measurement-error model: error covariance, moment generating
// function (with first and second derivatives) and replicate-based estimates.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <string>
#include <utility>

#include "mebal/dataset.hpp"
#include "mebal/error.hpp"

namespace mebal {

inline constexpr double kMaxExponent = 700.0;

enum class ErrorFamily { normal, uniform_symmetric, custom };

inline std::string_view to_string(ErrorFamily family) {
  switch (family) {
    case ErrorFamily::normal: return "normal";
    case ErrorFamily::uniform_symmetric: return "uniform";
    case ErrorFamily::custom: return "custom";
  }
  return "normal";
}

// M(t), grad M(t), hess M(t) for a length-p1 argument.
struct CustomMgf {
  std::function<double(const Eigen::VectorXd&)> value;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> gradient;
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> hessian;
};

// Value, gradient and Hessian of either M or log M, in the full p coordinates.
struct MgfValue {
  double value = 1.0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd hess;
};

class ErrorModel {
 public:
  static ErrorModel normal(Eigen::MatrixXd sigma1) {
    return ErrorModel(ErrorFamily::normal, std::move(sigma1), {});
  }
  // Independent coordinates, error j uniform on [-a_j, a_j], a_j = sqrt(3 sigma1_jj).
  // Off-diagonal entries of sigma1 are ignored by the MGF.
  static ErrorModel uniform(Eigen::MatrixXd sigma1) {
    return ErrorModel(ErrorFamily::uniform_symmetric, std::move(sigma1), {});
  }
  static ErrorModel custom(Eigen::MatrixXd sigma1, CustomMgf mgf) {
    if (!mgf.value || !mgf.gradient || !mgf.hessian)
      fail(ErrorCode::InvalidArgument, "custom MGF needs value, gradient and hessian callbacks");
    return ErrorModel(ErrorFamily::custom, std::move(sigma1), std::move(mgf));
  }
  static ErrorModel isotropic(ErrorFamily family, Eigen::Index p1, double variance) {
    Eigen::MatrixXd s = variance * Eigen::MatrixXd::Identity(p1, p1);
    if (family == ErrorFamily::uniform_symmetric) return uniform(std::move(s));
    if (family == ErrorFamily::custom)
      fail(ErrorCode::InvalidArgument, "custom family needs explicit callbacks");
    return normal(std::move(s));
  }

  ErrorFamily family() const { return family_; }
  const Eigen::MatrixXd& sigma1() const { return sigma1_; }
  Eigen::Index p1() const { return sigma1_.rows(); }
  const CustomMgf& custom_mgf() const { return custom_; }
  bool is_zero() const { return sigma1_.isZero(0.0); }

  // diag(sigma1, 0) of size p x p.
  Eigen::MatrixXd sigma_full(Eigen::Index p) const {
    if (p < p1()) fail(ErrorCode::DimensionMismatch, "p smaller than error dimension");
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(p, p);
    s.topLeftCorner(p1(), p1()) = sigma1_;
    return s;
  }

 private:
  ErrorModel(ErrorFamily family, Eigen::MatrixXd sigma1, CustomMgf mgf)
      : family_(family), sigma1_(std::move(sigma1)), custom_(std::move(mgf)) {
    if (sigma1_.rows() != sigma1_.cols())
      fail(ErrorCode::DimensionMismatch, "sigma1 must be square");
    if (!sigma1_.allFinite()) fail(ErrorCode::NonFiniteValue, "sigma1 has non-finite entries");
    if ((sigma1_ - sigma1_.transpose()).cwiseAbs().maxCoeff() > 1e-10)
      fail(ErrorCode::InvalidArgument, "sigma1 is not symmetric");
    if (sigma1_.size() > 0) {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sigma1_, Eigen::EigenvaluesOnly);
      if (eig.eigenvalues().minCoeff() < -1e-12)
        fail(ErrorCode::InvalidArgument, "sigma1 is not positive semidefinite");
    }
  }

  ErrorFamily family_ = ErrorFamily::normal;
  Eigen::MatrixXd sigma1_;
  CustomMgf custom_;
};

namespace detail {

// g(x) = log(sinh(x) / x) and its first two derivatives.
struct LogSinhc {
  double value, d1, d2;
};

inline LogSinhc log_sinhc(double x) {
  const double ax = std::abs(x);
  if (ax < 0.1) {
    const double x2 = x * x;
    return {x2 / 6.0 - x2 * x2 / 180.0 + x2 * x2 * x2 / 2835.0,
            x * (1.0 / 3.0 - x2 / 45.0 + 2.0 * x2 * x2 / 945.0 - x2 * x2 * x2 / 4725.0),
            1.0 / 3.0 - x2 / 15.0 + 2.0 * x2 * x2 / 189.0 - x2 * x2 * x2 / 675.0};
  }
  const double value = ax + std::log1p(-std::exp(-2.0 * ax)) - std::log(2.0) - std::log(ax);
  const double coth = 1.0 / std::tanh(x);
  const double inv_sinh2 = ax < 350.0 ? 1.0 / (std::sinh(x) * std::sinh(x)) : 0.0;
  return {value, coth - 1.0 / x, 1.0 / (x * x) - inv_sinh2};
}

inline void check_exponent(double e, const std::string& where) {
  if (!std::isfinite(e) || std::abs(e) > kMaxExponent)
    fail(ErrorCode::NonFiniteExp, "exponent " + std::to_string(e) + " out of range in " + where);
}

}  // namespace detail

// log M(theta) with gradient and Hessian; theta has length p >= p1 and only
// its leading p1 coordinates matter.
inline MgfValue log_mgf(const ErrorModel& model, const Eigen::VectorXd& theta) {
  const Eigen::Index p = theta.size();
  const Eigen::Index p1 = model.p1();
  if (p < p1) fail(ErrorCode::DimensionMismatch, "theta shorter than error dimension");
  if (!theta.allFinite()) fail(ErrorCode::NonFiniteValue, "theta has non-finite entries");
  MgfValue out{0.0, Eigen::VectorXd::Zero(p), Eigen::MatrixXd::Zero(p, p)};
  const Eigen::VectorXd tx = theta.head(p1);
  switch (model.family()) {
    case ErrorFamily::normal: {
      const Eigen::VectorXd s_t = model.sigma1() * tx;
      out.value = 0.5 * tx.dot(s_t);
      detail::check_exponent(out.value, "normal MGF");
      out.grad.head(p1) = s_t;
      out.hess.topLeftCorner(p1, p1) = model.sigma1();
      break;
    }
    case ErrorFamily::uniform_symmetric: {
      for (Eigen::Index j = 0; j < p1; ++j) {
        const double a = std::sqrt(3.0 * std::max(model.sigma1()(j, j), 0.0));
        const double x = tx(j) * a;
        detail::check_exponent(x, "uniform MGF");
        const auto g = detail::log_sinhc(x);
        out.value += g.value;
        out.grad(j) = a * g.d1;
        out.hess(j, j) = a * a * g.d2;
      }
      break;
    }
    case ErrorFamily::custom: {
      const double m = model.custom_mgf().value(tx);
      if (!std::isfinite(m) || m <= 0.0)
        fail(ErrorCode::MgfUndefined, "custom MGF returned " + std::to_string(m));
      const Eigen::VectorXd gm = model.custom_mgf().gradient(tx);
      const Eigen::MatrixXd hm = model.custom_mgf().hessian(tx);
      if (gm.size() != p1 || hm.rows() != p1 || hm.cols() != p1)
        fail(ErrorCode::DimensionMismatch, "custom MGF derivative has wrong shape");
      if (!gm.allFinite() || !hm.allFinite())
        fail(ErrorCode::MgfUndefined, "custom MGF derivative is not finite");
      out.value = std::log(m);
      detail::check_exponent(out.value, "custom MGF");
      out.grad.head(p1) = gm / m;
      out.hess.topLeftCorner(p1, p1) = hm / m - gm * gm.transpose() / (m * m);
      break;
    }
  }
  return out;
}

// M(theta) = E exp(theta' eps), with gradient and Hessian.
inline MgfValue mgf(const ErrorModel& model, const Eigen::VectorXd& theta) {
  if (model.family() == ErrorFamily::custom) {
    const Eigen::Index p = theta.size();
    const Eigen::Index p1 = model.p1();
    if (p < p1) fail(ErrorCode::DimensionMismatch, "theta shorter than error dimension");
    const Eigen::VectorXd tx = theta.head(p1);
    MgfValue out{model.custom_mgf().value(tx), Eigen::VectorXd::Zero(p),
                 Eigen::MatrixXd::Zero(p, p)};
    if (!std::isfinite(out.value) || out.value <= 0.0)
      fail(ErrorCode::MgfUndefined, "custom MGF returned " + std::to_string(out.value));
    out.grad.head(p1) = model.custom_mgf().gradient(tx);
    out.hess.topLeftCorner(p1, p1) = model.custom_mgf().hessian(tx);
    if (!out.grad.allFinite() || !out.hess.allFinite())
      fail(ErrorCode::MgfUndefined, "custom MGF derivative is not finite");
    return out;
  }
  const MgfValue lg = log_mgf(model, theta);
  const double m = std::exp(lg.value);
  return {m, m * lg.grad, m * (lg.hess + lg.grad * lg.grad.transpose())};
}

// Pooled within-subject covariance of the replicates; U rows/columns are zero.
inline Eigen::MatrixXd estimate_sigma(const Dataset& data) {
  const Eigen::Index dof = data.replicate_dof();
  if (dof < 1) fail(ErrorCode::NoReplicates, "every subject has a single replicate");
  const Eigen::Index p1 = data.p1();
  Eigen::MatrixXd s1 = Eigen::MatrixXd::Zero(p1, p1);
  for (const auto& reps : data.x_star()) {
    if (reps.rows() < 2) continue;
    const Eigen::MatrixXd c = reps.rowwise() - reps.colwise().mean();
    s1.noalias() += c.transpose() * c;
  }
  s1 /= static_cast<double>(dof);
  s1 = 0.5 * (s1 + s1.transpose());
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(data.p(), data.p());
  s.topLeftCorner(p1, p1) = s1;
  return s;
}

struct EtaHat {
  double eta0 = 1.0;
  Eigen::VectorXd eta1;
  // eta1 / eta0, the quantity the replicate estimating function subtracts.
  Eigen::VectorXd ratio;
};

// Pairwise-difference estimate of eta0(theta) = E exp(theta' eps) under
// symmetric errors, and its gradient eta1.  Subjects with one replicate are
// skipped.
inline EtaHat eta0_hat(const Eigen::VectorXd& theta, const Dataset& data) {
  const Eigen::Index p1 = data.p1();
  if (theta.size() < p1) fail(ErrorCode::DimensionMismatch, "theta shorter than p1");
  const Eigen::VectorXd tx = theta.head(p1);
  double total = 0.0;
  Eigen::VectorXd total_grad = Eigen::VectorXd::Zero(p1);
  std::size_t contributors = 0;
  for (std::size_t i = 0; i < data.n(); ++i) {
    const auto& reps = data.replicates(i);
    const Eigen::Index m = reps.rows();
    if (m < 2) continue;
    ++contributors;
    const Eigen::VectorXd s = reps * tx;
    double sub = 0.0;
    Eigen::VectorXd sub_grad = Eigen::VectorXd::Zero(p1);
    for (Eigen::Index j = 0; j < m; ++j) {
      for (Eigen::Index k = 0; k < m; ++k) {
        if (j == k) continue;
        const double e = s(j) - s(k);
        if (!std::isfinite(e) || std::abs(e) > kMaxExponent)
          fail(ErrorCode::NonFiniteExp, "replicate difference exponent for subject " + data.ids()[i]);
        const double w = std::exp(e);
        sub += w;
        sub_grad += w * (reps.row(j) - reps.row(k)).transpose();
      }
    }
    const double scale = 1.0 / static_cast<double>(m * (m - 1));
    total += scale * sub;
    total_grad += scale * sub_grad;
  }
  if (contributors == 0) fail(ErrorCode::NoReplicates, "no subject has m_i > 1");
  total /= static_cast<double>(contributors);
  total_grad /= static_cast<double>(contributors);
  EtaHat out;
  out.eta0 = std::sqrt(total);
  out.eta1 = Eigen::VectorXd::Zero(theta.size());
  out.eta1.head(p1) = total_grad / (2.0 * out.eta0);
  out.ratio = Eigen::VectorXd::Zero(theta.size());
  out.ratio.head(p1) = total_grad / (2.0 * total);
  return out;
}

}  // namespace mebal
