#pragma once

// Observed-data containers shared by every estimator.
//
// A Dataset holds, per subject, the treatment indicator, an optional outcome,
// the exactly measured covariates U and a ragged list of error-prone
// replicate vectors X*_{i1..im_i}.  Covariate matrices handed to the solvers
// are always ordered Z = (X, U), error-prone block first.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mebal/error.hpp"

namespace mebal {

inline constexpr double kWeightSumTol = 1e-10;
inline constexpr double kSingularTol = 1e-12;

// Which replicate feeds single-measurement estimators (EB, CEB, BCEB, CBPS).
enum class ReplicatePolicy { first, second, mean };

inline std::string_view to_string(ReplicatePolicy policy) {
  switch (policy) {
    case ReplicatePolicy::first: return "first";
    case ReplicatePolicy::second: return "second";
    case ReplicatePolicy::mean: return "mean";
  }
  return "first";
}

inline ReplicatePolicy parse_replicate_policy(std::string_view name) {
  if (name == "first") return ReplicatePolicy::first;
  if (name == "second") return ReplicatePolicy::second;
  if (name == "mean") return ReplicatePolicy::mean;
  fail(ErrorCode::ConfigError, "unknown replicate_policy '" + std::string(name) + "'");
}

// One row of the long-format input table.  `line` is carried for messages.
struct RawRecord {
  std::string id;
  double treat = 0.0;
  std::optional<double> outcome;
  int rep = 1;
  std::vector<double> x;
  std::vector<double> u;
  std::size_t line = 0;
};

class Dataset {
 public:
  Dataset() = default;

  // Builds and validates.  `x_star[i]` is an m_i x p1 matrix of replicates.
  Dataset(std::vector<int> treat, std::optional<Eigen::VectorXd> outcome,
          Eigen::MatrixXd u, std::vector<Eigen::MatrixXd> x_star,
          std::vector<std::string> ids = {}, bool intercept = true)
      : treat_(std::move(treat)),
        outcome_(std::move(outcome)),
        u_(std::move(u)),
        x_star_(std::move(x_star)),
        ids_(std::move(ids)),
        intercept_(intercept) {
    check();
  }

  std::size_t n() const { return treat_.size(); }
  std::size_t n_treated() const { return treated_rows_.size(); }
  std::size_t n_control() const { return control_rows_.size(); }
  Eigen::Index p1() const { return p1_; }
  Eigen::Index p2() const { return u_.cols(); }
  Eigen::Index p() const { return p1_ + u_.cols(); }

  int treat(std::size_t i) const { return treat_[i]; }
  bool is_treated(std::size_t i) const { return treat_[i] == 1; }
  const std::vector<int>& treat() const { return treat_; }
  const std::vector<std::size_t>& treated_rows() const { return treated_rows_; }
  const std::vector<std::size_t>& control_rows() const { return control_rows_; }
  const std::vector<std::string>& ids() const { return ids_; }
  bool intercept() const { return intercept_; }

  bool has_outcome() const { return outcome_.has_value(); }
  const Eigen::VectorXd& outcome() const {
    if (!outcome_) fail(ErrorCode::MissingOutcome, "dataset has no outcome column");
    return *outcome_;
  }
  const std::optional<Eigen::VectorXd>& outcome_opt() const { return outcome_; }

  const Eigen::MatrixXd& u() const { return u_; }
  const std::vector<Eigen::MatrixXd>& x_star() const { return x_star_; }
  const Eigen::MatrixXd& replicates(std::size_t i) const { return x_star_[i]; }
  Eigen::Index m(std::size_t i) const { return x_star_[i].rows(); }

  // Sum over subjects of (m_i - 1).
  Eigen::Index replicate_dof() const {
    Eigen::Index dof = 0;
    for (const auto& reps : x_star_) dof += reps.rows() - 1;
    return dof;
  }
  bool has_replicates() const { return replicate_dof() > 0; }

  // Replicate j (0-based) of subject i as the full covariate vector (X*_ij, U_i).
  Eigen::VectorXd z_star(std::size_t i, Eigen::Index j) const {
    Eigen::VectorXd z(p());
    z.head(p1_) = x_star_[i].row(j).transpose();
    z.tail(p2()) = u_.row(static_cast<Eigen::Index>(i)).transpose();
    return z;
  }

  // n x p covariate matrix (X*, U) with the X* block chosen by `policy`.
  Eigen::MatrixXd covariates(ReplicatePolicy policy = ReplicatePolicy::first) const {
    const auto nn = static_cast<Eigen::Index>(n());
    Eigen::MatrixXd z(nn, p());
    for (Eigen::Index i = 0; i < nn; ++i) {
      const auto& reps = x_star_[static_cast<std::size_t>(i)];
      switch (policy) {
        case ReplicatePolicy::first:
          z.row(i).head(p1_) = reps.row(0);
          break;
        case ReplicatePolicy::second:
          if (reps.rows() < 2)
            fail(ErrorCode::NoReplicates,
                 "replicate_policy=second but subject " + ids_[static_cast<std::size_t>(i)] +
                     " has a single replicate");
          z.row(i).head(p1_) = reps.row(1);
          break;
        case ReplicatePolicy::mean:
          z.row(i).head(p1_) = reps.colwise().mean();
          break;
      }
    }
    z.rightCols(p2()) = u_;
    return z;
  }

  // Rows picked (with repetition allowed) from this dataset, e.g. for resampling.
  Dataset subset(std::span<const std::size_t> rows) const {
    std::vector<int> treat;
    std::optional<Eigen::VectorXd> outcome;
    if (outcome_) outcome = Eigen::VectorXd(static_cast<Eigen::Index>(rows.size()));
    Eigen::MatrixXd u(static_cast<Eigen::Index>(rows.size()), p2());
    std::vector<Eigen::MatrixXd> x;
    std::vector<std::string> ids;
    treat.reserve(rows.size());
    x.reserve(rows.size());
    ids.reserve(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const std::size_t i = rows[k];
      const auto kk = static_cast<Eigen::Index>(k);
      treat.push_back(treat_[i]);
      if (outcome_) (*outcome)(kk) = (*outcome_)(static_cast<Eigen::Index>(i));
      u.row(kk) = u_.row(static_cast<Eigen::Index>(i));
      x.push_back(x_star_[i]);
      ids.push_back(ids_[i] + "#" + std::to_string(k));
    }
    return Dataset(std::move(treat), std::move(outcome), std::move(u), std::move(x),
                   std::move(ids), intercept_);
  }

 private:
  void check() {
    const std::size_t nn = treat_.size();
    if (ids_.empty()) {
      ids_.reserve(nn);
      for (std::size_t i = 0; i < nn; ++i) ids_.push_back(std::to_string(i + 1));
    }
    if (ids_.size() != nn || x_star_.size() != nn ||
        static_cast<std::size_t>(u_.rows()) != nn ||
        (outcome_ && static_cast<std::size_t>(outcome_->size()) != nn))
      fail(ErrorCode::DimensionMismatch, "per-subject fields disagree on n");
    treated_rows_.clear();
    control_rows_.clear();
    for (std::size_t i = 0; i < nn; ++i) {
      if (treat_[i] == 1) {
        treated_rows_.push_back(i);
      } else if (treat_[i] == 0) {
        control_rows_.push_back(i);
      } else {
        fail(ErrorCode::NonBinaryTreatment,
             "subject " + ids_[i] + " has treat = " + std::to_string(treat_[i]));
      }
    }
    if (treated_rows_.empty() || control_rows_.empty())
      fail(ErrorCode::EmptyArm, "need at least one treated and one control subject (n1 = " +
                                    std::to_string(treated_rows_.size()) + ", n0 = " +
                                    std::to_string(control_rows_.size()) + ")");
    p1_ = nn > 0 ? x_star_[0].cols() : 0;
    for (std::size_t i = 0; i < nn; ++i) {
      if (x_star_[i].rows() < 1)
        fail(ErrorCode::DimensionMismatch, "subject " + ids_[i] + " has no replicate");
      if (x_star_[i].cols() != p1_)
        fail(ErrorCode::DimensionMismatch,
             "subject " + ids_[i] + " replicates have dimension " +
                 std::to_string(x_star_[i].cols()) + ", expected " + std::to_string(p1_));
      if (!x_star_[i].allFinite())
        fail(ErrorCode::NonFiniteValue, "non-finite x value for subject " + ids_[i]);
    }
    if (p1_ + u_.cols() < 1) fail(ErrorCode::DimensionMismatch, "no covariates");
    if (!u_.allFinite()) fail(ErrorCode::NonFiniteValue, "non-finite u value");
    if (outcome_ && !outcome_->allFinite())
      fail(ErrorCode::NonFiniteValue, "non-finite outcome value");
  }

  std::vector<int> treat_;
  std::optional<Eigen::VectorXd> outcome_;
  Eigen::MatrixXd u_;
  std::vector<Eigen::MatrixXd> x_star_;
  std::vector<std::string> ids_;
  bool intercept_ = true;
  Eigen::Index p1_ = 0;
  std::vector<std::size_t> treated_rows_;
  std::vector<std::size_t> control_rows_;
};

// Groups long-format rows by subject id (first-appearance order), orders each
// subject's replicates by `rep`, and checks every Dataset invariant.
inline Dataset validate(std::span<const RawRecord> rows, bool intercept = true) {
  auto where = [](const RawRecord& r) {
    return r.line > 0 ? " (line " + std::to_string(r.line) + ")" : std::string();
  };
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RawRecord*>> groups;
  bool any_outcome = false;
  bool all_outcome = true;
  for (const auto& r : rows) {
    if (!std::isfinite(r.treat))
      fail(ErrorCode::NonFiniteValue, "treat for id " + r.id + where(r));
    if (r.treat != 0.0 && r.treat != 1.0)
      fail(ErrorCode::NonBinaryTreatment, "id " + r.id + " treat=" + std::to_string(r.treat) + where(r));
    if (r.outcome && !std::isfinite(*r.outcome))
      fail(ErrorCode::NonFiniteValue, "outcome for id " + r.id + where(r));
    for (double v : r.x)
      if (!std::isfinite(v)) fail(ErrorCode::NonFiniteValue, "x value for id " + r.id + where(r));
    for (double v : r.u)
      if (!std::isfinite(v)) fail(ErrorCode::NonFiniteValue, "u value for id " + r.id + where(r));
    any_outcome = any_outcome || r.outcome.has_value();
    all_outcome = all_outcome && r.outcome.has_value();
    auto [it, inserted] = groups.try_emplace(r.id);
    if (inserted) order.push_back(r.id);
    it->second.push_back(&r);
  }
  if (any_outcome && !all_outcome)
    fail(ErrorCode::MissingOutcome, "outcome present for some rows but not others");
  if (rows.empty()) fail(ErrorCode::EmptyArm, "no rows");

  const std::size_t p1 = rows.front().x.size();
  const std::size_t p2 = rows.front().u.size();
  std::vector<int> treat;
  std::optional<Eigen::VectorXd> outcome;
  if (all_outcome) outcome = Eigen::VectorXd(static_cast<Eigen::Index>(order.size()));
  Eigen::MatrixXd u(static_cast<Eigen::Index>(order.size()), static_cast<Eigen::Index>(p2));
  std::vector<Eigen::MatrixXd> x_star;
  for (std::size_t s = 0; s < order.size(); ++s) {
    auto group = groups[order[s]];
    std::stable_sort(group.begin(), group.end(),
                     [](const RawRecord* a, const RawRecord* b) { return a->rep < b->rep; });
    const RawRecord& head = *group.front();
    Eigen::MatrixXd reps(static_cast<Eigen::Index>(group.size()), static_cast<Eigen::Index>(p1));
    for (std::size_t j = 0; j < group.size(); ++j) {
      const RawRecord& r = *group[j];
      if (r.x.size() != p1)
        fail(ErrorCode::DimensionMismatch, "id " + r.id + " has " + std::to_string(r.x.size()) +
                                               " x values, expected " + std::to_string(p1) + where(r));
      if (r.u.size() != p2)
        fail(ErrorCode::DimensionMismatch, "id " + r.id + " has " + std::to_string(r.u.size()) +
                                               " u values, expected " + std::to_string(p2) + where(r));
      if (j > 0 && r.rep == group[j - 1]->rep)
        fail(ErrorCode::DimensionMismatch, "id " + r.id + " repeats rep " + std::to_string(r.rep) + where(r));
      if (r.treat != head.treat || r.u != head.u || r.outcome != head.outcome)
        fail(ErrorCode::DimensionMismatch,
             "treat, outcome and u must be constant within id " + r.id + where(r));
      for (std::size_t k = 0; k < p1; ++k)
        reps(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) = r.x[k];
    }
    const auto ss = static_cast<Eigen::Index>(s);
    treat.push_back(static_cast<int>(head.treat));
    if (outcome) (*outcome)(ss) = *head.outcome;
    for (std::size_t k = 0; k < p2; ++k) u(ss, static_cast<Eigen::Index>(k)) = head.u[k];
    x_star.push_back(std::move(reps));
  }
  return Dataset(std::move(treat), std::move(outcome), std::move(u), std::move(x_star),
                 std::move(order), intercept);
}

// Control-group weights, aligned with Dataset::control_rows().
class WeightVector {
 public:
  WeightVector() = default;
  WeightVector(std::vector<std::size_t> rows, Eigen::VectorXd values)
      : rows_(std::move(rows)), values_(std::move(values)) {
    if (static_cast<std::size_t>(values_.size()) != rows_.size())
      fail(ErrorCode::DimensionMismatch, "weights and control rows differ in length");
    if (!values_.allFinite()) fail(ErrorCode::InvalidWeights, "non-finite weight");
    if ((values_.array() < 0.0).any()) fail(ErrorCode::InvalidWeights, "negative weight");
    const double total = values_.sum();
    if (std::abs(total - 1.0) > kWeightSumTol)
      fail(ErrorCode::InvalidWeights, "weights sum to " + std::to_string(total));
  }

  const std::vector<std::size_t>& rows() const { return rows_; }
  const Eigen::VectorXd& values() const { return values_; }
  std::size_t size() const { return rows_.size(); }

 private:
  std::vector<std::size_t> rows_;
  Eigen::VectorXd values_;
};

struct BalanceFit {
  Eigen::VectorXd theta;
  WeightVector weights;
  bool converged = false;
  double grad_norm = 0.0;
  int iterations = 0;
  std::string method;
  double objective = 0.0;
  std::vector<std::string> warnings;
};

struct TreatedMoments {
  Eigen::VectorXd mean;
  Eigen::VectorXd sd;
  Eigen::MatrixXd cov;
  bool singular_cov = false;
};

// Mean, per-covariate SD and covariance of the treated rows of `z`, n1 - 1 divisor.
inline TreatedMoments treated_moments(const Eigen::MatrixXd& z, const Dataset& data) {
  const auto& rows = data.treated_rows();
  if (rows.size() < 2) fail(ErrorCode::EmptyArm, "treated moments need n1 >= 2");
  Eigen::MatrixXd zt(static_cast<Eigen::Index>(rows.size()), z.cols());
  for (std::size_t k = 0; k < rows.size(); ++k)
    zt.row(static_cast<Eigen::Index>(k)) = z.row(static_cast<Eigen::Index>(rows[k]));
  TreatedMoments out;
  out.mean = zt.colwise().mean().transpose();
  const Eigen::MatrixXd centered = zt.rowwise() - out.mean.transpose();
  out.cov = centered.transpose() * centered / static_cast<double>(rows.size() - 1);
  out.sd = out.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(out.cov);
  out.singular_cov = svd.singularValues().size() == 0 ||
                     svd.singularValues().minCoeff() < kSingularTol;
  return out;
}

inline TreatedMoments treated_moments(const Dataset& data, ReplicatePolicy policy) {
  return treated_moments(data.covariates(policy), data);
}

}  // namespace mebal
