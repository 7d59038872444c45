#pragma once

#include <Eigen/Dense>

#include "hinfq/errors.hpp"

namespace hinfq {

// Default tolerance on max-abs asymmetry when validating symmetric inputs.
inline constexpr double kDefaultSymTol = 1e-9;

// Condition-number ceiling for all checked symmetric solves. Exceeding it is
// an error, never a silent pseudo-inverse.
inline constexpr double kDefaultCondMax = 1e12;

inline Eigen::MatrixXd sym_part(const Eigen::MatrixXd& m) {
  return 0.5 * (m + m.transpose());
}

inline double max_asymmetry(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw DimensionError("max_asymmetry: matrix not square");
  if (m.size() == 0) return 0.0;
  return (m - m.transpose()).cwiseAbs().maxCoeff();
}

// Largest singular value of a symmetric matrix (= max |eigenvalue|).
double spectral_norm_sym(const Eigen::MatrixXd& m);

// Largest eigenvalue magnitude of a general square matrix.
double spectral_radius(const Eigen::MatrixXd& m);

double min_eigenvalue_sym(const Eigen::MatrixXd& m);

// Eigendecomposition of a symmetric matrix, kept around so callers can first
// inspect conditioning and definiteness, then solve against it.
class SymEig {
 public:
  explicit SymEig(const Eigen::MatrixXd& m);

  const Eigen::VectorXd& eigenvalues() const { return values_; }
  double min_eig() const { return values_.minCoeff(); }
  double max_eig() const { return values_.maxCoeff(); }
  double max_abs_eig() const { return values_.cwiseAbs().maxCoeff(); }
  double min_abs_eig() const { return values_.cwiseAbs().minCoeff(); }

  // max|lambda| / min|lambda|; +inf when singular to working precision.
  double cond() const;

  bool positive_definite() const { return min_eig() > 0.0; }

  // Solve m * X = rhs through the factorization. Caller is expected to have
  // checked cond() against its threshold first.
  Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs) const;

  Eigen::MatrixXd inverse() const;

 private:
  Eigen::VectorXd values_;
  Eigen::MatrixXd vectors_;
};

}  // namespace hinfq
