#include "hinfq/linalg.hpp"

#include <limits>

namespace hinfq {

double spectral_norm_sym(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

double spectral_radius(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw DimensionError("spectral_radius: matrix not square");
  if (m.size() == 0) return 0.0;
  Eigen::EigenSolver<Eigen::MatrixXd> es(m, /*computeEigenvectors=*/false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

double min_eigenvalue_sym(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

SymEig::SymEig(const Eigen::MatrixXd& m) {
  if (m.rows() != m.cols()) throw DimensionError("SymEig: matrix not square");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  values_ = es.eigenvalues();
  vectors_ = es.eigenvectors();
}

double SymEig::cond() const {
  const double lo = min_abs_eig();
  const double hi = max_abs_eig();
  if (hi == 0.0) return std::numeric_limits<double>::infinity();
  if (lo <= hi * std::numeric_limits<double>::epsilon()) {
    return std::numeric_limits<double>::infinity();
  }
  return hi / lo;
}

Eigen::MatrixXd SymEig::solve(const Eigen::MatrixXd& rhs) const {
  if (rhs.rows() != vectors_.rows()) throw DimensionError("SymEig::solve: rhs rows mismatch");
  return vectors_ * values_.cwiseInverse().asDiagonal() * (vectors_.transpose() * rhs);
}

Eigen::MatrixXd SymEig::inverse() const {
  return vectors_ * values_.cwiseInverse().asDiagonal() * vectors_.transpose();
}

}  // namespace hinfq
