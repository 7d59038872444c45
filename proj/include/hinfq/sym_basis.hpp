#pragma once

#include <Eigen/Dense>

#include "hinfq/errors.hpp"
#include "hinfq/linalg.hpp"

namespace hinfq {

inline Eigen::Index sym_len(Eigen::Index n) { return n * (n + 1) / 2; }

// Matrix order n such that sym_len(n) == len; rejects non-triangular lengths.
Eigen::Index sym_dim(Eigen::Index len);

// Row-major upper-triangle vectorization [m11, ..., m1n, m22, ..., mnn] of a
// symmetric matrix. Asymmetry beyond sym_tol is rejected.
Eigen::VectorXd vecs(const Eigen::MatrixXd& m, double sym_tol = kDefaultSymTol);

// Inverse of vecs.
Eigen::MatrixXd unvecs(const Eigen::VectorXd& v, Eigen::Index n);

// Quadratic-monomial vector [z1^2, 2 z1 z2, ..., 2 z1 zn, z2^2, ..., zn^2],
// the dual basis of vecs: vecv(z) . vecs(S) == z' S z.
Eigen::VectorXd vecv(const Eigen::VectorXd& z);

}  // namespace hinfq
