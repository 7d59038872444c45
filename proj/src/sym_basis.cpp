#include "hinfq/sym_basis.hpp"

#include <cmath>
#include <string>

namespace hinfq {

Eigen::Index sym_dim(Eigen::Index len) {
  const auto n = static_cast<Eigen::Index>((std::sqrt(8.0 * static_cast<double>(len) + 1.0) - 1.0) / 2.0);
  for (Eigen::Index k = std::max<Eigen::Index>(n - 1, 0); k <= n + 1; ++k) {
    if (sym_len(k) == len) return k;
  }
  throw DimensionError("sym_dim: length " + std::to_string(len) + " is not triangular");
}

Eigen::VectorXd vecs(const Eigen::MatrixXd& m, double sym_tol) {
  if (m.rows() != m.cols()) throw DimensionError("vecs: matrix not square");
  if (max_asymmetry(m) > sym_tol) throw DimensionError("vecs: input asymmetric beyond tolerance");
  const Eigen::Index n = m.rows();
  Eigen::VectorXd out(sym_len(n));
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) {
      out[k++] = 0.5 * (m(i, j) + m(j, i));
    }
  }
  return out;
}

Eigen::MatrixXd unvecs(const Eigen::VectorXd& v, Eigen::Index n) {
  if (v.size() != sym_len(n)) {
    throw DimensionError("unvecs: length " + std::to_string(v.size()) +
                         " does not match order " + std::to_string(n));
  }
  Eigen::MatrixXd m(n, n);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) {
      m(i, j) = v[k];
      m(j, i) = v[k];
      ++k;
    }
  }
  return m;
}

Eigen::VectorXd vecv(const Eigen::VectorXd& z) {
  const Eigen::Index n = z.size();
  Eigen::VectorXd out(sym_len(n));
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    out[k++] = z[i] * z[i];
    for (Eigen::Index j = i + 1; j < n; ++j) {
      out[k++] = 2.0 * z[i] * z[j];
    }
  }
  return out;
}

}  // namespace hinfq
