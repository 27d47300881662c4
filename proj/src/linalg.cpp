#include "qattack/linalg.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

namespace qattack::linalg {

SymMatrix SymMatrix::from_dense(const Mat& a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("SymMatrix: matrix must be square");
  SymMatrix s(a.rows());
  s.m_ = 0.5 * (a + a.transpose());
  // Exact mirroring: (A+Aᵀ)/2 is symmetric in exact arithmetic and in IEEE
  // addition is commutative, so m_(i,j) == m_(j,i) bitwise already.
  return s;
}

SymMatrix SymMatrix::operator+(const SymMatrix& o) const {
  SymMatrix r(order());
  r.m_ = m_ + o.m_;
  return r;
}

SymMatrix SymMatrix::operator-(const SymMatrix& o) const {
  SymMatrix r(order());
  r.m_ = m_ - o.m_;
  return r;
}

SymMatrix SymMatrix::scaled(double s) const {
  SymMatrix r(order());
  r.m_ = m_ * s;
  return r;
}

Vec solve_shifted(const SymMatrix& h, double mu, const Vec& g) {
  if (g.size() != h.order()) throw std::invalid_argument("solve_shifted: size mismatch");
  Mat shifted = h.dense();
  shifted.diagonal().array() += mu;
  Eigen::LLT<Mat> llt(shifted);
  if (llt.info() != Eigen::Success) {
    throw NotPositiveDefinite("solve_shifted: H + mu*I is not positive definite");
  }
  Vec delta = llt.solve(-g);
  const double residual = (shifted * delta + g).norm();
  if (!delta.allFinite() || residual > 1e-8 * (1.0 + g.norm())) {
    throw NotPositiveDefinite("solve_shifted: factorization too ill-conditioned, residual " +
                              std::to_string(residual));
  }
  return delta;
}

double min_eigenvalue(const SymMatrix& h) {
  if (!h.all_finite()) throw NonConvergence("min_eigenvalue: non-finite input");
  Eigen::SelfAdjointEigenSolver<Mat> es(h.dense(), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NonConvergence("min_eigenvalue: eigensolver failed");
  return es.eigenvalues()(0);
}

EigenDecomposition sym_eig(const SymMatrix& h) {
  if (!h.all_finite()) throw NonConvergence("sym_eig: non-finite input");
  Eigen::SelfAdjointEigenSolver<Mat> es(h.dense());
  if (es.info() != Eigen::Success) throw NonConvergence("sym_eig: eigensolver failed");
  return EigenDecomposition{es.eigenvalues(), es.eigenvectors()};
}

}  // namespace qattack::linalg
