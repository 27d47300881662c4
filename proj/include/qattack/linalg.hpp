#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace qattack {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

namespace linalg {

/// Thrown by solve_shifted when the shifted matrix is not numerically
/// positive definite; callers react by raising the shift.
struct NotPositiveDefinite : std::runtime_error {
  explicit NotPositiveDefinite(const std::string& what) : std::runtime_error(what) {}
};

/// Thrown when an iterative kernel fails to converge or the input is degenerate.
struct NonConvergence : std::runtime_error {
  explicit NonConvergence(const std::string& what) : std::runtime_error(what) {}
};

/// Dense symmetric matrix. Both triangles are kept mirrored at all times,
/// so entry(i,j) == entry(j,i) exactly.
class SymMatrix {
 public:
  SymMatrix() = default;
  explicit SymMatrix(Eigen::Index n) : m_(Mat::Zero(n, n)) {}

  /// Builds a SymMatrix from an arbitrary square matrix by symmetrizing (A + Aᵀ)/2.
  static SymMatrix from_dense(const Mat& a);

  Eigen::Index order() const { return m_.rows(); }
  double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }
  void set(Eigen::Index i, Eigen::Index j, double v) {
    m_(i, j) = v;
    m_(j, i) = v;
  }
  const Mat& dense() const { return m_; }

  Vec operator*(const Vec& v) const { return m_ * v; }
  SymMatrix operator+(const SymMatrix& o) const;
  SymMatrix operator-(const SymMatrix& o) const;
  SymMatrix scaled(double s) const;

  bool all_finite() const { return m_.allFinite(); }

 private:
  Mat m_;
};

/// Solves (H + mu·I) δ = -g through a positive-definite factorization.
/// Throws NotPositiveDefinite when the factorization hits a non-positive pivot
/// or the residual check fails; the caller is expected to raise mu.
Vec solve_shifted(const SymMatrix& h, double mu, const Vec& g);

/// Smallest eigenvalue of a symmetric matrix.
double min_eigenvalue(const SymMatrix& h);

struct EigenDecomposition {
  Vec values;   // ascending
  Mat vectors;  // orthonormal columns, vectors.col(i) pairs with values[i]
};

/// Full symmetric eigendecomposition, eigenvalues ascending.
EigenDecomposition sym_eig(const SymMatrix& h);

}  // namespace linalg
}  // namespace qattack
