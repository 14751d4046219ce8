#pragma once

// Spherical covariance, sparse covariance assembly and SPD factorizations.

#include "terrafit/field_model.hpp"

#include <Eigen/Dense>
#include <Eigen/SparseCore>

namespace terrafit {

/// Symmetric matrices are stored with both triangles present.
using SparseSymMatrix = Eigen::SparseMatrix<double>;

struct CovarianceParams {
  double range = 1.0;   // same coordinate units as the distances fed in
  double sill = 1.0;    // variance of the spatial field
  double nugget = 0.0;  // white-noise variance

  /// Throws Error when range <= 0, sill <= 0 or nugget < 0.
  void validate() const;
  bool operator==(const CovarianceParams&) const = default;
};

/// sill * (1 - 1.5 h/r + 0.5 (h/r)^3) for h < r, zero beyond the range.
double spherical_cov(double h, const CovarianceParams& params);

/// Node-to-node spherical covariance. Distances are measured after applying
/// `scaling` to node coordinates; pairs at or beyond the range are left out
/// of the sparsity structure.
SparseSymMatrix process_covariance(const ProcessGrid& grid, const CovarianceParams& params,
                                   const ScalingSpec& scaling = ScalingSpec::identity());

/// H Sigma H^T + nugget I.
SparseSymMatrix observation_covariance(const IncidenceMap& h, const SparseSymMatrix& sigma,
                                       double nugget);
/// General form used for stacked systems: H Sigma H^T + diag(noise).
SparseSymMatrix observation_covariance(const Eigen::SparseMatrix<double>& h,
                                       const SparseSymMatrix& sigma,
                                       const Eigen::VectorXd& noise);

/// Sparse Cholesky factor P A P^T = L L^T with a fixed AMD ordering.
///
/// The factor is immutable after construction; every member is const and
/// safe to call from several threads at once.
class SpdFactor {
 public:
  /// Factors A + jitter * I. Throws NotPositiveDefinite with the original
  /// index of the failing pivot.
  explicit SpdFactor(const SparseSymMatrix& a, double jitter = 0.0);

  Index size() const { return lower_.rows(); }

  Eigen::VectorXd solve(const Eigen::VectorXd& b) const;
  Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const;

  /// G z with G G^T = A, where G = P^T L.
  Eigen::VectorXd factor_multiply(const Eigen::VectorXd& z) const;
  /// G^{-T} z, which equals A^{-1} (G z).
  Eigen::VectorXd factor_transpose_solve(const Eigen::VectorXd& z) const;

  /// log det(A) from the factor diagonal.
  double log_determinant() const;
  Index factor_nonzeros() const { return lower_.nonZeros(); }

 private:
  Eigen::SparseMatrix<double> lower_;  // L in the permuted ordering
  Eigen::VectorXi perm_;               // permuted position k holds original index perm_[k]
};

/// Solves A x = b for SPD A.
Eigen::VectorXd spd_solve(const SparseSymMatrix& a, const Eigen::VectorXd& b);
Eigen::MatrixXd spd_solve(const SparseSymMatrix& a, const Eigen::MatrixXd& b);

/// Returns G z with G G^T = A. With `jitter` > 0 the factored matrix is A + jitter I.
Eigen::VectorXd spd_factor_sample(const SparseSymMatrix& a, const Eigen::VectorXd& z,
                                  double jitter = 0.0);

/// Diagonal jitter added before factoring a pure process covariance.
inline constexpr double kProcessJitter = 1e-10;

}  // namespace terrafit
