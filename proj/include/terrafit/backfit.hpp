#pragma once

// Spatial backfitting of one layer and the sequential multi-layer driver.

#include "terrafit/covariance.hpp"
#include "terrafit/field_model.hpp"

#include <Eigen/Dense>

#include <memory>
#include <span>
#include <vector>

namespace terrafit {

/// Precomputed linear-algebra state of one layer: X, H, white noise, Sigma
/// and everything derived from them (Sigma H^T, Sigma_y and its factor, the
/// GLS normal matrix). Built once, then shared read-only by estimation and
/// posterior sampling.
class LayerSystem {
 public:
  /// Standard single-layer system: Sigma_y = H Sigma H^T + nugget I.
  LayerSystem(Eigen::MatrixXd design, const IncidenceMap& incidence,
              std::shared_ptr<const SparseSymMatrix> sigma, double nugget);

  /// General form with an arbitrary (possibly weighted) H and per-row noise.
  /// Rows whose design entries are all zero carry no fixed effect.
  LayerSystem(Eigen::MatrixXd design, Eigen::SparseMatrix<double> incidence,
              std::shared_ptr<const SparseSymMatrix> sigma, Eigen::VectorXd noise);

  Index observations() const { return design_.rows(); }
  Index nodes() const { return sigma_->rows(); }
  Index covariates() const { return design_.cols(); }

  const Eigen::MatrixXd& design() const { return design_; }
  const Eigen::SparseMatrix<double>& incidence() const { return incidence_; }
  const SparseSymMatrix& sigma() const { return *sigma_; }
  const std::shared_ptr<const SparseSymMatrix>& sigma_ptr() const { return sigma_; }
  const Eigen::VectorXd& noise() const { return noise_; }
  const Eigen::SparseMatrix<double>& sigma_ht() const { return sigma_ht_; }
  const SparseSymMatrix& sigma_y() const { return sigma_y_; }
  const SpdFactor& sigma_y_factor() const { return *sigma_y_factor_; }

  /// Sigma_y^{-1} X.
  const Eigen::MatrixXd& whitened_design() const { return sigma_y_inv_x_; }
  /// Cholesky of X^T Sigma_y^{-1} X.
  const Eigen::LLT<Eigen::MatrixXd>& gls_normal() const { return gls_normal_; }

  /// Fixed-effect step of backfitting: least squares with the white-noise
  /// weights R^{-1}, R = diag(noise). Equal weights reduce to OLS.
  Eigen::VectorXd white_least_squares(const Eigen::VectorXd& target) const;
  /// Sigma H^T Sigma_y^{-1} r.
  Eigen::VectorXd krige(const Eigen::VectorXd& residual) const;

 private:
  void prepare();

  Eigen::MatrixXd design_;
  Eigen::SparseMatrix<double> incidence_;
  std::shared_ptr<const SparseSymMatrix> sigma_;
  Eigen::VectorXd noise_;

  Eigen::SparseMatrix<double> sigma_ht_;
  SparseSymMatrix sigma_y_;
  std::shared_ptr<const SpdFactor> sigma_y_factor_;
  Eigen::MatrixXd sigma_y_inv_x_;
  Eigen::LLT<Eigen::MatrixXd> gls_normal_;
  Eigen::MatrixXd white_weighted_x_;  // R^{-1} X
  Eigen::LLT<Eigen::MatrixXd> white_normal_;
};

/// (X^T Sigma_y^{-1} X)^{-1} X^T Sigma_y^{-1} y. Throws Error when the p x p
/// normal matrix is singular.
Eigen::VectorXd gls_beta(const Eigen::MatrixXd& design, const SpdFactor& sigma_y,
                         const Eigen::VectorXd& y);
Eigen::VectorXd gls_beta(const Eigen::MatrixXd& design, const SparseSymMatrix& sigma_y,
                         const Eigen::VectorXd& y);

/// Sigma H^T Sigma_y^{-1} residual: kriging of the residual onto the grid.
Eigen::VectorXd krige_alpha(const SparseSymMatrix& sigma, const IncidenceMap& h,
                            const SpdFactor& sigma_y, const Eigen::VectorXd& residual);
Eigen::VectorXd krige_alpha(const SparseSymMatrix& sigma, const IncidenceMap& h,
                            const SparseSymMatrix& sigma_y, const Eigen::VectorXd& residual);

struct BackfitOptions {
  double tolerance = 1e-8;
  int max_iter = 500;
};

struct LayerEstimate {
  Eigen::VectorXd beta;
  Eigen::VectorXd alpha;
  int iterations = 0;
  bool converged = false;
  double final_delta = 0.0;  // sup-norm of the last (beta, alpha) change
};

/// Alternates the fixed-effect step on y - offset - H alpha with kriging of
/// y - offset - X beta until the sup-norm change is within tolerance.
/// Starts from beta = OLS(y - offset), alpha = 0. Running out of iterations
/// is reported through `converged`, not thrown.
LayerEstimate backfit_layer(const LayerSystem& system, const Eigen::VectorXd& y,
                            const Eigen::VectorXd& offset, const BackfitOptions& options = {});

/// One layer of the sequential model.
struct LayerProblem {
  int layer = 1;  // 1 = subsurface, 2 = subgrade, 3 = base
  Eigen::VectorXd y;
  std::shared_ptr<const LayerSystem> system;
  CovarianceParams params;
};

struct SequentialOptions {
  BackfitOptions backfit;
  /// Re-estimate every layer once more using the data of all later layers
  /// that carry it, with the other fields held at their current estimates.
  bool outer_sweep = false;
};

struct SequentialFit {
  std::vector<int> layers;
  std::vector<LayerEstimate> estimates;
  std::vector<Eigen::VectorXd> offsets;  // carryover offset used for each layer
  std::vector<CovarianceParams> params;
  double c = 0.0;

  /// Position of `layer` in the fit, or -1.
  int position(int layer) const;
};

/// Forward conditioning: layer t is backfit with offset
/// sum_{k<t} c^{t-k} H_t alpha_k using the already estimated alpha_k.
/// Layers must be given with strictly increasing layer numbers.
SequentialFit sequential_backfit(std::span<const LayerProblem> layers, double c,
                                 const SequentialOptions& options = {});

/// Sum over layers of squared observation residuals y - X beta - offset - H alpha.
double residual_sum_of_squares(std::span<const LayerProblem> layers, const SequentialFit& fit);

struct CarryoverProfile {
  std::vector<double> candidates;
  std::vector<double> rss;
  double best_c = 0.0;
  SequentialFit best_fit;
};

/// Fits every candidate c (default 0.0, 0.1, ..., 0.9) and keeps the one
/// with the smallest residual sum of squares.
CarryoverProfile profile_carryover(std::span<const LayerProblem> layers,
                                   const SequentialOptions& options = {},
                                   std::vector<double> candidates = {});

}  // namespace terrafit
