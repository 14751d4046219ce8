#include "terrafit/backfit.hpp"

#include "terrafit/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace terrafit {

namespace {

constexpr double kSingularRcond = 1e-13;

Eigen::LLT<Eigen::MatrixXd> factor_normal(const Eigen::MatrixXd& normal, const char* what) {
  Eigen::LLT<Eigen::MatrixXd> llt(normal);
  if (llt.info() != Eigen::Success || !(llt.rcond() > kSingularRcond)) {
    throw Error(std::string(what) + ": singular normal matrix (rank-deficient design)");
  }
  return llt;
}

Eigen::VectorXd diagonal_noise(Index n, double nugget) {
  if (!(nugget >= 0.0)) throw Error("nugget must be non-negative");
  return Eigen::VectorXd::Constant(n, nugget);
}

}  // namespace

LayerSystem::LayerSystem(Eigen::MatrixXd design, const IncidenceMap& incidence,
                         std::shared_ptr<const SparseSymMatrix> sigma, double nugget)
    : design_(std::move(design)),
      incidence_(incidence.matrix()),
      sigma_(std::move(sigma)),
      noise_(diagonal_noise(incidence.rows(), nugget)) {
  prepare();
}

LayerSystem::LayerSystem(Eigen::MatrixXd design, Eigen::SparseMatrix<double> incidence,
                         std::shared_ptr<const SparseSymMatrix> sigma, Eigen::VectorXd noise)
    : design_(std::move(design)),
      incidence_(std::move(incidence)),
      sigma_(std::move(sigma)),
      noise_(std::move(noise)) {
  prepare();
}

void LayerSystem::prepare() {
  if (!sigma_) throw Error("LayerSystem: missing process covariance");
  const Index n = design_.rows();
  if (incidence_.rows() != n || noise_.size() != n) {
    throw DimensionError("LayerSystem: design, incidence and noise row counts differ");
  }
  if (incidence_.cols() != sigma_->rows() || sigma_->rows() != sigma_->cols()) {
    throw DimensionError("LayerSystem: incidence and process covariance are not conformable");
  }
  if ((noise_.array() < 0.0).any()) throw Error("LayerSystem: negative noise variance");

  sigma_ht_ = *sigma_ * incidence_.transpose();
  sigma_y_ = incidence_ * sigma_ht_;
  SparseSymMatrix diag(n, n);
  diag.reserve(Eigen::VectorXi::Ones(n));
  for (Index r = 0; r < n; ++r) diag.insert(r, r) = noise_[r];
  sigma_y_ += diag;
  sigma_y_.makeCompressed();
  sigma_y_factor_ = std::make_shared<const SpdFactor>(sigma_y_);

  sigma_y_inv_x_ = sigma_y_factor_->solve(design_);
  gls_normal_ = factor_normal(design_.transpose() * sigma_y_inv_x_, "GLS");

  const bool equal_weights = n == 0 || noise_.maxCoeff() == noise_.minCoeff();
  if (equal_weights) {
    white_weighted_x_ = design_;
  } else {
    if ((noise_.array() <= 0.0).any()) {
      throw Error("LayerSystem: zero noise mixed with positive noise");
    }
    white_weighted_x_ = noise_.cwiseInverse().asDiagonal() * design_;
  }
  white_normal_ = factor_normal(design_.transpose() * white_weighted_x_, "least squares");
}

Eigen::VectorXd LayerSystem::white_least_squares(const Eigen::VectorXd& target) const {
  return white_normal_.solve(white_weighted_x_.transpose() * target);
}

Eigen::VectorXd LayerSystem::krige(const Eigen::VectorXd& residual) const {
  if (residual.size() != observations()) throw DimensionError("krige: dimension mismatch");
  return sigma_ht_ * sigma_y_factor_->solve(residual);
}

Eigen::VectorXd gls_beta(const Eigen::MatrixXd& design, const SpdFactor& sigma_y,
                         const Eigen::VectorXd& y) {
  if (design.rows() != sigma_y.size() || y.size() != design.rows()) {
    throw DimensionError("gls_beta: dimension mismatch");
  }
  const Eigen::MatrixXd wx = sigma_y.solve(design);
  const auto normal = factor_normal(design.transpose() * wx, "gls_beta");
  return normal.solve(wx.transpose() * y);
}

Eigen::VectorXd gls_beta(const Eigen::MatrixXd& design, const SparseSymMatrix& sigma_y,
                         const Eigen::VectorXd& y) {
  return gls_beta(design, SpdFactor(sigma_y), y);
}

Eigen::VectorXd krige_alpha(const SparseSymMatrix& sigma, const IncidenceMap& h,
                            const SpdFactor& sigma_y, const Eigen::VectorXd& residual) {
  if (h.cols() != sigma.rows() || h.rows() != sigma_y.size() || residual.size() != h.rows()) {
    throw DimensionError("krige_alpha: dimension mismatch");
  }
  return sigma * h.apply_transpose(sigma_y.solve(residual));
}

Eigen::VectorXd krige_alpha(const SparseSymMatrix& sigma, const IncidenceMap& h,
                            const SparseSymMatrix& sigma_y, const Eigen::VectorXd& residual) {
  return krige_alpha(sigma, h, SpdFactor(sigma_y), residual);
}

LayerEstimate backfit_layer(const LayerSystem& system, const Eigen::VectorXd& y,
                            const Eigen::VectorXd& offset, const BackfitOptions& options) {
  if (y.size() != system.observations() || offset.size() != y.size()) {
    throw DimensionError("backfit_layer: data, offset and system sizes differ");
  }
  if (!(options.tolerance > 0.0)) throw Error("backfit_layer: tolerance must be positive");
  if (options.max_iter < 1) throw Error("backfit_layer: max_iter must be at least 1");

  const Eigen::VectorXd target = y - offset;
  const Eigen::MatrixXd& x = system.design();
  const auto& h = system.incidence();

  LayerEstimate est;
  // Warm start: OLS on the raw target, no spatial field.
  est.beta = x.colPivHouseholderQr().solve(target);
  est.alpha = Eigen::VectorXd::Zero(system.nodes());

  for (int it = 1; it <= options.max_iter; ++it) {
    Eigen::VectorXd alpha = system.krige(target - x * est.beta);
    Eigen::VectorXd beta = system.white_least_squares(target - h * alpha);
    const double delta = std::max((beta - est.beta).lpNorm<Eigen::Infinity>(),
                                  (alpha - est.alpha).lpNorm<Eigen::Infinity>());
    est.beta = std::move(beta);
    est.alpha = std::move(alpha);
    est.iterations = it;
    est.final_delta = delta;
    if (delta <= options.tolerance) {
      est.converged = true;
      break;
    }
  }
  return est;
}

int SequentialFit::position(int layer) const {
  const auto it = std::find(layers.begin(), layers.end(), layer);
  return it == layers.end() ? -1 : static_cast<int>(it - layers.begin());
}

namespace {

void check_layers(std::span<const LayerProblem> layers, double c) {
  if (layers.empty()) throw Error("sequential_backfit: no layers");
  if (!(c >= 0.0 && c < 1.0)) throw Error("carryover coefficient c must lie in [0, 1)");
  Index nodes = -1;
  int previous = 0;
  for (const auto& l : layers) {
    if (!l.system) throw Error("sequential_backfit: layer without a system");
    if (l.layer <= previous) {
      throw Error("sequential_backfit: layers must be strictly increasing");
    }
    previous = l.layer;
    if (nodes >= 0 && l.system->nodes() != nodes) {
      throw DimensionError("sequential_backfit: layers live on different grids");
    }
    nodes = l.system->nodes();
  }
}

// sum over estimated layers k != skip with k < layer of c^{layer-k} H alpha_k
Eigen::VectorXd carryover(const LayerProblem& target, std::span<const LayerProblem> layers,
                          const std::vector<LayerEstimate>& estimates, double c, int skip) {
  Eigen::VectorXd offset = Eigen::VectorXd::Zero(target.system->observations());
  if (c == 0.0) return offset;
  Eigen::VectorXd field = Eigen::VectorXd::Zero(target.system->nodes());
  for (std::size_t k = 0; k < estimates.size(); ++k) {
    const int lk = layers[k].layer;
    if (lk >= target.layer || lk == skip) continue;
    field += std::pow(c, target.layer - lk) * estimates[k].alpha;
  }
  offset = target.system->incidence() * field;
  return offset;
}

}  // namespace

SequentialFit sequential_backfit(std::span<const LayerProblem> layers, double c,
                                 const SequentialOptions& options) {
  check_layers(layers, c);
  SequentialFit fit;
  fit.c = c;
  for (const auto& l : layers) {
    fit.layers.push_back(l.layer);
    fit.params.push_back(l.params);
  }
  for (const auto& l : layers) {
    Eigen::VectorXd offset = carryover(l, layers, fit.estimates, c, -1);
    fit.estimates.push_back(backfit_layer(*l.system, l.y, offset, options.backfit));
    fit.offsets.push_back(std::move(offset));
  }
  if (!options.outer_sweep || c == 0.0) return fit;

  // One global sweep: layer k is re-estimated from its own data plus the data
  // of every later layer t, where alpha_k enters with weight c^{t-k}.
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& lk = layers[k];
    const Index p = lk.system->covariates();
    Index rows = 0;
    for (std::size_t t = k; t < layers.size(); ++t) rows += layers[t].system->observations();

    Eigen::MatrixXd design = Eigen::MatrixXd::Zero(rows, p);
    Eigen::VectorXd noise(rows);
    Eigen::VectorXd target(rows);
    std::vector<Eigen::Triplet<double>> h_entries;
    Index row = 0;
    for (std::size_t t = k; t < layers.size(); ++t) {
      const auto& lt = layers[t];
      const auto& sys = *lt.system;
      const Index n = sys.observations();
      const double weight = std::pow(c, lt.layer - lk.layer);
      Eigen::VectorXd data = lt.y - carryover(lt, layers, fit.estimates, c, lk.layer);
      if (t == k) {
        design.middleRows(row, n) = sys.design();
      } else {
        data -= sys.design() * fit.estimates[t].beta;
        // alpha_t itself enters layer t with unit weight.
        data -= sys.incidence() * fit.estimates[t].alpha;
      }
      for (Index col = 0; col < sys.incidence().outerSize(); ++col) {
        for (Eigen::SparseMatrix<double>::InnerIterator it(sys.incidence(), col); it; ++it) {
          h_entries.emplace_back(row + it.row(), col, weight * it.value());
        }
      }
      noise.segment(row, n) = sys.noise();
      target.segment(row, n) = data;
      row += n;
    }
    Eigen::SparseMatrix<double> h(rows, lk.system->nodes());
    h.setFromTriplets(h_entries.begin(), h_entries.end());
    const LayerSystem stacked(std::move(design), std::move(h), lk.system->sigma_ptr(),
                              std::move(noise));
    fit.estimates[k] =
        backfit_layer(stacked, target, Eigen::VectorXd::Zero(rows), options.backfit);
  }
  for (std::size_t k = 0; k < layers.size(); ++k) {
    fit.offsets[k] = carryover(layers[k], layers, fit.estimates, c, -1);
  }
  return fit;
}

double residual_sum_of_squares(std::span<const LayerProblem> layers, const SequentialFit& fit) {
  double rss = 0.0;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& sys = *layers[k].system;
    const auto& est = fit.estimates[k];
    const Eigen::VectorXd offset = carryover(layers[k], layers, fit.estimates, fit.c, -1);
    rss += (layers[k].y - sys.design() * est.beta - offset - sys.incidence() * est.alpha)
               .squaredNorm();
  }
  return rss;
}

CarryoverProfile profile_carryover(std::span<const LayerProblem> layers,
                                   const SequentialOptions& options,
                                   std::vector<double> candidates) {
  if (candidates.empty()) {
    for (int i = 0; i <= 9; ++i) candidates.push_back(0.1 * i);
  }
  CarryoverProfile profile;
  profile.candidates = candidates;
  double best = std::numeric_limits<double>::infinity();
  for (const double c : candidates) {
    SequentialFit fit = sequential_backfit(layers, c, options);
    const double rss = residual_sum_of_squares(layers, fit);
    profile.rss.push_back(rss);
    if (rss < best) {
      best = rss;
      profile.best_c = c;
      profile.best_fit = std::move(fit);
    }
  }
  return profile;
}

}  // namespace terrafit
