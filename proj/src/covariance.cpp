#include "terrafit/covariance.hpp"

#include "terrafit/error.hpp"

#include <cholmod.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

namespace terrafit {

void CovarianceParams::validate() const {
  if (!(range > 0.0)) throw Error("covariance range must be positive");
  if (!(sill > 0.0)) throw Error("covariance sill must be positive");
  if (!(nugget >= 0.0)) throw Error("covariance nugget must be non-negative");
}

double spherical_cov(double h, const CovarianceParams& params) {
  if (h < 0.0 || std::isnan(h)) throw Error("spherical_cov: negative distance");
  if (h >= params.range) return 0.0;
  const double u = h / params.range;
  return params.sill * (1.0 - 1.5 * u + 0.5 * u * u * u);
}

SparseSymMatrix process_covariance(const ProcessGrid& grid, const CovarianceParams& params,
                                   const ScalingSpec& scaling) {
  params.validate();
  // Stationary on a regular grid: one stencil of (di, dj) offsets serves every node.
  const double hx = grid.dx / scaling.x_halfrange;
  const double hy = grid.dy / scaling.y_halfrange;
  const Index reach_i = std::min<Index>(grid.nx - 1, static_cast<Index>(params.range / hx));
  const Index reach_j = std::min<Index>(grid.ny - 1, static_cast<Index>(params.range / hy));

  struct Tap {
    Index di;
    Index dj;
    double value;
  };
  std::vector<Tap> stencil;  // ordered by (dj, di) so that node indices come out sorted
  for (Index dj = -reach_j; dj <= reach_j; ++dj) {
    for (Index di = -reach_i; di <= reach_i; ++di) {
      const double h = std::hypot(static_cast<double>(di) * hx, static_cast<double>(dj) * hy);
      if (h < params.range) stencil.push_back({di, dj, spherical_cov(h, params)});
    }
  }

  const Index m = grid.size();
  SparseSymMatrix sigma(m, m);
  std::vector<int> per_column(static_cast<std::size_t>(m));
  for (Index k = 0; k < m; ++k) {
    const Index i = grid.column_of(k);
    const Index j = grid.row_of(k);
    int count = 0;
    for (const auto& t : stencil) {
      const Index ii = i + t.di;
      const Index jj = j + t.dj;
      count += (ii >= 0 && ii < grid.nx && jj >= 0 && jj < grid.ny) ? 1 : 0;
    }
    per_column[static_cast<std::size_t>(k)] = count;
  }
  sigma.reserve(per_column);
  for (Index k = 0; k < m; ++k) {
    const Index i = grid.column_of(k);
    const Index j = grid.row_of(k);
    for (const auto& t : stencil) {
      const Index ii = i + t.di;
      const Index jj = j + t.dj;
      if (ii >= 0 && ii < grid.nx && jj >= 0 && jj < grid.ny) {
        sigma.insertBackUncompressed(grid.node(ii, jj), k) = t.value;
      }
    }
  }
  sigma.makeCompressed();
  return sigma;
}

SparseSymMatrix observation_covariance(const IncidenceMap& h, const SparseSymMatrix& sigma,
                                       double nugget) {
  if (h.cols() != sigma.rows() || sigma.rows() != sigma.cols()) {
    throw DimensionError("observation_covariance: H and Sigma are not conformable");
  }
  return observation_covariance(h.matrix(), sigma, Eigen::VectorXd::Constant(h.rows(), nugget));
}

SparseSymMatrix observation_covariance(const Eigen::SparseMatrix<double>& h,
                                       const SparseSymMatrix& sigma,
                                       const Eigen::VectorXd& noise) {
  if (h.cols() != sigma.rows() || sigma.rows() != sigma.cols() || noise.size() != h.rows()) {
    throw DimensionError("observation_covariance: H and Sigma are not conformable");
  }
  const Eigen::SparseMatrix<double> hs = h * sigma;
  SparseSymMatrix out = (hs * h.transpose()).pruned(0.0, 0.0);
  // Structurally symmetric by construction; add the diagonal explicitly so it
  // exists even where H Sigma H^T has no entry.
  SparseSymMatrix diag(h.rows(), h.rows());
  diag.reserve(Eigen::VectorXi::Ones(h.rows()));
  for (Index r = 0; r < h.rows(); ++r) diag.insert(r, r) = noise[r];
  out += diag;
  out.makeCompressed();
  return out;
}

namespace {

struct CholmodCommon {
  cholmod_common c{};
  CholmodCommon() {
    cholmod_start(&c);
    c.print = 0;
    c.nmethods = 1;
    c.method[0].ordering = CHOLMOD_AMD;
    c.postorder = 1;
    c.final_ll = 1;
  }
  ~CholmodCommon() { cholmod_finish(&c); }
  CholmodCommon(const CholmodCommon&) = delete;
  CholmodCommon& operator=(const CholmodCommon&) = delete;
};

}  // namespace

SpdFactor::SpdFactor(const SparseSymMatrix& a, double jitter) {
  if (a.rows() != a.cols()) throw DimensionError("SpdFactor: matrix is not square");
  const Index n = a.rows();
  SparseSymMatrix work = a;
  if (jitter != 0.0) {
    SparseSymMatrix eye(n, n);
    eye.setIdentity();
    work += jitter * eye;
  }
  work.makeCompressed();

  CholmodCommon common;
  cholmod_sparse view{};
  view.nrow = static_cast<size_t>(n);
  view.ncol = static_cast<size_t>(n);
  view.nzmax = static_cast<size_t>(work.nonZeros());
  view.p = work.outerIndexPtr();
  view.i = work.innerIndexPtr();
  view.x = work.valuePtr();
  view.stype = -1;  // lower triangle is referenced
  view.itype = CHOLMOD_INT;
  view.xtype = CHOLMOD_REAL;
  view.dtype = CHOLMOD_DOUBLE;
  view.sorted = 1;
  view.packed = 1;

  auto release = [&common](cholmod_factor* f) { cholmod_free_factor(&f, &common.c); };
  std::unique_ptr<cholmod_factor, decltype(release)> factor(cholmod_analyze(&view, &common.c),
                                                            release);
  if (!factor) throw Error("sparse Cholesky analysis failed");
  cholmod_factorize(&view, factor.get(), &common.c);
  const int* perm = static_cast<const int*>(factor->Perm);
  if (common.c.status == CHOLMOD_NOT_POSDEF || factor->minor < factor->n) {
    const auto minor = static_cast<Index>(factor->minor);
    throw NotPositiveDefinite(perm ? perm[minor] : minor);
  }
  if (common.c.status < CHOLMOD_OK) throw Error("sparse Cholesky factorization failed");
  if (!cholmod_change_factor(CHOLMOD_REAL, 1, 0, 1, 1, factor.get(), &common.c)) {
    throw Error("sparse Cholesky: factor conversion failed");
  }

  const auto* col_ptr = static_cast<const int*>(factor->p);
  const auto* row_idx = static_cast<const int*>(factor->i);
  const auto* vals = static_cast<const double*>(factor->x);
  const int nnz = col_ptr[n];
  lower_ = Eigen::Map<const Eigen::SparseMatrix<double>>(n, n, nnz, col_ptr, row_idx, vals);
  perm = static_cast<const int*>(factor->Perm);
  perm_.resize(n);
  for (Index k = 0; k < n; ++k) perm_[k] = perm ? perm[k] : static_cast<int>(k);
}

Eigen::VectorXd SpdFactor::solve(const Eigen::VectorXd& b) const {
  if (b.size() != size()) throw DimensionError("SpdFactor::solve: dimension mismatch");
  Eigen::VectorXd w(size());
  for (Index k = 0; k < size(); ++k) w[k] = b[perm_[k]];
  lower_.triangularView<Eigen::Lower>().solveInPlace(w);
  lower_.transpose().triangularView<Eigen::Upper>().solveInPlace(w);
  Eigen::VectorXd x(size());
  for (Index k = 0; k < size(); ++k) x[perm_[k]] = w[k];
  return x;
}

Eigen::MatrixXd SpdFactor::solve(const Eigen::MatrixXd& b) const {
  if (b.rows() != size()) throw DimensionError("SpdFactor::solve: dimension mismatch");
  Eigen::MatrixXd x(b.rows(), b.cols());
  for (Index c = 0; c < b.cols(); ++c) x.col(c) = solve(Eigen::VectorXd(b.col(c)));
  return x;
}

Eigen::VectorXd SpdFactor::factor_multiply(const Eigen::VectorXd& z) const {
  if (z.size() != size()) throw DimensionError("SpdFactor: dimension mismatch");
  const Eigen::VectorXd lz = lower_ * z;
  Eigen::VectorXd x(size());
  for (Index k = 0; k < size(); ++k) x[perm_[k]] = lz[k];
  return x;
}

Eigen::VectorXd SpdFactor::factor_transpose_solve(const Eigen::VectorXd& z) const {
  if (z.size() != size()) throw DimensionError("SpdFactor: dimension mismatch");
  Eigen::VectorXd w = z;
  lower_.transpose().triangularView<Eigen::Upper>().solveInPlace(w);
  Eigen::VectorXd x(size());
  for (Index k = 0; k < size(); ++k) x[perm_[k]] = w[k];
  return x;
}

double SpdFactor::log_determinant() const {
  double acc = 0.0;
  for (Index k = 0; k < size(); ++k) acc += std::log(lower_.coeff(k, k));
  return 2.0 * acc;
}

Eigen::VectorXd spd_solve(const SparseSymMatrix& a, const Eigen::VectorXd& b) {
  return SpdFactor(a).solve(b);
}

Eigen::MatrixXd spd_solve(const SparseSymMatrix& a, const Eigen::MatrixXd& b) {
  return SpdFactor(a).solve(b);
}

Eigen::VectorXd spd_factor_sample(const SparseSymMatrix& a, const Eigen::VectorXd& z,
                                  double jitter) {
  return SpdFactor(a, jitter).factor_multiply(z);
}

}  // namespace terrafit
