#pragma once

// Posterior sampling of (beta_t, alpha_t), field-image assembly and
// thresholding.

#include "terrafit/backfit.hpp"
#include "terrafit/field_model.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <vector>

namespace terrafit {

/// (X^T Sigma_y^{-1} X)^{-1} for the observation-level design.
Eigen::MatrixXd beta_posterior_cov(const Eigen::MatrixXd& design, const SpdFactor& sigma_y);
Eigen::MatrixXd beta_posterior_cov(const LayerSystem& system);

/// Applies V_alpha = Sigma H^T M H Sigma with the residual-projected
/// precision M = Sigma_y^{-1} (I - X (X^T Sigma_y^{-1} X)^{-1} X^T Sigma_y^{-1})
/// without forming V_alpha.
class AlphaPosteriorOperator {
 public:
  explicit AlphaPosteriorOperator(std::shared_ptr<const LayerSystem> system);

  Index size() const { return system_->nodes(); }

  /// V_alpha v.
  Eigen::VectorXd apply(const Eigen::VectorXd& v) const;
  /// M r for an observation-level vector r.
  Eigen::VectorXd residual_precision(const Eigen::VectorXd& r) const;
  /// (I - X (X^T Sigma_y^{-1} X)^{-1} X^T Sigma_y^{-1}) r.
  Eigen::VectorXd residual_projector(const Eigen::VectorXd& r) const;
  /// V_alpha(k, k) for the given nodes.
  Eigen::VectorXd diagonal(std::span<const Index> nodes) const;
  /// Dense V_alpha (small grids only).
  Eigen::MatrixXd dense() const;

  /// A zero-mean draw with covariance V_alpha from n standard normals:
  /// Sigma H^T M G z with G G^T = Sigma_y.
  Eigen::VectorXd sample_from_observation_noise(const Eigen::VectorXd& z) const;

 private:
  std::shared_ptr<const LayerSystem> system_;
};

/// Dense V_alpha. Throws for singular normal matrices like the other forms.
Eigen::MatrixXd alpha_posterior_cov(const LayerSystem& system);

/// One joint draw of all layers' (beta, alpha).
struct PosteriorSample {
  std::uint64_t index = 0;
  std::uint64_t seed = 0;  // sub-seed the draw was generated from
  std::vector<Eigen::VectorXd> beta;   // per layer, fit order
  std::vector<Eigen::VectorXd> alpha;  // per layer, fit order
};

struct SamplingOptions {
  /// Grids up to this many nodes sample alpha through a dense factor of
  /// V_alpha; larger grids use the observation-noise construction.
  Index dense_limit = 2500;
  /// Check mode: every covariance is replaced by zero.
  bool zero_covariance = false;
};

/// Per-layer sampler state (factors are computed once and reused).
class PosteriorSampler {
 public:
  PosteriorSampler(const SequentialFit& fit,
                   std::vector<std::shared_ptr<const LayerSystem>> systems,
                   SamplingOptions options = {});

  /// Draw `index` of the stream identified by `seed`. Draws are independent
  /// across indices and do not depend on the order they are requested in.
  PosteriorSample draw(std::uint64_t seed, std::uint64_t index) const;

  const SequentialFit& fit() const { return fit_; }

 private:
  struct LayerState {
    std::shared_ptr<const LayerSystem> system;
    Eigen::MatrixXd beta_factor;  // lower Cholesky of the beta covariance
    std::optional<Eigen::MatrixXd> alpha_factor;  // dense route
    std::unique_ptr<AlphaPosteriorOperator> alpha_operator;
  };

  SequentialFit fit_;
  SamplingOptions options_;
  std::vector<LayerState> layers_;
};

/// Sub-seed for draw `index` of stream `seed` (splitmix64 mixing).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

/// `count` draws; sample i uses derive_seed(seed, i). Uses up to `threads`
/// worker threads (0 = hardware concurrency); results are ordered by index.
std::vector<PosteriorSample> draw_samples(const SequentialFit& fit,
                                          std::vector<std::shared_ptr<const LayerSystem>> systems,
                                          int count, std::uint64_t seed,
                                          const SamplingOptions& options = {}, int threads = 1);

/// A process-level image of one layer.
struct FieldImage {
  ProcessGrid grid;
  Eigen::VectorXd values;  // grid node order
  int layer = 1;
  bool thresholded = false;
  double threshold = 0.0;  // constant subtracted when thresholded
};

/// X_grid beta_t + sum_{k<=t} c^{t-k} alpha_k. `betas`/`alphas` are indexed
/// by fit position and `layers` gives their layer numbers; `position` selects t.
FieldImage assemble_field(const ProcessGrid& grid, const DesignMatrix& grid_design,
                          std::span<const int> layers, std::span<const Eigen::VectorXd> betas,
                          std::span<const Eigen::VectorXd> alphas, std::size_t position,
                          double c);
FieldImage assemble_field(const ProcessGrid& grid, const DesignMatrix& grid_design,
                          const SequentialFit& fit, std::size_t position);
FieldImage assemble_field(const ProcessGrid& grid, const DesignMatrix& grid_design,
                          const SequentialFit& fit, const PosteriorSample& sample,
                          std::size_t position);

/// Subtracts the threshold so negative values mark soft areas. Throws when
/// the image has already been thresholded.
FieldImage apply_threshold(FieldImage image, double threshold);

// Grid CSV: a `nx,ny,x0,y0,dx,dy` value line, then ny rows of nx values,
// first row at y0. `digits` significant digits per value (17 round-trips).
void write_grid_csv(std::ostream& out, const ProcessGrid& grid, const Eigen::VectorXd& values,
                    int digits = 9);
void write_grid_csv(const std::filesystem::path& path, const ProcessGrid& grid,
                    const Eigen::VectorXd& values, int digits = 9);
struct GridValues {
  ProcessGrid grid;
  Eigen::VectorXd values;
};
GridValues read_grid_csv(std::istream& in);
GridValues read_grid_csv(const std::filesystem::path& path);

// Binary stack of sample images for one layer:
//   magic "TFSTACK1", int32 layer, int32 thresholded, float64 threshold,
//   int64 nx, ny, float64 x0, y0, dx, dy, int64 count, then count * nx * ny
//   float64 values, all little-endian.
void write_image_stack(const std::filesystem::path& path, std::span<const FieldImage> images);
std::vector<FieldImage> read_image_stack(const std::filesystem::path& path);

}  // namespace terrafit
