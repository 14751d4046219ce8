#pragma once

// Synthetic layered RMV data drawn from the sequential spatial model, with
// the true fields kept for verification.

#include "terrafit/covariance.hpp"
#include "terrafit/field_model.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace terrafit {

/// Disc added to alpha of one layer: nodes within `radius` of (x, y) shift by `depth`.
struct SoftSpot {
  double x = 150.0;
  double y = 7.5;
  double radius = 5.0;
  double depth = -5.0;
  int layer = 1;
};

/// Piecewise-linear ramp added to alpha of one layer: -amplitude/2 for
/// x <= x_start rising linearly to +amplitude/2 at x >= x_end.
struct LinearRamp {
  double x_start = 0.0;
  double x_end = 75.0;
  double amplitude = 0.0;
  int layer = 1;
};

struct SimulationSpec {
  std::string cell = "27";
  double x_min = 0.0;
  double x_max = 300.0;
  double y_min = 0.0;
  double y_max = 15.0;
  double dx = 0.5;
  double dy = 0.5;

  int lanes = 6;
  double along_track = 0.5;  // meters between readings along a lane
  double jitter = 0.25;      // uniform jitter half-width as a fraction of the cell size

  int layers = 3;
  double c = 0.5;
  /// Per layer; ranges are in scaled coordinates (grid extent mapped to [-1, 1]).
  std::vector<CovarianceParams> params{{0.1, 4.0, 4.0}, {0.1, 4.0, 4.0}, {0.1, 4.0, 4.0}};
  /// Per layer, [intercept, x, y, x^2, x^3, direction].
  std::vector<Eigen::VectorXd> beta;
  double threshold = 20.0;
  std::uint64_t seed = 1;

  std::vector<SoftSpot> spots;
  std::vector<LinearRamp> ramps;

  /// Default betas when `beta` is left empty.
  static Eigen::VectorXd default_beta(int layer);

  /// Throws ConfigError on invalid settings.
  void validate() const;
  ProcessGrid grid() const;
  ScalingSpec scaling() const { return grid_scaling(grid()); }
  const Eigen::VectorXd& beta_for(int layer) const;
};

struct SimulationTruth {
  ProcessGrid grid;
  ScalingSpec scaling;
  std::vector<Eigen::VectorXd> alpha;   // per layer, features included
  std::vector<Eigen::VectorXd> fields;  // X_grid beta_t + sum c^{t-k} alpha_k
  std::vector<LayerDataset> datasets;   // per layer
};

/// Draws zero-mean Gaussian fields with the spherical process covariance.
/// Factorizations are cached per distinct covariance parameters, so one
/// instance serves many replicates.
class FieldSimulator {
 public:
  FieldSimulator(const ProcessGrid& grid, const ScalingSpec& scaling);

  Eigen::VectorXd draw(const CovarianceParams& params, std::mt19937_64& rng);

 private:
  ProcessGrid grid_;
  ScalingSpec scaling_;
  std::vector<std::pair<CovarianceParams, std::shared_ptr<const SpdFactor>>> cache_;
};

/// True alpha fields per layer, features added after the random draw.
std::vector<Eigen::VectorXd> simulate_fields(const SimulationSpec& spec, FieldSimulator& fields);
std::vector<Eigen::VectorXd> simulate_fields(const SimulationSpec& spec);

/// Adds the spec's planted features for `layer` to alpha.
void add_features(const SimulationSpec& spec, const ProcessGrid& grid, int layer,
                  Eigen::VectorXd& alpha);

struct PassPoint {
  double x = 0.0;
  double y = 0.0;
  int direction = 0;
};

/// Boustrophedon lanes for one layer: lane j at y_min + (j + 1/2) width / lanes,
/// readings every `along_track` meters in driving order, direction
/// alternating per lane starting left-to-right, plus uniform jitter.
std::vector<PassPoint> simulate_passes(const SimulationSpec& spec, int layer);
/// The lane layout before jitter is applied.
std::vector<PassPoint> lane_layout(const SimulationSpec& spec);

/// y_t = X_t beta_t + sum_{k<=t} c^{t-k} H_t alpha_k + eps_t.
std::vector<LayerDataset> simulate_observations(const SimulationSpec& spec,
                                                const std::vector<Eigen::VectorXd>& alpha,
                                                const std::vector<std::vector<PassPoint>>& passes);

SimulationTruth simulate(const SimulationSpec& spec, FieldSimulator& fields);
SimulationTruth simulate(const SimulationSpec& spec);

}  // namespace terrafit
