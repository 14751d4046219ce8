#include "terrafit/simulate.hpp"

#include "terrafit/error.hpp"
#include "terrafit/posterior.hpp"

#include <algorithm>
#include <cmath>

namespace terrafit {

namespace {

// Independent RNG streams per purpose and layer.
enum Stream : std::uint64_t { kFieldStream = 0, kPassStream = 100, kNoiseStream = 200 };

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t id) {
  return std::mt19937_64(derive_seed(seed, id));
}

}  // namespace

Eigen::VectorXd SimulationSpec::default_beta(int layer) {
  Eigen::VectorXd b(kDesignColumns);
  // Stiffer with every compacted layer, mild along-track trend, small
  // direction effect.
  b << 24.0 + 4.0 * (layer - 1), 1.5, -0.5, -1.0, 0.5, 0.8;
  return b;
}

void SimulationSpec::validate() const {
  if (lanes < 1) throw ConfigError("simulation needs at least one lane");
  if (!(along_track > 0.0)) throw ConfigError("along-track interval must be positive");
  if (!(dx > 0.0) || !(dy > 0.0)) throw ConfigError("grid spacing must be positive");
  if (!(x_max > x_min) || !(y_max > y_min)) throw ConfigError("degenerate simulation extent");
  if (!(jitter >= 0.0 && jitter < 0.5)) throw ConfigError("jitter must lie in [0, 0.5)");
  if (layers < 1 || layers > 3) throw ConfigError("simulation layers must be 1, 2 or 3");
  if (!(c >= 0.0 && c < 1.0)) throw ConfigError("carryover c must lie in [0, 1)");
  if (static_cast<int>(params.size()) < layers) {
    throw ConfigError("covariance parameters missing for some layers");
  }
  for (int t = 0; t < layers; ++t) {
    try {
      params[static_cast<std::size_t>(t)].validate();
    } catch (const Error& e) {
      throw ConfigError("layer " + std::to_string(t + 1) + ": " + e.what());
    }
  }
  if (!beta.empty()) {
    if (static_cast<int>(beta.size()) < layers) throw ConfigError("beta missing for some layers");
    for (const auto& b : beta) {
      if (b.size() != kDesignColumns) throw ConfigError("beta must have 6 coefficients");
    }
  }
  for (const auto& s : spots) {
    if (!(s.radius > 0.0) || s.layer < 1 || s.layer > 3) throw ConfigError("invalid soft spot");
  }
  for (const auto& r : ramps) {
    if (!(r.x_end > r.x_start) || r.layer < 1 || r.layer > 3) throw ConfigError("invalid ramp");
  }
}

ProcessGrid SimulationSpec::grid() const { return build_grid(x_min, x_max, y_min, y_max, dx, dy); }

const Eigen::VectorXd& SimulationSpec::beta_for(int layer) const {
  static const std::vector<Eigen::VectorXd> defaults = {default_beta(1), default_beta(2),
                                                        default_beta(3)};
  const auto idx = static_cast<std::size_t>(layer - 1);
  return beta.empty() ? defaults.at(idx) : beta.at(idx);
}

FieldSimulator::FieldSimulator(const ProcessGrid& grid, const ScalingSpec& scaling)
    : grid_(grid), scaling_(scaling) {}

Eigen::VectorXd FieldSimulator::draw(const CovarianceParams& params, std::mt19937_64& rng) {
  std::shared_ptr<const SpdFactor> factor;
  for (const auto& [p, f] : cache_) {
    if (p.range == params.range && p.sill == params.sill) factor = f;
  }
  if (!factor) {
    const CovarianceParams process{params.range, params.sill, 0.0};
    factor = std::make_shared<const SpdFactor>(process_covariance(grid_, process, scaling_),
                                               kProcessJitter * params.sill);
    cache_.emplace_back(process, factor);
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd z(grid_.size());
  for (Index k = 0; k < z.size(); ++k) z[k] = normal(rng);
  return factor->factor_multiply(z);
}

void add_features(const SimulationSpec& spec, const ProcessGrid& grid, int layer,
                  Eigen::VectorXd& alpha) {
  for (const auto& s : spec.spots) {
    if (s.layer != layer) continue;
    for (Index k = 0; k < grid.size(); ++k) {
      if (std::hypot(grid.node_x(k) - s.x, grid.node_y(k) - s.y) <= s.radius) alpha[k] += s.depth;
    }
  }
  for (const auto& r : spec.ramps) {
    if (r.layer != layer) continue;
    for (Index k = 0; k < grid.size(); ++k) {
      const double t = std::clamp((grid.node_x(k) - r.x_start) / (r.x_end - r.x_start), 0.0, 1.0);
      alpha[k] += r.amplitude * (t - 0.5);
    }
  }
}

std::vector<Eigen::VectorXd> simulate_fields(const SimulationSpec& spec, FieldSimulator& fields) {
  spec.validate();
  const ProcessGrid grid = spec.grid();
  std::vector<Eigen::VectorXd> alpha;
  for (int t = 1; t <= spec.layers; ++t) {
    auto rng = stream(spec.seed, kFieldStream + static_cast<std::uint64_t>(t));
    Eigen::VectorXd a = fields.draw(spec.params[static_cast<std::size_t>(t - 1)], rng);
    add_features(spec, grid, t, a);
    alpha.push_back(std::move(a));
  }
  return alpha;
}

std::vector<Eigen::VectorXd> simulate_fields(const SimulationSpec& spec) {
  FieldSimulator fields(spec.grid(), spec.scaling());
  return simulate_fields(spec, fields);
}

std::vector<PassPoint> lane_layout(const SimulationSpec& spec) {
  spec.validate();
  const double width = spec.y_max - spec.y_min;
  const double length = spec.x_max - spec.x_min;
  const auto steps = static_cast<long>(std::floor(length / spec.along_track + 1e-9));
  std::vector<PassPoint> out;
  for (int lane = 0; lane < spec.lanes; ++lane) {
    const double y = spec.y_min + (lane + 0.5) * width / spec.lanes;
    const int direction = lane % 2;  // first lane left-to-right
    for (long s = 0; s <= steps; ++s) {
      const long k = direction == 0 ? s : steps - s;
      out.push_back({spec.x_min + static_cast<double>(k) * spec.along_track, y, direction});
    }
  }
  return out;
}

std::vector<PassPoint> simulate_passes(const SimulationSpec& spec, int layer) {
  auto points = lane_layout(spec);
  auto rng = stream(spec.seed, kPassStream + static_cast<std::uint64_t>(layer));
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (auto& p : points) {
    p.x += spec.jitter * spec.dx * unit(rng);
    p.y += spec.jitter * spec.dy * unit(rng);
  }
  return points;
}

std::vector<LayerDataset> simulate_observations(const SimulationSpec& spec,
                                                const std::vector<Eigen::VectorXd>& alpha,
                                                const std::vector<std::vector<PassPoint>>& passes) {
  spec.validate();
  if (static_cast<int>(alpha.size()) != spec.layers ||
      static_cast<int>(passes.size()) != spec.layers) {
    throw DimensionError("simulate_observations: one field and one pass set per layer required");
  }
  const ProcessGrid grid = spec.grid();
  const ScalingSpec scaling = spec.scaling();
  std::vector<LayerDataset> out;
  for (int t = 1; t <= spec.layers; ++t) {
    LayerDataset ds;
    ds.cell = spec.cell;
    ds.layer = layer_from_int(t);
    for (const auto& p : passes[static_cast<std::size_t>(t - 1)]) {
      ds.records.push_back({spec.cell, ds.layer, p.x, p.y, p.direction, 0.0});
    }
    const DesignMatrix design = build_design(ds, scaling);
    const IncidenceMap h = build_incidence(ds, grid);
    Eigen::VectorXd field = Eigen::VectorXd::Zero(grid.size());
    for (int k = 1; k <= t; ++k) {
      field += std::pow(spec.c, t - k) * alpha[static_cast<std::size_t>(k - 1)];
    }
    Eigen::VectorXd y = design.values * spec.beta_for(t) + h.apply(field);
    const double sd = std::sqrt(spec.params[static_cast<std::size_t>(t - 1)].nugget);
    if (sd > 0.0) {
      auto rng = stream(spec.seed, kNoiseStream + static_cast<std::uint64_t>(t));
      std::normal_distribution<double> normal(0.0, sd);
      for (Index r = 0; r < y.size(); ++r) y[r] += normal(rng);
    }
    for (Index r = 0; r < y.size(); ++r) ds.records[static_cast<std::size_t>(r)].value = y[r];
    out.push_back(std::move(ds));
  }
  return out;
}

SimulationTruth simulate(const SimulationSpec& spec, FieldSimulator& fields) {
  spec.validate();
  SimulationTruth truth;
  truth.grid = spec.grid();
  truth.scaling = spec.scaling();
  truth.alpha = simulate_fields(spec, fields);
  std::vector<std::vector<PassPoint>> passes;
  for (int t = 1; t <= spec.layers; ++t) passes.push_back(simulate_passes(spec, t));
  truth.datasets = simulate_observations(spec, truth.alpha, passes);

  // Direction-neutral process-level design, as used for the estimated images.
  const DesignMatrix grid_design = build_grid_design(truth.grid, truth.scaling, 0.5);
  for (int t = 1; t <= spec.layers; ++t) {
    Eigen::VectorXd f = grid_design.values * spec.beta_for(t);
    for (int k = 1; k <= t; ++k) {
      f += std::pow(spec.c, t - k) * truth.alpha[static_cast<std::size_t>(k - 1)];
    }
    truth.fields.push_back(std::move(f));
  }
  return truth;
}

SimulationTruth simulate(const SimulationSpec& spec) {
  FieldSimulator fields(spec.grid(), spec.scaling());
  return simulate(spec, fields);
}

}  // namespace terrafit
