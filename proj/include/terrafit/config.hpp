#pragma once

// Run configuration: a plain `key = value` file with `#` comments.

#include "terrafit/covariance.hpp"
#include "terrafit/scalespace.hpp"
#include "terrafit/simulate.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace terrafit {

enum class ScalingMode { automatic, grid };

struct RunConfig {
  std::vector<std::filesystem::path> inputs;
  std::string cell = "all";

  // Subsurface records of `subsurface_source` are split at x = cell_boundary.
  std::optional<double> cell_boundary;
  std::string subsurface_source;
  std::string left_cell;
  std::string right_cell;

  double grid_dx = 0.5;
  double grid_dy = 0.5;
  std::optional<std::array<double, 4>> grid_extent;  // x_min, x_max, y_min, y_max
  ScalingMode scaling = ScalingMode::automatic;

  std::array<CovarianceParams, 3> params{CovarianceParams{0.1, 4.0, 4.0},
                                         CovarianceParams{0.1, 4.0, 4.0},
                                         CovarianceParams{0.1, 4.0, 4.0}};
  double c = 0.5;
  bool c_profile = false;
  bool outer_sweep = false;
  double tolerance = 1e-8;
  int max_iter = 500;

  double threshold = 20.0;
  int samples = 500;
  std::uint64_t seed = 1;
  double direction_value = 0.5;
  Index dense_limit = 2500;

  SmootherSpec smoother;
  int render_scale = 2;

  std::filesystem::path output = "terrafit_out";

  SimulationSpec simulation;

  /// Re-checks every module-level invariant; throws ConfigError.
  void validate() const;
};

/// Parses a config file. Unknown keys and malformed values raise
/// ConfigError naming the key and line.
RunConfig parse_config(std::istream& in);
RunConfig load_config(const std::filesystem::path& path);

/// Canonical text with every key spelled out; parses back to the same config.
std::string to_config_text(const RunConfig& config);

/// 64-bit FNV-1a of a string, printed as 16 hex digits.
std::string fnv1a_hex(const std::string& text);

}  // namespace terrafit
