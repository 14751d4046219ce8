#pragma once

// Multiresolution scale-space analysis of posterior field images:
// smoothing S_lambda = (I + lambda Q)^{-1} with Q the 4-neighbour grid
// Laplacian, detail decomposition and per-node credibility maps.

#include "terrafit/covariance.hpp"
#include "terrafit/posterior.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace terrafit {

inline constexpr double kInfiniteLambda = std::numeric_limits<double>::infinity();

enum class ScaleMode { smooth_sign, detail };

const char* mode_name(ScaleMode mode);
ScaleMode parse_mode(const std::string& text);

struct SmootherSpec {
  std::vector<double> lambdas{8.0, 16.0, 1000.0, kInfiniteLambda};
  double credibility_level = 0.95;
  ScaleMode mode = ScaleMode::smooth_sign;
  /// Tighten the level per map so that fewer than one node is expected to be
  /// flagged when every sample sign is a fair coin flip.
  bool simultaneous = false;

  /// Throws ConfigError when lambdas are not strictly increasing and
  /// non-negative or the level is outside (0.5, 1).
  void validate() const;
};

/// Degree minus adjacency over 4-neighbour grid edges.
SparseSymMatrix build_penalty(const ProcessGrid& grid);

/// Factored (I + lambda Q) for one lambda. lambda = 0 is the identity and
/// lambda = infinity projects onto the constant field.
class Smoother {
 public:
  Smoother(const SparseSymMatrix& penalty, double lambda);

  double lambda() const { return lambda_; }
  Eigen::VectorXd apply(const Eigen::VectorXd& z) const;

 private:
  double lambda_;
  Index size_;
  std::shared_ptr<const SpdFactor> factor_;
};

/// One-off smoothing of a field image.
FieldImage smooth(const FieldImage& z, double lambda, const SparseSymMatrix& penalty);

struct DetailStack {
  std::vector<Eigen::VectorXd> smooths;  // S_lambda_i z, one per lambda
  /// Detail mode only: d_i = S_{lambda_i} z - S_{lambda_{i+1}} z for all but
  /// the last lambda, whose entry is the coarsest smooth itself (the mean
  /// component when the last lambda is infinite). Their sum is S_{lambda_1} z.
  std::vector<Eigen::VectorXd> details;

  /// The per-lambda quantity whose sign is assessed in `mode`.
  const Eigen::VectorXd& component(std::size_t lambda_index, ScaleMode mode) const;
};

/// Shares one factorization per lambda across every decomposed field.
class ScaleSpace {
 public:
  ScaleSpace(const ProcessGrid& grid, SmootherSpec spec);

  const SmootherSpec& spec() const { return spec_; }
  const ProcessGrid& grid() const { return grid_; }
  const SparseSymMatrix& penalty() const { return penalty_; }

  DetailStack decompose(const Eigen::VectorXd& z) const;

 private:
  ProcessGrid grid_;
  SmootherSpec spec_;
  SparseSymMatrix penalty_;
  std::vector<Smoother> smoothers_;
};

DetailStack decompose(const FieldImage& z, const SmootherSpec& spec);

enum class Credibility : std::int8_t { negative = -1, undecided = 0, positive = 1 };

struct CredibilityMap {
  ProcessGrid grid;
  std::vector<Credibility> states;  // grid node order
  Eigen::VectorXd positive_fraction;  // p+ per node
  int layer = 1;
  double lambda = 0.0;
  ScaleMode mode = ScaleMode::smooth_sign;
  double level = 0.95;  // level actually applied (tightened when simultaneous)

  Index count(Credibility state) const;
};

/// Per node p+ = share of samples whose component is > 0; positive when
/// p+ >= level, negative when p+ <= 1 - level, undecided otherwise.
CredibilityMap credibility(std::span<const DetailStack> samples, std::size_t lambda_index,
                           double level, ScaleMode mode, const ProcessGrid& grid);

/// Smallest level >= `level` (searched by halving 1 - level) for which the
/// expected number of flagged nodes among `nodes` under fair-coin signs is
/// below one.
double simultaneous_level(double level, Index nodes, Index samples);

struct LayerMaps {
  int layer = 1;
  std::vector<CredibilityMap> maps;  // one per lambda
};

struct AnalyzeOptions {
  /// Accept images that were not thresholded.
  bool allow_unthresholded = false;
  int threads = 1;
};

/// Credibility maps for every layer and lambda. `images[l]` holds the
/// posterior sample images of one layer.
std::vector<LayerMaps> analyze(std::span<const std::vector<FieldImage>> images,
                               const SmootherSpec& spec, const AnalyzeOptions& options = {});

/// Map CSV: grid header line, then states encoded -1/0/+1.
void write_credibility_csv(const std::filesystem::path& path, const CredibilityMap& map);

}  // namespace terrafit
