#include "terrafit/scalespace.hpp"

#include "terrafit/error.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <thread>

namespace terrafit {

const char* mode_name(ScaleMode mode) {
  return mode == ScaleMode::detail ? "detail" : "smooth_sign";
}

ScaleMode parse_mode(const std::string& text) {
  if (text == "smooth_sign") return ScaleMode::smooth_sign;
  if (text == "detail") return ScaleMode::detail;
  throw ConfigError("unknown scale-space mode '" + text + "' (expected smooth_sign or detail)");
}

void SmootherSpec::validate() const {
  if (lambdas.empty()) throw ConfigError("at least one smoothing level is required");
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    if (!(lambdas[i] >= 0.0)) throw ConfigError("smoothing levels must be non-negative");
    if (i > 0 && !(lambdas[i] > lambdas[i - 1])) {
      throw ConfigError("smoothing levels must be strictly increasing");
    }
  }
  if (!(credibility_level > 0.5 && credibility_level < 1.0)) {
    throw ConfigError("credibility level must lie in (0.5, 1)");
  }
}

SparseSymMatrix build_penalty(const ProcessGrid& grid) {
  const Index m = grid.size();
  std::vector<Eigen::Triplet<double>> entries;
  entries.reserve(static_cast<std::size_t>(5 * m));
  auto edge = [&](Index a, Index b) {
    entries.emplace_back(a, a, 1.0);
    entries.emplace_back(b, b, 1.0);
    entries.emplace_back(a, b, -1.0);
    entries.emplace_back(b, a, -1.0);
  };
  for (Index j = 0; j < grid.ny; ++j) {
    for (Index i = 0; i < grid.nx; ++i) {
      if (i + 1 < grid.nx) edge(grid.node(i, j), grid.node(i + 1, j));
      if (j + 1 < grid.ny) edge(grid.node(i, j), grid.node(i, j + 1));
    }
  }
  SparseSymMatrix q(m, m);
  q.setFromTriplets(entries.begin(), entries.end());
  q.makeCompressed();
  return q;
}

Smoother::Smoother(const SparseSymMatrix& penalty, double lambda)
    : lambda_(lambda), size_(penalty.rows()) {
  if (!(lambda >= 0.0)) throw ConfigError("smoothing level must be non-negative");
  if (lambda > 0.0 && std::isfinite(lambda)) {
    SparseSymMatrix system = lambda * penalty;
    SparseSymMatrix eye(size_, size_);
    eye.setIdentity();
    system += eye;
    factor_ = std::make_shared<const SpdFactor>(system);
  }
}

Eigen::VectorXd Smoother::apply(const Eigen::VectorXd& z) const {
  if (z.size() != size_) throw DimensionError("smooth: field does not match the penalty");
  if (lambda_ == 0.0) return z;
  // Constants lie in the null space of Q and pass through unchanged.
  if (z.size() == 0 || z.maxCoeff() == z.minCoeff()) return z;
  if (!std::isfinite(lambda_)) return Eigen::VectorXd::Constant(z.size(), z.mean());
  return factor_->solve(z);
}

FieldImage smooth(const FieldImage& z, double lambda, const SparseSymMatrix& penalty) {
  FieldImage out = z;
  out.values = Smoother(penalty, lambda).apply(z.values);
  return out;
}

const Eigen::VectorXd& DetailStack::component(std::size_t lambda_index, ScaleMode mode) const {
  if (mode == ScaleMode::detail) {
    if (details.empty()) throw Error("detail stack was built in smooth_sign mode");
    return details.at(lambda_index);
  }
  return smooths.at(lambda_index);
}

ScaleSpace::ScaleSpace(const ProcessGrid& grid, SmootherSpec spec)
    : grid_(grid), spec_(std::move(spec)), penalty_(build_penalty(grid)) {
  spec_.validate();
  for (const double lambda : spec_.lambdas) smoothers_.emplace_back(penalty_, lambda);
}

DetailStack ScaleSpace::decompose(const Eigen::VectorXd& z) const {
  DetailStack stack;
  for (const auto& s : smoothers_) stack.smooths.push_back(s.apply(z));
  if (spec_.mode == ScaleMode::detail) {
    for (std::size_t i = 0; i + 1 < stack.smooths.size(); ++i) {
      stack.details.push_back(stack.smooths[i] - stack.smooths[i + 1]);
    }
    stack.details.push_back(stack.smooths.back());
  }
  return stack;
}

DetailStack decompose(const FieldImage& z, const SmootherSpec& spec) {
  return ScaleSpace(z.grid, spec).decompose(z.values);
}

Index CredibilityMap::count(Credibility state) const {
  return static_cast<Index>(std::count(states.begin(), states.end(), state));
}

namespace {

// Per-lambda sign counts accumulated over samples.
struct SignCounts {
  std::vector<Eigen::VectorXi> positive;
  std::vector<Eigen::VectorXi> negative;
  Index samples = 0;

  SignCounts(std::size_t lambdas, Index nodes)
      : positive(lambdas, Eigen::VectorXi::Zero(nodes)),
        negative(lambdas, Eigen::VectorXi::Zero(nodes)) {}

  void add(const DetailStack& stack, ScaleMode mode) {
    for (std::size_t l = 0; l < positive.size(); ++l) {
      const auto& comp = stack.component(l, mode);
      if (comp.size() != positive[l].size()) throw DimensionError("credibility: mismatched stacks");
      positive[l] += (comp.array() > 0.0).cast<int>().matrix();
      negative[l] += (comp.array() < 0.0).cast<int>().matrix();
    }
    ++samples;
  }

  void merge(const SignCounts& other) {
    for (std::size_t l = 0; l < positive.size(); ++l) {
      positive[l] += other.positive[l];
      negative[l] += other.negative[l];
    }
    samples += other.samples;
  }

  CredibilityMap map(std::size_t l, double level, ScaleMode mode, const ProcessGrid& grid) const {
    CredibilityMap out;
    out.grid = grid;
    out.mode = mode;
    out.level = level;
    const Index m = positive[l].size();
    out.states.assign(static_cast<std::size_t>(m), Credibility::undecided);
    out.positive_fraction.resize(m);
    const double n = static_cast<double>(samples);
    for (Index k = 0; k < m; ++k) {
      const double p_pos = positive[l][k] / n;
      const double p_neg = negative[l][k] / n;
      out.positive_fraction[k] = p_pos;
      if (p_pos >= level) {
        out.states[static_cast<std::size_t>(k)] = Credibility::positive;
      } else if (p_neg >= level) {
        out.states[static_cast<std::size_t>(k)] = Credibility::negative;
      }
    }
    return out;
  }
};

double log_binomial_upper_tail(Index n, Index k) {
  // log P(Bin(n, 1/2) >= k)
  if (k <= 0) return 0.0;
  if (k > n) return -std::numeric_limits<double>::infinity();
  double max_term = -std::numeric_limits<double>::infinity();
  std::vector<double> terms;
  for (Index j = k; j <= n; ++j) {
    const double t = std::lgamma(n + 1.0) - std::lgamma(j + 1.0) - std::lgamma(n - j + 1.0) -
                     static_cast<double>(n) * std::log(2.0);
    terms.push_back(t);
    max_term = std::max(max_term, t);
  }
  double acc = 0.0;
  for (const double t : terms) acc += std::exp(t - max_term);
  return max_term + std::log(acc);
}

}  // namespace

double simultaneous_level(double level, Index nodes, Index samples) {
  if (samples < 1 || nodes < 1) return level;
  double current = level;
  for (int step = 0; step < 64; ++step) {
    const auto needed =
        static_cast<Index>(std::ceil(current * static_cast<double>(samples) - 1e-9));
    // Both tails; fair-coin signs are symmetric.
    const double expected =
        2.0 * static_cast<double>(nodes) * std::exp(log_binomial_upper_tail(samples, needed));
    if (expected < 1.0) return current;
    const double next = 1.0 - 0.5 * (1.0 - current);
    if (next >= 1.0) break;
    current = next;
  }
  return current;
}

CredibilityMap credibility(std::span<const DetailStack> samples, std::size_t lambda_index,
                           double level, ScaleMode mode, const ProcessGrid& grid) {
  if (samples.size() < 2) throw Error("credibility: at least two samples are required");
  if (!(level > 0.5 && level < 1.0)) throw ConfigError("credibility level must lie in (0.5, 1)");
  const auto lambdas = samples.front().smooths.size();
  if (lambda_index >= lambdas) throw Error("credibility: lambda index out of range");
  SignCounts counts(lambdas, grid.size());
  for (const auto& s : samples) {
    if (s.smooths.size() != lambdas) throw DimensionError("credibility: mismatched stacks");
    counts.add(s, mode);
  }
  return counts.map(lambda_index, level, mode, grid);
}

std::vector<LayerMaps> analyze(std::span<const std::vector<FieldImage>> images,
                               const SmootherSpec& spec, const AnalyzeOptions& options) {
  spec.validate();
  std::vector<LayerMaps> out;
  std::unique_ptr<ScaleSpace> space;
  for (const auto& layer_images : images) {
    if (layer_images.size() < 2) throw Error("analyze: at least two samples per layer required");
    const auto& first = layer_images.front();
    for (const auto& img : layer_images) {
      if (!img.thresholded && !options.allow_unthresholded) {
        throw Error("analyze: layer " + std::to_string(img.layer) +
                    " images are not thresholded");
      }
      if (!(img.grid == first.grid) || img.layer != first.layer ||
          img.values.size() != first.grid.size()) {
        throw DimensionError("analyze: images of one layer disagree on grid or layer");
      }
    }
    if (!space || !(space->grid() == first.grid)) {
      space = std::make_unique<ScaleSpace>(first.grid, spec);
    }

    const Index m = first.grid.size();
    const std::size_t count = layer_images.size();
    const unsigned workers = std::clamp<unsigned>(
        options.threads > 0 ? static_cast<unsigned>(options.threads)
                            : std::max(1u, std::thread::hardware_concurrency()),
        1u, static_cast<unsigned>(count));
    SignCounts total(spec.lambdas.size(), m);
    if (workers == 1) {
      for (const auto& img : layer_images) total.add(space->decompose(img.values), spec.mode);
    } else {
      std::atomic<std::size_t> next{0};
      std::mutex merge_lock;
      std::vector<std::thread> pool;
      for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
          SignCounts local(spec.lambdas.size(), m);
          for (std::size_t i = next++; i < count; i = next++) {
            local.add(space->decompose(layer_images[i].values), spec.mode);
          }
          const std::lock_guard<std::mutex> guard(merge_lock);
          total.merge(local);
        });
      }
      for (auto& t : pool) t.join();
    }

    LayerMaps maps;
    maps.layer = first.layer;
    for (std::size_t l = 0; l < spec.lambdas.size(); ++l) {
      const double level = spec.simultaneous
                               ? simultaneous_level(spec.credibility_level, m,
                                                    static_cast<Index>(count))
                               : spec.credibility_level;
      CredibilityMap map = total.map(l, level, spec.mode, first.grid);
      map.layer = first.layer;
      map.lambda = spec.lambdas[l];
      maps.maps.push_back(std::move(map));
    }
    out.push_back(std::move(maps));
  }
  return out;
}

void write_credibility_csv(const std::filesystem::path& path, const CredibilityMap& map) {
  Eigen::VectorXd values(static_cast<Index>(map.states.size()));
  for (std::size_t k = 0; k < map.states.size(); ++k) {
    values[static_cast<Index>(k)] = static_cast<double>(map.states[k]);
  }
  write_grid_csv(path, map.grid, values);
}

}  // namespace terrafit
