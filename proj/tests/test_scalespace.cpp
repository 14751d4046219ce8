#include "oracles.hpp"

#include "terrafit/error.hpp"
#include "terrafit/scalespace.hpp"

#include <doctest.h>

#include <algorithm>

using namespace terrafit;

namespace {

Eigen::VectorXd random_field(Index m, std::mt19937_64& rng, double mean = 0.0) {
  std::normal_distribution<double> n(mean, 1.0);
  Eigen::VectorXd v(m);
  for (Index i = 0; i < m; ++i) v[i] = n(rng);
  return v;
}

FieldImage image(const ProcessGrid& g, Eigen::VectorXd v, int layer = 1) {
  return {g, std::move(v), layer, true, 20.0};
}

// Laplacian built straight from the neighbour rule.
Eigen::MatrixXd dense_laplacian(const ProcessGrid& g) {
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(g.size(), g.size());
  for (Index a = 0; a < g.size(); ++a) {
    for (Index b = 0; b < g.size(); ++b) {
      const auto dc = std::abs(g.column_of(a) - g.column_of(b));
      const auto dr = std::abs(g.row_of(a) - g.row_of(b));
      if (dc + dr == 1) {
        q(a, b) = -1.0;
        q(a, a) += 1.0;
      }
    }
  }
  return q;
}

}  // namespace

TEST_CASE("penalty matrix") {
  ProcessGrid two;
  two.nx = 2;
  two.ny = 1;
  Eigen::Matrix2d want;
  want << 1, -1, -1, 1;
  CHECK(Eigen::MatrixXd(build_penalty(two)) == want);

  const auto g = build_grid(0, 5, 0, 3, 1, 1);
  const Eigen::MatrixXd q = build_penalty(g);
  CHECK(q == dense_laplacian(g));
  CHECK(q.rowwise().sum().cwiseAbs().maxCoeff() == 0.0);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(q);
  CHECK(eig.eigenvalues().minCoeff() > -1e-12);
}

TEST_CASE("smoother limits and equivariance") {
  const auto g = build_grid(0, 9, 0, 6, 1, 1);
  const auto q = build_penalty(g);
  std::mt19937_64 rng(4);
  const Eigen::VectorXd z = random_field(g.size(), rng, 3.0);

  CHECK(Smoother(q, 0.0).apply(z) == z);
  const Eigen::VectorXd flat = Smoother(q, kInfiniteLambda).apply(z);
  CHECK((flat.array() - z.mean()).abs().maxCoeff() < 1e-12);

  const Eigen::MatrixXd dense = Eigen::MatrixXd::Identity(g.size(), g.size()) + 5.0 * Eigen::MatrixXd(q);
  CHECK(oracle::rel_err(Smoother(q, 5.0).apply(z), dense.llt().solve(z)) < 1e-10);

  for (const double lambda : {0.5, 8.0, 1000.0}) {
    const Smoother s(q, lambda);
    const Eigen::VectorXd c = Eigen::VectorXd::Constant(g.size(), -2.5);
    CHECK((s.apply(c) - c).lpNorm<Eigen::Infinity>() < 1e-10);
    CHECK((s.apply(z + c) - s.apply(z) - c).lpNorm<Eigen::Infinity>() < 1e-10);
    CHECK(std::abs(s.apply(z).mean() - z.mean()) < 1e-10);
  }
}

TEST_CASE("roughness of the smooth decreases with lambda") {
  const auto g = build_grid(0, 14, 0, 9, 1, 1);
  const auto q = build_penalty(g);
  std::mt19937_64 rng(5);
  const Eigen::VectorXd z = random_field(g.size(), rng);
  double previous = z.dot(q * z);
  for (const double lambda : {0.1, 1.0, 8.0, 16.0, 100.0, 1000.0}) {
    const Eigen::VectorXd s = Smoother(q, lambda).apply(z);
    const double rough = s.dot(q * s);
    CHECK(rough < previous);
    previous = rough;
  }
}

TEST_CASE("detail decomposition telescopes") {
  const auto g = build_grid(0, 11, 0, 7, 1, 1);
  SmootherSpec spec;
  spec.lambdas = {0.0, 2.0, 30.0, kInfiniteLambda};
  spec.mode = ScaleMode::detail;
  const ScaleSpace space(g, spec);
  std::mt19937_64 rng(6);
  const Eigen::VectorXd z = random_field(g.size(), rng, 1.0);
  const auto stack = space.decompose(z);
  REQUIRE(stack.details.size() == 4);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(g.size());
  for (const auto& d : stack.details) sum += d;
  CHECK((sum - z).lpNorm<Eigen::Infinity>() < 1e-10);
  CHECK((stack.details.back().array() - z.mean()).abs().maxCoeff() < 1e-10);
  CHECK(&stack.component(1, ScaleMode::smooth_sign) == &stack.smooths[1]);
  CHECK(&stack.component(1, ScaleMode::detail) == &stack.details[1]);

  // A constant shift only moves the coarsest component.
  const auto shifted = space.decompose(z + Eigen::VectorXd::Constant(g.size(), 7.0));
  for (std::size_t i = 0; i + 1 < 4; ++i) {
    CHECK((shifted.details[i] - stack.details[i]).lpNorm<Eigen::Infinity>() < 1e-10);
  }
}

TEST_CASE("spec validation") {
  SmootherSpec spec;
  CHECK_NOTHROW(spec.validate());
  spec.lambdas = {8.0, 8.0};
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec.lambdas = {-1.0};
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec.lambdas = {1.0};
  spec.credibility_level = 0.5;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  CHECK(parse_mode("detail") == ScaleMode::detail);
  CHECK(std::string(mode_name(ScaleMode::smooth_sign)) == "smooth_sign");
  CHECK_THROWS_AS(parse_mode("coarse"), ConfigError);
}

TEST_CASE("credibility rule") {
  const auto g = build_grid(0, 4, 0, 3, 1, 1);
  SmootherSpec spec;
  spec.lambdas = {0.0, kInfiniteLambda};
  const ScaleSpace space(g, spec);
  std::mt19937_64 rng(7);

  SUBCASE("positive everywhere in every sample") {
    std::vector<DetailStack> stacks;
    for (int s = 0; s < 50; ++s) {
      stacks.push_back(space.decompose(random_field(g.size(), rng).cwiseAbs().array() + 0.1));
    }
    for (std::size_t i = 0; i < 2; ++i) {
      const auto map = credibility(stacks, i, 0.95, ScaleMode::smooth_sign, g);
      CHECK(map.count(Credibility::positive) == g.size());
    }
  }
  SUBCASE("half the samples positive is undecided") {
    std::vector<DetailStack> stacks;
    for (int s = 0; s < 40; ++s) {
      stacks.push_back(space.decompose(Eigen::VectorXd::Constant(g.size(), s % 2 ? 1.0 : -1.0)));
    }
    const auto map = credibility(stacks, 0, 0.95, ScaleMode::smooth_sign, g);
    CHECK(map.count(Credibility::undecided) == g.size());
    CHECK(map.positive_fraction[0] == 0.5);
  }
  SUBCASE("boundary: p+ equal to the level is flagged") {
    std::vector<DetailStack> stacks;
    for (int s = 0; s < 20; ++s) {
      stacks.push_back(space.decompose(Eigen::VectorXd::Constant(g.size(), s == 0 ? 1.0 : -1.0)));
    }
    const auto map = credibility(stacks, 0, 0.95, ScaleMode::smooth_sign, g);
    CHECK(map.positive_fraction[3] == doctest::Approx(0.05));
    CHECK(map.count(Credibility::negative) == g.size());
  }
  SUBCASE("sample order does not matter") {
    std::vector<DetailStack> stacks;
    for (int s = 0; s < 30; ++s) stacks.push_back(space.decompose(random_field(g.size(), rng, 0.8)));
    const auto a = credibility(stacks, 0, 0.8, ScaleMode::smooth_sign, g);
    std::shuffle(stacks.begin(), stacks.end(), rng);
    const auto b = credibility(stacks, 0, 0.8, ScaleMode::smooth_sign, g);
    CHECK(a.states == b.states);
    CHECK(a.positive_fraction == b.positive_fraction);
  }
}

TEST_CASE("fine scale follows the node sign probabilities") {
  // With lambda = 0 the map is the per-node sign rule on the raw samples.
  const auto g = build_grid(0, 19, 0, 9, 1, 1);
  SmootherSpec spec;
  spec.lambdas = {0.0};
  const ScaleSpace space(g, spec);
  std::mt19937_64 rng(8);
  Eigen::VectorXd mean(g.size());
  for (Index k = 0; k < g.size(); ++k) mean[k] = (k % 3 == 0) ? 3.0 : (k % 3 == 1 ? -3.0 : 0.0);
  std::vector<DetailStack> stacks;
  for (int s = 0; s < 400; ++s) stacks.push_back(space.decompose(mean + random_field(g.size(), rng)));
  const auto map = credibility(stacks, 0, 0.95, ScaleMode::smooth_sign, g);
  for (Index k = 0; k < g.size(); ++k) {
    const auto want = (k % 3 == 0) ? Credibility::positive
                                   : (k % 3 == 1 ? Credibility::negative : Credibility::undecided);
    CHECK(map.states[static_cast<std::size_t>(k)] == want);
  }
}

namespace {
// Expected number of nodes flagged either way when every sign is a coin flip.
double expected_flags(double level, int nodes, int samples) {
  const int need = static_cast<int>(std::ceil(level * samples - 1e-9));
  double tail = 0.0;
  for (int j = need; j <= samples; ++j) {
    double log_c = 0.0;
    for (int i = 1; i <= j; ++i) log_c += std::log(static_cast<double>(samples - j + i) / i);
    tail += std::exp(log_c - samples * std::log(2.0));
  }
  return 2.0 * nodes * tail;
}
}  // namespace

TEST_CASE("simultaneous level") {
  // 30 of 50 positive happens often by chance across 100 nodes, 40 of 50 does not.
  CHECK(expected_flags(0.6, 100, 50) >= 1.0);
  CHECK(expected_flags(0.8, 100, 50) < 1.0);
  CHECK(simultaneous_level(0.6, 100, 50) == doctest::Approx(0.8));
  CHECK(simultaneous_level(0.95, 100, 500) == 0.95);
  const double big = simultaneous_level(0.6, 100000, 50);
  CHECK(big > 0.8);
  CHECK(expected_flags(big, 100000, 50) < 1.0);
  CHECK(expected_flags(1.0 - 2.0 * (1.0 - big), 100000, 50) >= 1.0);
}

TEST_CASE("analyze bookkeeping") {
  const auto g = build_grid(0, 5, 0, 4, 1, 1);
  SmootherSpec spec;
  spec.lambdas = {1.0, kInfiniteLambda};
  std::mt19937_64 rng(9);
  std::vector<std::vector<FieldImage>> images(2);
  for (int t = 0; t < 2; ++t) {
    for (int s = 0; s < 10; ++s) images[t].push_back(image(g, random_field(g.size(), rng, 5.0), t + 2));
  }
  const auto maps = analyze(images, spec);
  REQUIRE(maps.size() == 2);
  std::size_t total = 0;
  for (std::size_t t = 0; t < 2; ++t) {
    CHECK(maps[t].layer == static_cast<int>(t) + 2);
    REQUIRE(maps[t].maps.size() == 2);
    total += maps[t].maps.size();
    CHECK(maps[t].maps[1].lambda == kInfiniteLambda);
    CHECK(maps[t].maps[1].count(Credibility::positive) == g.size());
  }
  CHECK(total == 4);

  AnalyzeOptions threaded;
  threaded.threads = 3;
  const auto again = analyze(images, spec, threaded);
  for (std::size_t t = 0; t < 2; ++t) CHECK(again[t].maps[0].states == maps[t].maps[0].states);

  auto raw = images;
  raw[1][0].thresholded = false;
  CHECK_THROWS_AS(analyze(raw, spec), Error);
  AnalyzeOptions allow;
  allow.allow_unthresholded = true;
  CHECK_NOTHROW(analyze(raw, spec, allow));
}
