#include "terrafit/posterior.hpp"

#include "terrafit/error.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>

namespace terrafit {

Eigen::MatrixXd beta_posterior_cov(const Eigen::MatrixXd& design, const SpdFactor& sigma_y) {
  if (design.rows() != sigma_y.size()) throw DimensionError("beta_posterior_cov: dimension mismatch");
  const Eigen::MatrixXd normal = design.transpose() * sigma_y.solve(design);
  Eigen::LLT<Eigen::MatrixXd> llt(normal);
  if (llt.info() != Eigen::Success || !(llt.rcond() > 1e-13)) {
    throw Error("beta_posterior_cov: singular normal matrix");
  }
  Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(normal.rows(), normal.cols()));
  return 0.5 * (cov + cov.transpose());
}

Eigen::MatrixXd beta_posterior_cov(const LayerSystem& system) {
  const auto& llt = system.gls_normal();
  const Index p = system.covariates();
  Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(p, p));
  return 0.5 * (cov + cov.transpose());
}

AlphaPosteriorOperator::AlphaPosteriorOperator(std::shared_ptr<const LayerSystem> system)
    : system_(std::move(system)) {
  if (!system_) throw Error("AlphaPosteriorOperator: missing system");
}

Eigen::VectorXd AlphaPosteriorOperator::residual_precision(const Eigen::VectorXd& r) const {
  const auto& wx = system_->whitened_design();
  const Eigen::VectorXd w = system_->sigma_y_factor().solve(r);
  return w - wx * system_->gls_normal().solve(wx.transpose() * r);
}

Eigen::VectorXd AlphaPosteriorOperator::residual_projector(const Eigen::VectorXd& r) const {
  const auto& wx = system_->whitened_design();
  return r - system_->design() * system_->gls_normal().solve(wx.transpose() * r);
}

Eigen::VectorXd AlphaPosteriorOperator::apply(const Eigen::VectorXd& v) const {
  if (v.size() != size()) throw DimensionError("V_alpha apply: dimension mismatch");
  const auto& sht = system_->sigma_ht();
  return sht * residual_precision(sht.transpose() * v);
}

Eigen::VectorXd AlphaPosteriorOperator::diagonal(std::span<const Index> nodes) const {
  const Eigen::SparseMatrix<double, Eigen::RowMajor> rows = system_->sigma_ht();
  Eigen::VectorXd out(static_cast<Index>(nodes.size()));
  for (std::size_t q = 0; q < nodes.size(); ++q) {
    const Index k = nodes[q];
    if (k < 0 || k >= size()) throw DimensionError("V_alpha diagonal: node out of range");
    const Eigen::VectorXd g = rows.row(k).transpose();
    out[static_cast<Index>(q)] = g.dot(residual_precision(g));
  }
  return out;
}

Eigen::MatrixXd AlphaPosteriorOperator::dense() const {
  const Eigen::MatrixXd g = Eigen::MatrixXd(system_->sigma_ht().transpose());  // n x m
  const auto& wx = system_->whitened_design();
  const Eigen::MatrixXd mg =
      system_->sigma_y_factor().solve(g) - wx * system_->gls_normal().solve(wx.transpose() * g);
  Eigen::MatrixXd v = g.transpose() * mg;
  return 0.5 * (v + v.transpose());
}

Eigen::VectorXd AlphaPosteriorOperator::sample_from_observation_noise(
    const Eigen::VectorXd& z) const {
  const auto& factor = system_->sigma_y_factor();
  if (z.size() != factor.size()) throw DimensionError("V_alpha sample: dimension mismatch");
  // u = G z has covariance Sigma_y and Sigma_y^{-1} u = G^{-T} z.
  const Eigen::VectorXd a = factor.factor_transpose_solve(z);
  const Eigen::VectorXd mu =
      a - system_->whitened_design() *
              system_->gls_normal().solve(system_->design().transpose() * a);
  return system_->sigma_ht() * mu;
}

Eigen::MatrixXd alpha_posterior_cov(const LayerSystem& system) {
  // Non-owning alias: the operator does not outlive this call.
  std::shared_ptr<const LayerSystem> alias(std::shared_ptr<const LayerSystem>{}, &system);
  return AlphaPosteriorOperator(alias).dense();
}

namespace {

Eigen::MatrixXd psd_factor(const Eigen::MatrixXd& cov) {
  const double scale = std::max(cov.diagonal().cwiseAbs().maxCoeff(), 1e-300);
  Eigen::MatrixXd jittered = cov;
  jittered.diagonal().array() += kProcessJitter * scale;
  Eigen::LLT<Eigen::MatrixXd> llt(jittered);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  // Numerically indefinite: fall back to the clamped eigen square root.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal();
}

Eigen::VectorXd standard_normals(std::mt19937_64& rng, Index n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd z(n);
  for (Index i = 0; i < n; ++i) z[i] = normal(rng);
  return z;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

PosteriorSampler::PosteriorSampler(const SequentialFit& fit,
                                   std::vector<std::shared_ptr<const LayerSystem>> systems,
                                   SamplingOptions options)
    : fit_(fit), options_(options) {
  if (systems.size() != fit.estimates.size()) {
    throw DimensionError("PosteriorSampler: one system per fitted layer required");
  }
  for (std::size_t q = 0; q < systems.size(); ++q) {
    LayerState state;
    state.system = std::move(systems[q]);
    if (!state.system) throw Error("PosteriorSampler: missing system");
    if (options_.zero_covariance) {
      layers_.push_back(std::move(state));
      continue;
    }
    try {
      state.beta_factor = psd_factor(beta_posterior_cov(*state.system));
      state.alpha_operator = std::make_unique<AlphaPosteriorOperator>(state.system);
      if (state.system->nodes() <= options_.dense_limit) {
        state.alpha_factor = psd_factor(state.alpha_operator->dense());
      }
    } catch (const Error& e) {
      throw Error("layer " + std::to_string(fit.layers[q]) + ": " + e.what());
    }
    layers_.push_back(std::move(state));
  }
}

PosteriorSample PosteriorSampler::draw(std::uint64_t seed, std::uint64_t index) const {
  PosteriorSample s;
  s.index = index;
  s.seed = derive_seed(seed, index);
  for (std::size_t q = 0; q < layers_.size(); ++q) {
    const auto& est = fit_.estimates[q];
    const auto& state = layers_[q];
    // Keyed by layer number, so a layer's draws do not depend on which
    // other layers are fitted alongside it.
    std::mt19937_64 rng(derive_seed(s.seed, static_cast<std::uint64_t>(fit_.layers[q])));
    if (options_.zero_covariance) {
      s.beta.push_back(est.beta);
      s.alpha.push_back(est.alpha);
      continue;
    }
    s.beta.push_back(est.beta + state.beta_factor * standard_normals(rng, est.beta.size()));
    if (state.alpha_factor) {
      s.alpha.push_back(est.alpha + *state.alpha_factor * standard_normals(rng, est.alpha.size()));
    } else {
      const Eigen::VectorXd z = standard_normals(rng, state.system->observations());
      s.alpha.push_back(est.alpha + state.alpha_operator->sample_from_observation_noise(z));
    }
  }
  return s;
}

std::vector<PosteriorSample> draw_samples(const SequentialFit& fit,
                                          std::vector<std::shared_ptr<const LayerSystem>> systems,
                                          int count, std::uint64_t seed,
                                          const SamplingOptions& options, int threads) {
  if (count < 1) throw Error("draw_samples: count must be at least 1");
  const PosteriorSampler sampler(fit, std::move(systems), options);
  std::vector<PosteriorSample> out(static_cast<std::size_t>(count));
  unsigned workers = threads > 0 ? static_cast<unsigned>(threads)
                                 : std::max(1u, std::thread::hardware_concurrency());
  workers = std::min<unsigned>(workers, static_cast<unsigned>(count));
  if (workers <= 1) {
    for (int i = 0; i < count; ++i) out[static_cast<std::size_t>(i)] = sampler.draw(seed, i);
    return out;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) {
        out[static_cast<std::size_t>(i)] = sampler.draw(seed, static_cast<std::uint64_t>(i));
      }
    });
  }
  for (auto& t : pool) t.join();
  return out;
}

FieldImage assemble_field(const ProcessGrid& grid, const DesignMatrix& grid_design,
                          std::span<const int> layers, std::span<const Eigen::VectorXd> betas,
                          std::span<const Eigen::VectorXd> alphas, std::size_t position,
                          double c) {
  if (betas.size() != layers.size() || alphas.size() != layers.size() ||
      position >= layers.size()) {
    throw DimensionError("assemble_field: inconsistent layer inputs");
  }
  if (grid_design.rows() != grid.size()) {
    throw DimensionError("assemble_field: grid design does not match the grid");
  }
  const int t = layers[position];
  for (int k = layers.front(); k < t; ++k) {
    if (std::find(layers.begin(), layers.end(), k) == layers.end()) {
      throw Error("assemble_field: missing earlier layer " + std::to_string(k));
    }
  }
  FieldImage image;
  image.grid = grid;
  image.layer = t;
  image.values = grid_design.values * betas[position];
  for (std::size_t q = 0; q < layers.size(); ++q) {
    if (layers[q] > t) continue;
    if (alphas[q].size() != grid.size()) throw DimensionError("assemble_field: alpha size");
    image.values += std::pow(c, t - layers[q]) * alphas[q];
  }
  return image;
}

FieldImage assemble_field(const ProcessGrid& grid, const DesignMatrix& grid_design,
                          const SequentialFit& fit, std::size_t position) {
  std::vector<Eigen::VectorXd> betas;
  std::vector<Eigen::VectorXd> alphas;
  for (const auto& e : fit.estimates) {
    betas.push_back(e.beta);
    alphas.push_back(e.alpha);
  }
  return assemble_field(grid, grid_design, fit.layers, betas, alphas, position, fit.c);
}

FieldImage assemble_field(const ProcessGrid& grid, const DesignMatrix& grid_design,
                          const SequentialFit& fit, const PosteriorSample& sample,
                          std::size_t position) {
  return assemble_field(grid, grid_design, fit.layers, sample.beta, sample.alpha, position, fit.c);
}

FieldImage apply_threshold(FieldImage image, double threshold) {
  if (image.thresholded) throw Error("apply_threshold: image is already thresholded");
  image.values.array() -= threshold;
  image.thresholded = true;
  image.threshold = threshold;
  return image;
}

namespace {

std::string g9(double v, int digits = 9) {
  std::array<char, 40> buf{};
  std::snprintf(buf.data(), buf.size(), "%.*g", digits, v);
  return buf.data();
}

std::vector<double> parse_row(const std::string& line, std::size_t line_no) {
  std::vector<double> out;
  std::size_t start = 0;
  std::string_view view(line);
  while (!view.empty() && (view.back() == '\r' || view.back() == ' ')) view.remove_suffix(1);
  while (start <= view.size()) {
    auto pos = view.find(',', start);
    if (pos == std::string_view::npos) pos = view.size();
    auto field = view.substr(start, pos - start);
    while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc() || ptr != field.data() + field.size() || field.empty()) {
      throw InputError("malformed grid value '" + std::string(field) + "'", line_no);
    }
    out.push_back(v);
    start = pos + 1;
  }
  return out;
}

template <typename T>
void put(std::ostream& out, T value) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw InputError("truncated image stack");
  }
  return value;
}

constexpr std::array<char, 8> kStackMagic = {'T', 'F', 'S', 'T', 'A', 'C', 'K', '1'};

}  // namespace

void write_grid_csv(std::ostream& out, const ProcessGrid& grid, const Eigen::VectorXd& values,
                    int digits) {
  if (values.size() != grid.size()) throw DimensionError("write_grid_csv: size mismatch");
  if (digits < 1 || digits > 17) throw Error("write_grid_csv: digits must lie in [1, 17]");
  out << grid.nx << ',' << grid.ny << ',' << g9(grid.x0, digits) << ',' << g9(grid.y0, digits)
      << ',' << g9(grid.dx, digits) << ',' << g9(grid.dy, digits) << '\n';
  for (Index j = 0; j < grid.ny; ++j) {
    for (Index i = 0; i < grid.nx; ++i) {
      if (i) out << ',';
      out << g9(values[grid.node(i, j)], digits);
    }
    out << '\n';
  }
}

void write_grid_csv(const std::filesystem::path& path, const ProcessGrid& grid,
                    const Eigen::VectorXd& values, int digits) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_grid_csv(out, grid, values, digits);
}

GridValues read_grid_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw InputError("empty grid file: missing header");
  const auto header = parse_row(line, 1);
  if (header.size() != 6) throw InputError("grid header needs nx,ny,x0,y0,dx,dy", 1);
  GridValues g;
  if (header[0] < 1 || header[1] < 1 || header[0] != std::floor(header[0]) ||
      header[1] != std::floor(header[1]) || !(header[4] > 0) || !(header[5] > 0)) {
    throw InputError("invalid grid header", 1);
  }
  g.grid.nx = static_cast<Index>(header[0]);
  g.grid.ny = static_cast<Index>(header[1]);
  g.grid.x0 = header[2];
  g.grid.y0 = header[3];
  g.grid.dx = header[4];
  g.grid.dy = header[5];
  g.values.resize(g.grid.size());
  for (Index j = 0; j < g.grid.ny; ++j) {
    if (!std::getline(in, line)) throw InputError("grid file ends early", static_cast<std::size_t>(j + 2));
    const auto row = parse_row(line, static_cast<std::size_t>(j + 2));
    if (static_cast<Index>(row.size()) != g.grid.nx) {
      throw InputError("expected " + std::to_string(g.grid.nx) + " values", static_cast<std::size_t>(j + 2));
    }
    for (Index i = 0; i < g.grid.nx; ++i) g.values[g.grid.node(i, j)] = row[static_cast<std::size_t>(i)];
  }
  return g;
}

GridValues read_grid_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return read_grid_csv(in);
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what(), e.line());
  }
}

void write_image_stack(const std::filesystem::path& path, std::span<const FieldImage> images) {
  if (images.empty()) throw Error("write_image_stack: no images");
  const auto& first = images.front();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(kStackMagic.data(), kStackMagic.size());
  put<std::int32_t>(out, first.layer);
  put<std::int32_t>(out, first.thresholded ? 1 : 0);
  put<double>(out, first.threshold);
  put<std::int64_t>(out, first.grid.nx);
  put<std::int64_t>(out, first.grid.ny);
  put<double>(out, first.grid.x0);
  put<double>(out, first.grid.y0);
  put<double>(out, first.grid.dx);
  put<double>(out, first.grid.dy);
  put<std::int64_t>(out, static_cast<std::int64_t>(images.size()));
  for (const auto& img : images) {
    if (!(img.grid == first.grid) || img.layer != first.layer ||
        img.thresholded != first.thresholded || img.threshold != first.threshold) {
      throw Error("write_image_stack: images disagree on grid, layer or threshold");
    }
    out.write(reinterpret_cast<const char*>(img.values.data()),
              static_cast<std::streamsize>(img.values.size() * sizeof(double)));
  }
}

std::vector<FieldImage> read_image_stack(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kStackMagic) throw InputError(path.string() + ": not an image stack");
  FieldImage proto;
  proto.layer = get<std::int32_t>(in);
  proto.thresholded = get<std::int32_t>(in) != 0;
  proto.threshold = get<double>(in);
  proto.grid.nx = get<std::int64_t>(in);
  proto.grid.ny = get<std::int64_t>(in);
  proto.grid.x0 = get<double>(in);
  proto.grid.y0 = get<double>(in);
  proto.grid.dx = get<double>(in);
  proto.grid.dy = get<double>(in);
  const auto count = get<std::int64_t>(in);
  if (proto.grid.nx < 1 || proto.grid.ny < 1 || count < 0) {
    throw InputError(path.string() + ": corrupt image stack header");
  }
  std::vector<FieldImage> images(static_cast<std::size_t>(count), proto);
  for (auto& img : images) {
    img.values.resize(proto.grid.size());
    if (!in.read(reinterpret_cast<char*>(img.values.data()),
                 static_cast<std::streamsize>(img.values.size() * sizeof(double)))) {
      throw InputError(path.string() + ": truncated image stack");
    }
  }
  return images;
}

}  // namespace terrafit
