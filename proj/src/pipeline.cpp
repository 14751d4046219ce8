#include "terrafit/pipeline.hpp"

#include "terrafit/error.hpp"
#include "terrafit/render.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace terrafit {

namespace fs = std::filesystem;

namespace {

// Re-raises with the stage name in front, keeping the error category.
template <typename F>
auto in_stage(const std::string& where, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  } catch (const InputError& e) {
    throw InputError(where + ": " + e.what());
  } catch (const Error& e) {
    throw Error(where + ": " + e.what());
  }
}

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) {
    while (!item.empty() && (item.back() == '\r' || item.back() == ' ')) item.pop_back();
    out.push_back(item);
  }
  return out;
}

double to_double(const std::string& text, std::size_t line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || ptr != text.data() + text.size()) {
    throw InputError("malformed number '" + text + "'", line);
  }
  return v;
}

// Files in `dir` whose names start with `prefix` and end with `suffix`, sorted.
std::vector<fs::path> list_files(const fs::path& dir, const std::string& prefix,
                                 const std::string& suffix) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && name.size() >= prefix.size() + suffix.size() &&
        name.compare(0, prefix.size(), prefix) == 0 &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      out.push_back(entry.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string layer_file(const std::string& stem, int layer, const std::string& ext) {
  return stem + "_layer" + std::to_string(layer) + ext;
}

}  // namespace

int thread_budget() {
  int budget = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("TERRAFIT_THREADS")) {
    const std::string text(env);
    int cap = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), cap);
    if (ec != std::errc() || ptr != text.data() + text.size() || cap < 1) {
      throw ConfigError("TERRAFIT_THREADS must be a positive integer, got '" + text + "'");
    }
    budget = std::min(budget, cap);
  }
  return budget;
}

SimulationSpec simulation_spec(const RunConfig& config) {
  SimulationSpec spec = config.simulation;
  spec.dx = config.grid_dx;
  spec.dy = config.grid_dy;
  spec.c = config.c;
  spec.params.assign(config.params.begin(), config.params.end());
  spec.threshold = config.threshold;
  spec.seed = config.seed;
  return spec;
}

std::vector<fs::path> write_simulation(const SimulationTruth& truth, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<fs::path> files;
  for (const auto& ds : truth.datasets) {
    const auto path = dir / ("rmv_cell" + ds.cell + "_layer" +
                             std::to_string(layer_number(ds.layer)) + ".csv");
    write_rmv_csv(path, {&ds});
    files.push_back(path);
  }
  for (std::size_t t = 0; t < truth.fields.size(); ++t) {
    write_grid_csv(dir / layer_file("truth_field", static_cast<int>(t + 1), ".csv"), truth.grid,
                   truth.fields[t]);
  }
  return files;
}

DatasetMap load_inputs(const RunConfig& config) {
  if (config.inputs.empty()) throw ConfigError("no input files configured");
  DatasetMap merged;
  for (const auto& path : config.inputs) {
    DatasetMap part = load_rmv_csv(path);
    for (auto& [key, ds] : part) {
      auto& target = merged[key];
      if (target.records.empty()) {
        target = std::move(ds);
      } else {
        target.records.insert(target.records.end(), ds.records.begin(), ds.records.end());
      }
    }
  }
  if (config.cell_boundary) {
    merged = split_subsurface(merged, config.subsurface_source, *config.cell_boundary,
                              config.left_cell, config.right_cell);
  }
  return merged;
}

std::vector<std::string> select_cells(const DatasetMap& data, const std::string& selector) {
  std::set<std::string> available;
  for (const auto& [key, ds] : data) available.insert(key.first);
  if (selector == "all") return {available.begin(), available.end()};
  std::set<std::string> chosen;
  std::stringstream ss(selector);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(' '));
    item.erase(item.find_last_not_of(' ') + 1);
    if (item.empty()) continue;
    if (!available.count(item)) throw ConfigError("cell '" + item + "' not present in the input");
    chosen.insert(item);
  }
  if (chosen.empty()) throw ConfigError("no cell selected");
  return {chosen.begin(), chosen.end()};
}

std::vector<int> CellModel::layers() const {
  std::vector<int> out;
  for (const auto& p : problems) out.push_back(p.layer);
  return out;
}

CellModel build_cell_model(const DatasetMap& data, const std::string& cell,
                           const RunConfig& config) {
  return in_stage("cell " + cell + ": model", [&] {
    std::vector<const LayerDataset*> datasets;
    for (const auto& [key, ds] : data) {
      if (key.first == cell && ds.size() > 0) datasets.push_back(&ds);
    }
    if (datasets.empty()) throw InputError("no records for cell " + cell);

    CellModel model;
    model.cell = cell;
    if (config.grid_extent) {
      const auto& e = *config.grid_extent;
      model.grid = build_grid(e[0], e[1], e[2], e[3], config.grid_dx, config.grid_dy);
    } else {
      // Record bounding box snapped to the nearest spacing multiple, so
      // every record is within half a cell of the grid.
      double x_lo = datasets.front()->records.front().x, x_hi = x_lo;
      double y_lo = datasets.front()->records.front().y, y_hi = y_lo;
      for (const auto* ds : datasets) {
        for (const auto& r : ds->records) {
          x_lo = std::min(x_lo, r.x);
          x_hi = std::max(x_hi, r.x);
          y_lo = std::min(y_lo, r.y);
          y_hi = std::max(y_hi, r.y);
        }
      }
      const auto snap = [](double v, double step) { return step * std::round(v / step); };
      double x0 = snap(x_lo, config.grid_dx), x1 = snap(x_hi, config.grid_dx);
      double y0 = snap(y_lo, config.grid_dy), y1 = snap(y_hi, config.grid_dy);
      if (!(x1 > x0)) x1 = x0 + config.grid_dx;
      if (!(y1 > y0)) y1 = y0 + config.grid_dy;
      model.grid = build_grid(x0, x1, y0, y1, config.grid_dx, config.grid_dy);
    }
    model.scaling = config.scaling == ScalingMode::grid ? grid_scaling(model.grid)
                                                        : auto_scaling(datasets);
    model.grid_design = build_grid_design(model.grid, model.scaling, config.direction_value);

    std::vector<std::pair<CovarianceParams, std::shared_ptr<const SparseSymMatrix>>> sigmas;
    for (const auto* ds : datasets) {
      const int t = layer_number(ds->layer);
      const CovarianceParams& params = config.params[static_cast<std::size_t>(t - 1)];
      std::shared_ptr<const SparseSymMatrix> sigma;
      for (const auto& [p, s] : sigmas) {
        if (p.range == params.range && p.sill == params.sill) sigma = s;
      }
      if (!sigma) {
        sigma = std::make_shared<const SparseSymMatrix>(
            process_covariance(model.grid, params, model.scaling));
        sigmas.emplace_back(params, sigma);
      }
      const DesignMatrix design = build_design(*ds, model.scaling);
      if (design.underdetermined()) {
        throw InputError("layer " + std::to_string(t) + " has fewer records than covariates");
      }
      auto system = std::make_shared<const LayerSystem>(
          design.values, build_incidence(*ds, model.grid), sigma, params.nugget);
      model.problems.push_back({t, ds->values(), system, params});
      model.systems.push_back(system);
    }
    return model;
  });
}

CellFit fit_cell(const CellModel& model, const RunConfig& config) {
  return in_stage("cell " + model.cell + ": fit", [&] {
    SequentialOptions options;
    options.backfit = {config.tolerance, config.max_iter};
    options.outer_sweep = config.outer_sweep;
    CellFit out;
    if (config.c_profile) {
      out.profile = profile_carryover(model.problems, options);
      out.fit = out.profile->best_fit;
    } else {
      out.fit = sequential_backfit(model.problems, config.c, options);
    }
    return out;
  });
}

std::vector<FieldImage> estimate_images(const CellModel& model, const SequentialFit& fit) {
  std::vector<FieldImage> out;
  for (std::size_t q = 0; q < fit.layers.size(); ++q) {
    out.push_back(assemble_field(model.grid, model.grid_design, fit, q));
  }
  return out;
}

std::vector<std::vector<FieldImage>> sample_images(const CellModel& model,
                                                   const SequentialFit& fit,
                                                   const RunConfig& config, int threads) {
  return in_stage("cell " + model.cell + ": sample", [&] {
    SamplingOptions options;
    options.dense_limit = config.dense_limit;
    const PosteriorSampler sampler(fit, model.systems, options);
    const auto count = static_cast<std::size_t>(config.samples);
    std::vector<std::vector<FieldImage>> images(fit.layers.size(),
                                                std::vector<FieldImage>(count));
    auto work = [&](std::size_t i) {
      const PosteriorSample s = sampler.draw(config.seed, i);
      for (std::size_t q = 0; q < fit.layers.size(); ++q) {
        images[q][i] = apply_threshold(assemble_field(model.grid, model.grid_design, fit, s, q),
                                       config.threshold);
      }
    };
    const auto workers = static_cast<unsigned>(std::clamp<std::size_t>(
        static_cast<std::size_t>(std::max(threads, 1)), 1, count));
    if (workers == 1) {
      for (std::size_t i = 0; i < count; ++i) work(i);
      return images;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_lock;
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        try {
          for (std::size_t i = next++; i < count; i = next++) work(i);
        } catch (...) {
          const std::lock_guard<std::mutex> guard(failure_lock);
          if (!failure) failure = std::current_exception();
          next = count;
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
    return images;
  });
}

std::vector<LayerMaps> scalespace_maps(std::span<const std::vector<FieldImage>> images,
                                       const RunConfig& config, int threads) {
  return in_stage("scalespace", [&] {
    AnalyzeOptions options;
    options.threads = std::max(threads, 1);
    return analyze(images, config.smoother, options);
  });
}

fs::path cell_directory(const RunConfig& config, const std::string& cell) {
  return config.output / ("cell_" + cell);
}

void write_fit(const fs::path& cell_dir, const CellModel& model, const CellFit& fit,
               const RunConfig& config) {
  const fs::path dir = cell_dir / "fit";
  fs::create_directories(dir);
  const auto& f = fit.fit;
  {
    std::ofstream out(dir / "beta.csv", std::ios::binary);
    if (!out) throw Error("cannot write " + (dir / "beta.csv").string());
    out << "layer,c,iterations,converged,final_delta";
    for (Index j = 0; j < kDesignColumns; ++j) out << ",beta_" << j;
    out << '\n';
    for (std::size_t q = 0; q < f.layers.size(); ++q) {
      const auto& e = f.estimates[q];
      out << f.layers[q] << ',' << g17(f.c) << ',' << e.iterations << ',' << (e.converged ? 1 : 0)
          << ',' << g17(e.final_delta);
      for (Index j = 0; j < e.beta.size(); ++j) out << ',' << g17(e.beta[j]);
      out << '\n';
    }
  }
  const auto estimates = estimate_images(model, f);
  for (std::size_t q = 0; q < f.layers.size(); ++q) {
    const int t = f.layers[q];
    write_grid_csv(dir / layer_file("alpha", t, ".csv"), model.grid, f.estimates[q].alpha, 17);
    write_grid_csv(dir / layer_file("estimate", t, ".csv"), model.grid, estimates[q].values);
    write_grid_csv(dir / layer_file("thresholded", t, ".csv"), model.grid,
                   apply_threshold(estimates[q], config.threshold).values);
  }

  std::ofstream out(dir / "fit_summary.txt", std::ios::binary);
  if (!out) throw Error("cannot write " + (dir / "fit_summary.txt").string());
  out << "cell = " << model.cell << '\n';
  out << "grid = " << model.grid.nx << " x " << model.grid.ny << " nodes, spacing "
      << model.grid.dx << " x " << model.grid.dy << '\n';
  out << "c = " << g17(f.c) << (fit.profile ? " (profiled)" : "") << '\n';
  for (std::size_t q = 0; q < f.layers.size(); ++q) {
    const auto& e = f.estimates[q];
    out << "layer " << f.layers[q] << ": " << model.problems[q].y.size() << " records, "
        << e.iterations << " iterations, " << (e.converged ? "converged" : "NOT converged")
        << ", last change " << e.final_delta << '\n';
  }
  out << "rss = " << g17(residual_sum_of_squares(model.problems, f)) << '\n';
  if (fit.profile) {
    out << "c profile:\n";
    for (std::size_t i = 0; i < fit.profile->candidates.size(); ++i) {
      out << "  c = " << fit.profile->candidates[i] << "  rss = " << g17(fit.profile->rss[i])
          << '\n';
    }
  }
}

SequentialFit read_fit(const fs::path& cell_dir, const CellModel& model) {
  const fs::path dir = cell_dir / "fit";
  const fs::path beta_path = dir / "beta.csv";
  std::ifstream in(beta_path, std::ios::binary);
  if (!in) throw InputError("cannot open " + beta_path.string() + " (run the fit stage first)");
  SequentialFit fit;
  std::string line;
  std::getline(in, line);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cols = split_csv_line(line);
    if (cols.size() != 5 + static_cast<std::size_t>(kDesignColumns)) {
      throw InputError(beta_path.string() + ": wrong column count", line_no);
    }
    const int t = static_cast<int>(to_double(cols[0], line_no));
    fit.layers.push_back(t);
    fit.c = to_double(cols[1], line_no);
    LayerEstimate e;
    e.iterations = static_cast<int>(to_double(cols[2], line_no));
    e.converged = cols[3] == "1";
    e.final_delta = to_double(cols[4], line_no);
    e.beta.resize(kDesignColumns);
    for (Index j = 0; j < kDesignColumns; ++j) {
      e.beta[j] = to_double(cols[5 + static_cast<std::size_t>(j)], line_no);
    }
    const GridValues alpha = read_grid_csv(dir / layer_file("alpha", t, ".csv"));
    if (!(alpha.grid == model.grid)) {
      throw InputError("layer " + std::to_string(t) + " alpha grid does not match the model grid");
    }
    e.alpha = alpha.values;
    fit.estimates.push_back(std::move(e));
  }
  if (fit.layers != model.layers()) {
    throw InputError(beta_path.string() + ": fitted layers do not match the input data");
  }
  for (std::size_t q = 0; q < fit.layers.size(); ++q) {
    const auto& problem = model.problems[q];
    fit.params.push_back(problem.params);
    Eigen::VectorXd field = Eigen::VectorXd::Zero(model.grid.size());
    for (std::size_t k = 0; k < q; ++k) {
      field += std::pow(fit.c, fit.layers[q] - fit.layers[k]) * fit.estimates[k].alpha;
    }
    fit.offsets.push_back(problem.system->incidence() * field);
  }
  return fit;
}

void write_samples(const fs::path& cell_dir, std::span<const std::vector<FieldImage>> images) {
  const fs::path dir = cell_dir / "samples";
  fs::create_directories(dir);
  for (const auto& layer : images) {
    if (layer.empty()) continue;
    write_image_stack(dir / layer_file("samples", layer.front().layer, ".bin"), layer);
  }
}

std::vector<std::vector<FieldImage>> read_samples(const fs::path& cell_dir) {
  std::vector<std::vector<FieldImage>> out;
  for (const auto& path : list_files(cell_dir / "samples", "samples_layer", ".bin")) {
    out.push_back(read_image_stack(path));
  }
  if (out.empty()) {
    throw InputError("no sample stacks under " + (cell_dir / "samples").string() +
                     " (run the sample stage first)");
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.front().layer < b.front().layer;
  });
  return out;
}

void write_maps(const fs::path& cell_dir, std::span<const LayerMaps> maps) {
  const fs::path dir = cell_dir / "maps";
  fs::create_directories(dir);
  std::ofstream index(dir / "maps.txt", std::ios::binary);
  if (!index) throw Error("cannot write " + (dir / "maps.txt").string());
  index << "file,layer,lambda,mode,level,positive,negative,undecided\n";
  for (const auto& layer : maps) {
    for (std::size_t l = 0; l < layer.maps.size(); ++l) {
      const auto& map = layer.maps[l];
      const std::string name = "cred_layer" + std::to_string(layer.layer) + "_lambda" +
                               std::to_string(l + 1) + ".csv";
      write_credibility_csv(dir / name, map);
      index << name << ',' << layer.layer << ','
            << (std::isinf(map.lambda) ? std::string("inf") : g17(map.lambda)) << ','
            << mode_name(map.mode) << ',' << g17(map.level) << ','
            << map.count(Credibility::positive) << ',' << map.count(Credibility::negative) << ','
            << map.count(Credibility::undecided) << '\n';
    }
  }
}

std::vector<fs::path> render_cell(const fs::path& cell_dir, int scale) {
  const fs::path dir = cell_dir / "images";
  std::vector<fs::path> sources;
  for (const auto& stem : {"estimate_layer", "thresholded_layer"}) {
    for (auto& p : list_files(cell_dir / "fit", stem, ".csv")) sources.push_back(p);
  }
  for (auto& p : list_files(cell_dir / "maps", "cred_layer", ".csv")) sources.push_back(p);
  if (sources.empty()) throw InputError("nothing to render under " + cell_dir.string());
  fs::create_directories(dir);
  std::vector<fs::path> out;
  for (const auto& src : sources) {
    auto ppm = dir / src.filename();
    ppm.replace_extension(".ppm");
    render_grid_file(src, ppm, scale);
    out.push_back(ppm);
  }
  return out;
}

void write_manifest(const fs::path& path, const RunConfig& config,
                    const std::vector<std::string>& cells) {
  const std::string text = to_config_text(config);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "# terrafit run manifest; load with --config to rerun\n";
  out << "# version " << kVersion << '\n';
  out << "# config_hash " << fnv1a_hex(text) << '\n';
  out << "# cells";
  for (const auto& c : cells) out << ' ' << c;
  out << '\n' << text;
}

std::vector<CellResult> run_pipeline(RunConfig config) {
  config.validate();
  const int threads = thread_budget();
  if (config.inputs.empty()) {
    const SimulationTruth truth =
        in_stage("simulate", [&] { return simulate(simulation_spec(config)); });
    config.inputs = write_simulation(truth, config.output / "data");
    // Estimate on the grid the truth lives on, so the two line up node for node.
    if (!config.grid_extent) {
      const auto& s = config.simulation;
      config.grid_extent = std::array<double, 4>{s.x_min, s.x_max, s.y_min, s.y_max};
      config.scaling = ScalingMode::grid;
    }
  }
  const DatasetMap data = load_inputs(config);
  const auto cells = select_cells(data, config.cell);
  fs::create_directories(config.output);
  write_manifest(config.output / "manifest.txt", config, cells);

  std::vector<CellResult> results(cells.size());
  auto run_one = [&](std::size_t index, int inner) {
    const std::string& cell = cells[index];
    const fs::path dir = cell_directory(config, cell);
    const CellModel model = build_cell_model(data, cell, config);
    CellResult& r = results[index];
    r.cell = cell;
    r.fit = fit_cell(model, config);
    write_fit(dir, model, r.fit, config);
    const auto images = sample_images(model, r.fit.fit, config, inner);
    write_samples(dir, images);
    r.maps = in_stage("cell " + cell, [&] { return scalespace_maps(images, config, inner); });
    write_maps(dir, r.maps);
    render_cell(dir, config.render_scale);
  };

  if (cells.size() == 1 || threads == 1) {
    for (std::size_t i = 0; i < cells.size(); ++i) run_one(i, threads);
    return results;
  }
  const unsigned workers = std::min<unsigned>(static_cast<unsigned>(threads),
                                              static_cast<unsigned>(cells.size()));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_lock;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      try {
        for (std::size_t i = next++; i < cells.size(); i = next++) run_one(i, 1);
      } catch (...) {
        const std::lock_guard<std::mutex> guard(failure_lock);
        if (!failure) failure = std::current_exception();
        next = cells.size();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return results;
}

}  // namespace terrafit
