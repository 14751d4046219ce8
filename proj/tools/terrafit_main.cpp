// terrafit command line: simulate | fit | sample | scalespace | render | pipeline.
// Exit codes: 0 ok, 1 runtime error, 2 configuration error.

#include "terrafit/config.hpp"
#include "terrafit/error.hpp"
#include "terrafit/pipeline.hpp"
#include "terrafit/render.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using namespace terrafit;

namespace {

struct Overrides {
  std::string config;
  std::string cell;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string mode;
};

RunConfig resolve(const Overrides& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (!o.cell.empty()) cfg.cell = o.cell;
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.output = o.out;
  if (!o.mode.empty()) cfg.smoother.mode = parse_mode(o.mode);
  cfg.validate();
  return cfg;
}

// Cells that already have a stage directory under the output root.
std::vector<std::string> existing_cells(const RunConfig& cfg) {
  std::set<std::string> found;
  if (fs::is_directory(cfg.output)) {
    for (const auto& e : fs::directory_iterator(cfg.output)) {
      const std::string name = e.path().filename().string();
      if (e.is_directory() && name.rfind("cell_", 0) == 0) found.insert(name.substr(5));
    }
  }
  if (found.empty()) throw InputError("no cell directories under " + cfg.output.string());
  if (cfg.cell == "all") return {found.begin(), found.end()};
  std::vector<std::string> out;
  std::stringstream ss(cfg.cell);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!found.count(item)) throw ConfigError("cell '" + item + "' has no stage directory");
    out.push_back(item);
  }
  return out;
}

void cmd_simulate(const RunConfig& cfg) {
  const auto truth = simulate(simulation_spec(cfg));
  const auto files = write_simulation(truth, cfg.output);
  for (const auto& f : files) std::cout << f.string() << '\n';
}

void cmd_fit(const RunConfig& cfg) {
  const auto data = load_inputs(cfg);
  for (const auto& cell : select_cells(data, cfg.cell)) {
    const auto model = build_cell_model(data, cell, cfg);
    const auto fit = fit_cell(model, cfg);
    write_fit(cell_directory(cfg, cell), model, fit, cfg);
    std::cout << "cell " << cell << ": fitted " << fit.fit.layers.size() << " layers, c = "
              << fit.fit.c << '\n';
  }
}

void cmd_sample(const RunConfig& cfg) {
  const auto data = load_inputs(cfg);
  const int threads = thread_budget();
  for (const auto& cell : select_cells(data, cfg.cell)) {
    const auto dir = cell_directory(cfg, cell);
    const auto model = build_cell_model(data, cell, cfg);
    const auto fit = read_fit(dir, model);
    write_samples(dir, sample_images(model, fit, cfg, threads));
    std::cout << "cell " << cell << ": " << cfg.samples << " samples\n";
  }
}

void cmd_scalespace(const RunConfig& cfg, bool allow_unthresholded) {
  const int threads = thread_budget();
  for (const auto& cell : existing_cells(cfg)) {
    const auto dir = cell_directory(cfg, cell);
    const auto images = read_samples(dir);
    AnalyzeOptions options;
    options.threads = threads;
    options.allow_unthresholded = allow_unthresholded;
    write_maps(dir, analyze(images, cfg.smoother, options));
    std::cout << "cell " << cell << ": maps written\n";
  }
}

void cmd_render(const RunConfig& cfg, const std::vector<std::string>& files) {
  if (!files.empty()) {
    for (const auto& f : files) {
      fs::path ppm = f;
      ppm.replace_extension(".ppm");
      render_grid_file(f, ppm, cfg.render_scale);
      std::cout << ppm.string() << '\n';
    }
    return;
  }
  for (const auto& cell : existing_cells(cfg)) {
    for (const auto& p : render_cell(cell_directory(cfg, cell), cfg.render_scale)) {
      std::cout << p.string() << '\n';
    }
  }
}

void cmd_pipeline(const RunConfig& cfg) {
  for (const auto& r : run_pipeline(cfg)) {
    std::cout << "cell " << r.cell << ": c = " << r.fit.fit.c << ", " << r.maps.size()
              << " layers x " << cfg.smoother.lambdas.size() << " maps\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Layered compaction field estimation and scale-space credibility maps"};
  app.require_subcommand(1);
  app.fallthrough();

  Overrides o;
  app.add_option("--config", o.config, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--cell", o.cell, "cell id, comma list or 'all'");
  app.add_option("--seed", o.seed, "random seed");
  app.add_option("--out", o.out, "output directory");
  app.add_option("--mode", o.mode, "smooth_sign or detail");

  auto* simulate_cmd = app.add_subcommand("simulate", "write a synthetic dataset and truth grids");
  auto* fit_cmd = app.add_subcommand("fit", "sequential backfitting of every layer");
  auto* sample_cmd = app.add_subcommand("sample", "posterior samples as thresholded images");
  auto* scalespace_cmd = app.add_subcommand("scalespace", "credibility maps from the samples");
  bool allow_unthresholded = false;
  scalespace_cmd->add_flag("--allow-unthresholded", allow_unthresholded,
                           "accept sample images that were not thresholded");
  auto* render_cmd = app.add_subcommand("render", "PPM rasters of grid CSV files");
  std::vector<std::string> render_files;
  render_cmd->add_option("files", render_files, "grid CSV files (default: all stage outputs)")
      ->check(CLI::ExistingFile);
  auto* pipeline_cmd = app.add_subcommand("pipeline", "all stages for the selected cells");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const RunConfig cfg = resolve(o);
    if (*simulate_cmd) cmd_simulate(cfg);
    if (*fit_cmd) cmd_fit(cfg);
    if (*sample_cmd) cmd_sample(cfg);
    if (*scalespace_cmd) cmd_scalespace(cfg, allow_unthresholded);
    if (*render_cmd) cmd_render(cfg, render_files);
    if (*pipeline_cmd) cmd_pipeline(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
