#pragma once

// Per-cell analysis stages (fit, sample, scale-space, render) and their
// on-disk layout. Every stage reads what the previous one wrote, so the CLI
// can run them one at a time or all at once.
//
// <output>/manifest.txt
// <output>/cell_<id>/fit/{beta.csv, alpha_layer<t>.csv, estimate_layer<t>.csv,
//                         thresholded_layer<t>.csv, fit_summary.txt}
// <output>/cell_<id>/samples/samples_layer<t>.bin
// <output>/cell_<id>/maps/cred_layer<t>_lambda<i>.csv
// <output>/cell_<id>/images/*.ppm with matching *.legend.txt

#include "terrafit/backfit.hpp"
#include "terrafit/config.hpp"
#include "terrafit/posterior.hpp"
#include "terrafit/scalespace.hpp"
#include "terrafit/simulate.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace terrafit {

/// Thread budget: hardware concurrency capped by TERRAFIT_THREADS.
int thread_budget();

/// The simulation settings implied by a run config (shared keys such as the
/// grid spacing, covariance parameters, c, threshold and seed included).
SimulationSpec simulation_spec(const RunConfig& config);

/// Writes `rmv_cell<id>_layer<t>.csv` and `truth_field_layer<t>.csv` and
/// returns the RMV file paths.
std::vector<std::filesystem::path> write_simulation(const SimulationTruth& truth,
                                                    const std::filesystem::path& dir);

/// Loads and merges every input file, then applies the subsurface split
/// when a cell boundary is configured.
DatasetMap load_inputs(const RunConfig& config);

/// Cells named by `selector` ("all" or a comma list), in sorted order.
std::vector<std::string> select_cells(const DatasetMap& data, const std::string& selector);

/// Everything needed to estimate and sample one cell.
struct CellModel {
  std::string cell;
  ProcessGrid grid;
  ScalingSpec scaling;
  DesignMatrix grid_design;
  std::vector<LayerProblem> problems;  // increasing layer order
  std::vector<std::shared_ptr<const LayerSystem>> systems;

  std::vector<int> layers() const;
};

CellModel build_cell_model(const DatasetMap& data, const std::string& cell,
                           const RunConfig& config);

struct CellFit {
  SequentialFit fit;
  std::optional<CarryoverProfile> profile;
};

CellFit fit_cell(const CellModel& model, const RunConfig& config);

/// Point-estimate field images (not thresholded), one per layer.
std::vector<FieldImage> estimate_images(const CellModel& model, const SequentialFit& fit);

/// `config.samples` posterior draws turned into thresholded field images,
/// grouped per layer. Draw i uses derive_seed(config.seed, i).
std::vector<std::vector<FieldImage>> sample_images(const CellModel& model,
                                                   const SequentialFit& fit,
                                                   const RunConfig& config, int threads);

std::vector<LayerMaps> scalespace_maps(std::span<const std::vector<FieldImage>> images,
                                       const RunConfig& config, int threads);

std::filesystem::path cell_directory(const RunConfig& config, const std::string& cell);

// Stage files.
void write_fit(const std::filesystem::path& cell_dir, const CellModel& model, const CellFit& fit,
               const RunConfig& config);
/// Reads beta.csv and the alpha grids back into a fit for `model`.
SequentialFit read_fit(const std::filesystem::path& cell_dir, const CellModel& model);
void write_samples(const std::filesystem::path& cell_dir,
                   std::span<const std::vector<FieldImage>> images);
std::vector<std::vector<FieldImage>> read_samples(const std::filesystem::path& cell_dir);
void write_maps(const std::filesystem::path& cell_dir, std::span<const LayerMaps> maps);
/// Renders every grid CSV under fit/ and maps/ into images/. Returns the PPM paths.
std::vector<std::filesystem::path> render_cell(const std::filesystem::path& cell_dir, int scale);

/// Canonical config text, its FNV-1a hash and the library version.
void write_manifest(const std::filesystem::path& path, const RunConfig& config,
                    const std::vector<std::string>& cells);

inline constexpr const char* kVersion = "0.1.0";

struct CellResult {
  std::string cell;
  CellFit fit;
  std::vector<LayerMaps> maps;
};

/// All stages for every selected cell, files included. When no input is
/// configured the simulated dataset is generated first under <output>/data,
/// and an unset grid extent defaults to the simulation extent with grid scaling.
std::vector<CellResult> run_pipeline(RunConfig config);

}  // namespace terrafit
