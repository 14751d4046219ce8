#pragma once

// Observation data model: RMV records, the regular process grid, the
// nearest-node incidence map and the covariate design.

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace terrafit {

using Index = Eigen::Index;

enum class Layer : int { subsurface = 1, subgrade = 2, base = 3 };

inline int layer_number(Layer layer) { return static_cast<int>(layer); }
Layer layer_from_int(int value);
const char* layer_name(Layer layer);

/// One roller measurement value with its location and driving direction.
struct RmvRecord {
  std::string cell;
  Layer layer = Layer::subsurface;
  double x = 0.0;      // meters, driving direction
  double y = 0.0;      // meters, transverse
  int direction = 0;   // 1 right-to-left, 0 left-to-right
  double value = 0.0;  // RMV
};

/// All records of one (cell, layer), in file order.
struct LayerDataset {
  std::string cell;
  Layer layer = Layer::subsurface;
  std::vector<RmvRecord> records;

  Index size() const { return static_cast<Index>(records.size()); }
  Eigen::VectorXd values() const;
};

using DatasetKey = std::pair<std::string, int>;  // (cell, layer number)
using DatasetMap = std::map<DatasetKey, LayerDataset>;

/// Parses the `cell,layer,x,y,direction,rmv` CSV format. Throws InputError
/// naming the line for malformed rows.
DatasetMap read_rmv_csv(std::istream& in);
DatasetMap load_rmv_csv(const std::filesystem::path& path);

/// Writes records with 9 significant digits so that reading back is stable.
void write_rmv_csv(std::ostream& out, const std::vector<const LayerDataset*>& datasets);
void write_rmv_csv(const std::filesystem::path& path,
                   const std::vector<const LayerDataset*>& datasets);

/// Reassigns subsurface records (layer 1) of `source_cell` to `left_cell`
/// when x < boundary and to `right_cell` otherwise. The subsurface layer is
/// driven continuously over adjacent cells and has to be split this way.
DatasetMap split_subsurface(const DatasetMap& data, const std::string& source_cell,
                            double boundary, const std::string& left_cell,
                            const std::string& right_cell);

/// Regular grid of process-level nodes, row-major (x fastest).
struct ProcessGrid {
  double x0 = 0.0;
  double y0 = 0.0;
  double dx = 1.0;
  double dy = 1.0;
  Index nx = 2;
  Index ny = 2;

  Index size() const { return nx * ny; }
  Index node(Index i, Index j) const { return j * nx + i; }
  Index column_of(Index k) const { return k % nx; }
  Index row_of(Index k) const { return k / nx; }
  double node_x(Index k) const { return x0 + static_cast<double>(column_of(k)) * dx; }
  double node_y(Index k) const { return y0 + static_cast<double>(row_of(k)) * dy; }
  double x_max() const { return x0 + static_cast<double>(nx - 1) * dx; }
  double y_max() const { return y0 + static_cast<double>(ny - 1) * dy; }

  bool operator==(const ProcessGrid&) const = default;
};

/// nx = ceil((x_max - x_min) / dx) + 1, likewise ny.
ProcessGrid build_grid(double x_min, double x_max, double y_min, double y_max, double dx,
                       double dy);

/// Maps each observation to exactly one grid node (H has a single 1 per row).
class IncidenceMap {
 public:
  IncidenceMap() = default;
  IncidenceMap(std::vector<Index> columns, Index cols);

  Index rows() const { return static_cast<Index>(columns_.size()); }
  Index cols() const { return cols_; }
  Index column(Index row) const { return columns_[static_cast<std::size_t>(row)]; }
  const std::vector<Index>& columns() const { return columns_; }

  /// H * alpha (gathers node values at observations).
  Eigen::VectorXd apply(const Eigen::VectorXd& alpha) const;
  /// H^T * v (scatter-adds observation values onto nodes).
  Eigen::VectorXd apply_transpose(const Eigen::VectorXd& v) const;
  Eigen::SparseMatrix<double> matrix() const;

 private:
  std::vector<Index> columns_;
  Index cols_ = 0;
};

/// Nearest node in Euclidean distance, ties toward the smaller node index.
/// Observations up to half a cell outside the grid snap to the boundary;
/// anything further raises InputError listing the offending records.
IncidenceMap build_incidence(const LayerDataset& dataset, const ProcessGrid& grid);

/// Midpoint / half-range scaling of coordinates to [-1, 1].
struct ScalingSpec {
  double x_center = 0.0;
  double y_center = 0.0;
  double x_halfrange = 1.0;
  double y_halfrange = 1.0;

  double scale_x(double x) const { return (x - x_center) / x_halfrange; }
  double scale_y(double y) const { return (y - y_center) / y_halfrange; }

  static ScalingSpec identity() { return {}; }
  bool operator==(const ScalingSpec&) const = default;
};

/// Scaling from the bounding box of all records of the given datasets.
ScalingSpec auto_scaling(const std::vector<const LayerDataset*>& datasets);
/// Scaling from the grid extent.
ScalingSpec grid_scaling(const ProcessGrid& grid);

inline constexpr Index kDesignColumns = 6;

/// Covariate design [1, x, y, x^2, x^3, direction] on scaled coordinates.
struct DesignMatrix {
  Eigen::MatrixXd values;
  ScalingSpec scaling;

  Index rows() const { return values.rows(); }
  bool underdetermined() const { return values.rows() < values.cols(); }
};

/// `scaling == std::nullopt` derives the scaling from the dataset itself.
DesignMatrix build_design(const LayerDataset& dataset,
                          const std::optional<ScalingSpec>& scaling = std::nullopt);

/// Design evaluated at grid nodes. Direction has no meaning there and is set
/// to `direction_value` for every node.
DesignMatrix build_grid_design(const ProcessGrid& grid, const ScalingSpec& scaling,
                               double direction_value);

}  // namespace terrafit
