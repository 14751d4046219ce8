#include "terrafit/field_model.hpp"

#include "terrafit/error.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

namespace terrafit {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

double parse_double(std::string_view field, const char* name, std::size_t line) {
  double value = 0.0;
  const auto* end = field.data() + field.size();
  const auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc() || ptr != end || field.empty() || !std::isfinite(value)) {
    throw InputError(std::string("non-numeric ") + name + " '" + std::string(field) + "'", line);
  }
  return value;
}

long parse_integer(std::string_view field, const char* name, std::size_t line) {
  const double value = parse_double(field, name, line);
  if (value != std::floor(value)) {
    throw InputError(std::string("non-integer ") + name + " '" + std::string(field) + "'", line);
  }
  return static_cast<long>(value);
}

std::string format_g9(double v) {
  std::array<char, 32> buf{};
  std::snprintf(buf.data(), buf.size(), "%.9g", v);
  return buf.data();
}

}  // namespace

Layer layer_from_int(int value) {
  if (value < 1 || value > 3) {
    throw Error("layer must be 1, 2 or 3, got " + std::to_string(value));
  }
  return static_cast<Layer>(value);
}

const char* layer_name(Layer layer) {
  switch (layer) {
    case Layer::subsurface: return "subsurface";
    case Layer::subgrade: return "subgrade";
    case Layer::base: return "base";
  }
  return "unknown";
}

Eigen::VectorXd LayerDataset::values() const {
  Eigen::VectorXd v(size());
  for (Index r = 0; r < size(); ++r) v[r] = records[static_cast<std::size_t>(r)].value;
  return v;
}

DatasetMap read_rmv_csv(std::istream& in) {
  static constexpr std::array<const char*, 6> kColumns = {"cell", "layer", "x",
                                                          "y",    "direction", "rmv"};
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw InputError("empty file: missing header");
  ++line_no;
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);

  const auto header = split_commas(line);
  std::array<std::size_t, 6> position{};
  for (std::size_t c = 0; c < kColumns.size(); ++c) {
    const auto it = std::find(header.begin(), header.end(), kColumns[c]);
    if (it == header.end()) {
      throw InputError(std::string("missing column '") + kColumns[c] + "'", line_no);
    }
    position[c] = static_cast<std::size_t>(it - header.begin());
  }

  DatasetMap out;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_commas(line);
    if (fields.size() != header.size()) {
      throw InputError("expected " + std::to_string(header.size()) + " fields, got " +
                           std::to_string(fields.size()),
                       line_no);
    }
    RmvRecord rec;
    rec.cell = std::string(fields[position[0]]);
    if (rec.cell.empty()) throw InputError("empty cell identifier", line_no);
    const long layer = parse_integer(fields[position[1]], "layer", line_no);
    if (layer < 1 || layer > 3) {
      throw InputError("layer must be 1, 2 or 3, got " + std::to_string(layer), line_no);
    }
    rec.layer = static_cast<Layer>(layer);
    rec.x = parse_double(fields[position[2]], "x", line_no);
    rec.y = parse_double(fields[position[3]], "y", line_no);
    const long direction = parse_integer(fields[position[4]], "direction", line_no);
    if (direction != 0 && direction != 1) {
      throw InputError("direction must be 0 or 1, got " + std::to_string(direction), line_no);
    }
    rec.direction = static_cast<int>(direction);
    rec.value = parse_double(fields[position[5]], "rmv", line_no);

    auto& ds = out[{rec.cell, static_cast<int>(layer)}];
    ds.cell = rec.cell;
    ds.layer = rec.layer;
    ds.records.push_back(std::move(rec));
  }
  return out;
}

DatasetMap load_rmv_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return read_rmv_csv(in);
  } catch (const InputError& e) {
    throw InputError(path.string() + ": " + e.what(), e.line());
  }
}

void write_rmv_csv(std::ostream& out, const std::vector<const LayerDataset*>& datasets) {
  out << "cell,layer,x,y,direction,rmv\n";
  for (const auto* ds : datasets) {
    for (const auto& r : ds->records) {
      out << r.cell << ',' << layer_number(r.layer) << ',' << format_g9(r.x) << ','
          << format_g9(r.y) << ',' << r.direction << ',' << format_g9(r.value) << '\n';
    }
  }
}

void write_rmv_csv(const std::filesystem::path& path,
                   const std::vector<const LayerDataset*>& datasets) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_rmv_csv(out, datasets);
}

DatasetMap split_subsurface(const DatasetMap& data, const std::string& source_cell,
                            double boundary, const std::string& left_cell,
                            const std::string& right_cell) {
  DatasetMap out;
  for (const auto& [key, ds] : data) {
    const bool split = key.first == source_cell && key.second == layer_number(Layer::subsurface);
    for (const auto& rec : ds.records) {
      RmvRecord copy = rec;
      if (split) copy.cell = rec.x < boundary ? left_cell : right_cell;
      auto& target = out[{copy.cell, key.second}];
      target.cell = copy.cell;
      target.layer = ds.layer;
      target.records.push_back(std::move(copy));
    }
  }
  return out;
}

ProcessGrid build_grid(double x_min, double x_max, double y_min, double y_max, double dx,
                       double dy) {
  if (!(dx > 0.0) || !(dy > 0.0)) throw Error("grid spacing must be positive");
  if (!(x_max > x_min) || !(y_max > y_min)) throw Error("degenerate grid extent");
  // Guard against (0.3 - 0.0) / 0.1 = 3.0000000000000004 rounding up.
  auto count = [](double extent, double step) {
    const double cells = extent / step;
    return static_cast<Index>(std::ceil(cells - 1e-9 * std::max(1.0, cells))) + 1;
  };
  ProcessGrid grid;
  grid.x0 = x_min;
  grid.y0 = y_min;
  grid.dx = dx;
  grid.dy = dy;
  grid.nx = count(x_max - x_min, dx);
  grid.ny = count(y_max - y_min, dy);
  return grid;
}

IncidenceMap::IncidenceMap(std::vector<Index> columns, Index cols)
    : columns_(std::move(columns)), cols_(cols) {
  for (const Index c : columns_) {
    if (c < 0 || c >= cols_) throw DimensionError("incidence column out of range");
  }
}

Eigen::VectorXd IncidenceMap::apply(const Eigen::VectorXd& alpha) const {
  if (alpha.size() != cols_) throw DimensionError("H * alpha: dimension mismatch");
  Eigen::VectorXd out(rows());
  for (Index r = 0; r < rows(); ++r) out[r] = alpha[column(r)];
  return out;
}

Eigen::VectorXd IncidenceMap::apply_transpose(const Eigen::VectorXd& v) const {
  if (v.size() != rows()) throw DimensionError("H^T * v: dimension mismatch");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(cols_);
  for (Index r = 0; r < rows(); ++r) out[column(r)] += v[r];
  return out;
}

Eigen::SparseMatrix<double> IncidenceMap::matrix() const {
  Eigen::SparseMatrix<double, Eigen::RowMajor> h(rows(), cols_);
  h.reserve(Eigen::VectorXi::Ones(rows()));
  for (Index r = 0; r < rows(); ++r) h.insert(r, column(r)) = 1.0;
  h.makeCompressed();
  return Eigen::SparseMatrix<double>(h);
}

IncidenceMap build_incidence(const LayerDataset& dataset, const ProcessGrid& grid) {
  // Per-axis rounding is exact nearest-node search on an axis-aligned grid;
  // ceil(u - 0.5) sends exact midpoints to the smaller index.
  auto snap = [](double coord, double origin, double step, Index count, Index& out) {
    const double u = (coord - origin) / step;
    constexpr double kSlack = 1e-9;
    if (u < -0.5 - kSlack || u > static_cast<double>(count - 1) + 0.5 + kSlack) return false;
    out = std::clamp(static_cast<Index>(std::ceil(u - 0.5)), Index{0}, count - 1);
    return true;
  };

  std::vector<Index> columns;
  columns.reserve(dataset.records.size());
  std::ostringstream offending;
  std::size_t bad = 0;
  for (std::size_t r = 0; r < dataset.records.size(); ++r) {
    const auto& rec = dataset.records[r];
    Index i = 0;
    Index j = 0;
    if (!snap(rec.x, grid.x0, grid.dx, grid.nx, i) || !snap(rec.y, grid.y0, grid.dy, grid.ny, j)) {
      if (bad < 10) offending << (bad ? "; " : "") << "record " << r << " at (" << rec.x << ", "
                              << rec.y << ")";
      ++bad;
      continue;
    }
    columns.push_back(grid.node(i, j));
  }
  if (bad > 0) {
    throw InputError(std::to_string(bad) + " observation(s) outside the grid: " +
                     offending.str() + (bad > 10 ? "; ..." : ""));
  }
  return IncidenceMap(std::move(columns), grid.size());
}

ScalingSpec auto_scaling(const std::vector<const LayerDataset*>& datasets) {
  double x_lo = std::numeric_limits<double>::infinity();
  double x_hi = -x_lo;
  double y_lo = x_lo;
  double y_hi = -x_lo;
  for (const auto* ds : datasets) {
    for (const auto& r : ds->records) {
      x_lo = std::min(x_lo, r.x);
      x_hi = std::max(x_hi, r.x);
      y_lo = std::min(y_lo, r.y);
      y_hi = std::max(y_hi, r.y);
    }
  }
  if (!(x_hi > x_lo) || !(y_hi > y_lo)) {
    throw Error("cannot scale coordinates: zero half-range");
  }
  ScalingSpec s{0.5 * (x_lo + x_hi), 0.5 * (y_lo + y_hi), 0.5 * (x_hi - x_lo),
                0.5 * (y_hi - y_lo)};
  // Rounding can put an extreme record at 1 + ulp; widen until it is inside.
  const auto inf = std::numeric_limits<double>::infinity();
  while (std::max(std::abs(s.scale_x(x_lo)), std::abs(s.scale_x(x_hi))) > 1.0) {
    s.x_halfrange = std::nextafter(s.x_halfrange, inf);
  }
  while (std::max(std::abs(s.scale_y(y_lo)), std::abs(s.scale_y(y_hi))) > 1.0) {
    s.y_halfrange = std::nextafter(s.y_halfrange, inf);
  }
  return s;
}

ScalingSpec grid_scaling(const ProcessGrid& grid) {
  return {0.5 * (grid.x0 + grid.x_max()), 0.5 * (grid.y0 + grid.y_max()),
          0.5 * (grid.x_max() - grid.x0), 0.5 * (grid.y_max() - grid.y0)};
}

namespace {

void fill_design_row(Eigen::MatrixXd& x, Index row, const ScalingSpec& s, double px, double py,
                     double direction) {
  const double u = s.scale_x(px);
  x(row, 0) = 1.0;
  x(row, 1) = u;
  x(row, 2) = s.scale_y(py);
  x(row, 3) = u * u;
  x(row, 4) = u * u * u;
  x(row, 5) = direction;
}

void check_scaling(const ScalingSpec& s) {
  if (!(s.x_halfrange > 0.0) || !(s.y_halfrange > 0.0)) {
    throw Error("scaling half-ranges must be positive");
  }
}

}  // namespace

DesignMatrix build_design(const LayerDataset& dataset, const std::optional<ScalingSpec>& scaling) {
  DesignMatrix d;
  d.scaling = scaling ? *scaling : auto_scaling({&dataset});
  check_scaling(d.scaling);
  d.values.resize(dataset.size(), kDesignColumns);
  for (Index r = 0; r < dataset.size(); ++r) {
    const auto& rec = dataset.records[static_cast<std::size_t>(r)];
    fill_design_row(d.values, r, d.scaling, rec.x, rec.y, rec.direction);
  }
  return d;
}

DesignMatrix build_grid_design(const ProcessGrid& grid, const ScalingSpec& scaling,
                               double direction_value) {
  check_scaling(scaling);
  DesignMatrix d;
  d.scaling = scaling;
  d.values.resize(grid.size(), kDesignColumns);
  for (Index k = 0; k < grid.size(); ++k) {
    fill_design_row(d.values, k, scaling, grid.node_x(k), grid.node_y(k), direction_value);
  }
  return d;
}

}  // namespace terrafit
