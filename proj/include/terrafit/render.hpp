#pragma once

// Raster output of grid fields and credibility maps as binary PPM (P6).
// Fixed diverging palette: red below zero, white at zero, blue above.

#include "terrafit/field_model.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

namespace terrafit {

struct Rgb {
  std::uint8_t r = 0;
  std::uint8_t g = 0;
  std::uint8_t b = 0;
  bool operator==(const Rgb&) const = default;
};

inline constexpr Rgb kNegativeColor{178, 24, 43};
inline constexpr Rgb kZeroColor{255, 255, 255};
inline constexpr Rgb kPositiveColor{33, 102, 172};

/// Colour of v on the symmetric scale [-bound, bound]; values beyond the
/// bound clamp to the end colours. bound <= 0 renders everything white.
Rgb diverging_color(double v, double bound);

struct Raster {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, top row first

  Rgb pixel(int x, int y) const;
};

struct ColorScale {
  double min = 0.0;
  double max = 0.0;
  double bound = 0.0;  // max |value|
};

/// Nearest-neighbour rendering, `scale` pixels per node in each direction.
/// The top raster row shows the largest y.
Raster render_grid(const ProcessGrid& grid, const Eigen::VectorXd& values, int scale,
                   ColorScale* scale_out = nullptr);

void write_ppm(std::ostream& out, const Raster& image);
void write_ppm(const std::filesystem::path& path, const Raster& image);
/// Reads the binary P6 files written above (maxval 255).
Raster read_ppm(const std::filesystem::path& path);

/// Legend text: the colour scale bounds and the palette anchor colours.
void write_legend(const std::filesystem::path& path, const ColorScale& scale);

/// Renders a grid CSV to `ppm_path` and writes `<ppm_path minus extension>.legend.txt`.
ColorScale render_grid_file(const std::filesystem::path& csv_path,
                            const std::filesystem::path& ppm_path, int scale);

}  // namespace terrafit
