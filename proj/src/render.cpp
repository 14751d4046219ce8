#include "terrafit/render.hpp"

#include "terrafit/error.hpp"
#include "terrafit/posterior.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <string>

namespace terrafit {

namespace {

std::uint8_t mix(std::uint8_t from, std::uint8_t to, double t) {
  return static_cast<std::uint8_t>(std::lround(from + (to - from) * t));
}

}  // namespace

Rgb diverging_color(double v, double bound) {
  if (!(bound > 0.0) || v == 0.0 || std::isnan(v)) return kZeroColor;
  const double t = std::min(std::abs(v) / bound, 1.0);
  const Rgb end = v < 0.0 ? kNegativeColor : kPositiveColor;
  return {mix(kZeroColor.r, end.r, t), mix(kZeroColor.g, end.g, t), mix(kZeroColor.b, end.b, t)};
}

Rgb Raster::pixel(int x, int y) const {
  const auto at = 3 * (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                       static_cast<std::size_t>(x));
  return {rgb.at(at), rgb.at(at + 1), rgb.at(at + 2)};
}

Raster render_grid(const ProcessGrid& grid, const Eigen::VectorXd& values, int scale,
                   ColorScale* scale_out) {
  if (values.size() != grid.size()) throw DimensionError("render_grid: size mismatch");
  if (scale < 1) throw ConfigError("render scale must be at least 1");
  ColorScale cs;
  if (values.size() > 0) {
    cs.min = values.minCoeff();
    cs.max = values.maxCoeff();
    cs.bound = std::max(std::abs(cs.min), std::abs(cs.max));
  }
  Raster img;
  img.width = static_cast<int>(grid.nx) * scale;
  img.height = static_cast<int>(grid.ny) * scale;
  img.rgb.resize(3 * static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height));
  for (int py = 0; py < img.height; ++py) {
    const Index j = grid.ny - 1 - py / scale;
    for (int px = 0; px < img.width; ++px) {
      const Rgb c = diverging_color(values[grid.node(px / scale, j)], cs.bound);
      const auto at = 3 * (static_cast<std::size_t>(py) * static_cast<std::size_t>(img.width) +
                           static_cast<std::size_t>(px));
      img.rgb[at] = c.r;
      img.rgb[at + 1] = c.g;
      img.rgb[at + 2] = c.b;
    }
  }
  if (scale_out) *scale_out = cs;
  return img;
}

void write_ppm(std::ostream& out, const Raster& image) {
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.rgb.data()),
            static_cast<std::streamsize>(image.rgb.size()));
}

void write_ppm(const std::filesystem::path& path, const Raster& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_ppm(out, image);
}

Raster read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::string magic;
  int maxval = 0;
  Raster img;
  in >> magic >> img.width >> img.height >> maxval;
  if (magic != "P6" || maxval != 255 || img.width < 0 || img.height < 0) {
    throw InputError(path.string() + ": not an 8-bit binary PPM");
  }
  in.get();
  img.rgb.resize(3 * static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height));
  if (!in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()))) {
    throw InputError(path.string() + ": truncated pixel data");
  }
  return img;
}

void write_legend(const std::filesystem::path& path, const ColorScale& scale) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  char buf[160];
  std::snprintf(buf, sizeof buf, "min = %.9g\nmax = %.9g\nscale = [%.9g, %.9g]\n", scale.min,
                scale.max, -scale.bound, scale.bound);
  out << buf;
  auto color = [&](const char* name, Rgb c) {
    out << name << " = " << int(c.r) << ' ' << int(c.g) << ' ' << int(c.b) << '\n';
  };
  color("negative", kNegativeColor);
  color("zero", kZeroColor);
  color("positive", kPositiveColor);
}

ColorScale render_grid_file(const std::filesystem::path& csv_path,
                            const std::filesystem::path& ppm_path, int scale) {
  const GridValues grid = read_grid_csv(csv_path);
  ColorScale cs;
  write_ppm(ppm_path, render_grid(grid.grid, grid.values, scale, &cs));
  auto legend = ppm_path;
  legend.replace_extension(".legend.txt");
  write_legend(legend, cs);
  return cs;
}

}  // namespace terrafit
