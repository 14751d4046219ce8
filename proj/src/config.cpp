#include "terrafit/config.hpp"

#include "terrafit/error.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <sstream>

namespace terrafit {

namespace {

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

struct Parser {
  std::string key;
  std::size_t line = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("config line " + std::to_string(line) + ": key '" + key + "': " + what);
  }

  double number(const std::string& text) const {
    const std::string t = trim(text);
    if (t == "inf" || t == "infinity" || t == "Inf") return std::numeric_limits<double>::infinity();
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
      fail("expected a number, got '" + t + "'");
    }
    return v;
  }

  double finite(const std::string& text) const {
    const double v = number(text);
    if (!std::isfinite(v)) fail("expected a finite number");
    return v;
  }

  long long integer(const std::string& text) const {
    const std::string t = trim(text);
    long long v = 0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
      fail("expected an integer, got '" + t + "'");
    }
    return v;
  }

  std::uint64_t unsigned64(const std::string& text) const {
    const std::string t = trim(text);
    std::uint64_t v = 0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
      fail("expected an unsigned integer, got '" + t + "'");
    }
    return v;
  }

  bool boolean(const std::string& text) const {
    const std::string t = trim(text);
    if (t == "true" || t == "yes" || t == "1" || t == "on") return true;
    if (t == "false" || t == "no" || t == "0" || t == "off") return false;
    fail("expected true or false, got '" + t + "'");
  }

  std::vector<double> numbers(const std::string& text, std::size_t expected) const {
    std::vector<double> out;
    for (const auto& item : split_list(text)) out.push_back(finite(item));
    if (expected && out.size() != expected) {
      fail("expected " + std::to_string(expected) + " comma-separated numbers");
    }
    return out;
  }
};

std::string num(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::array<char, 40> buf{};
  std::snprintf(buf.data(), buf.size(), "%.17g", v);
  return buf.data();
}

std::string join(const std::vector<double>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? ", " : "") + num(values[i]);
  return out;
}

int layer_suffix(const std::string& key, const std::string& stem) {
  if (key.size() != stem.size() + 2 || key.compare(0, stem.size(), stem) != 0 ||
      key[stem.size()] != '_') {
    return 0;
  }
  const char d = key.back();
  return (d >= '1' && d <= '3') ? d - '0' : 0;
}

}  // namespace

void RunConfig::validate() const {
  if (!(grid_dx > 0.0) || !(grid_dy > 0.0)) throw ConfigError("grid_dx and grid_dy must be positive");
  if (grid_extent) {
    const auto& e = *grid_extent;
    if (!(e[1] > e[0]) || !(e[3] > e[2])) throw ConfigError("grid_extent is degenerate");
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    try {
      params[t].validate();
    } catch (const Error& e) {
      throw ConfigError("layer " + std::to_string(t + 1) + " covariance: " + e.what());
    }
    if (!(params[t].nugget > 0.0)) {
      throw ConfigError("layer " + std::to_string(t + 1) +
                        " nugget must be positive for estimation");
    }
  }
  if (!(c >= 0.0 && c < 1.0)) throw ConfigError("c must lie in [0, 1)");
  if (!(tolerance > 0.0)) throw ConfigError("tolerance must be positive");
  if (max_iter < 1) throw ConfigError("max_iter must be at least 1");
  if (!std::isfinite(threshold)) throw ConfigError("threshold must be finite");
  if (samples < 2) throw ConfigError("samples must be at least 2");
  if (!std::isfinite(direction_value)) throw ConfigError("direction_value must be finite");
  if (dense_limit < 0) throw ConfigError("dense_limit must be non-negative");
  if (render_scale < 1 || render_scale > 64) throw ConfigError("render_scale must lie in [1, 64]");
  if (cell_boundary && (subsurface_source.empty() || left_cell.empty() || right_cell.empty())) {
    throw ConfigError("cell_boundary requires subsurface_source, left_cell and right_cell");
  }
  smoother.validate();
  simulation.validate();
}

RunConfig parse_config(std::istream& in) {
  RunConfig cfg;
  bool spots_reset = false;
  bool ramps_reset = false;
  std::map<std::string, std::size_t> seen;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    Parser p{trim(line.substr(0, eq)), line_no};
    if (eq == std::string::npos) p.fail("expected 'key = value'");
    const std::string value = trim(line.substr(eq + 1));
    const std::string& key = p.key;
    if (key != "sim_spot" && key != "sim_ramp") {
      if (seen.count(key)) p.fail("duplicate key (first on line " + std::to_string(seen[key]) + ")");
      seen[key] = line_no;
    }

    if (key == "input") {
      cfg.inputs.clear();
      for (const auto& item : split_list(value)) {
        if (!item.empty()) cfg.inputs.emplace_back(item);
      }
    } else if (key == "cell") {
      if (value.empty()) p.fail("empty value");
      cfg.cell = value;
    } else if (key == "cell_boundary") {
      if (value == "none") {
        cfg.cell_boundary.reset();
      } else {
        cfg.cell_boundary = p.finite(value);
      }
    } else if (key == "subsurface_source") {
      cfg.subsurface_source = value;
    } else if (key == "left_cell") {
      cfg.left_cell = value;
    } else if (key == "right_cell") {
      cfg.right_cell = value;
    } else if (key == "grid_dx") {
      cfg.grid_dx = p.finite(value);
    } else if (key == "grid_dy") {
      cfg.grid_dy = p.finite(value);
    } else if (key == "grid_extent") {
      if (value == "auto") {
        cfg.grid_extent.reset();
      } else {
        const auto v = p.numbers(value, 4);
        cfg.grid_extent = std::array<double, 4>{v[0], v[1], v[2], v[3]};
      }
    } else if (key == "scaling") {
      if (value == "auto") {
        cfg.scaling = ScalingMode::automatic;
      } else if (value == "grid") {
        cfg.scaling = ScalingMode::grid;
      } else {
        p.fail("expected auto or grid");
      }
    } else if (key == "range" || key == "sill" || key == "nugget") {
      const double v = p.finite(value);
      for (auto& prm : cfg.params) {
        (key == "range" ? prm.range : key == "sill" ? prm.sill : prm.nugget) = v;
      }
    } else if (int t = layer_suffix(key, "range"); t) {
      cfg.params[static_cast<std::size_t>(t - 1)].range = p.finite(value);
    } else if (int t = layer_suffix(key, "sill"); t) {
      cfg.params[static_cast<std::size_t>(t - 1)].sill = p.finite(value);
    } else if (int t = layer_suffix(key, "nugget"); t) {
      cfg.params[static_cast<std::size_t>(t - 1)].nugget = p.finite(value);
    } else if (key == "c") {
      cfg.c = p.finite(value);
    } else if (key == "c_profile") {
      cfg.c_profile = p.boolean(value);
    } else if (key == "outer_sweep") {
      cfg.outer_sweep = p.boolean(value);
    } else if (key == "tolerance") {
      cfg.tolerance = p.finite(value);
    } else if (key == "max_iter") {
      cfg.max_iter = static_cast<int>(p.integer(value));
    } else if (key == "threshold") {
      cfg.threshold = p.finite(value);
    } else if (key == "samples") {
      cfg.samples = static_cast<int>(p.integer(value));
    } else if (key == "seed") {
      cfg.seed = p.unsigned64(value);
    } else if (key == "direction_value") {
      cfg.direction_value = p.finite(value);
    } else if (key == "dense_limit") {
      cfg.dense_limit = static_cast<Index>(p.integer(value));
    } else if (key == "lambdas") {
      cfg.smoother.lambdas.clear();
      for (const auto& item : split_list(value)) cfg.smoother.lambdas.push_back(p.number(item));
    } else if (key == "credibility_level") {
      cfg.smoother.credibility_level = p.finite(value);
    } else if (key == "mode") {
      try {
        cfg.smoother.mode = parse_mode(value);
      } catch (const ConfigError& e) {
        p.fail(e.what());
      }
    } else if (key == "simultaneous") {
      cfg.smoother.simultaneous = p.boolean(value);
    } else if (key == "render_scale") {
      cfg.render_scale = static_cast<int>(p.integer(value));
    } else if (key == "output") {
      cfg.output = value;
    } else if (key == "sim_cell") {
      cfg.simulation.cell = value;
    } else if (key == "sim_extent") {
      const auto v = p.numbers(value, 4);
      cfg.simulation.x_min = v[0];
      cfg.simulation.x_max = v[1];
      cfg.simulation.y_min = v[2];
      cfg.simulation.y_max = v[3];
    } else if (key == "sim_lanes") {
      cfg.simulation.lanes = static_cast<int>(p.integer(value));
    } else if (key == "sim_along_track") {
      cfg.simulation.along_track = p.finite(value);
    } else if (key == "sim_jitter") {
      cfg.simulation.jitter = p.finite(value);
    } else if (key == "sim_layers") {
      cfg.simulation.layers = static_cast<int>(p.integer(value));
    } else if (int t = layer_suffix(key, "sim_beta"); t) {
      const auto v = p.numbers(value, kDesignColumns);
      if (cfg.simulation.beta.empty()) {
        for (int l = 1; l <= 3; ++l) cfg.simulation.beta.push_back(SimulationSpec::default_beta(l));
      }
      cfg.simulation.beta[static_cast<std::size_t>(t - 1)] =
          Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Index>(v.size()));
    } else if (key == "sim_spot") {
      if (!spots_reset) cfg.simulation.spots.clear();
      spots_reset = true;
      const auto v = p.numbers(value, 5);
      cfg.simulation.spots.push_back({v[0], v[1], v[2], v[3], static_cast<int>(v[4])});
    } else if (key == "sim_ramp") {
      if (!ramps_reset) cfg.simulation.ramps.clear();
      ramps_reset = true;
      const auto v = p.numbers(value, 4);
      cfg.simulation.ramps.push_back({v[0], v[1], v[2], static_cast<int>(v[3])});
    } else {
      p.fail("unknown key");
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_config(in);
}

std::string to_config_text(const RunConfig& cfg) {
  std::ostringstream out;
  std::string inputs;
  for (std::size_t i = 0; i < cfg.inputs.size(); ++i) {
    inputs += (i ? ", " : "") + cfg.inputs[i].string();
  }
  out << "input = " << inputs << '\n';
  out << "cell = " << cfg.cell << '\n';
  out << "cell_boundary = " << (cfg.cell_boundary ? num(*cfg.cell_boundary) : "none") << '\n';
  out << "subsurface_source = " << cfg.subsurface_source << '\n';
  out << "left_cell = " << cfg.left_cell << '\n';
  out << "right_cell = " << cfg.right_cell << '\n';
  out << "grid_dx = " << num(cfg.grid_dx) << '\n';
  out << "grid_dy = " << num(cfg.grid_dy) << '\n';
  out << "grid_extent = "
      << (cfg.grid_extent ? join({(*cfg.grid_extent)[0], (*cfg.grid_extent)[1],
                                  (*cfg.grid_extent)[2], (*cfg.grid_extent)[3]})
                          : std::string("auto"))
      << '\n';
  out << "scaling = " << (cfg.scaling == ScalingMode::grid ? "grid" : "auto") << '\n';
  for (std::size_t t = 0; t < cfg.params.size(); ++t) {
    out << "range_" << t + 1 << " = " << num(cfg.params[t].range) << '\n';
    out << "sill_" << t + 1 << " = " << num(cfg.params[t].sill) << '\n';
    out << "nugget_" << t + 1 << " = " << num(cfg.params[t].nugget) << '\n';
  }
  out << "c = " << num(cfg.c) << '\n';
  out << "c_profile = " << (cfg.c_profile ? "true" : "false") << '\n';
  out << "outer_sweep = " << (cfg.outer_sweep ? "true" : "false") << '\n';
  out << "tolerance = " << num(cfg.tolerance) << '\n';
  out << "max_iter = " << cfg.max_iter << '\n';
  out << "threshold = " << num(cfg.threshold) << '\n';
  out << "samples = " << cfg.samples << '\n';
  out << "seed = " << cfg.seed << '\n';
  out << "direction_value = " << num(cfg.direction_value) << '\n';
  out << "dense_limit = " << cfg.dense_limit << '\n';
  out << "lambdas = " << join(cfg.smoother.lambdas) << '\n';
  out << "credibility_level = " << num(cfg.smoother.credibility_level) << '\n';
  out << "mode = " << mode_name(cfg.smoother.mode) << '\n';
  out << "simultaneous = " << (cfg.smoother.simultaneous ? "true" : "false") << '\n';
  out << "render_scale = " << cfg.render_scale << '\n';
  out << "output = " << cfg.output.string() << '\n';
  const auto& s = cfg.simulation;
  out << "sim_cell = " << s.cell << '\n';
  out << "sim_extent = " << join({s.x_min, s.x_max, s.y_min, s.y_max}) << '\n';
  out << "sim_lanes = " << s.lanes << '\n';
  out << "sim_along_track = " << num(s.along_track) << '\n';
  out << "sim_jitter = " << num(s.jitter) << '\n';
  out << "sim_layers = " << s.layers << '\n';
  for (int t = 1; t <= 3; ++t) {
    const auto& b = s.beta_for(t);
    out << "sim_beta_" << t << " = " << join(std::vector<double>(b.data(), b.data() + b.size()))
        << '\n';
  }
  for (const auto& spot : s.spots) {
    out << "sim_spot = " << join({spot.x, spot.y, spot.radius, spot.depth,
                                  static_cast<double>(spot.layer)})
        << '\n';
  }
  for (const auto& r : s.ramps) {
    out << "sim_ramp = " << join({r.x_start, r.x_end, r.amplitude, static_cast<double>(r.layer)})
        << '\n';
  }
  return out.str();
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  std::array<char, 17> buf{};
  std::snprintf(buf.data(), buf.size(), "%016llx", static_cast<unsigned long long>(h));
  return buf.data();
}

}  // namespace terrafit
