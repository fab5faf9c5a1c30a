#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include "json.hpp"

#include "sifsr/error.hpp"
#include "sifsr/raster.hpp"

namespace sifsr {
namespace {

using nlohmann::json;

std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
  return v;
}

}  // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& payload) {
  auto p = payload;
  p.replace_extension(".json");
  return p;
}

void save_raster(const Grid2D& grid, const std::filesystem::path& path) {
  std::vector<char> bytes(grid.size() * 4);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const float f = grid.valid(i) ? static_cast<float>(grid.values()[i])
                                  : std::numeric_limits<float>::quiet_NaN();
    const std::uint32_t u = to_little_endian(std::bit_cast<std::uint32_t>(f));
    std::memcpy(bytes.data() + 4 * i, &u, 4);
  }
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("save_raster: cannot open " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("save_raster: write failed for " + path.string());
  }

  json side;
  side["width"] = grid.width();
  side["height"] = grid.height();
  side["pixel_size_m"] = grid.pixel_size();
  side["units"] = grid.units();
  if (grid.valid_count() > 0) {
    const MaskedStats s = masked_stats(grid);
    side["stats"] = {{"valid", s.count}, {"mean", s.mean}, {"std", s.std},
                     {"min", s.min},     {"max", s.max}};
  }
  std::ofstream meta(sidecar_path(path), std::ios::trunc);
  if (!meta) throw DataError("save_raster: cannot open sidecar for " + path.string());
  meta << side.dump(2) << '\n';
  if (!meta) throw DataError("save_raster: sidecar write failed for " + path.string());
}

Grid2D load_raster(const std::filesystem::path& path) {
  const auto side_path = sidecar_path(path);
  std::ifstream meta(side_path);
  if (!meta) throw DataError("load_raster: missing sidecar " + side_path.string());
  json side;
  try {
    meta >> side;
  } catch (const json::exception& e) {
    throw DataError("load_raster: malformed sidecar " + side_path.string() + ": " + e.what());
  }
  int width = 0, height = 0;
  double pixel_size = 0.0;
  std::string units;
  try {
    width = side.at("width").get<int>();
    height = side.at("height").get<int>();
    pixel_size = side.at("pixel_size_m").get<double>();
    units = side.value("units", std::string{});
  } catch (const json::exception& e) {
    throw DataError("load_raster: bad sidecar header " + side_path.string() + ": " + e.what());
  }
  if (width < 1 || height < 1) throw DataError("load_raster: non-positive dimensions");
  if (!(pixel_size > 0.0)) throw DataError("load_raster: non-positive pixel_size");

  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_raster: missing payload " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (bytes.size() != n * 4) {
    throw DataError("load_raster: payload has " + std::to_string(bytes.size()) +
                    " bytes, expected " + std::to_string(n * 4));
  }
  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint32_t u;
    std::memcpy(&u, bytes.data() + 4 * i, 4);
    values[i] = static_cast<double>(std::bit_cast<float>(to_little_endian(u)));
  }
  Grid2D grid(width, height, pixel_size, std::move(values));
  grid.set_units(units);
  return grid;
}

Grid2D load_csv(const std::filesystem::path& path, double pixel_size) {
  std::ifstream in(path);
  if (!in) throw DataError("load_csv: missing file " + path.string());
  std::vector<double> values;
  int width = -1, height = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream row(line);
    std::string cell;
    int count = 0;
    while (std::getline(row, cell, ',')) {
      try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        values.push_back(v);
      } catch (const std::exception&) {
        throw DataError("load_csv: bad cell '" + cell + "' in " + path.string());
      }
      ++count;
    }
    if (width < 0) width = count;
    if (count != width) throw DataError("load_csv: ragged rows in " + path.string());
    ++height;
  }
  if (width < 1 || height < 1) throw DataError("load_csv: empty grid in " + path.string());
  return Grid2D(width, height, pixel_size, std::move(values));
}

void save_csv(const Grid2D& grid, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("save_csv: cannot open " + path.string());
  out.precision(17);
  for (int y = 0; y < grid.height(); ++y) {
    for (int x = 0; x < grid.width(); ++x) {
      if (x > 0) out << ',';
      if (grid.valid(x, y)) {
        out << grid(x, y);
      } else {
        out << "nan";
      }
    }
    out << '\n';
  }
  if (!out) throw DataError("save_csv: write failed for " + path.string());
}

}  // namespace sifsr
