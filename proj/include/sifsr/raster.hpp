#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace sifsr {

// Single-band raster: row-major values, an explicit validity mask and the
// ground sample distance in meters. Values are kept in double precision;
// masked pixels carry an unspecified value and are ignored by every statistic.
class Grid2D {
 public:
  Grid2D() = default;
  Grid2D(int width, int height, double pixel_size, double fill = 0.0);
  // NaN entries in `values` become masked pixels.
  Grid2D(int width, int height, double pixel_size, std::vector<double> values);
  Grid2D(int width, int height, double pixel_size, std::vector<double> values,
         std::vector<std::uint8_t> mask);

  int width() const { return width_; }
  int height() const { return height_; }
  double pixel_size() const { return pixel_size_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  std::span<const std::uint8_t> mask() const { return mask_; }

  double operator()(int x, int y) const { return values_[index(x, y)]; }
  double& operator()(int x, int y) { return values_[index(x, y)]; }
  bool valid(int x, int y) const { return mask_[index(x, y)] != 0; }
  bool valid(std::size_t i) const { return mask_[i] != 0; }
  void set_valid(int x, int y, bool valid) { mask_[index(x, y)] = valid ? 1 : 0; }

  bool fully_valid() const;
  std::size_t valid_count() const;

  const std::string& units() const { return units_; }
  void set_units(std::string units) { units_ = std::move(units); }

  // Copy of this grid's metadata and mask carrying new values.
  Grid2D with_values(std::vector<double> values) const;

  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(x);
  }

 private:
  void check_invariants() const;

  int width_ = 0;
  int height_ = 0;
  double pixel_size_ = 1.0;
  std::vector<double> values_;
  std::vector<std::uint8_t> mask_;
  std::string units_;
};

bool same_shape(const Grid2D& a, const Grid2D& b);
void require_same_shape(const Grid2D& a, const Grid2D& b, const char* what);

struct MaskedStats {
  std::size_t count = 0;
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
  double min = 0.0;
  double max = 0.0;
};

MaskedStats masked_stats(const Grid2D& grid);

// Mean of each r x r block over its valid pixels. Blocks with no valid pixel
// are masked in the output.
Grid2D block_mean(const Grid2D& hr, int r);

// Nearest-neighbor (pixel replication) upsampling by an integer factor.
Grid2D nn_upsample(const Grid2D& lr, int r);

// Window [x0, x0 + w) x [y0, y0 + h); must lie inside the grid.
Grid2D crop(const Grid2D& grid, int x0, int y0, int w, int h);

// Low-resolution temperature with its high-resolution vegetation index.
struct ScenePair {
  Grid2D lst_lr;
  Grid2D ndvi_hr;
  int scale_factor = 4;

  void validate() const;
};

// A scene pair plus the high-resolution reference temperature.
struct EvalTriple {
  ScenePair pair;
  Grid2D ref_hr;

  void validate() const;
};

struct NormStats {
  double lst_mean = 0.0;
  double lst_std = 1.0;
  double ndvi_mean = 0.0;
  double ndvi_std = 1.0;

  void validate() const;
};

// Dataset-wide mean / population standard deviation of the LST and NDVI
// rasters. A constant band gets standard deviation 1.
NormStats compute_norm_stats(std::span<const ScenePair> pairs);

// ---- file I/O --------------------------------------------------------------

// `path` names the raw little-endian float32 payload; the JSON sidecar sits
// next to it with the extension replaced by ".json".
std::filesystem::path sidecar_path(const std::filesystem::path& payload);

Grid2D load_raster(const std::filesystem::path& path);
void save_raster(const Grid2D& grid, const std::filesystem::path& path);

// Comma-separated rows; "nan" marks masked pixels.
Grid2D load_csv(const std::filesystem::path& path, double pixel_size);
void save_csv(const Grid2D& grid, const std::filesystem::path& path);

}  // namespace sifsr
