#include "sifsr/raster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "sifsr/error.hpp"

namespace sifsr {

Grid2D::Grid2D(int width, int height, double pixel_size, double fill)
    : width_(width),
      height_(height),
      pixel_size_(pixel_size),
      values_(static_cast<std::size_t>(std::max(width, 0)) *
                  static_cast<std::size_t>(std::max(height, 0)),
              fill),
      mask_(values_.size(), 1) {
  check_invariants();
}

Grid2D::Grid2D(int width, int height, double pixel_size, std::vector<double> values)
    : width_(width), height_(height), pixel_size_(pixel_size), values_(std::move(values)) {
  if (width < 1 || height < 1 ||
      values_.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
    throw DataError("Grid2D: payload length " + std::to_string(values_.size()) +
                    " does not match " + std::to_string(width) + "x" + std::to_string(height));
  }
  mask_.resize(values_.size());
  for (std::size_t i = 0; i < values_.size(); ++i) {
    const bool ok = std::isfinite(values_[i]);
    mask_[i] = ok ? 1 : 0;
    if (!ok) values_[i] = 0.0;
  }
  check_invariants();
}

Grid2D::Grid2D(int width, int height, double pixel_size, std::vector<double> values,
               std::vector<std::uint8_t> mask)
    : width_(width),
      height_(height),
      pixel_size_(pixel_size),
      values_(std::move(values)),
      mask_(std::move(mask)) {
  if (width < 1 || height < 1 ||
      values_.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height) ||
      mask_.size() != values_.size()) {
    throw DataError("Grid2D: values/mask length does not match dimensions");
  }
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i])) {
      mask_[i] = 0;
      values_[i] = 0.0;
    }
  }
  check_invariants();
}

void Grid2D::check_invariants() const {
  if (width_ < 1 || height_ < 1) {
    throw ConfigError("Grid2D: dimensions must be >= 1, got " + std::to_string(width_) + "x" +
                      std::to_string(height_));
  }
  if (!(pixel_size_ > 0.0) || !std::isfinite(pixel_size_)) {
    throw ConfigError("Grid2D: pixel_size must be positive");
  }
}

bool Grid2D::fully_valid() const {
  return std::all_of(mask_.begin(), mask_.end(), [](std::uint8_t m) { return m != 0; });
}

std::size_t Grid2D::valid_count() const {
  return static_cast<std::size_t>(
      std::count_if(mask_.begin(), mask_.end(), [](std::uint8_t m) { return m != 0; }));
}

Grid2D Grid2D::with_values(std::vector<double> values) const {
  Grid2D out(width_, height_, pixel_size_, std::move(values), mask_);
  out.units_ = units_;
  return out;
}

bool same_shape(const Grid2D& a, const Grid2D& b) {
  return a.width() == b.width() && a.height() == b.height();
}

void require_same_shape(const Grid2D& a, const Grid2D& b, const char* what) {
  if (!same_shape(a, b)) {
    throw DataError(std::string(what) + ": shape mismatch " + std::to_string(a.width()) + "x" +
                    std::to_string(a.height()) + " vs " + std::to_string(b.width()) + "x" +
                    std::to_string(b.height()));
  }
}

MaskedStats masked_stats(const Grid2D& grid) {
  MaskedStats s;
  double sum = 0.0;
  s.min = std::numeric_limits<double>::infinity();
  s.max = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!grid.valid(i)) continue;
    const double v = grid.values()[i];
    sum += v;
    s.min = std::min(s.min, v);
    s.max = std::max(s.max, v);
    ++s.count;
  }
  if (s.count == 0) throw DataError("masked_stats: no valid pixels");
  s.mean = sum / static_cast<double>(s.count);
  double ss = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!grid.valid(i)) continue;
    const double d = grid.values()[i] - s.mean;
    ss += d * d;
  }
  s.std = std::sqrt(ss / static_cast<double>(s.count));
  return s;
}

Grid2D block_mean(const Grid2D& hr, int r) {
  if (r < 1) throw ConfigError("block_mean: factor must be >= 1");
  if (hr.width() % r != 0 || hr.height() % r != 0) {
    throw ConfigError("block_mean: dimensions " + std::to_string(hr.width()) + "x" +
                      std::to_string(hr.height()) + " not divisible by " + std::to_string(r));
  }
  const int w = hr.width() / r;
  const int h = hr.height() / r;
  std::vector<double> values(static_cast<std::size_t>(w) * h, 0.0);
  std::vector<std::uint8_t> mask(values.size(), 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // accumulate offsets from the first valid sample so constant blocks are exact
      double pivot = 0.0;
      double sum = 0.0;
      int n = 0;
      for (int dy = 0; dy < r; ++dy) {
        for (int dx = 0; dx < r; ++dx) {
          const int sx = x * r + dx;
          const int sy = y * r + dy;
          if (!hr.valid(sx, sy)) continue;
          if (n == 0) pivot = hr(sx, sy);
          sum += hr(sx, sy) - pivot;
          ++n;
        }
      }
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      if (n > 0) {
        values[i] = pivot + sum / n;
        mask[i] = 1;
      }
    }
  }
  Grid2D out(w, h, hr.pixel_size() * r, std::move(values), std::move(mask));
  out.set_units(hr.units());
  return out;
}

Grid2D nn_upsample(const Grid2D& lr, int r) {
  if (r < 1) throw ConfigError("nn_upsample: factor must be >= 1");
  const int w = lr.width() * r;
  const int h = lr.height() * r;
  std::vector<double> values(static_cast<std::size_t>(w) * h);
  std::vector<std::uint8_t> mask(values.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      values[i] = lr(x / r, y / r);
      mask[i] = lr.valid(x / r, y / r) ? 1 : 0;
    }
  }
  Grid2D out(w, h, lr.pixel_size() / r, std::move(values), std::move(mask));
  out.set_units(lr.units());
  return out;
}

Grid2D crop(const Grid2D& grid, int x0, int y0, int w, int h) {
  if (x0 < 0 || y0 < 0 || w < 1 || h < 1 || x0 + w > grid.width() || y0 + h > grid.height()) {
    throw ConfigError("crop: window outside the grid");
  }
  std::vector<double> values(static_cast<std::size_t>(w) * h);
  std::vector<std::uint8_t> mask(values.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      values[i] = grid(x0 + x, y0 + y);
      mask[i] = grid.valid(x0 + x, y0 + y) ? 1 : 0;
    }
  }
  Grid2D out(w, h, grid.pixel_size(), std::move(values), std::move(mask));
  out.set_units(grid.units());
  return out;
}

void ScenePair::validate() const {
  if (scale_factor < 2) throw ConfigError("ScenePair: scale factor must be >= 2");
  if (ndvi_hr.width() != scale_factor * lst_lr.width() ||
      ndvi_hr.height() != scale_factor * lst_lr.height()) {
    throw DataError("ScenePair: NDVI grid must be exactly r times the LST grid");
  }
  const double expected = scale_factor * ndvi_hr.pixel_size();
  if (std::abs(lst_lr.pixel_size() - expected) > 1e-9 * expected) {
    throw DataError("ScenePair: LST pixel size must equal r times NDVI pixel size");
  }
}

void EvalTriple::validate() const {
  pair.validate();
  require_same_shape(ref_hr, pair.ndvi_hr, "EvalTriple reference");
}

void NormStats::validate() const {
  if (!(lst_std > 0.0) || !(ndvi_std > 0.0)) {
    throw ConfigError("NormStats: standard deviations must be strictly positive");
  }
}

NormStats compute_norm_stats(std::span<const ScenePair> pairs) {
  if (pairs.empty()) throw ConfigError("compute_norm_stats: empty dataset");
  double lst_sum = 0.0, lst_sq = 0.0, ndvi_sum = 0.0, ndvi_sq = 0.0;
  std::size_t lst_n = 0, ndvi_n = 0;
  // two-pass mean / variance
  for (const auto& p : pairs) {
    for (std::size_t i = 0; i < p.lst_lr.size(); ++i) {
      if (p.lst_lr.valid(i)) {
        lst_sum += p.lst_lr.values()[i];
        ++lst_n;
      }
    }
    for (std::size_t i = 0; i < p.ndvi_hr.size(); ++i) {
      if (p.ndvi_hr.valid(i)) {
        ndvi_sum += p.ndvi_hr.values()[i];
        ++ndvi_n;
      }
    }
  }
  if (lst_n == 0 || ndvi_n == 0) throw DataError("compute_norm_stats: no valid pixels");
  NormStats s;
  s.lst_mean = lst_sum / static_cast<double>(lst_n);
  s.ndvi_mean = ndvi_sum / static_cast<double>(ndvi_n);
  for (const auto& p : pairs) {
    for (std::size_t i = 0; i < p.lst_lr.size(); ++i) {
      if (p.lst_lr.valid(i)) {
        const double d = p.lst_lr.values()[i] - s.lst_mean;
        lst_sq += d * d;
      }
    }
    for (std::size_t i = 0; i < p.ndvi_hr.size(); ++i) {
      if (p.ndvi_hr.valid(i)) {
        const double d = p.ndvi_hr.values()[i] - s.ndvi_mean;
        ndvi_sq += d * d;
      }
    }
  }
  s.lst_std = std::sqrt(lst_sq / static_cast<double>(lst_n));
  s.ndvi_std = std::sqrt(ndvi_sq / static_cast<double>(ndvi_n));
  // a constant band standardizes by its mean alone
  if (s.lst_std == 0.0) s.lst_std = 1.0;
  if (s.ndvi_std == 0.0) s.ndvi_std = 1.0;
  s.validate();
  return s;
}

}  // namespace sifsr
