#pragma once

#include <span>
#include <vector>

#include "json.hpp"
#include "sifsr/raster.hpp"

// Statistical sharpening baselines: bicubic interpolation, TsHARP (linear
// NDVI regression plus nearest-neighbor residuals) and ATPRK (the same
// regression plus area-to-point kriged residuals).
namespace sifsr::baselines {

struct BaselineConfig {
  double mtf_sigma_px = -1.0;  // < 0: r / 2
  int neighborhood = 5;        // kriging window, coarse pixels, odd
  int max_lag_px = 0;          // empirical variogram reach; 0: half the short side, at most 16

  void validate() const;
  double sigma(int r) const;
};

nlohmann::json to_json(const BaselineConfig& cfg);
BaselineConfig baseline_config_from_json(const nlohmann::json& j);

// NDVI on the LST grid, built with the same observation operator as LST.
Grid2D degrade_ndvi(const Grid2D& ndvi_hr, int r, double sigma_px);

struct LinearModel {
  double slope = 0.0;
  double intercept = 0.0;
  Grid2D residual_lr;  // T_lr - (slope * V_lr + intercept), masked where either input is
};

// Ordinary least squares of T_lr on V_lr over jointly valid pixels. Throws
// DataError for fewer than 2 pixels or constant V_lr.
LinearModel fit_linear(const Grid2D& lst_lr, const Grid2D& ndvi_lr);

Grid2D bicubic_baseline(const ScenePair& pair);
Grid2D tsharp_sharpen(const ScenePair& pair, const BaselineConfig& cfg = {});

// ---- variogram -----------------------------------------------------------------

struct EmpiricalVariogram {
  std::vector<double> lags_m;  // bin centers h * pixel size, h = 1, 2, ...
  std::vector<double> semivariance;
  std::vector<long long> pairs;
};

// Method-of-moments estimator: pairs are binned by their distance rounded to
// the nearest integer pixel count, lag 0 excluded. Bins without pairs are
// dropped. Needs at least 30 valid pixels.
EmpiricalVariogram empirical_variogram(const Grid2D& residual, int max_lag_px);

// gamma(h) = nugget + partial_sill * (1 - exp(-3 h / range)) for h > 0, 0 at h = 0.
struct VariogramModel {
  double nugget = 0.0;
  double partial_sill = 0.0;
  double range_m = 1.0;
  bool pure_nugget_fallback = false;
  EmpiricalVariogram empirical;

  double gamma(double h_m) const;
  double covariance(double h_m) const;  // sill - gamma(h)
};

// Pair-count weighted least squares. For each trial range the two linear
// coefficients are fitted under non-negativity; the range is chosen on a log
// grid and refined by golden-section search. Falls back to a pure nugget when
// no structured fit beats the flat one.
VariogramModel fit_variogram(const EmpiricalVariogram& empirical);

// ---- area-to-point kriging -------------------------------------------------------

// Weights of the coarse neighbors for every (window offset, sub-pixel)
// configuration on a fully valid window. Windows are n x n coarse pixels,
// centered on the target block and shifted inward at the borders.
struct KrigingPlan {
  int window = 5;
  int r = 4;
  // weights[(((ty * window + tx) * r + py) * r + px) * window * window + k]:
  // target block at (tx, ty) inside the window, fine pixel (px, py) inside it.
  std::vector<double> weights;
  bool ridge_used = false;
  bool nn_fallback = false;

  std::span<const double> at(int tx, int ty, int px, int py) const;
};

KrigingPlan make_kriging_plan(const VariogramModel& model, int r, double fine_pixel_m,
                              int window);

// Point-scale residuals whose r x r block means reproduce the coarse residuals.
Grid2D atp_kriging(const Grid2D& residual_lr, const VariogramModel& model, int r,
                   int neighborhood = 5);

Grid2D atprk_sharpen(const ScenePair& pair, const BaselineConfig& cfg = {});

}  // namespace sifsr::baselines
