#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "sifsr/raster.hpp"

// Synthetic scenes with known ground truth. NDVI is power-law spectral noise
// rescaled to [0, 1]; LST couples to the NDVI separately at coarse and fine
// scales so that a regression fitted on the coarse grid does not transfer to
// the fine one.
//
//   T_hr = base + trend + coarse_coupling * (W * V - mean) + gamma_true * (V - W * V)
//          + independent_texture * U + noise
//
// with W a Gaussian of sigma = r high-res pixels and U a unit-std power-law
// field unrelated to V.
namespace sifsr::datagen {

struct SynthConfig {
  int hr_size = 64;
  int scale_factor = 4;
  double hr_pixel_size_m = 250.0;
  double spectral_slope = -2.0;
  double gamma_true = -12.0;
  double coarse_coupling = -30.0;
  // Amplitude (K) of a power-law LST texture drawn independently of the NDVI.
  double independent_texture = 0.0;
  double smooth_trend = 2.0;
  double base_temperature = 300.0;
  double noise_std = 0.05;
  double reference_bias = 0.0;
  double mtf_sigma_px = -1.0;  // <= 0: r / 2
  std::uint64_t seed = 0;

  void validate() const;
  double sigma() const;
};

nlohmann::json to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& j);

// Zero-mean field with power spectrum ~ |k|^slope (DC removed), unit std.
std::vector<double> power_law_field(int size, double slope, std::uint64_t seed);

// lst_lr = mtf_degrade(T_hr); ref_hr = T_hr + reference_bias.
EvalTriple synth_scene(const SynthConfig& cfg);

struct Patch {
  EvalTriple triple;  // ref_hr is empty-shaped (1x1) when the source had none
  bool has_reference = false;
  int lr_x0 = 0;
  int lr_y0 = 0;
};

// Non-overlapping aligned patches of lr_patch coarse pixels (r * lr_patch fine
// pixels), scanned row by row. Patches with any masked pixel are dropped when
// reject_masked is set.
std::vector<Patch> slice_patches(const ScenePair& pair, int lr_patch, bool reject_masked = true);
std::vector<Patch> slice_patches(const EvalTriple& triple, int lr_patch, bool reject_masked = true);

// Gaussian filter (half-kernel width interpretation; defaults to the target
// GSD) followed by bicubic resampling to the target GSD.
Grid2D degrade_reference(const Grid2D& ref, double target_gsd_m, double half_width_m = -1.0);

}  // namespace sifsr::datagen
