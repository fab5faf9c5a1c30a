#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "sifsr/raster.hpp"

// Image-domain and Fourier-domain scores of a sharpened LST against a
// high-resolution reference.
namespace sifsr::metrics {

// Root mean squared difference over jointly valid pixels.
double rmse(const Grid2D& sr, const Grid2D& ref);

// RMSE over pixels whose reference Sobel gradient magnitude sqrt(gx^2 + gy^2)
// is at least its 75th percentile (linear interpolation between order
// statistics; ties included).
double rmse_q75(const Grid2D& sr, const Grid2D& ref);

struct SsimConfig {
  int window = 7;
  double k1 = 0.01;
  double k2 = 0.03;

  void validate() const;
};

// Mean SSIM over every fully valid window position. Window statistics are
// population moments; L is the joint max - min of both images.
double ssim_mean(const Grid2D& sr, const Grid2D& ref, const SsimConfig& cfg = {});

struct RadialSpectrum {
  int size = 0;  // N of the N x N transform
  double pixel_size = 1.0;
  std::vector<double> magnitude;  // mean |DFT| per ring, ring 0 is the DC term
  std::vector<double> power;      // mean |DFT|^2 per ring
  std::vector<long long> count;   // frequency samples per ring

  double nu_cycles_per_px(std::size_t ring) const;
  double nu_per_m(std::size_t ring) const;
};

// Ring k holds the frequencies (kx, ky), kx, ky in [-N/2, N/2), with
// round(sqrt(kx^2 + ky^2)) == k; rings cover the whole plane. The transform is
// unnormalized, so a constant c gives a DC magnitude N^2 |c|. Requires a fully
// valid square image; `hann` tapers it first.
RadialSpectrum radial_spectrum(const Grid2D& image, bool hann = false);

// Largest centered square crop.
Grid2D center_square(const Grid2D& image);

struct AttenuationSpectrum {
  int size = 0;
  double pixel_size = 1.0;
  std::vector<double> db;  // 10 (log10 F(nu) - log10 F(0)); rings with F = 0 sit at the floor
  std::vector<long long> count;

  double nu_cycles_per_px(std::size_t ring) const;
  double nu_per_m(std::size_t ring) const;
};

// Empty rings are clamped to this level below the DC term.
inline constexpr double kAttenuationFloorDb = -300.0;

AttenuationSpectrum attenuation_spectrum(const RadialSpectrum& f);
AttenuationSpectrum attenuation_spectrum(const Grid2D& image, bool hann = false);

// The remaining spectral scores sum over rings 1.. (the DC ring is 0 dB by
// construction) and require matching ring grids.
double rmse_attenuation(const AttenuationSpectrum& sr, const AttenuationSpectrum& ref);

// Fraction of the bicubic-to-reference spectral gap recovered:
//   sum clamp(A_sr - A_bic, 0, max(A_ref - A_bic, 0)) / sum max(A_ref - A_bic, 0)
double frr(const AttenuationSpectrum& sr, const AttenuationSpectrum& ref,
           const AttenuationSpectrum& bic);

// Spectral excess over the reference, normalized by the same gap:
//   sum max(A_sr - A_ref, 0) / sum max(A_ref - A_bic, 0)
double fro(const AttenuationSpectrum& sr, const AttenuationSpectrum& ref,
           const AttenuationSpectrum& bic);

// Version tag of the FRR/FRO definitions above.
inline constexpr const char* kSpectralScoreVersion = "frr-fro-v1";

struct Scores {
  double rmse = 0.0;
  double rmse_q75 = 0.0;
  double ssim = 0.0;
  double frr = 0.0;
  double fro = 0.0;
  double rmse_f = 0.0;
};

// All scores of one sharpened scene; spectra are taken on the centered square
// crop of each image.
Scores score_scene(const Grid2D& sr, const Grid2D& ref, const Grid2D& bicubic);

nlohmann::json to_json(const Scores& s);

}  // namespace sifsr::metrics
