#pragma once

#include <array>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sifsr/raster.hpp"

// Fixed linear operators of the observation model: Gaussian MTF blur,
// Catmull-Rom and bilinear resampling, directional Sobel derivatives and the
// Gaussian high-pass. Every operator has a dense-plane kernel with an exact
// adjoint; the Grid2D overloads add mask handling on top.
namespace sifsr::linops {

struct PlaneShape {
  int width = 0;
  int height = 0;
  std::size_t size() const {
    return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  }
  bool operator==(const PlaneShape&) const = default;
};

// Odd-sized correlation kernel, row-major, centered.
struct Kernel2D {
  int width = 1;
  int height = 1;
  std::vector<double> weights{1.0};

  double operator()(int i, int j) const { return weights[static_cast<std::size_t>(j) * width + i]; }
  double center() const { return (*this)(width / 2, height / 2); }
  Kernel2D flipped() const;
};

struct GaussianKernel {
  double sigma_px = 0.0;
  int radius = 0;
  Kernel2D kernel;

  double center_weight() const { return kernel.center(); }
};

// Sampled isotropic Gaussian normalized to unit sum after truncation.
// sigma_px < 0.3 yields the identity kernel.
GaussianKernel gaussian_kernel(double sigma_px, int radius);
// Truncation radius ceil(3 sigma).
GaussianKernel gaussian_kernel(double sigma_px);

// Gaussian from a "half-kernel width" in meters: truncation radius equals the
// half width and sigma is half of it.
GaussianKernel gaussian_from_half_width(double half_width_m, double pixel_size_m);

// Default MTF blur for a factor-r degradation: sigma = r / 2 high-res pixels.
double default_mtf_sigma(int r);

// ---- dense plane kernels ---------------------------------------------------

// Same-size correlation with edge-replication padding.
void correlate(std::span<const double> in, PlaneShape shape, const Kernel2D& k,
               std::span<double> out);
void correlate_adjoint(std::span<const double> in, PlaneShape shape, const Kernel2D& k,
                       std::span<double> out);

// One output sample of a separable resampler: up to four (index, weight) taps
// with replicate-clamped indices.
struct AxisTaps {
  std::array<int, 4> index{};
  std::array<double, 4> weight{};
  int count = 0;
};

enum class Interp { kBicubic, kBilinear };

// Pixel-center aligned taps mapping an axis of length `in` to `out`.
std::vector<AxisTaps> resample_taps(int in, int out, Interp interp);

void resample(std::span<const double> in, PlaneShape in_shape, PlaneShape out_shape,
              Interp interp, std::span<double> out);
void resample_adjoint(std::span<const double> in, PlaneShape in_shape, PlaneShape out_shape,
                      Interp interp, std::span<double> out);

enum class SobelDirection { kHorizontal = 0, kVertical = 1, kDiagonal = 2, kAntiDiagonal = 3 };

const Kernel2D& sobel_kernel(SobelDirection d);
const std::array<Kernel2D, 4>& sobel_kernels();

// ---- Grid2D operators ------------------------------------------------------

// Mask-aware replicate correlation: valid-weight renormalization, pixels whose
// valid-weight sum vanishes come out masked. Kernel must be odd-sized.
Grid2D conv_replicate(const Grid2D& image, const Kernel2D& kernel);

// Catmull-Rom (a = -0.5) resampling to out_w x out_h. Pixel size scales with
// the width ratio.
Grid2D bicubic_resize(const Grid2D& image, int out_w, int out_h);

// Gaussian blur followed by bicubic decimation by r (the observation operator).
Grid2D mtf_degrade(const Grid2D& hr, int r, double sigma_px);

// Responses of the four 3x3 directional Sobel filters.
std::array<Grid2D, 4> sobel_directional(const Grid2D& image);

// image - conv_replicate(image, kernel)
Grid2D highpass(const Grid2D& image, const Kernel2D& kernel);

// ---- operator pairs --------------------------------------------------------

struct OpSpec {
  std::string descriptor;  // gaussian_conv | bicubic_down | bicubic_up | sobel_k | highpass
  PlaneShape shape;        // input shape of the forward map
  double sigma_px = 1.0;
  int radius = -1;  // -1: ceil(3 sigma)
  int factor = 4;
  int sobel_index = 0;  // for sobel_k; also accepted as "sobel_0".."sobel_3"
};

// Dense linear map with its adjoint; input/output are row-major planes.
struct LinearOp {
  std::string descriptor;
  PlaneShape in_shape;
  PlaneShape out_shape;
  std::function<void(std::span<const double>, std::span<double>)> forward;
  std::function<void(std::span<const double>, std::span<double>)> adjoint;

  std::vector<double> apply(std::span<const double> x) const;
  std::vector<double> apply_adjoint(std::span<const double> y) const;
};

LinearOp make_operator(const OpSpec& spec);

// Observation operator H on dense planes and its adjoint.
LinearOp observation_operator(PlaneShape hr_shape, int r, double sigma_px);

}  // namespace sifsr::linops
