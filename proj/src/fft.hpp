#pragma once

#include <complex>
#include <vector>

// Thin FFTW wrappers for row-major real planes. Plans use FFTW_ESTIMATE so the
// algorithm choice, and therefore the output bits, do not depend on timing.
namespace sifsr::fft {

// Full complex spectrum (h x w, row-major) of a real plane; unnormalized.
std::vector<std::complex<double>> forward(const std::vector<double>& plane, int w, int h);

// Half spectrum (h x (w/2 + 1)) of a real plane; unnormalized.
std::vector<std::complex<double>> forward_half(const std::vector<double>& plane, int w, int h);

// Inverse of forward_half including the 1/(w h) factor.
std::vector<double> inverse_half(std::vector<std::complex<double>> half, int w, int h);

}  // namespace sifsr::fft
