#include "fft.hpp"

#include <fftw3.h>

#include <mutex>

#include "sifsr/error.hpp"

namespace sifsr::fft {
namespace {

// The FFTW planner is not thread safe; execution is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

void require_plane(std::size_t n, int w, int h) {
  if (w < 1 || h < 1 || n != static_cast<std::size_t>(w) * static_cast<std::size_t>(h)) {
    throw DataError("fft: plane size does not match its dimensions");
  }
}

}  // namespace

std::vector<std::complex<double>> forward_half(const std::vector<double>& plane, int w, int h) {
  require_plane(plane.size(), w, h);
  const int wh = w / 2 + 1;
  std::vector<double> in(plane);
  std::vector<std::complex<double>> out(static_cast<std::size_t>(h) * wh);
  fftw_plan p;
  {
    std::lock_guard<std::mutex> lock(planner_mutex());
    p = fftw_plan_dft_r2c_2d(h, w, in.data(), reinterpret_cast<fftw_complex*>(out.data()),
                             FFTW_ESTIMATE);
  }
  fftw_execute(p);
  {
    std::lock_guard<std::mutex> lock(planner_mutex());
    fftw_destroy_plan(p);
  }
  return out;
}

std::vector<std::complex<double>> forward(const std::vector<double>& plane, int w, int h) {
  const auto half = forward_half(plane, w, h);
  const int wh = w / 2 + 1;
  std::vector<std::complex<double>> full(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      std::complex<double> v;
      if (x < wh) {
        v = half[static_cast<std::size_t>(y) * wh + x];
      } else {
        // Hermitian symmetry: X[y][x] = conj(X[-y][-x])
        const int my = (h - y) % h;
        const int mx = w - x;
        v = std::conj(half[static_cast<std::size_t>(my) * wh + mx]);
      }
      full[static_cast<std::size_t>(y) * w + x] = v;
    }
  }
  return full;
}

std::vector<double> inverse_half(std::vector<std::complex<double>> half, int w, int h) {
  const int wh = w / 2 + 1;
  if (w < 1 || h < 1 || half.size() != static_cast<std::size_t>(h) * wh) {
    throw DataError("fft: half spectrum does not match its dimensions");
  }
  std::vector<double> out(static_cast<std::size_t>(w) * h);
  fftw_plan p;
  {
    std::lock_guard<std::mutex> lock(planner_mutex());
    p = fftw_plan_dft_c2r_2d(h, w, reinterpret_cast<fftw_complex*>(half.data()), out.data(),
                             FFTW_ESTIMATE);
  }
  fftw_execute(p);
  {
    std::lock_guard<std::mutex> lock(planner_mutex());
    fftw_destroy_plan(p);
  }
  const double norm = 1.0 / (static_cast<double>(w) * h);
  for (double& v : out) v *= norm;
  return out;
}

}  // namespace sifsr::fft
