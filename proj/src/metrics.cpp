#include "sifsr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "fft.hpp"
#include "sifsr/error.hpp"
#include "sifsr/linops.hpp"

namespace sifsr::metrics {

namespace {

void require_pair(const Grid2D& sr, const Grid2D& ref, const char* what) {
  if (!same_shape(sr, ref)) {
    throw DataError(std::string(what) + ": image shapes differ (" + std::to_string(sr.width()) +
                    "x" + std::to_string(sr.height()) + " vs " + std::to_string(ref.width()) +
                    "x" + std::to_string(ref.height()) + ")");
  }
}

double rmse_where(const Grid2D& sr, const Grid2D& ref, const std::vector<std::uint8_t>& keep,
                  const char* what) {
  double ss = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < sr.size(); ++i) {
    if (!keep[i]) continue;
    const double d = sr.values()[i] - ref.values()[i];
    ss += d * d;
    ++n;
  }
  if (n == 0) throw DataError(std::string(what) + ": no jointly valid pixels");
  return std::sqrt(ss / static_cast<double>(n));
}

}  // namespace

double rmse(const Grid2D& sr, const Grid2D& ref) {
  require_pair(sr, ref, "rmse");
  std::vector<std::uint8_t> keep(sr.size());
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = sr.valid(i) && ref.valid(i);
  return rmse_where(sr, ref, keep, "rmse");
}

double rmse_q75(const Grid2D& sr, const Grid2D& ref) {
  require_pair(sr, ref, "rmse_q75");
  const auto g = linops::sobel_directional(ref);
  std::vector<double> mag(ref.size(), 0.0);
  std::vector<double> pool;
  for (std::size_t i = 0; i < mag.size(); ++i) {
    if (!sr.valid(i) || !ref.valid(i) || !g[0].valid(i) || !g[1].valid(i)) continue;
    mag[i] = std::hypot(g[0].values()[i], g[1].values()[i]);
    pool.push_back(mag[i]);
  }
  if (pool.empty()) throw DataError("rmse_q75: no jointly valid pixels");
  std::sort(pool.begin(), pool.end());
  const double pos = 0.75 * static_cast<double>(pool.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, pool.size() - 1);
  const double q = pool[lo] + (pos - static_cast<double>(lo)) * (pool[hi] - pool[lo]);
  std::vector<std::uint8_t> keep(sr.size(), 0);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    keep[i] = sr.valid(i) && ref.valid(i) && g[0].valid(i) && g[1].valid(i) && mag[i] >= q;
  }
  return rmse_where(sr, ref, keep, "rmse_q75");
}

void SsimConfig::validate() const {
  if (window < 1 || window % 2 == 0) throw ConfigError("SsimConfig: window must be positive and odd");
  if (!(k1 > 0.0) || !(k2 > 0.0)) throw ConfigError("SsimConfig: K1 and K2 must be positive");
}

double ssim_mean(const Grid2D& sr, const Grid2D& ref, const SsimConfig& cfg) {
  cfg.validate();
  require_pair(sr, ref, "ssim_mean");
  const int w = sr.width(), h = sr.height(), k = cfg.window;
  if (w < k || h < k) throw DataError("ssim_mean: image smaller than the window");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < sr.size(); ++i) {
    if (!sr.valid(i) || !ref.valid(i)) continue;
    lo = std::min({lo, sr.values()[i], ref.values()[i]});
    hi = std::max({hi, sr.values()[i], ref.values()[i]});
  }
  if (!(hi > lo)) throw DataError("ssim_mean: zero joint data range");
  const double range = hi - lo;
  const double c1 = (cfg.k1 * range) * (cfg.k1 * range);
  const double c2 = (cfg.k2 * range) * (cfg.k2 * range);
  const double n = static_cast<double>(k) * k;
  double total = 0.0;
  long long windows = 0;
  for (int y0 = 0; y0 + k <= h; ++y0) {
    for (int x0 = 0; x0 + k <= w; ++x0) {
      double sx = 0.0, sy = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
      bool ok = true;
      for (int y = y0; y < y0 + k && ok; ++y) {
        for (int x = x0; x < x0 + k; ++x) {
          if (!sr.valid(x, y) || !ref.valid(x, y)) {
            ok = false;
            break;
          }
          const double a = sr(x, y), b = ref(x, y);
          sx += a;
          sy += b;
          sxx += a * a;
          syy += b * b;
          sxy += a * b;
        }
      }
      if (!ok) continue;
      // identical expression shapes for x and y keep ssim(x, x) exactly 1
      const double mx = sx / n, my = sy / n;
      const double vx = sxx / n - mx * mx;
      const double vy = syy / n - my * my;
      const double cxy = sxy / n - mx * my;
      total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) /
               ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++windows;
    }
  }
  if (windows == 0) throw DataError("ssim_mean: no fully valid window");
  return total / static_cast<double>(windows);
}

// ---- spectra -------------------------------------------------------------------

double RadialSpectrum::nu_cycles_per_px(std::size_t ring) const {
  return static_cast<double>(ring) / size;
}
double RadialSpectrum::nu_per_m(std::size_t ring) const {
  return nu_cycles_per_px(ring) / pixel_size;
}
double AttenuationSpectrum::nu_cycles_per_px(std::size_t ring) const {
  return static_cast<double>(ring) / size;
}
double AttenuationSpectrum::nu_per_m(std::size_t ring) const {
  return nu_cycles_per_px(ring) / pixel_size;
}

Grid2D center_square(const Grid2D& image) {
  const int n = std::min(image.width(), image.height());
  return crop(image, (image.width() - n) / 2, (image.height() - n) / 2, n, n);
}

RadialSpectrum radial_spectrum(const Grid2D& image, bool hann) {
  if (image.width() != image.height()) {
    throw ConfigError("radial_spectrum: image must be square, crop it first");
  }
  if (!image.fully_valid()) throw DataError("radial_spectrum: masked pixels present");
  const int n = image.width();
  std::vector<double> plane(image.values().begin(), image.values().end());
  if (hann) {
    std::vector<double> win(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) win[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) plane[static_cast<std::size_t>(y) * n + x] *= win[x] * win[y];
  }
  const auto f = fft::forward(plane, n, n);
  const int half = n / 2;
  const int rings = static_cast<int>(std::lround(std::sqrt(2.0) * half)) + 1;
  RadialSpectrum s;
  s.size = n;
  s.pixel_size = image.pixel_size();
  s.magnitude.assign(static_cast<std::size_t>(rings), 0.0);
  s.power.assign(static_cast<std::size_t>(rings), 0.0);
  s.count.assign(static_cast<std::size_t>(rings), 0);
  for (int y = 0; y < n; ++y) {
    const int ky = y < n - half ? y : y - n;
    for (int x = 0; x < n; ++x) {
      const int kx = x < n - half ? x : x - n;
      const auto ring = static_cast<std::size_t>(
          std::lround(std::sqrt(static_cast<double>(kx * kx + ky * ky))));
      const double m = std::abs(f[static_cast<std::size_t>(y) * n + x]);
      s.magnitude[ring] += m;
      s.power[ring] += m * m;
      ++s.count[ring];
    }
  }
  for (std::size_t r = 0; r < s.magnitude.size(); ++r) {
    if (s.count[r] == 0) continue;
    s.magnitude[r] /= static_cast<double>(s.count[r]);
    s.power[r] /= static_cast<double>(s.count[r]);
  }
  return s;
}

AttenuationSpectrum attenuation_spectrum(const RadialSpectrum& f) {
  if (f.magnitude.empty() || !(f.magnitude[0] > 0.0)) {
    throw DataError("attenuation_spectrum: zero DC magnitude");
  }
  AttenuationSpectrum a;
  a.size = f.size;
  a.pixel_size = f.pixel_size;
  a.count = f.count;
  a.db.resize(f.magnitude.size());
  const double ref = std::log10(f.magnitude[0]);
  a.db[0] = 0.0;
  for (std::size_t r = 1; r < f.magnitude.size(); ++r) {
    const double v = f.magnitude[r] > 0.0 ? 10.0 * (std::log10(f.magnitude[r]) - ref)
                                          : kAttenuationFloorDb;
    a.db[r] = std::max(v, kAttenuationFloorDb);
  }
  return a;
}

AttenuationSpectrum attenuation_spectrum(const Grid2D& image, bool hann) {
  return attenuation_spectrum(radial_spectrum(image, hann));
}

namespace {

void require_rings(const AttenuationSpectrum& a, const AttenuationSpectrum& b, const char* what) {
  if (a.db.size() != b.db.size() || a.size != b.size) {
    throw DataError(std::string(what) + ": spectra are on different ring grids");
  }
  if (a.db.size() < 2) throw DataError(std::string(what) + ": no ring beyond DC");
}

double gap(const AttenuationSpectrum& ref, const AttenuationSpectrum& bic, const char* what) {
  double d = 0.0;
  for (std::size_t r = 1; r < ref.db.size(); ++r) d += std::max(ref.db[r] - bic.db[r], 0.0);
  if (!(d > 0.0)) {
    throw DataError(std::string(what) + ": reference spectrum never exceeds bicubic");
  }
  return d;
}

}  // namespace

double rmse_attenuation(const AttenuationSpectrum& sr, const AttenuationSpectrum& ref) {
  require_rings(sr, ref, "rmse_attenuation");
  double ss = 0.0;
  for (std::size_t r = 1; r < sr.db.size(); ++r) {
    const double d = sr.db[r] - ref.db[r];
    ss += d * d;
  }
  return std::sqrt(ss / static_cast<double>(sr.db.size() - 1));
}

double frr(const AttenuationSpectrum& sr, const AttenuationSpectrum& ref,
           const AttenuationSpectrum& bic) {
  require_rings(sr, ref, "frr");
  require_rings(bic, ref, "frr");
  const double denom = gap(ref, bic, "frr");
  double num = 0.0;
  for (std::size_t r = 1; r < sr.db.size(); ++r) {
    const double room = std::max(ref.db[r] - bic.db[r], 0.0);
    num += std::clamp(sr.db[r] - bic.db[r], 0.0, room);
  }
  return num / denom;
}

double fro(const AttenuationSpectrum& sr, const AttenuationSpectrum& ref,
           const AttenuationSpectrum& bic) {
  require_rings(sr, ref, "fro");
  require_rings(bic, ref, "fro");
  const double denom = gap(ref, bic, "fro");
  double num = 0.0;
  for (std::size_t r = 1; r < sr.db.size(); ++r) num += std::max(sr.db[r] - ref.db[r], 0.0);
  return num / denom;
}

Scores score_scene(const Grid2D& sr, const Grid2D& ref, const Grid2D& bicubic) {
  Scores s;
  s.rmse = rmse(sr, ref);
  s.rmse_q75 = rmse_q75(sr, ref);
  s.ssim = ssim_mean(sr, ref);
  const auto a_sr = attenuation_spectrum(center_square(sr));
  const auto a_ref = attenuation_spectrum(center_square(ref));
  const auto a_bic = attenuation_spectrum(center_square(bicubic));
  s.frr = frr(a_sr, a_ref, a_bic);
  s.fro = fro(a_sr, a_ref, a_bic);
  s.rmse_f = rmse_attenuation(a_sr, a_ref);
  return s;
}

nlohmann::json to_json(const Scores& s) {
  return {{"rmse", s.rmse}, {"rmse_q75", s.rmse_q75}, {"ssim", s.ssim},
          {"frr", s.frr},   {"fro", s.fro},           {"rmse_f", s.rmse_f}};
}

}  // namespace sifsr::metrics
