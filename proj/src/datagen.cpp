#include "sifsr/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "fft.hpp"
#include "sifsr/error.hpp"
#include "sifsr/linops.hpp"

namespace sifsr::datagen {

void SynthConfig::validate() const {
  if (scale_factor < 2) throw ConfigError("SynthConfig: scale_factor must be >= 2");
  if (hr_size < 2 * scale_factor || hr_size % scale_factor != 0) {
    throw ConfigError("SynthConfig: hr_size must be a multiple of scale_factor (and >= 2r)");
  }
  if (!(hr_pixel_size_m > 0.0)) throw ConfigError("SynthConfig: pixel size must be positive");
  if (!(noise_std >= 0.0)) throw ConfigError("SynthConfig: noise_std must be >= 0");
  if (!std::isfinite(spectral_slope) || !std::isfinite(gamma_true) ||
      !std::isfinite(coarse_coupling) || !std::isfinite(independent_texture) || !std::isfinite(smooth_trend) ||
      !std::isfinite(reference_bias) || !std::isfinite(base_temperature)) {
    throw ConfigError("SynthConfig: parameters must be finite");
  }
}

double SynthConfig::sigma() const {
  return mtf_sigma_px > 0.0 ? mtf_sigma_px : linops::default_mtf_sigma(scale_factor);
}

nlohmann::json to_json(const SynthConfig& c) {
  return {{"hr_size", c.hr_size},
          {"scale_factor", c.scale_factor},
          {"hr_pixel_size_m", c.hr_pixel_size_m},
          {"spectral_slope", c.spectral_slope},
          {"gamma_true", c.gamma_true},
          {"coarse_coupling", c.coarse_coupling},
          {"independent_texture", c.independent_texture},
          {"smooth_trend", c.smooth_trend},
          {"base_temperature", c.base_temperature},
          {"noise_std", c.noise_std},
          {"reference_bias", c.reference_bias},
          {"mtf_sigma_px", c.sigma()},
          {"seed", c.seed}};
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  try {
    c.hr_size = j.value("hr_size", c.hr_size);
    c.scale_factor = j.value("scale_factor", c.scale_factor);
    c.hr_pixel_size_m = j.value("hr_pixel_size_m", c.hr_pixel_size_m);
    c.spectral_slope = j.value("spectral_slope", c.spectral_slope);
    c.gamma_true = j.value("gamma_true", c.gamma_true);
    c.coarse_coupling = j.value("coarse_coupling", c.coarse_coupling);
    c.independent_texture = j.value("independent_texture", c.independent_texture);
    c.smooth_trend = j.value("smooth_trend", c.smooth_trend);
    c.base_temperature = j.value("base_temperature", c.base_temperature);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.reference_bias = j.value("reference_bias", c.reference_bias);
    c.mtf_sigma_px = j.value("mtf_sigma_px", c.mtf_sigma_px);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("SynthConfig: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<double> power_law_field(int size, double slope, std::uint64_t seed) {
  if (size < 2) throw ConfigError("power_law_field: size must be >= 2");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> white(static_cast<std::size_t>(size) * size);
  for (double& v : white) v = normal(rng);
  auto half = fft::forward_half(white, size, size);
  const int wh = size / 2 + 1;
  for (int y = 0; y < size; ++y) {
    const double ky = y <= size / 2 ? y : y - size;
    for (int x = 0; x < wh; ++x) {
      const double k = std::hypot(static_cast<double>(x), ky);
      auto& c = half[static_cast<std::size_t>(y) * wh + x];
      // power ~ k^slope, so amplitude ~ k^(slope / 2)
      c = k == 0.0 ? 0.0 : c * std::pow(k, 0.5 * slope);
    }
  }
  std::vector<double> field = fft::inverse_half(std::move(half), size, size);
  double mean = 0.0;
  for (double v : field) mean += v;
  mean /= static_cast<double>(field.size());
  double ss = 0.0;
  for (double v : field) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(field.size()));
  for (double& v : field) v = sd > 0.0 ? (v - mean) / sd : 0.0;
  return field;
}

EvalTriple synth_scene(const SynthConfig& cfg) {
  cfg.validate();
  const int n = cfg.hr_size;
  const std::size_t count = static_cast<std::size_t>(n) * n;
  // independent streams for texture, trend and noise
  std::seed_seq seq{cfg.seed, static_cast<std::uint64_t>(0x5eed)};
  std::vector<std::uint64_t> seeds(3);
  seq.generate(seeds.begin(), seeds.end());

  std::vector<double> v = power_law_field(n, cfg.spectral_slope, seeds[0]);
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double vmin = *lo, span = *hi - *lo;
  for (double& x : v) x = span > 0.0 ? (x - vmin) / span : 0.5;
  Grid2D ndvi(n, n, cfg.hr_pixel_size_m, v);
  ndvi.set_units("1");

  const Grid2D wide = linops::conv_replicate(ndvi, linops::gaussian_kernel(cfg.scale_factor).kernel);
  double wide_mean = 0.0;
  for (double x : wide.values()) wide_mean += x;
  wide_mean /= static_cast<double>(count);

  const std::vector<double> trend = power_law_field(n, -4.0, seeds[1]);
  std::mt19937_64 noise_rng(seeds[2]);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> t(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double fine = v[i] - wide.values()[i];
    t[i] = cfg.base_temperature + cfg.smooth_trend * trend[i] +
           cfg.coarse_coupling * (wide.values()[i] - wide_mean) + cfg.gamma_true * fine +
           cfg.noise_std * normal(noise_rng);
  }
  if (cfg.independent_texture != 0.0) {
    // separate stream so that scenes without this term keep their values
    std::seed_seq extra{cfg.seed, static_cast<std::uint64_t>(0x1de9)};
    std::uint64_t s = 0;
    extra.generate(&s, &s + 1);
    const std::vector<double> own = power_law_field(n, cfg.spectral_slope, s);
    for (std::size_t i = 0; i < count; ++i) t[i] += cfg.independent_texture * own[i];
  }
  Grid2D t_hr(n, n, cfg.hr_pixel_size_m, t);
  t_hr.set_units("K");

  EvalTriple out{{linops::mtf_degrade(t_hr, cfg.scale_factor, cfg.sigma()), ndvi, cfg.scale_factor},
                 t_hr};
  if (cfg.reference_bias != 0.0) {
    std::vector<double> b(t_hr.values().begin(), t_hr.values().end());
    for (double& x : b) x += cfg.reference_bias;
    out.ref_hr = t_hr.with_values(std::move(b));
  }
  out.pair.lst_lr.set_units("K");
  out.validate();
  return out;
}

namespace {

std::vector<Patch> slice(const ScenePair& pair, const Grid2D* ref, int lr_patch, bool reject) {
  pair.validate();
  if (lr_patch < 1) throw ConfigError("slice_patches: patch size must be positive");
  const int r = pair.scale_factor;
  const int hp = lr_patch * r;
  std::vector<Patch> out;
  for (int y = 0; y + lr_patch <= pair.lst_lr.height(); y += lr_patch) {
    for (int x = 0; x + lr_patch <= pair.lst_lr.width(); x += lr_patch) {
      Patch p;
      p.lr_x0 = x;
      p.lr_y0 = y;
      p.triple.pair = {crop(pair.lst_lr, x, y, lr_patch, lr_patch),
                       crop(pair.ndvi_hr, x * r, y * r, hp, hp), r};
      p.has_reference = ref != nullptr;
      p.triple.ref_hr = ref ? crop(*ref, x * r, y * r, hp, hp) : Grid2D(hp, hp, pair.ndvi_hr.pixel_size());
      if (reject && (!p.triple.pair.lst_lr.fully_valid() || !p.triple.pair.ndvi_hr.fully_valid() ||
                     !p.triple.ref_hr.fully_valid())) {
        continue;
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

}  // namespace

std::vector<Patch> slice_patches(const ScenePair& pair, int lr_patch, bool reject_masked) {
  return slice(pair, nullptr, lr_patch, reject_masked);
}

std::vector<Patch> slice_patches(const EvalTriple& triple, int lr_patch, bool reject_masked) {
  triple.validate();
  return slice(triple.pair, &triple.ref_hr, lr_patch, reject_masked);
}

Grid2D degrade_reference(const Grid2D& ref, double target_gsd_m, double half_width_m) {
  if (!(target_gsd_m > 0.0)) throw ConfigError("degrade_reference: target GSD must be positive");
  const double ex = ref.width() * ref.pixel_size();
  const double ey = ref.height() * ref.pixel_size();
  if (target_gsd_m > ex || target_gsd_m > ey) {
    throw ConfigError("degrade_reference: target GSD coarser than the image extent");
  }
  const double hw = half_width_m > 0.0 ? half_width_m : target_gsd_m;
  const Grid2D blurred =
      linops::conv_replicate(ref, linops::gaussian_from_half_width(hw, ref.pixel_size()).kernel);
  const int w = std::max(1, static_cast<int>(std::lround(ex / target_gsd_m)));
  const int h = std::max(1, static_cast<int>(std::lround(ey / target_gsd_m)));
  const Grid2D resized = linops::bicubic_resize(blurred, w, h);
  Grid2D out(w, h, target_gsd_m, std::vector<double>(resized.values().begin(), resized.values().end()),
             std::vector<std::uint8_t>(resized.mask().begin(), resized.mask().end()));
  out.set_units(ref.units());
  return out;
}

}  // namespace sifsr::datagen
