#include "sifsr/objective.hpp"

#include <cmath>

#include "sifsr/error.hpp"

namespace sifsr::objective {

std::string to_string(TextureOp op) { return op == TextureOp::kSobel ? "sobel" : "highpass"; }

TextureOp texture_op_from_string(const std::string& name) {
  if (name == "sobel" || name == "SOBEL") return TextureOp::kSobel;
  if (name == "highpass" || name == "HIGHPASS") return TextureOp::kHighpass;
  throw ConfigError("unknown texture operator '" + name + "'");
}

void SifConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("SifConfig: alpha must lie in [0, 1]");
  if (!(huber_delta > 0.0)) throw ConfigError("SifConfig: huber_delta must be positive");
  if (!(mtf_sigma_px > 0.0)) throw ConfigError("SifConfig: mtf_sigma_px must be positive");
  if (scale_factor < 2) throw ConfigError("SifConfig: scale_factor must be >= 2");
  if (!std::isfinite(gamma)) throw ConfigError("SifConfig: gamma must be finite");
}

SifConfig preset(const std::string& name, int scale_factor) {
  SifConfig cfg;
  cfg.scale_factor = scale_factor;
  cfg.mtf_sigma_px = linops::default_mtf_sigma(scale_factor);
  if (name == "sif1") {
    cfg.alpha = 0.99;
    cfg.gamma = -0.5;
    cfg.texture_op = TextureOp::kSobel;
  } else if (name == "sif2") {
    cfg.alpha = 0.10;
    cfg.gamma = -0.25;
    cfg.texture_op = TextureOp::kHighpass;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected sif1 or sif2)");
  }
  return cfg;
}

nlohmann::json to_json(const SifConfig& cfg) {
  return {{"alpha", cfg.alpha},
          {"gamma", cfg.gamma},
          {"huber_delta", cfg.huber_delta},
          {"texture_op", to_string(cfg.texture_op)},
          {"mtf_sigma_px", cfg.mtf_sigma_px},
          {"scale_factor", cfg.scale_factor}};
}

SifConfig sif_config_from_json(const nlohmann::json& j) {
  SifConfig cfg;
  try {
    if (j.contains("preset")) {
      cfg = preset(j.at("preset").get<std::string>(), j.value("scale_factor", 4));
    }
    cfg.alpha = j.value("alpha", cfg.alpha);
    cfg.gamma = j.value("gamma", cfg.gamma);
    cfg.huber_delta = j.value("huber_delta", cfg.huber_delta);
    if (j.contains("texture_op")) cfg.texture_op = texture_op_from_string(j.at("texture_op"));
    cfg.scale_factor = j.value("scale_factor", cfg.scale_factor);
    cfg.mtf_sigma_px = j.value("mtf_sigma_px", linops::default_mtf_sigma(cfg.scale_factor));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("SifConfig: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

double huber(double residual, double delta) {
  const double a = std::abs(residual);
  return a <= delta ? 0.5 * residual * residual : delta * (a - 0.5 * delta);
}

double huber_derivative(double residual, double delta) {
  if (residual > delta) return delta;
  if (residual < -delta) return -delta;
  return residual;
}

double huber_mean(const Grid2D& a, const Grid2D& b, double delta) {
  require_same_shape(a, b, "huber_mean");
  if (!(delta > 0.0)) throw ConfigError("huber_mean: delta must be positive");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a.valid(i) || !b.valid(i)) continue;
    sum += huber(a.values()[i] - b.values()[i], delta);
    ++n;
  }
  if (n == 0) throw DataError("huber_mean: no jointly valid pixels");
  return sum / static_cast<double>(n);
}

std::vector<Grid2D> texture_channels(const Grid2D& image, const SifConfig& cfg) {
  if (cfg.texture_op == TextureOp::kSobel) {
    auto s = linops::sobel_directional(image);
    return {s.begin(), s.end()};
  }
  return {linops::highpass(image, linops::gaussian_kernel(cfg.mtf_sigma_px).kernel)};
}

double reconstruction_loss(const Grid2D& candidate, const Grid2D& lst_lr, const SifConfig& cfg) {
  const int r = cfg.scale_factor;
  if (candidate.width() != r * lst_lr.width() || candidate.height() != r * lst_lr.height()) {
    throw DataError("reconstruction_loss: candidate must be r times the LST grid");
  }
  return huber_mean(lst_lr, linops::mtf_degrade(candidate, r, cfg.mtf_sigma_px), cfg.huber_delta);
}

double texture_loss(const Grid2D& candidate, const Grid2D& ndvi_hr, const SifConfig& cfg) {
  require_same_shape(candidate, ndvi_hr, "texture_loss");
  const auto target = texture_channels(ndvi_hr, cfg);
  const auto current = texture_channels(candidate, cfg);
  double sum = 0.0;
  for (std::size_t c = 0; c < target.size(); ++c) {
    std::vector<double> scaled(target[c].values().begin(), target[c].values().end());
    for (double& v : scaled) v *= cfg.gamma;
    sum += huber_mean(target[c].with_values(std::move(scaled)), current[c], cfg.huber_delta);
  }
  // channels are averaged, not summed
  return sum / static_cast<double>(target.size());
}

LossBreakdown sif_loss(const Grid2D& candidate, const ScenePair& pair, const SifConfig& cfg) {
  cfg.validate();
  LossBreakdown b;
  b.rec_term = reconstruction_loss(candidate, pair.lst_lr, cfg);
  b.texture_term = texture_loss(candidate, pair.ndvi_hr, cfg);
  b.total = cfg.alpha * b.texture_term + (1.0 - cfg.alpha) * b.rec_term;
  return b;
}

Grid2D standardize(const Grid2D& grid, double mean, double std) {
  if (!(std > 0.0)) throw ConfigError("standardize: std must be positive");
  std::vector<double> v(grid.values().begin(), grid.values().end());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (grid.valid(i)) v[i] = (v[i] - mean) / std;
  }
  return grid.with_values(std::move(v));
}

Grid2D destandardize(const Grid2D& grid, double mean, double std) {
  if (!(std > 0.0)) throw ConfigError("destandardize: std must be positive");
  std::vector<double> v(grid.values().begin(), grid.values().end());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (grid.valid(i)) v[i] = v[i] * std + mean;
  }
  return grid.with_values(std::move(v));
}

ScenePair standardize_pair(const ScenePair& pair, const NormStats& stats) {
  stats.validate();
  return {standardize(pair.lst_lr, stats.lst_mean, stats.lst_std),
          standardize(pair.ndvi_hr, stats.ndvi_mean, stats.ndvi_std), pair.scale_factor};
}

}  // namespace sifsr::objective
