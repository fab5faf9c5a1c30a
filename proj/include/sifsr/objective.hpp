#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "sifsr/linops.hpp"
#include "sifsr/raster.hpp"

// The scale-invariance-free objective: a Huber reconstruction term comparing
// the degraded candidate with the observed low-resolution LST, and a Huber
// texture term comparing texture operators of the candidate and of the
// gamma-scaled vegetation index. All terms are evaluated in standardized units.
namespace sifsr::objective {

enum class TextureOp { kSobel, kHighpass };

std::string to_string(TextureOp op);
TextureOp texture_op_from_string(const std::string& name);

struct SifConfig {
  double alpha = 0.99;
  double gamma = -0.5;
  double huber_delta = 1.0;
  TextureOp texture_op = TextureOp::kSobel;
  double mtf_sigma_px = 2.0;
  int scale_factor = 4;

  void validate() const;
};

// Named presets: "sif1" (Sobel texture) and "sif2" (high-pass texture).
SifConfig preset(const std::string& name, int scale_factor = 4);

nlohmann::json to_json(const SifConfig& cfg);
SifConfig sif_config_from_json(const nlohmann::json& j);

struct LossBreakdown {
  double total = 0.0;
  double rec_term = 0.0;
  double texture_term = 0.0;
};

double huber(double residual, double delta);
double huber_derivative(double residual, double delta);

// Mean of huber(a - b) over jointly valid pixels.
double huber_mean(const Grid2D& a, const Grid2D& b, double delta);

// Texture channels G(image): four Sobel responses or one high-pass field.
std::vector<Grid2D> texture_channels(const Grid2D& image, const SifConfig& cfg);

double reconstruction_loss(const Grid2D& candidate, const Grid2D& lst_lr, const SifConfig& cfg);
double texture_loss(const Grid2D& candidate, const Grid2D& ndvi_hr, const SifConfig& cfg);

// Both inputs are expected in standardized units (see standardize_pair).
LossBreakdown sif_loss(const Grid2D& candidate, const ScenePair& pair, const SifConfig& cfg);

Grid2D standardize(const Grid2D& grid, double mean, double std);
Grid2D destandardize(const Grid2D& grid, double mean, double std);
ScenePair standardize_pair(const ScenePair& pair, const NormStats& stats);

}  // namespace sifsr::objective
