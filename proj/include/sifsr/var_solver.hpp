#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "json.hpp"
#include "sifsr/linops.hpp"
#include "sifsr/objective.hpp"
#include "sifsr/raster.hpp"

// Direct per-image minimization of the SIF objective over the pixels of the
// high-resolution image. The objective is convex in the pixels; gradients are
// assembled from operator adjoints and the Huber derivative.
namespace sifsr::varsolve {

enum class Init { kBicubicUp, kConstantMean };

struct SolveConfig {
  int max_iters = 2000;
  double lr = 0.05;
  // Stop once the best loss improved by less than rel_tol (relative) over the
  // last 10 iterations and the learning rate sits at its floor.
  double rel_tol = 1e-12;
  Init init = Init::kBicubicUp;
  // Halve the learning rate after `patience` iterations without a new best,
  // down to lr * min_lr_ratio.
  int patience = 25;
  double min_lr_ratio = 1e-4;

  void validate() const;
};

nlohmann::json to_json(const SolveConfig& cfg);
SolveConfig solve_config_from_json(const nlohmann::json& j);

// SIF objective on dense standardized planes for one fully valid pair.
class DirectObjective {
 public:
  DirectObjective(const ScenePair& standardized, const objective::SifConfig& cfg);

  // Loss at x (hr plane, row-major); writes d loss / d x when grad is non-empty.
  objective::LossBreakdown evaluate(std::span<const double> x, std::span<double> grad) const;

  linops::PlaneShape hr_shape() const { return hr_; }

 private:
  objective::SifConfig cfg_;
  linops::PlaneShape hr_;
  linops::LinearOp h_;
  std::vector<linops::LinearOp> g_;
  std::vector<double> lst_lr_;
  std::vector<std::vector<double>> target_;  // gamma * G_c(V)
};

struct TraceRow {
  int iter = 0;
  double rec = 0.0;
  double texture = 0.0;
  double total = 0.0;
  double best_total = 0.0;
};

struct SolveResult {
  Grid2D sr;                     // Kelvin, best iterate
  objective::LossBreakdown best;  // standardized units
  objective::LossBreakdown initial;
  int best_iter = 0;
  int iterations = 0;
  bool converged = false;
  std::vector<TraceRow> trace;
};

// `initial` (Kelvin, on the NDVI grid) overrides cfg.init when given.
SolveResult solve_direct(const ScenePair& pair, const objective::SifConfig& sif_cfg,
                         const SolveConfig& solve_cfg, const NormStats& stats,
                         const Grid2D* initial = nullptr);
// Standardization statistics taken from the pair itself.
SolveResult solve_direct(const ScenePair& pair, const objective::SifConfig& sif_cfg,
                         const SolveConfig& solve_cfg);

void write_trace_csv(const std::vector<TraceRow>& trace, const std::filesystem::path& path);

}  // namespace sifsr::varsolve
