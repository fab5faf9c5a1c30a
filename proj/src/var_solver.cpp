#include "sifsr/var_solver.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "sifsr/autodiff.hpp"
#include "sifsr/error.hpp"

namespace sifsr::varsolve {

void SolveConfig::validate() const {
  if (max_iters < 1) throw ConfigError("SolveConfig: max_iters must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("SolveConfig: lr must be positive");
  if (!(rel_tol > 0.0)) throw ConfigError("SolveConfig: rel_tol must be positive");
  if (patience < 1) throw ConfigError("SolveConfig: patience must be >= 1");
  if (!(min_lr_ratio > 0.0 && min_lr_ratio <= 1.0)) {
    throw ConfigError("SolveConfig: min_lr_ratio must lie in (0, 1]");
  }
}

nlohmann::json to_json(const SolveConfig& c) {
  return {{"max_iters", c.max_iters},
          {"lr", c.lr},
          {"rel_tol", c.rel_tol},
          {"init", c.init == Init::kBicubicUp ? "bicubic_up" : "constant_mean"},
          {"patience", c.patience},
          {"min_lr_ratio", c.min_lr_ratio}};
}

SolveConfig solve_config_from_json(const nlohmann::json& j) {
  SolveConfig c;
  try {
    c.max_iters = j.value("max_iters", c.max_iters);
    c.lr = j.value("lr", c.lr);
    c.rel_tol = j.value("rel_tol", c.rel_tol);
    c.patience = j.value("patience", c.patience);
    c.min_lr_ratio = j.value("min_lr_ratio", c.min_lr_ratio);
    const std::string init = j.value("init", std::string("bicubic_up"));
    if (init == "bicubic_up") {
      c.init = Init::kBicubicUp;
    } else if (init == "constant_mean") {
      c.init = Init::kConstantMean;
    } else {
      throw ConfigError("SolveConfig: unknown init '" + init + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("SolveConfig: ") + e.what());
  }
  c.validate();
  return c;
}

DirectObjective::DirectObjective(const ScenePair& pair, const objective::SifConfig& cfg)
    : cfg_(cfg) {
  cfg_.validate();
  pair.validate();
  if (pair.scale_factor != cfg_.scale_factor) {
    throw ConfigError("DirectObjective: pair and objective disagree on the scale factor");
  }
  if (!pair.lst_lr.fully_valid() || !pair.ndvi_hr.fully_valid()) {
    throw DataError("DirectObjective: the direct solver needs fully valid rasters");
  }
  hr_ = {pair.ndvi_hr.width(), pair.ndvi_hr.height()};
  h_ = linops::observation_operator(hr_, cfg_.scale_factor, cfg_.mtf_sigma_px);
  if (cfg_.texture_op == objective::TextureOp::kSobel) {
    for (int k = 0; k < 4; ++k) {
      linops::OpSpec s;
      s.descriptor = "sobel_k";
      s.shape = hr_;
      s.sobel_index = k;
      g_.push_back(linops::make_operator(s));
    }
  } else {
    linops::OpSpec s;
    s.descriptor = "highpass";
    s.shape = hr_;
    s.sigma_px = cfg_.mtf_sigma_px;
    g_.push_back(linops::make_operator(s));
  }
  lst_lr_.assign(pair.lst_lr.values().begin(), pair.lst_lr.values().end());
  for (const auto& g : g_) {
    auto t = g.apply(pair.ndvi_hr.values());
    for (double& v : t) v *= cfg_.gamma;
    target_.push_back(std::move(t));
  }
}

objective::LossBreakdown DirectObjective::evaluate(std::span<const double> x,
                                                   std::span<double> grad) const {
  if (x.size() != hr_.size()) throw DataError("DirectObjective: candidate has the wrong size");
  const bool want_grad = !grad.empty();
  if (want_grad && grad.size() != x.size()) throw DataError("DirectObjective: gradient size mismatch");
  const double delta = cfg_.huber_delta;
  objective::LossBreakdown b;

  // reconstruction: mean huber(T_lr - Hx)
  std::vector<double> hx = h_.apply(x);
  const double nl = static_cast<double>(hx.size());
  std::vector<double> psi(hx.size());
  for (std::size_t i = 0; i < hx.size(); ++i) {
    const double r = lst_lr_[i] - hx[i];
    b.rec_term += objective::huber(r, delta);
    psi[i] = objective::huber_derivative(r, delta);
  }
  b.rec_term /= nl;
  if (want_grad) {
    const auto back = h_.apply_adjoint(psi);
    const double c = -(1.0 - cfg_.alpha) / nl;
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = c * back[i];
  }

  // texture: channel mean of mean huber(gamma G_c V - G_c x)
  const double nh = static_cast<double>(x.size());
  const double nc = static_cast<double>(g_.size());
  std::vector<double> chi(x.size());
  for (std::size_t c = 0; c < g_.size(); ++c) {
    const auto gx = g_[c].apply(x);
    double s = 0.0;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double r = target_[c][i] - gx[i];
      s += objective::huber(r, delta);
      chi[i] = objective::huber_derivative(r, delta);
    }
    b.texture_term += s / nh;
    if (want_grad) {
      const auto back = g_[c].apply_adjoint(chi);
      const double k = -cfg_.alpha / (nc * nh);
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += k * back[i];
    }
  }
  b.texture_term /= nc;
  b.total = cfg_.alpha * b.texture_term + (1.0 - cfg_.alpha) * b.rec_term;
  return b;
}

SolveResult solve_direct(const ScenePair& pair, const objective::SifConfig& sif_cfg,
                         const SolveConfig& cfg, const NormStats& stats, const Grid2D* initial) {
  cfg.validate();
  stats.validate();
  const ScenePair s = objective::standardize_pair(pair, stats);
  const DirectObjective obj(s, sif_cfg);
  const auto shape = obj.hr_shape();

  std::vector<double> x;
  if (initial) {
    require_same_shape(*initial, pair.ndvi_hr, "solve_direct initial image");
    const Grid2D init = objective::standardize(*initial, stats.lst_mean, stats.lst_std);
    x.assign(init.values().begin(), init.values().end());
  } else if (cfg.init == Init::kBicubicUp) {
    const Grid2D up = linops::bicubic_resize(s.lst_lr, shape.width, shape.height);
    x.assign(up.values().begin(), up.values().end());
  } else {
    x.assign(shape.size(), masked_stats(s.lst_lr).mean);
  }

  SolveResult res;
  std::vector<double> grad(x.size());
  std::vector<double> best_x = x;
  double best = std::numeric_limits<double>::infinity();
  int since_best = 0;
  ad::AdamState adam;
  adam.lr = cfg.lr;
  const double lr_floor = cfg.lr * cfg.min_lr_ratio;
  std::vector<double> best_history;

  for (int it = 0; it < cfg.max_iters; ++it) {
    const objective::LossBreakdown b = obj.evaluate(x, grad);
    if (!std::isfinite(b.total)) {
      throw NumericError("solve_direct: non-finite loss at iteration " + std::to_string(it) +
                         " (rec " + std::to_string(b.rec_term) + ", texture " +
                         std::to_string(b.texture_term) + ")");
    }
    if (it == 0) res.initial = b;
    if (b.total < best) {
      best = b.total;
      best_x = x;
      res.best = b;
      res.best_iter = it;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      adam.lr = std::max(lr_floor, 0.5 * adam.lr);
      since_best = 0;
    }
    res.trace.push_back({it, b.rec_term, b.texture_term, b.total, best});
    best_history.push_back(best);
    res.iterations = it + 1;
    if (best == 0.0) {
      res.converged = true;
      break;
    }
    if (it >= 10 && adam.lr <= lr_floor) {
      const double before = best_history[best_history.size() - 11];
      if (before - best <= cfg.rel_tol * std::abs(before)) {
        res.converged = true;
        break;
      }
    }
    std::vector<std::span<double>> ps{x};
    std::vector<std::span<const double>> gs{grad};
    ad::adam_step(ps, gs, adam);
  }

  Grid2D sr(shape.width, shape.height, pair.ndvi_hr.pixel_size(), best_x);
  res.sr = objective::destandardize(sr, stats.lst_mean, stats.lst_std);
  res.sr.set_units(pair.lst_lr.units().empty() ? "K" : pair.lst_lr.units());
  return res;
}

SolveResult solve_direct(const ScenePair& pair, const objective::SifConfig& sif_cfg,
                         const SolveConfig& solve_cfg) {
  const std::vector<ScenePair> one{pair};
  return solve_direct(pair, sif_cfg, solve_cfg, compute_norm_stats(one));
}

void write_trace_csv(const std::vector<TraceRow>& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("write_trace_csv: cannot open " + path.string());
  out << "iter,rec,texture,total,best_total\n";
  char buf[160];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,%.10g\n", r.iter, r.rec, r.texture,
                  r.total, r.best_total);
    out << buf;
  }
}

}  // namespace sifsr::varsolve
