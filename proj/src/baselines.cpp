#include "sifsr/baselines.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "sifsr/error.hpp"
#include "sifsr/linops.hpp"

namespace sifsr::baselines {

void BaselineConfig::validate() const {
  if (neighborhood < 1 || neighborhood % 2 == 0) {
    throw ConfigError("BaselineConfig: neighborhood must be a positive odd number");
  }
  if (max_lag_px < 0) throw ConfigError("BaselineConfig: max_lag_px must be >= 0");
}

double BaselineConfig::sigma(int r) const {
  return mtf_sigma_px >= 0.0 ? mtf_sigma_px : linops::default_mtf_sigma(r);
}

nlohmann::json to_json(const BaselineConfig& c) {
  return {{"mtf_sigma_px", c.mtf_sigma_px},
          {"neighborhood", c.neighborhood},
          {"max_lag_px", c.max_lag_px}};
}

BaselineConfig baseline_config_from_json(const nlohmann::json& j) {
  BaselineConfig c;
  try {
    c.mtf_sigma_px = j.value("mtf_sigma_px", c.mtf_sigma_px);
    c.neighborhood = j.value("neighborhood", c.neighborhood);
    c.max_lag_px = j.value("max_lag_px", c.max_lag_px);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("BaselineConfig: ") + e.what());
  }
  c.validate();
  return c;
}

Grid2D degrade_ndvi(const Grid2D& ndvi_hr, int r, double sigma_px) {
  return linops::mtf_degrade(ndvi_hr, r, sigma_px);
}

LinearModel fit_linear(const Grid2D& lst_lr, const Grid2D& ndvi_lr) {
  require_same_shape(lst_lr, ndvi_lr, "fit_linear");
  // two-pass centered sums keep the slope exact for exactly linear data
  double n = 0.0, mt = 0.0, mv = 0.0;
  for (std::size_t i = 0; i < lst_lr.size(); ++i) {
    if (!lst_lr.valid(i) || !ndvi_lr.valid(i)) continue;
    n += 1.0;
    mt += lst_lr.values()[i];
    mv += ndvi_lr.values()[i];
  }
  if (n < 2.0) throw DataError("fit_linear: fewer than 2 jointly valid pixels");
  mt /= n;
  mv /= n;
  double svv = 0.0, stv = 0.0;
  for (std::size_t i = 0; i < lst_lr.size(); ++i) {
    if (!lst_lr.valid(i) || !ndvi_lr.valid(i)) continue;
    const double dv = ndvi_lr.values()[i] - mv;
    svv += dv * dv;
    stv += (lst_lr.values()[i] - mt) * dv;
  }
  // relative test: rounding in the mean leaves a tiny spread on constant input
  if (!(std::sqrt(svv / n) > 1e-12 * std::max(1.0, std::abs(mv)))) {
    throw DataError("fit_linear: NDVI is constant on the coarse grid");
  }
  LinearModel m;
  m.slope = stv / svv;
  m.intercept = mt - m.slope * mv;
  std::vector<double> res(lst_lr.size(), 0.0);
  std::vector<std::uint8_t> mask(lst_lr.size(), 0);
  for (std::size_t i = 0; i < res.size(); ++i) {
    if (!lst_lr.valid(i) || !ndvi_lr.valid(i)) continue;
    res[i] = lst_lr.values()[i] - (m.slope * ndvi_lr.values()[i] + m.intercept);
    mask[i] = 1;
  }
  m.residual_lr = Grid2D(lst_lr.width(), lst_lr.height(), lst_lr.pixel_size(), std::move(res),
                         std::move(mask));
  m.residual_lr.set_units(lst_lr.units());
  return m;
}

Grid2D bicubic_baseline(const ScenePair& pair) {
  pair.validate();
  Grid2D out = linops::bicubic_resize(pair.lst_lr, pair.ndvi_hr.width(), pair.ndvi_hr.height());
  out.set_units(pair.lst_lr.units().empty() ? "K" : pair.lst_lr.units());
  return out;
}

namespace {

// a * V_hr + b + residual_hr, masked where either term is.
Grid2D regression_plus(const ScenePair& pair, const LinearModel& m, const Grid2D& residual_hr) {
  const Grid2D& v = pair.ndvi_hr;
  require_same_shape(v, residual_hr, "regression residual");
  std::vector<double> out(v.size(), 0.0);
  std::vector<std::uint8_t> mask(v.size(), 0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v.valid(i) || !residual_hr.valid(i)) continue;
    out[i] = m.slope * v.values()[i] + m.intercept + residual_hr.values()[i];
    mask[i] = 1;
  }
  Grid2D g(v.width(), v.height(), v.pixel_size(), std::move(out), std::move(mask));
  g.set_units(pair.lst_lr.units().empty() ? "K" : pair.lst_lr.units());
  return g;
}

LinearModel fit_pair(const ScenePair& pair, const BaselineConfig& cfg) {
  cfg.validate();
  pair.validate();
  const int r = pair.scale_factor;
  return fit_linear(pair.lst_lr, degrade_ndvi(pair.ndvi_hr, r, cfg.sigma(r)));
}

}  // namespace

Grid2D tsharp_sharpen(const ScenePair& pair, const BaselineConfig& cfg) {
  const LinearModel m = fit_pair(pair, cfg);
  return regression_plus(pair, m, nn_upsample(m.residual_lr, pair.scale_factor));
}

// ---- variogram -----------------------------------------------------------------

EmpiricalVariogram empirical_variogram(const Grid2D& residual, int max_lag_px) {
  if (max_lag_px < 1) throw ConfigError("empirical_variogram: max_lag_px must be >= 1");
  if (residual.valid_count() < 30) {
    throw DataError("empirical_variogram: needs at least 30 valid pixels, got " +
                    std::to_string(residual.valid_count()));
  }
  const int w = residual.width();
  const int h = residual.height();
  std::vector<double> sum(static_cast<std::size_t>(max_lag_px) + 1, 0.0);
  std::vector<long long> count(sum.size(), 0);
  // each unordered pair once: offsets with dy > 0, or dy == 0 and dx > 0
  for (int dy = 0; dy <= max_lag_px; ++dy) {
    for (int dx = -max_lag_px; dx <= max_lag_px; ++dx) {
      if (dy == 0 && dx <= 0) continue;
      const long lag = std::lround(std::sqrt(static_cast<double>(dx * dx + dy * dy)));
      if (lag > max_lag_px) continue;
      double s = 0.0;
      long long n = 0;
      for (int y = 0; y + dy < h; ++y) {
        for (int x = std::max(0, -dx); x < w && x + dx < w; ++x) {
          if (!residual.valid(x, y) || !residual.valid(x + dx, y + dy)) continue;
          const double d = residual(x, y) - residual(x + dx, y + dy);
          s += 0.5 * d * d;
          ++n;
        }
      }
      sum[static_cast<std::size_t>(lag)] += s;
      count[static_cast<std::size_t>(lag)] += n;
    }
  }
  EmpiricalVariogram ev;
  for (int lag = 1; lag <= max_lag_px; ++lag) {
    const auto k = static_cast<std::size_t>(lag);
    if (count[k] == 0) continue;
    ev.lags_m.push_back(lag * residual.pixel_size());
    ev.semivariance.push_back(sum[k] / static_cast<double>(count[k]));
    ev.pairs.push_back(count[k]);
  }
  if (ev.lags_m.empty()) throw DataError("empirical_variogram: no pixel pairs within reach");
  return ev;
}

double VariogramModel::gamma(double h_m) const {
  if (h_m <= 0.0) return 0.0;
  return nugget + partial_sill * (1.0 - std::exp(-3.0 * h_m / range_m));
}

double VariogramModel::covariance(double h_m) const {
  return nugget + partial_sill - gamma(h_m);
}

namespace {

struct Fit {
  double nugget = 0.0;
  double sill = 0.0;
  double sse = std::numeric_limits<double>::infinity();
};

double weighted_sse(const EmpiricalVariogram& e, double c0, double c1, double range) {
  double s = 0.0;
  for (std::size_t k = 0; k < e.lags_m.size(); ++k) {
    const double m = c0 + c1 * (1.0 - std::exp(-3.0 * e.lags_m[k] / range));
    const double d = e.semivariance[k] - m;
    s += static_cast<double>(e.pairs[k]) * d * d;
  }
  return s;
}

// Non-negative weighted least squares in (nugget, sill) at a fixed range.
Fit fit_at_range(const EmpiricalVariogram& e, double range) {
  double sw = 0.0, sf = 0.0, sff = 0.0, sg = 0.0, sfg = 0.0;
  for (std::size_t k = 0; k < e.lags_m.size(); ++k) {
    const double w = static_cast<double>(e.pairs[k]);
    const double f = 1.0 - std::exp(-3.0 * e.lags_m[k] / range);
    sw += w;
    sf += w * f;
    sff += w * f * f;
    sg += w * e.semivariance[k];
    sfg += w * f * e.semivariance[k];
  }
  Fit best;
  auto consider = [&](double c0, double c1) {
    if (c0 < 0.0 || c1 < 0.0) return;
    const double sse = weighted_sse(e, c0, c1, range);
    if (sse < best.sse) best = {c0, c1, sse};
  };
  const double det = sw * sff - sf * sf;
  if (std::abs(det) > 1e-14 * sw * sff) {
    consider((sff * sg - sf * sfg) / det, (sw * sfg - sf * sg) / det);
  }
  consider(sg / sw, 0.0);
  if (sff > 0.0) consider(0.0, std::max(0.0, sfg / sff));
  return best;
}

}  // namespace

VariogramModel fit_variogram(const EmpiricalVariogram& e) {
  if (e.lags_m.size() < 3) throw DataError("fit_variogram: needs at least 3 lag bins");
  if (e.semivariance.size() != e.lags_m.size() || e.pairs.size() != e.lags_m.size()) {
    throw DataError("fit_variogram: inconsistent empirical variogram");
  }
  const double hmin = *std::min_element(e.lags_m.begin(), e.lags_m.end());
  const double hmax = *std::max_element(e.lags_m.begin(), e.lags_m.end());

  const double lo = std::log(0.1 * hmin);
  const double hi = std::log(20.0 * hmax);
  const int grid = 120;
  double best_log = lo;
  Fit best;
  for (int i = 0; i <= grid; ++i) {
    const double t = lo + (hi - lo) * i / grid;
    const Fit f = fit_at_range(e, std::exp(t));
    if (f.sse < best.sse) {
      best = f;
      best_log = t;
    }
  }
  // golden-section refinement in log range between the neighboring grid nodes
  const double step = (hi - lo) / grid;
  double a = std::max(lo, best_log - step);
  double b = std::min(hi, best_log + step);
  const double g = 0.5 * (std::sqrt(5.0) - 1.0);
  double x1 = b - g * (b - a), x2 = a + g * (b - a);
  Fit f1 = fit_at_range(e, std::exp(x1)), f2 = fit_at_range(e, std::exp(x2));
  for (int it = 0; it < 60; ++it) {
    if (f1.sse <= f2.sse) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - g * (b - a);
      f1 = fit_at_range(e, std::exp(x1));
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + g * (b - a);
      f2 = fit_at_range(e, std::exp(x2));
    }
  }
  if (f1.sse < best.sse) {
    best = f1;
    best_log = x1;
  }
  if (f2.sse < best.sse) {
    best = f2;
    best_log = x2;
  }

  VariogramModel m;
  m.empirical = e;
  double flat_c0 = 0.0, sw = 0.0;
  for (std::size_t k = 0; k < e.lags_m.size(); ++k) {
    flat_c0 += static_cast<double>(e.pairs[k]) * e.semivariance[k];
    sw += static_cast<double>(e.pairs[k]);
  }
  flat_c0 /= sw;
  const double flat_sse = weighted_sse(e, flat_c0, 0.0, 1.0);
  if (!std::isfinite(best.sse) || !(best.sill > 0.0) || !(best.sse < flat_sse)) {
    m.nugget = flat_c0;
    m.partial_sill = 0.0;
    m.range_m = hmax;
    m.pure_nugget_fallback = true;
    return m;
  }
  m.nugget = best.nugget;
  m.partial_sill = best.sill;
  m.range_m = std::exp(best_log);
  return m;
}

// ---- area-to-point kriging -------------------------------------------------------

std::span<const double> KrigingPlan::at(int tx, int ty, int px, int py) const {
  const std::size_t n = static_cast<std::size_t>(window) * window;
  const std::size_t idx = ((static_cast<std::size_t>(ty) * window + tx) * r + py) * r + px;
  return std::span<const double>(weights).subspan(idx * n, n);
}

namespace {

// Stationary covariance tables on the fine grid, indexed by block offsets.
class SupportCovariance {
 public:
  SupportCovariance(const VariogramModel& m, int r, double fine_m, int window)
      : r_(r), span_(window - 1) {
    // point covariance by integer fine offset, |dx|, |dy| <= (span + 1) * r
    const int reach = (span_ + 1) * r_;
    point_w_ = reach + 1;
    point_.resize(static_cast<std::size_t>(point_w_) * point_w_);
    for (int dy = 0; dy <= reach; ++dy) {
      for (int dx = 0; dx <= reach; ++dx) {
        point_[static_cast<std::size_t>(dy) * point_w_ + dx] =
            m.covariance(fine_m * std::hypot(static_cast<double>(dx), static_cast<double>(dy)));
      }
    }
    const int nb = 2 * span_ + 1;
    area_.assign(static_cast<std::size_t>(nb) * nb, 0.0);
    for (int by = -span_; by <= span_; ++by) {
      for (int bx = -span_; bx <= span_; ++bx) {
        double s = 0.0;
        for (int qy = 0; qy < r_; ++qy)
          for (int qx = 0; qx < r_; ++qx)
            for (int py = 0; py < r_; ++py)
              for (int px = 0; px < r_; ++px) s += point(bx * r_ + qx - px, by * r_ + qy - py);
        area_[static_cast<std::size_t>(by + span_) * nb + bx + span_] = s / std::pow(r_, 4);
      }
    }
    // point (px, py) of block 0 against block (bx, by)
    point_area_.assign(static_cast<std::size_t>(r_) * r_ * nb * nb, 0.0);
    for (int py = 0; py < r_; ++py)
      for (int px = 0; px < r_; ++px)
        for (int by = -span_; by <= span_; ++by)
          for (int bx = -span_; bx <= span_; ++bx) {
            double s = 0.0;
            for (int qy = 0; qy < r_; ++qy)
              for (int qx = 0; qx < r_; ++qx) s += point(bx * r_ + qx - px, by * r_ + qy - py);
            point_area_[pa_index(px, py, bx, by)] = s / (r_ * r_);
          }
  }

  double area(int bx, int by) const {
    const int nb = 2 * span_ + 1;
    return area_[static_cast<std::size_t>(by + span_) * nb + bx + span_];
  }
  double point_area(int px, int py, int bx, int by) const {
    return point_area_[pa_index(px, py, bx, by)];
  }
  double variance() const { return point_[0]; }

 private:
  double point(int dx, int dy) const {
    return point_[static_cast<std::size_t>(std::abs(dy)) * point_w_ + std::abs(dx)];
  }
  std::size_t pa_index(int px, int py, int bx, int by) const {
    const int nb = 2 * span_ + 1;
    return ((static_cast<std::size_t>(py) * r_ + px) * nb + by + span_) * nb + bx + span_;
  }

  int r_;
  int span_;
  int point_w_ = 0;
  std::vector<double> point_;
  std::vector<double> area_;
  std::vector<double> point_area_;
};

struct Block {
  int x;
  int y;
};

// Unit-sum kriging weights of `neighbors` for every fine pixel of `target`,
// laid out [(py * r + px) * neighbors.size() + k]. Returns false when the
// system stays singular after the ridge.
bool solve_block(const SupportCovariance& cov, const std::vector<Block>& neighbors, Block target,
                 int r, std::vector<double>& out, bool& ridge_used) {
  const int n = static_cast<int>(neighbors.size());
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n + 1, n + 1);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      a(i, j) = cov.area(neighbors[j].x - neighbors[i].x, neighbors[j].y - neighbors[i].y);
    }
    a(i, n) = 1.0;
    a(n, i) = 1.0;
  }
  Eigen::MatrixXd rhs(n + 1, r * r);
  for (int py = 0; py < r; ++py) {
    for (int px = 0; px < r; ++px) {
      const int c = py * r + px;
      for (int i = 0; i < n; ++i) {
        rhs(i, c) = cov.point_area(px, py, neighbors[i].x - target.x, neighbors[i].y - target.y);
      }
      rhs(n, c) = 1.0;
    }
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
  if (!lu.isInvertible()) {
    ridge_used = true;
    for (int i = 0; i < n; ++i) a(i, i) += 1e-8 * std::max(1.0, std::abs(cov.variance()));
    lu.compute(a);
    if (!lu.isInvertible()) return false;
  }
  const Eigen::MatrixXd sol = lu.solve(rhs);
  out.assign(static_cast<std::size_t>(r) * r * n, 0.0);
  for (int c = 0; c < r * r; ++c) {
    for (int k = 0; k < n; ++k) out[static_cast<std::size_t>(c) * n + k] = sol(k, c);
  }
  return true;
}

// First coarse index of the window of length `win` around `t` inside [0, len).
int window_start(int t, int win, int len) {
  return std::clamp(t - win / 2, 0, len - win);
}

}  // namespace

KrigingPlan make_kriging_plan(const VariogramModel& model, int r, double fine_pixel_m,
                              int window) {
  if (r < 1) throw ConfigError("make_kriging_plan: factor must be >= 1");
  if (window < 1 || window % 2 == 0) {
    throw ConfigError("make_kriging_plan: window must be a positive odd number");
  }
  KrigingPlan plan;
  plan.window = window;
  plan.r = r;
  const std::size_t nn = static_cast<std::size_t>(window) * window;
  plan.weights.assign(nn * nn * r * r, 0.0);
  auto nearest = [&](int tx, int ty) {
    for (int py = 0; py < r; ++py)
      for (int px = 0; px < r; ++px) {
        const std::size_t base =
            (((static_cast<std::size_t>(ty) * window + tx) * r + py) * r + px) * nn;
        plan.weights[base + static_cast<std::size_t>(ty) * window + tx] = 1.0;
      }
  };
  if (model.pure_nugget_fallback || !(model.partial_sill > 0.0)) {
    plan.nn_fallback = true;
    for (int ty = 0; ty < window; ++ty)
      for (int tx = 0; tx < window; ++tx) nearest(tx, ty);
    return plan;
  }
  const SupportCovariance cov(model, r, fine_pixel_m, window);
  std::vector<Block> nb;
  for (int y = 0; y < window; ++y)
    for (int x = 0; x < window; ++x) nb.push_back({x, y});
  std::vector<double> w;
  for (int ty = 0; ty < window; ++ty) {
    for (int tx = 0; tx < window; ++tx) {
      if (!solve_block(cov, nb, {tx, ty}, r, w, plan.ridge_used)) {
        plan.nn_fallback = true;
        nearest(tx, ty);
        continue;
      }
      const std::size_t base = (static_cast<std::size_t>(ty) * window + tx) * r * r * nn;
      std::copy(w.begin(), w.end(), plan.weights.begin() + static_cast<std::ptrdiff_t>(base));
    }
  }
  return plan;
}

Grid2D atp_kriging(const Grid2D& residual_lr, const VariogramModel& model, int r,
                   int neighborhood) {
  if (neighborhood < 1 || neighborhood % 2 == 0) {
    throw ConfigError("atp_kriging: neighborhood must be a positive odd number");
  }
  if (r < 1) throw ConfigError("atp_kriging: factor must be >= 1");
  const int lw = residual_lr.width();
  const int lh = residual_lr.height();
  // a window never exceeds the grid; non-square grids use the shorter side
  const int win = std::min({neighborhood, lw, lh});
  const double fine_m = residual_lr.pixel_size() / r;
  const KrigingPlan plan = make_kriging_plan(model, r, fine_m, win);
  const bool full = residual_lr.fully_valid();
  const SupportCovariance* cov = nullptr;
  std::unique_ptr<SupportCovariance> owned;
  if (!full && !plan.nn_fallback) {
    owned = std::make_unique<SupportCovariance>(model, r, fine_m, win);
    cov = owned.get();
  }

  const int w = lw * r;
  std::vector<double> out(static_cast<std::size_t>(w) * lh * r, 0.0);
  std::vector<std::uint8_t> mask(out.size(), 0);
  std::vector<Block> nb;
  std::vector<double> local;
  for (int by = 0; by < lh; ++by) {
    for (int bx = 0; bx < lw; ++bx) {
      if (!residual_lr.valid(bx, by)) continue;
      const int x0 = window_start(bx, win, lw);
      const int y0 = window_start(by, win, lh);
      bool window_full = true;
      for (int y = y0; y < y0 + win && window_full; ++y)
        for (int x = x0; x < x0 + win; ++x)
          if (!residual_lr.valid(x, y)) window_full = false;

      bool use_local = false;
      if (!window_full && cov != nullptr) {
        nb.clear();
        for (int y = y0; y < y0 + win; ++y)
          for (int x = x0; x < x0 + win; ++x)
            if (residual_lr.valid(x, y)) nb.push_back({x, y});
        bool ridge = false;
        use_local = solve_block(*cov, nb, {bx, by}, r, local, ridge);
      }
      for (int py = 0; py < r; ++py) {
        for (int px = 0; px < r; ++px) {
          double v = 0.0;
          if (use_local) {
            const std::size_t base = (static_cast<std::size_t>(py) * r + px) * nb.size();
            for (std::size_t k = 0; k < nb.size(); ++k) {
              v += local[base + k] * residual_lr(nb[k].x, nb[k].y);
            }
          } else if (window_full && !plan.nn_fallback) {
            const auto wts = plan.at(bx - x0, by - y0, px, py);
            for (int y = 0; y < win; ++y)
              for (int x = 0; x < win; ++x)
                v += wts[static_cast<std::size_t>(y) * win + x] * residual_lr(x0 + x, y0 + y);
          } else {
            v = residual_lr(bx, by);
          }
          const std::size_t i = static_cast<std::size_t>(by * r + py) * w + bx * r + px;
          out[i] = v;
          mask[i] = 1;
        }
      }
    }
  }
  Grid2D g(w, lh * r, fine_m, std::move(out), std::move(mask));
  g.set_units(residual_lr.units());
  return g;
}

Grid2D atprk_sharpen(const ScenePair& pair, const BaselineConfig& cfg) {
  const LinearModel m = fit_pair(pair, cfg);
  const int lw = m.residual_lr.width();
  const int lh = m.residual_lr.height();
  const int lag = cfg.max_lag_px > 0 ? cfg.max_lag_px : std::clamp(std::min(lw, lh) / 2, 1, 16);
  VariogramModel vm;
  try {
    vm = fit_variogram(empirical_variogram(m.residual_lr, lag));
  } catch (const DataError&) {
    // too little data for a variogram: nearest-neighbor residuals
    vm.pure_nugget_fallback = true;
  }
  return regression_plus(pair, m,
                         atp_kriging(m.residual_lr, vm, pair.scale_factor, cfg.neighborhood));
}

}  // namespace sifsr::baselines
