#include <cmath>
#include <random>

#include "doctest.h"
#include "sifsr/baselines.hpp"
#include "sifsr/datagen.hpp"
#include "sifsr/error.hpp"
#include "sifsr/linops.hpp"
#include "test_util.hpp"

using namespace sifsr;
using namespace sifsr::baselines;

namespace {

EvalTriple scene(std::uint64_t seed, int size = 64) {
  datagen::SynthConfig c;
  c.seed = seed;
  c.hr_size = size;
  return datagen::synth_scene(c);
}

// LST exactly affine in NDVI at both scales: T_lr = H(a V + b) = a H(V) + b.
ScenePair linear_scene(std::uint64_t seed, double a, double b) {
  const ScenePair p = scene(seed).pair;
  std::vector<double> t(p.ndvi_hr.values().begin(), p.ndvi_hr.values().end());
  for (double& v : t) v = a * v + b;
  const Grid2D hr = p.ndvi_hr.with_values(t);
  return {linops::mtf_degrade(hr, 4, 2.0), p.ndvi_hr, 4};
}

double mean_abs_diff(const Grid2D& x, const Grid2D& y) {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += std::abs(x.values()[i] - y.values()[i]);
  return s / static_cast<double>(x.size());
}

// Dense Gaussian elimination with partial pivoting, for the kriging oracle.
std::vector<double> solve_dense(std::vector<std::vector<double>> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t p = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[p][c])) p = r;
    std::swap(a[c], a[p]);
    std::swap(b[c], b[p]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    for (std::size_t k = i + 1; k < n; ++k) s -= a[i][k] * x[k];
    x[i] = s / a[i][i];
  }
  return x;
}

}  // namespace

TEST_CASE("degrade_ndvi delegates to the observation operator") {
  const EvalTriple t = scene(1);
  const Grid2D v = degrade_ndvi(t.pair.ndvi_hr, 4, 2.0);
  CHECK(test::max_abs_diff(v.values(), linops::mtf_degrade(t.pair.ndvi_hr, 4, 2.0).values()) == 0.0);
  CHECK(v.width() == 16);
  const Grid2D flat = degrade_ndvi(Grid2D(32, 32, 250.0, 0.3), 4, 2.0);
  for (double x : flat.values()) {
    CHECK(x == doctest::Approx(0.3).epsilon(1e-14));
  }
}

TEST_CASE("fit_linear") {
  SUBCASE("exact affine data") {
    const Grid2D v = test::random_grid(12, 10, 3, 0.0, 1.0, 1000.0);
    std::vector<double> t(v.size());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = -3.0 * v.values()[i] + 300.0;
    const LinearModel m = fit_linear(v.with_values(t), v);
    CHECK(std::abs(m.slope + 3.0) < 1e-10);
    CHECK(std::abs(m.intercept - 300.0) < 1e-10);
    for (double r : m.residual_lr.values()) CHECK(std::abs(r) < 1e-10);
  }
  SUBCASE("residual mean vanishes and masked pixels are ignored") {
    const Grid2D v = test::random_grid(16, 16, 4, 0.0, 1.0, 1000.0);
    Grid2D t = test::random_grid(16, 16, 5, 290.0, 310.0, 1000.0);
    t.set_valid(3, 3, false);
    t(3, 3) = 1e9;
    const LinearModel m = fit_linear(t, v);
    CHECK_FALSE(m.residual_lr.valid(3, 3));
    CHECK(std::abs(masked_stats(m.residual_lr).mean) < 1e-10);
  }
  SUBCASE("uncorrelated noise gives a slope within 3 standard errors of zero") {
    int outside = 0;
    for (std::uint64_t s = 0; s < 50; ++s) {
      const Grid2D v = test::random_grid(16, 16, 100 + s, 0.0, 1.0, 1000.0);
      std::mt19937_64 rng(500 + s);
      std::normal_distribution<double> noise(300.0, 2.0);
      std::vector<double> t(v.size());
      for (double& x : t) x = noise(rng);
      const LinearModel m = fit_linear(v.with_values(t), v);
      const auto vs = masked_stats(v);
      const double svv = vs.std * vs.std * static_cast<double>(v.size());
      const auto rs = masked_stats(m.residual_lr);
      const double s2 = rs.std * rs.std * static_cast<double>(v.size()) / (v.size() - 2.0);
      if (std::abs(m.slope) > 3.0 * std::sqrt(s2 / svv)) ++outside;
    }
    CHECK(outside <= 2);
  }
  SUBCASE("degenerate inputs") {
    const Grid2D flat(8, 8, 1000.0, 0.4);
    CHECK_THROWS_AS(fit_linear(test::random_grid(8, 8, 1, 290, 300, 1000.0), flat), DataError);
    Grid2D one(2, 1, 1000.0, 300.0);
    one.set_valid(1, 0, false);
    CHECK_THROWS_AS(fit_linear(one, test::random_grid(2, 1, 2, 0, 1, 1000.0)), DataError);
  }
}

TEST_CASE("bicubic baseline") {
  const ScenePair p{Grid2D(8, 8, 1000.0, 301.0), Grid2D(32, 32, 250.0, 0.5), 4};
  const Grid2D out = bicubic_baseline(p);
  CHECK(same_shape(out, p.ndvi_hr));
  CHECK(out.pixel_size() == 250.0);
  for (double v : out.values()) CHECK(v == doctest::Approx(301.0).epsilon(1e-14));
}

TEST_CASE("exactly linear scenes are recovered by TsHARP and ATPRK") {
  const ScenePair p = linear_scene(11, -15.0, 310.0);
  const Grid2D ts = tsharp_sharpen(p);
  const Grid2D at = atprk_sharpen(p);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const double truth = -15.0 * p.ndvi_hr.values()[i] + 310.0;
    CHECK(std::abs(ts.values()[i] - truth) <= 1e-8);
    CHECK(std::abs(at.values()[i] - truth) <= 1e-8);
    CHECK(std::abs(at.values()[i] - ts.values()[i]) <= 1e-8);
  }
}

TEST_CASE("TsHARP residual is constant on each coarse block") {
  const EvalTriple t = scene(12);
  const Grid2D out = tsharp_sharpen(t.pair);
  const LinearModel m = fit_linear(t.pair.lst_lr, degrade_ndvi(t.pair.ndvi_hr, 4, 2.0));
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      const double res = out(x, y) - (m.slope * t.pair.ndvi_hr(x, y) + m.intercept);
      CHECK(res == doctest::Approx(m.residual_lr(x / 4, y / 4)).epsilon(1e-9));
    }
  }
}

TEST_CASE("TsHARP reproduces the observation better than bicubic on the synthetic suite") {
  double ts = 0.0, bic = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const EvalTriple t = scene(1000 + s);
    ts += mean_abs_diff(linops::mtf_degrade(tsharp_sharpen(t.pair), 4, 2.0), t.pair.lst_lr);
    bic += mean_abs_diff(linops::mtf_degrade(bicubic_baseline(t.pair), 4, 2.0), t.pair.lst_lr);
  }
  CHECK(ts < bic);
}

TEST_CASE("empirical variogram") {
  SUBCASE("constant field") {
    const auto ev = empirical_variogram(Grid2D(10, 10, 1000.0, 3.0), 4);
    REQUIRE(ev.lags_m.size() == 4);
    CHECK(ev.lags_m.front() == 1000.0);
    for (double g : ev.semivariance) CHECK(g == 0.0);
  }
  SUBCASE("matches an all-pairs oracle") {
    Grid2D z = test::random_grid(9, 7, 21, -1.0, 1.0, 500.0);
    z.set_valid(4, 2, false);
    const int max_lag = 5;
    std::vector<double> sum(max_lag + 1, 0.0);
    std::vector<long long> cnt(max_lag + 1, 0);
    for (std::size_t i = 0; i < z.size(); ++i) {
      for (std::size_t j = i + 1; j < z.size(); ++j) {
        if (!z.valid(i) || !z.valid(j)) continue;
        const double dx = static_cast<double>(i % 9) - static_cast<double>(j % 9);
        const double dy = static_cast<double>(i / 9) - static_cast<double>(j / 9);
        const long h = std::lround(std::hypot(dx, dy));
        if (h > max_lag) continue;
        const double d = z.values()[i] - z.values()[j];
        sum[h] += 0.5 * d * d;
        ++cnt[h];
      }
    }
    const auto ev = empirical_variogram(z, max_lag);
    REQUIRE(ev.lags_m.size() == static_cast<std::size_t>(max_lag));
    for (int h = 1; h <= max_lag; ++h) {
      CHECK(ev.pairs[h - 1] == cnt[h]);
      CHECK(ev.semivariance[h - 1] == doctest::Approx(sum[h] / cnt[h]).epsilon(1e-12));
      CHECK(ev.lags_m[h - 1] == 500.0 * h);
    }
  }
  SUBCASE("white noise has a flat semivariance at its variance") {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n(0.0, 2.0);
    std::vector<double> v(64 * 64);
    for (double& x : v) x = n(rng);
    const auto ev = empirical_variogram(Grid2D(64, 64, 1000.0, v), 8);
    for (double g : ev.semivariance) CHECK(g == doctest::Approx(4.0).epsilon(0.1));
  }
  SUBCASE("too few pixels") {
    CHECK_THROWS_AS(empirical_variogram(Grid2D(5, 5, 1000.0, 0.0), 2), DataError);
    CHECK_THROWS_AS(empirical_variogram(Grid2D(8, 8, 1000.0, 0.0), 0), ConfigError);
  }
}

TEST_CASE("variogram fit") {
  EmpiricalVariogram e;
  VariogramModel truth;
  truth.nugget = 0.2;
  truth.partial_sill = 1.0;
  truth.range_m = 3000.0;
  for (int h = 1; h <= 8; ++h) {
    e.lags_m.push_back(1000.0 * h);
    e.semivariance.push_back(truth.gamma(1000.0 * h));
    e.pairs.push_back(1000 - 50 * h);
  }
  SUBCASE("recovers a known exponential model") {
    const VariogramModel m = fit_variogram(e);
    CHECK_FALSE(m.pure_nugget_fallback);
    CHECK(m.nugget == doctest::Approx(0.2).epsilon(0.1));
    CHECK(m.partial_sill == doctest::Approx(1.0).epsilon(0.1));
    CHECK(m.range_m == doctest::Approx(3000.0).epsilon(0.1));
    CHECK(m.gamma(0.0) == 0.0);
  }
  SUBCASE("flat curve fits flat") {
    for (double& g : e.semivariance) g = 0.7;
    const VariogramModel m = fit_variogram(e);
    for (double h : e.lags_m) CHECK(m.gamma(h) == doctest::Approx(0.7).epsilon(1e-3));
  }
  SUBCASE("random curves keep non-negative coefficients and a monotone fit") {
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto g = test::random_values(8, 40 + s, 0.0, 2.0);
      e.semivariance = g;
      const VariogramModel m = fit_variogram(e);
      CHECK(m.nugget >= 0.0);
      CHECK(m.partial_sill >= 0.0);
      CHECK(m.range_m > 0.0);
      double prev = 0.0;
      for (int k = 1; k <= 200; ++k) {
        const double v = m.gamma(50.0 * k);
        CHECK(v >= prev);
        prev = v;
      }
    }
  }
  SUBCASE("too few bins") {
    e.lags_m.resize(2);
    e.semivariance.resize(2);
    e.pairs.resize(2);
    CHECK_THROWS_AS(fit_variogram(e), DataError);
  }
}

TEST_CASE("kriging weights sum to one for every fine pixel") {
  for (int r : {2, 4}) {
    for (int window : {3, 5}) {
      for (double range : {800.0, 5000.0, 40000.0}) {
        VariogramModel m;
        m.nugget = 0.1;
        m.partial_sill = 2.0;
        m.range_m = range;
        const KrigingPlan plan = make_kriging_plan(m, r, 1000.0 / r, window);
        CHECK_FALSE(plan.nn_fallback);
        for (int ty = 0; ty < window; ++ty)
          for (int tx = 0; tx < window; ++tx)
            for (int py = 0; py < r; ++py)
              for (int px = 0; px < r; ++px) {
                double s = 0.0;
                for (double w : plan.at(tx, ty, px, py)) s += w;
                CHECK(std::abs(s - 1.0) < 1e-10);
              }
      }
    }
  }
}

TEST_CASE("kriging weights match a brute-force area-to-point system") {
  VariogramModel m;
  m.nugget = 0.05;
  m.partial_sill = 1.0;
  m.range_m = 2500.0;
  const int r = 2, win = 3;
  const double fine = 500.0;
  const KrigingPlan plan = make_kriging_plan(m, r, fine, win);
  // fine points of coarse block (bx, by)
  auto points = [&](int bx, int by) {
    std::vector<std::pair<double, double>> p;
    for (int y = 0; y < r; ++y)
      for (int x = 0; x < r; ++x) p.emplace_back(bx * r + x, by * r + y);
    return p;
  };
  auto cov = [&](std::pair<double, double> a, std::pair<double, double> b) {
    return m.covariance(fine * std::hypot(a.first - b.first, a.second - b.second));
  };
  const int n = win * win;
  std::vector<std::vector<double>> a(n + 1, std::vector<double>(n + 1, 0.0));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (const auto& p : points(i % win, i / win))
        for (const auto& q : points(j % win, j / win)) s += cov(p, q);
      a[i][j] = s / (r * r * r * r);
    }
    a[i][n] = a[n][i] = 1.0;
  }
  for (int ty = 0; ty < win; ++ty) {
    for (int tx = 0; tx < win; ++tx) {
      for (int py = 0; py < r; ++py) {
        for (int px = 0; px < r; ++px) {
          const std::pair<double, double> x0(tx * r + px, ty * r + py);
          std::vector<double> b(n + 1, 1.0);
          for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (const auto& q : points(i % win, i / win)) s += cov(x0, q);
            b[i] = s / (r * r);
          }
          const auto w = solve_dense(a, b);
          const auto got = plan.at(tx, ty, px, py);
          for (int i = 0; i < n; ++i) CHECK(got[i] == doctest::Approx(w[i]).epsilon(1e-9));
        }
      }
    }
  }
}

TEST_CASE("kriged residuals are coherent with the coarse residuals") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const EvalTriple t = scene(1000 + s);
    const LinearModel m = fit_linear(t.pair.lst_lr, degrade_ndvi(t.pair.ndvi_hr, 4, 2.0));
    const VariogramModel vm = fit_variogram(empirical_variogram(m.residual_lr, 8));
    const Grid2D hr = atp_kriging(m.residual_lr, vm, 4);
    CHECK(hr.pixel_size() == 250.0);
    const double coherence = mean_abs_diff(block_mean(hr, 4), m.residual_lr);
    CHECK(coherence < 0.05 * masked_stats(m.residual_lr).std);
  }
}

TEST_CASE("kriging degenerate paths") {
  const Grid2D res = test::random_grid(8, 8, 31, -1.0, 1.0, 1000.0);
  SUBCASE("pure nugget gives nearest-neighbor residuals") {
    VariogramModel m;
    m.nugget = 1.0;
    m.pure_nugget_fallback = true;
    const Grid2D hr = atp_kriging(res, m, 4);
    CHECK(test::max_abs_diff(hr.values(), nn_upsample(res, 4).values()) == 0.0);
  }
  SUBCASE("masked coarse pixels stay masked and the rest stays coherent") {
    Grid2D masked = res;
    masked.set_valid(2, 3, false);
    VariogramModel m;
    m.nugget = 0.0;
    m.partial_sill = 1.0;
    m.range_m = 3000.0;
    const Grid2D hr = atp_kriging(masked, m, 4);
    const Grid2D bm = block_mean(hr, 4);
    CHECK_FALSE(bm.valid(2, 3));
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        if (masked.valid(x, y)) CHECK(std::abs(bm(x, y) - masked(x, y)) < 1e-8);
  }
  SUBCASE("even neighborhood rejected") {
    CHECK_THROWS_AS(atp_kriging(res, VariogramModel{}, 4, 4), ConfigError);
  }
}

TEST_CASE("ATPRK is deterministic and matches the stored golden raster") {
  const EvalTriple t = scene(7, 32);
  const Grid2D a = atprk_sharpen(t.pair);
  const Grid2D b = atprk_sharpen(t.pair);
  CHECK(test::max_abs_diff(a.values(), b.values()) == 0.0);
  const Grid2D golden = load_csv(SIFSR_TEST_DATA_DIR "/atprk_seed7_32.csv", 250.0);
  REQUIRE(same_shape(golden, a));
  CHECK(test::max_abs_diff(a.values(), golden.values()) < 1e-9);
}
