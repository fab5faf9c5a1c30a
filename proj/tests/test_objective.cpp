#include <cmath>

#include "doctest.h"
#include "sifsr/error.hpp"
#include "sifsr/objective.hpp"
#include "test_util.hpp"

using namespace sifsr;
using namespace sifsr::objective;

namespace {

double oracle_huber_mean(std::span<const double> a, std::span<const double> b, double delta) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i] - b[i];
    s += std::abs(x) <= delta ? 0.5 * x * x : delta * (std::abs(x) - 0.5 * delta);
  }
  return s / static_cast<double>(a.size());
}

Grid2D affine(const Grid2D& g, double scale, double offset) {
  std::vector<double> v(g.values().begin(), g.values().end());
  for (double& x : v) x = scale * x + offset;
  return g.with_values(std::move(v));
}

}  // namespace

TEST_CASE("huber_mean branches") {
  const Grid2D zero(1, 1, 1.0, 0.0);
  CHECK(huber_mean(Grid2D(1, 1, 1.0, 0.5), zero, 1.0) == 0.125);
  CHECK(huber_mean(Grid2D(1, 1, 1.0, 2.0), zero, 1.0) == 1.5);
  const Grid2D a = test::random_grid(5, 5, 3);
  CHECK(huber_mean(a, a, 1.0) == 0.0);
  CHECK_THROWS_AS(huber_mean(a, Grid2D(4, 5, 1.0), 1.0), DataError);
  CHECK_THROWS_AS(huber_mean(a, a, 0.0), ConfigError);
  Grid2D empty(1, 1, 1.0, std::vector<double>{std::nan("")});
  CHECK_THROWS_AS(huber_mean(empty, empty, 1.0), DataError);
}

TEST_CASE("huber_mean properties") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Grid2D a = test::random_grid(8, 8, seed, -3.0, 3.0);
    const Grid2D b = test::random_grid(8, 8, seed + 50, -3.0, 3.0);
    CHECK(huber_mean(a, b, 0.7) == huber_mean(b, a, 0.7));
    double mse = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double d = a.values()[i] - b.values()[i];
      mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    CHECK(std::abs(huber_mean(a, b, 1e6) - 0.5 * mse) / (0.5 * mse) < 1e-6);
  }
}

TEST_CASE("reconstruction_loss") {
  SifConfig cfg = preset("sif1");
  SUBCASE("constant candidate and constant observation") {
    CHECK(reconstruction_loss(Grid2D(16, 16, 250.0, 1.3), Grid2D(4, 4, 1000.0, 1.3), cfg) <
          1e-28);
  }
  SUBCASE("candidate whose degradation equals the observation") {
    const Grid2D cand = test::random_grid(16, 16, 8);
    const Grid2D obs = linops::mtf_degrade(cand, 4, cfg.mtf_sigma_px);
    CHECK(reconstruction_loss(cand, obs, cfg) == 0.0);
  }
  SUBCASE("two-step oracle") {
    const Grid2D cand = test::random_grid(16, 16, 9, -2.0, 2.0);
    const Grid2D obs = test::random_grid(4, 4, 10, -2.0, 2.0, 1000.0);
    const Grid2D deg = linops::mtf_degrade(cand, 4, cfg.mtf_sigma_px);
    CHECK(reconstruction_loss(cand, obs, cfg) ==
          oracle_huber_mean(obs.values(), deg.values(), cfg.huber_delta));
  }
  SUBCASE("dimension mismatch") {
    CHECK_THROWS_AS(reconstruction_loss(Grid2D(16, 16, 1.0), Grid2D(5, 4, 1.0), cfg), DataError);
  }
}

TEST_CASE("texture_loss") {
  for (const char* name : {"sif1", "sif2"}) {
    const SifConfig cfg = preset(name);
    INFO(name);
    const Grid2D v = test::random_grid(16, 16, 12);
    SUBCASE("gamma-scaled NDVI plus a constant has zero texture loss") {
      CHECK(texture_loss(affine(v, cfg.gamma, 4.2), v, cfg) < 1e-25);
    }
    SUBCASE("constants") {
      CHECK(texture_loss(Grid2D(16, 16, 250.0, 3.0), Grid2D(16, 16, 250.0, 0.4), cfg) < 1e-25);
    }
    SUBCASE("per-channel oracle") {
      const Grid2D cand = test::random_grid(16, 16, 13, -2.0, 2.0);
      std::vector<std::vector<double>> gv, gc;
      if (cfg.texture_op == TextureOp::kSobel) {
        for (const auto& k : linops::sobel_kernels()) {
          std::vector<double> a(v.size()), b(v.size());
          linops::correlate(v.values(), {16, 16}, k, a);
          linops::correlate(cand.values(), {16, 16}, k, b);
          gv.push_back(a);
          gc.push_back(b);
        }
      } else {
        const auto k = linops::gaussian_kernel(cfg.mtf_sigma_px).kernel;
        std::vector<double> a(v.size()), b(v.size());
        linops::correlate(v.values(), {16, 16}, k, a);
        linops::correlate(cand.values(), {16, 16}, k, b);
        for (std::size_t i = 0; i < a.size(); ++i) {
          a[i] = v.values()[i] - a[i];
          b[i] = cand.values()[i] - b[i];
        }
        gv.push_back(a);
        gc.push_back(b);
      }
      double expected = 0.0;
      for (std::size_t c = 0; c < gv.size(); ++c) {
        for (double& x : gv[c]) x *= cfg.gamma;
        expected += oracle_huber_mean(gv[c], gc[c], cfg.huber_delta);
      }
      expected /= static_cast<double>(gv.size());
      CHECK(texture_loss(cand, v, cfg) == doctest::Approx(expected).epsilon(1e-14));
    }
  }
}

TEST_CASE("texture_loss ignores constant shifts; reconstruction_loss does not") {
  const SifConfig cfg = preset("sif1");
  const Grid2D cand = test::random_grid(16, 16, 31);
  const Grid2D v = test::random_grid(16, 16, 32);
  const Grid2D obs = test::random_grid(4, 4, 33, -1.0, 1.0, 1000.0);
  CHECK(texture_loss(affine(cand, 1.0, 2.5), v, cfg) ==
        doctest::Approx(texture_loss(cand, v, cfg)).epsilon(1e-12));
  CHECK(reconstruction_loss(affine(cand, 1.0, 2.5), obs, cfg) != reconstruction_loss(cand, obs, cfg));
  CHECK(reconstruction_loss(affine(cand, 1.0, 2.5), affine(obs, 1.0, 2.5), cfg) ==
        doctest::Approx(reconstruction_loss(cand, obs, cfg)).epsilon(1e-12));
}

TEST_CASE("sif_loss is a convex combination of its terms") {
  const ScenePair pair{test::random_grid(4, 4, 1, -1, 1, 1000.0), test::random_grid(16, 16, 2), 4};
  const Grid2D cand = test::random_grid(16, 16, 3);
  for (double alpha : {0.0, 0.1, 0.5, 0.99, 1.0}) {
    SifConfig cfg = preset("sif2");
    cfg.alpha = alpha;
    const LossBreakdown b = sif_loss(cand, pair, cfg);
    CHECK(std::abs(b.total - (alpha * b.texture_term + (1 - alpha) * b.rec_term)) < 1e-12);
    if (alpha == 1.0) CHECK(b.total == b.texture_term);
    if (alpha == 0.0) CHECK(b.total == b.rec_term);
  }
}

TEST_CASE("presets and config validation") {
  const SifConfig s1 = preset("sif1");
  CHECK(s1.alpha == 0.99);
  CHECK(s1.gamma == -0.5);
  CHECK(s1.texture_op == TextureOp::kSobel);
  const SifConfig s2 = preset("sif2");
  CHECK(s2.alpha == 0.10);
  CHECK(s2.gamma == -0.25);
  CHECK(s2.texture_op == TextureOp::kHighpass);
  CHECK(s1.mtf_sigma_px == 2.0);
  CHECK_THROWS_AS(preset("sif3"), ConfigError);

  const SifConfig back = sif_config_from_json(to_json(s2));
  CHECK(back.alpha == s2.alpha);
  CHECK(back.texture_op == s2.texture_op);
  CHECK(sif_config_from_json({{"preset", "sif1"}}).gamma == -0.5);
  CHECK_THROWS_AS(sif_config_from_json({{"alpha", 1.5}}), ConfigError);
  CHECK_THROWS_AS(sif_config_from_json({{"huber_delta", 0.0}}), ConfigError);
}

TEST_CASE("standardize") {
  const Grid2D g(1, 1, 1.0, 300.0);
  CHECK(standardize(g, 290.0, 10.0)(0, 0) == 1.0);
  CHECK_THROWS_AS(standardize(g, 0.0, 0.0), ConfigError);
  const Grid2D r = test::random_grid(9, 9, 4, 270.0, 320.0);
  const Grid2D back = destandardize(standardize(r, 293.2, 7.7), 293.2, 7.7);
  CHECK(test::max_abs_diff(back.values(), r.values()) < 1e-12);

  // standardized training set recomputed: mean 0, std 1
  std::vector<ScenePair> set;
  for (std::uint64_t s = 0; s < 4; ++s) {
    set.push_back({test::random_grid(4, 4, s, 280, 310, 1000.0), test::random_grid(16, 16, s + 9, 0, 1), 4});
  }
  const NormStats stats = compute_norm_stats(set);
  std::vector<ScenePair> standardized;
  for (const auto& p : set) standardized.push_back(standardize_pair(p, stats));
  const NormStats after = compute_norm_stats(standardized);
  CHECK(std::abs(after.lst_mean) < 1e-12);
  CHECK(std::abs(after.lst_std - 1.0) < 1e-12);
  CHECK(std::abs(after.ndvi_mean) < 1e-12);
  CHECK(std::abs(after.ndvi_std - 1.0) < 1e-12);
}
