#include <algorithm>
#include <cmath>
#include <fstream>

#include "doctest.h"
#include "sifsr/autodiff.hpp"
#include "sifsr/error.hpp"
#include "test_util.hpp"

using namespace sifsr;
using namespace sifsr::ad;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed, bool rg = false) {
  return Tensor(s, test::random_values(s.numel(), seed), rg);
}

// Direct 3x3 replicate-padded convolution.
std::vector<double> brute_conv(const Tensor& x, const Tensor& w) {
  const Shape xs = x.shape(), ws = w.shape();
  std::vector<double> out(static_cast<std::size_t>(xs.n) * ws.n * xs.h * xs.w, 0.0);
  auto at = [&](int b, int c, int y, int xx) {
    y = std::clamp(y, 0, xs.h - 1);
    xx = std::clamp(xx, 0, xs.w - 1);
    return x.values()[((static_cast<std::size_t>(b) * xs.c + c) * xs.h + y) * xs.w + xx];
  };
  for (int b = 0; b < xs.n; ++b)
    for (int co = 0; co < ws.n; ++co)
      for (int y = 0; y < xs.h; ++y)
        for (int xx = 0; xx < xs.w; ++xx) {
          double s = 0.0;
          for (int ci = 0; ci < xs.c; ++ci)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx)
                s += w.values()[((static_cast<std::size_t>(co) * xs.c + ci) * 3 + ky) * 3 + kx] *
                     at(b, ci, y + ky - 1, xx + kx - 1);
          out[((static_cast<std::size_t>(b) * ws.n + co) * xs.h + y) * xs.w + xx] = s;
        }
  return out;
}

}  // namespace

TEST_CASE("backward of sum is all ones") {
  Tape tape;
  Tensor x = random_tensor({2, 3, 4, 5}, 1, true);
  tape.backward(sum(tape, x));
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("half mean squared error has gradient (x - t) / N") {
  Tape tape;
  Tensor x = random_tensor({1, 2, 3, 3}, 2, true);
  Tensor t = random_tensor({1, 2, 3, 3}, 3);
  tape.backward(scale(tape, mse_loss(tape, x, t), 0.5));
  const auto g = x.grad();
  const double n = static_cast<double>(x.numel());
  for (std::size_t i = 0; i < g.size(); ++i) {
    CHECK(g[i] == doctest::Approx((x.values()[i] - t.values()[i]) / n).epsilon(1e-14));
  }
}

TEST_CASE("backward contract errors") {
  Tape tape;
  Tensor x = random_tensor({1, 1, 2, 2}, 4, true);
  Tensor y = relu(tape, x);
  CHECK_THROWS_AS(tape.backward(y), ConfigError);
  Tensor c = random_tensor({1, 1, 2, 2}, 5);
  Tape other;
  CHECK_THROWS_AS(other.backward(sum(other, c)), ConfigError);
  Tensor loss = sum(tape, y);
  CHECK_THROWS_AS(other.backward(loss), ConfigError);
}

TEST_CASE("non-finite forward values are rejected") {
  Tape tape;
  Tensor x = Tensor({1, 1, 1, 2}, {1.0, 1e300}, true);
  CHECK_THROWS_AS(scale(tape, x, 1e300), NumericError);
}

TEST_CASE("fan-out sums branch gradients") {
  const Tensor base = random_tensor({1, 2, 4, 4}, 6);
  auto grad_of = [&](int which) {
    Tensor x(base.shape(), std::vector<double>(base.values().begin(), base.values().end()), true);
    Tape tape;
    Tensor f = sum(tape, relu(tape, x));
    Tensor g = mean(tape, fixed_conv(tape, x, {linops::sobel_kernel(linops::SobelDirection::kHorizontal)}));
    Tensor loss = which == 0 ? f : which == 1 ? g : add(tape, f, g);
    tape.backward(loss);
    return x.grad();
  };
  const auto gf = grad_of(0), gg = grad_of(1), both = grad_of(2);
  for (std::size_t i = 0; i < both.size(); ++i) {
    CHECK(both[i] == doctest::Approx(gf[i] + gg[i]).epsilon(1e-14));
  }
}

TEST_CASE("conv2d forward matches direct convolution") {
  Tape tape;
  Tensor x = random_tensor({2, 3, 5, 6}, 7);
  Tensor w = random_tensor({4, 3, 3, 3}, 8);
  Tensor b = random_tensor({1, 4, 1, 1}, 9);
  const auto ref = brute_conv(x, w);
  Tensor y = conv2d(tape, x, w);
  CHECK(y.shape() == Shape{2, 4, 5, 6});
  CHECK(test::max_abs_diff(y.values(), ref) < 1e-13);
  Tensor yb = conv2d(tape, x, w, b);
  const std::size_t hw = 30;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    CHECK(yb.values()[i] == doctest::Approx(ref[i] + b.values()[(i / hw) % 4]).epsilon(1e-13));
  }
  CHECK_THROWS_AS(conv2d(tape, x, random_tensor({4, 2, 3, 3}, 1)), DataError);
}

TEST_CASE("grad_check thresholds for every differentiable op") {
  SUBCASE("relu away from zero") {
    auto v = test::random_values(2 * 3 * 4 * 4, 10);
    for (double& x : v) x += x >= 0 ? 0.1 : -0.1;
    const double err = grad_check([](Tape& t, const std::vector<Tensor>& in) { return relu(t, in[0]); },
                                  {v}, {{2, 3, 4, 4}});
    CHECK(err < 1e-8);
  }
  SUBCASE("conv2d weights and inputs") {
    const double err = grad_check(
        [](Tape& t, const std::vector<Tensor>& in) { return conv2d(t, in[0], in[1]); },
        std::vector<Shape>{{2, 3, 5, 4}, {2, 3, 3, 3}});
    CHECK(err < 1e-5);
    const double err_bias = grad_check(
        [](Tape& t, const std::vector<Tensor>& in) { return conv2d(t, in[0], in[1], in[2]); },
        std::vector<Shape>{{1, 2, 4, 4}, {3, 2, 3, 3}, {1, 3, 1, 1}});
    CHECK(err_bias < 1e-5);
  }
  SUBCASE("batchnorm2d train mode") {
    const double err = grad_check(
        [](Tape& t, const std::vector<Tensor>& in) {
          BatchNormState st(3);
          return batchnorm2d(t, in[0], in[1], in[2], st, true);
        },
        std::vector<Shape>{{2, 3, 4, 4}, {1, 3, 1, 1}, {1, 3, 1, 1}});
    CHECK(err < 1e-4);
  }
  SUBCASE("batchnorm2d eval mode") {
    const double err = grad_check(
        [](Tape& t, const std::vector<Tensor>& in) {
          BatchNormState st(2);
          st.running_mean = {0.3, -0.2};
          st.running_var = {1.5, 0.4};
          return batchnorm2d(t, in[0], in[1], in[2], st, false);
        },
        std::vector<Shape>{{2, 2, 3, 3}, {1, 2, 1, 1}, {1, 2, 1, 1}});
    CHECK(err < 1e-8);
  }
  SUBCASE("pooling, resampling and concatenation") {
    auto unary = [](auto f) {
      return [f](Tape& t, const std::vector<Tensor>& in) { return f(t, in[0]); };
    };
    CHECK(grad_check(unary([](Tape& t, const Tensor& x) { return avgpool2(t, x); }),
                     std::vector<Shape>{{2, 2, 4, 6}}) < 1e-8);
    CHECK(grad_check(unary([](Tape& t, const Tensor& x) { return upsample_bilinear2(t, x); }),
                     std::vector<Shape>{{1, 2, 3, 4}}) < 1e-8);
    CHECK(grad_check(unary([](Tape& t, const Tensor& x) { return bicubic_down(t, x, 4); }),
                     std::vector<Shape>{{1, 1, 8, 12}}) < 1e-8);
    CHECK(grad_check([](Tape& t, const std::vector<Tensor>& in) { return concat(t, in[0], in[1]); },
                     std::vector<Shape>{{2, 1, 3, 3}, {2, 2, 3, 3}}) < 1e-8);
    CHECK(grad_check(
              [](Tape& t, const std::vector<Tensor>& in) { return lincomb(t, in[0], 0.3, in[1], -2.0); },
              std::vector<Shape>{{1, 2, 3, 3}, {1, 2, 3, 3}}) < 1e-8);
  }
  SUBCASE("fixed kernels and losses") {
    const auto sobel = linops::sobel_kernels();
    const std::vector<linops::Kernel2D> bank(sobel.begin(), sobel.end());
    CHECK(grad_check([&](Tape& t, const std::vector<Tensor>& in) { return fixed_conv(t, in[0], bank); },
                     std::vector<Shape>{{2, 1, 5, 5}}) < 1e-8);
    const auto g = linops::gaussian_kernel(1.0).kernel;
    CHECK(grad_check([&](Tape& t, const std::vector<Tensor>& in) { return fixed_conv(t, in[0], {g}); },
                     std::vector<Shape>{{1, 2, 7, 6}}) < 1e-8);
    CHECK(grad_check(
              [](Tape& t, const std::vector<Tensor>& in) { return huber_loss(t, in[0], in[1], 0.5); },
              std::vector<Shape>{{1, 2, 4, 4}, {1, 2, 4, 4}}) < 1e-6);
    CHECK(grad_check([](Tape& t, const std::vector<Tensor>& in) { return mse_loss(t, in[0], in[1]); },
                     std::vector<Shape>{{1, 2, 4, 4}, {1, 2, 4, 4}}) < 1e-8);
  }
}

TEST_CASE("avgpool2 and bilinear upsampling forward") {
  Tape tape;
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(avgpool2(tape, x).item() == 2.5);
  Tensor c({1, 2, 3, 3}, std::vector<double>(18, 4.25));
  const Tensor up = upsample_bilinear2(tape, c);
  CHECK(up.shape() == Shape{1, 2, 6, 6});
  for (double v : up.values()) CHECK(v == doctest::Approx(4.25).epsilon(1e-15));
  CHECK_THROWS_AS(avgpool2(tape, Tensor::zeros({1, 1, 3, 2})), DataError);
}

TEST_CASE("batchnorm2d statistics") {
  Tape tape;
  Tensor x = random_tensor({4, 2, 3, 3}, 20);
  Tensor gamma({1, 2, 1, 1}, {1.0, 1.0});
  Tensor beta({1, 2, 1, 1}, {0.0, 0.0});
  BatchNormState st(2);
  Tensor y = batchnorm2d(tape, x, gamma, beta, st, true);
  const std::size_t hw = 9, m = 36;
  for (int c = 0; c < 2; ++c) {
    double s = 0.0, ss = 0.0, xs = 0.0, xss = 0.0;
    for (int b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t k = (b * 2 + c) * hw + i;
        s += y.values()[k];
        ss += y.values()[k] * y.values()[k];
        xs += x.values()[k];
      }
    const double mu = xs / m;
    for (int b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = x.values()[(b * 2 + c) * hw + i] - mu;
        xss += d * d;
      }
    const double var = xss / m;
    CHECK(std::abs(s / m) < 1e-12);
    CHECK(ss / m == doctest::Approx(var / (var + 1e-5)).epsilon(1e-12));
    CHECK(st.running_mean[c] == doctest::Approx(0.1 * mu).epsilon(1e-12));
    CHECK(st.running_var[c] == doctest::Approx(0.9 + 0.1 * xss / (m - 1)).epsilon(1e-12));
  }

  SUBCASE("eval mode is deterministic and independent of batch order") {
    Tensor a = batchnorm2d(tape, x, gamma, beta, st, false);
    Tensor b = batchnorm2d(tape, x, gamma, beta, st, false);
    CHECK(test::max_abs_diff(a.values(), b.values()) == 0.0);
    const std::size_t sample = 18;
    std::vector<double> swapped(x.values().begin(), x.values().end());
    std::swap_ranges(swapped.begin(), swapped.begin() + sample, swapped.begin() + 3 * sample);
    Tensor xs2(x.shape(), swapped);
    Tensor c = batchnorm2d(tape, xs2, gamma, beta, st, false);
    for (std::size_t i = 0; i < sample; ++i) {
      CHECK(c.values()[i] == a.values()[3 * sample + i]);
      CHECK(c.values()[3 * sample + i] == a.values()[i]);
    }
  }
  SUBCASE("train mode needs more than one value per channel") {
    CHECK_THROWS_AS(batchnorm2d(tape, Tensor::zeros({1, 2, 1, 1}), gamma, beta, st, true), ConfigError);
  }
}

TEST_CASE("adam_step") {
  SUBCASE("closed-form first step") {
    std::vector<double> w{0.0};
    std::vector<double> g{1.0};
    AdamState st;
    st.lr = 0.1;
    std::vector<std::span<double>> ps{w};
    std::vector<std::span<const double>> gs{g};
    adam_step(ps, gs, st);
    CHECK(w[0] == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-15));
  }
  SUBCASE("zero gradient leaves the parameter unchanged") {
    Tensor p({1, 1, 1, 3}, {0.5, -1.0, 2.0}, true);
    std::vector<Tensor> params{p};
    AdamState st;
    st.lr = 0.1;
    adam_step(params, st);
    CHECK(p.values()[0] == 0.5);
    CHECK(p.values()[1] == -1.0);
    CHECK(p.values()[2] == 2.0);
  }
  SUBCASE("descends w^2") {
    Tensor w = Tensor::scalar(1.0, true);
    std::vector<Tensor> params{w};
    AdamState st;
    st.lr = 0.05;
    for (int i = 0; i < 100; ++i) {
      Tape tape;
      w.zero_grad();
      tape.backward(mse_loss(tape, w, Tensor::scalar(0.0)));
      adam_step(params, st);
    }
    CHECK(std::abs(w.item()) < 0.05);
  }
  SUBCASE("shape mismatch") {
    std::vector<double> w{0.0, 1.0};
    std::vector<double> g{1.0};
    AdamState st;
    std::vector<std::span<double>> ps{w};
    std::vector<std::span<const double>> gs{g};
    CHECK_THROWS_AS(adam_step(ps, gs, st), ConfigError);
  }
  SUBCASE("sgd variant") {
    std::vector<double> w{1.0};
    std::vector<double> g{2.0};
    AdamState st;
    st.kind = OptimizerKind::kSgd;
    st.lr = 0.25;
    std::vector<std::span<double>> ps{w};
    std::vector<std::span<const double>> gs{g};
    adam_step(ps, gs, st);
    CHECK(w[0] == 0.5);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto dir = test::scratch_dir("checkpoint");
  std::vector<NamedArray> arrays{{"conv0.weight", {2, 1, 3, 3}, test::random_values(18, 30)},
                                 {"bn0.running_var", {2}, {1e-300, -0.0}}};
  save_checkpoint(dir / "m.json", arrays, {{"note", "x"}});
  nlohmann::json extra;
  const auto back = load_checkpoint(dir / "m.json", &extra);
  CHECK(extra.at("note") == "x");
  REQUIRE(back.size() == 2);
  for (std::size_t a = 0; a < 2; ++a) {
    CHECK(back[a].name == arrays[a].name);
    CHECK(back[a].shape == arrays[a].shape);
    for (std::size_t i = 0; i < arrays[a].values.size(); ++i) {
      CHECK(std::bit_cast<std::uint64_t>(back[a].values[i]) ==
            std::bit_cast<std::uint64_t>(arrays[a].values[i]));
    }
  }
  {
    std::ofstream trunc(dir / "m.bin", std::ios::binary | std::ios::trunc);
    trunc << "short";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "m.json"), DataError);
  CHECK_THROWS_AS(load_checkpoint(dir / "none.json"), DataError);
  CHECK_THROWS_AS(save_checkpoint(dir / "bad.json", {{"x", {3}, {1.0}}}), DataError);
}
