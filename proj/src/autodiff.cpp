#include "sifsr/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "sifsr/error.hpp"

namespace sifsr::ad {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw DataError(msg);
}

bool any_requires_grad(const std::vector<Tensor>& ts) {
  return std::any_of(ts.begin(), ts.end(),
                     [](const Tensor& t) { return t.defined() && t.requires_grad(); });
}

// Gradient buffer of a parent, or null when the parent is constant.
std::vector<double>* grad_sink(const std::shared_ptr<Node>& p) {
  return p && p->requires_grad ? &p->ensure_grad() : nullptr;
}

// im2col for one sample: rows ci*9 + ky*3 + kx, columns y*W + x.
void im2col(const double* x, int cin, int h, int w, double* col) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int ci = 0; ci < cin; ++ci) {
    const double* plane = x + ci * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        double* row = col + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * hw;
        for (int y = 0; y < h; ++y) {
          const double* src = plane + static_cast<std::size_t>(std::clamp(y + ky - 1, 0, h - 1)) * w;
          double* dst = row + static_cast<std::size_t>(y) * w;
          const int dx = kx - 1;
          for (int xx = 0; xx < w; ++xx) dst[xx] = src[std::clamp(xx + dx, 0, w - 1)];
        }
      }
    }
  }
}

void col2im_add(const double* col, int cin, int h, int w, double* x) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int ci = 0; ci < cin; ++ci) {
    double* plane = x + ci * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const double* row = col + (static_cast<std::size_t>(ci) * 9 + ky * 3 + kx) * hw;
        for (int y = 0; y < h; ++y) {
          double* dst = plane + static_cast<std::size_t>(std::clamp(y + ky - 1, 0, h - 1)) * w;
          const double* src = row + static_cast<std::size_t>(y) * w;
          const int dx = kx - 1;
          for (int xx = 0; xx < w; ++xx) dst[std::clamp(xx + dx, 0, w - 1)] += src[xx];
        }
      }
    }
  }
}

}  // namespace

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
         std::to_string(w) + ")";
}

std::vector<double>& Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1) {
    throw ConfigError("Tensor: non-positive dimension in shape " + shape.str());
  }
  if (values.size() != shape.numel()) {
    throw DataError("Tensor: " + std::to_string(values.size()) + " values for shape " +
                    shape.str());
  }
  node_ = std::make_shared<Node>();
  node_->shape = shape;
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(shape, std::vector<double>(shape.numel(), 0.0), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) { return Tensor({}, {v}, requires_grad); }

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
  return node_->grad;
}

double Tensor::item() const {
  if (numel() != 1) throw ConfigError("Tensor::item: tensor has shape " + shape().str());
  return node_->value[0];
}

Tensor Tape::record(const char* op, Shape shape, std::vector<double> value,
                    const std::vector<Tensor>& parents, std::function<void(Node&)> backward) {
  for (double v : value) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output value");
  }
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value = std::move(value);
  if (any_requires_grad(parents)) {
    node->requires_grad = true;
    node->tape = this;
    for (const auto& p : parents) node->parents.push_back(p.defined() ? p.node() : nullptr);
    node->backward = std::move(backward);
    nodes_.push_back(node);
  }
  return Tensor(node);
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ConfigError("backward: loss must be a scalar tensor");
  }
  if (!loss.requires_grad()) throw ConfigError("backward: loss is detached from any parameter");
  if (loss.node()->tape != nullptr && loss.node()->tape != this) {
    throw ConfigError("backward: loss was recorded on a different tape");
  }
  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.grad.empty() || !n.backward) continue;
    n.backward(n);
  }
}

// ---- operations --------------------------------------------------------------

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  require(ws.h == 3 && ws.w == 3, "conv2d: weight must be (out, in, 3, 3), got " + ws.str());
  require(ws.c == xs.c, "conv2d: weight expects " + std::to_string(ws.c) +
                            " input channels, input has " + std::to_string(xs.c));
  const int cout = ws.n;
  if (bias.defined()) {
    require(bias.numel() == static_cast<std::size_t>(cout), "conv2d: bias length mismatch");
  }
  const std::size_t hw = xs.plane();
  const std::size_t k = static_cast<std::size_t>(xs.c) * 9;
  const Shape os{xs.n, cout, xs.h, xs.w};
  std::vector<double> out(os.numel());
  std::vector<double> col(k * hw);
  ConstMapMatrix wm(weight.values().data(), cout, static_cast<Eigen::Index>(k));
  for (int b = 0; b < xs.n; ++b) {
    im2col(x.values().data() + b * xs.c * hw, xs.c, xs.h, xs.w, col.data());
    MapMatrix om(out.data() + b * cout * hw, cout, static_cast<Eigen::Index>(hw));
    om.noalias() = wm * ConstMapMatrix(col.data(), static_cast<Eigen::Index>(k),
                                       static_cast<Eigen::Index>(hw));
    if (bias.defined()) {
      for (int co = 0; co < cout; ++co) om.row(co).array() += bias.values()[co];
    }
  }
  return tape.record("conv2d", os, std::move(out), {x, weight, bias}, [xs, cout, hw, k](Node& self) {
    const auto& px = self.parents[0];
    const auto& pw = self.parents[1];
    const auto& pb = self.parents[2];
    std::vector<double>* gx = grad_sink(px);
    std::vector<double>* gw = grad_sink(pw);
    std::vector<double>* gb = grad_sink(pb);
    std::vector<double> col(k * hw);
    std::vector<double> dcol(k * hw);
    ConstMapMatrix wm(pw->value.data(), cout, static_cast<Eigen::Index>(k));
    for (int b = 0; b < xs.n; ++b) {
      ConstMapMatrix dy(self.grad.data() + b * cout * hw, cout, static_cast<Eigen::Index>(hw));
      if (gw) {
        im2col(px->value.data() + b * xs.c * hw, xs.c, xs.h, xs.w, col.data());
        MapMatrix(gw->data(), cout, static_cast<Eigen::Index>(k)).noalias() +=
            dy * ConstMapMatrix(col.data(), static_cast<Eigen::Index>(k),
                                static_cast<Eigen::Index>(hw))
                     .transpose();
      }
      if (gx) {
        MapMatrix(dcol.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(hw))
            .noalias() = wm.transpose() * dy;
        col2im_add(dcol.data(), xs.c, xs.h, xs.w, gx->data() + b * xs.c * hw);
      }
      if (gb) {
        for (int co = 0; co < cout; ++co) (*gb)[co] += dy.row(co).sum();
      }
    }
  });
}

Tensor batchnorm2d(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   BatchNormState& state, bool train) {
  const Shape xs = x.shape();
  const auto channels = static_cast<std::size_t>(xs.c);
  require(gamma.numel() == channels && beta.numel() == channels,
          "batchnorm2d: affine parameters must have one entry per channel");
  require(state.running_mean.size() == channels && state.running_var.size() == channels,
          "batchnorm2d: running statistics have the wrong channel count");
  const std::size_t hw = xs.plane();
  const std::size_t m = static_cast<std::size_t>(xs.n) * hw;
  if (train && m < 2) throw ConfigError("batchnorm2d: train mode needs at least 2 values per channel");

  std::vector<double> xhat(xs.numel());
  std::vector<double> inv_std(channels);
  std::vector<double> out(xs.numel());
  const auto xv = x.values();
  for (std::size_t c = 0; c < channels; ++c) {
    double mu, var;
    if (train) {
      double s = 0.0;
      for (int b = 0; b < xs.n; ++b) {
        const double* p = xv.data() + (b * channels + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      mu = s / static_cast<double>(m);
      double ss = 0.0;
      for (int b = 0; b < xs.n; ++b) {
        const double* p = xv.data() + (b * channels + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      var = ss / static_cast<double>(m);
      const double unbiased = ss / static_cast<double>(m - 1);
      const double rm = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mu;
      const double rv = (1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
      if (!std::isfinite(rm) || !std::isfinite(rv) || !std::isfinite(var)) {
        throw NumericError("batchnorm2d: non-finite batch statistics in channel " +
                           std::to_string(c));
      }
      state.running_mean[c] = rm;
      state.running_var[c] = rv;
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    inv_std[c] = 1.0 / std::sqrt(var + state.eps);
    const double g = gamma.values()[c];
    const double bt = beta.values()[c];
    for (int b = 0; b < xs.n; ++b) {
      const std::size_t off = (b * channels + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        xhat[off + i] = (xv[off + i] - mu) * inv_std[c];
        out[off + i] = g * xhat[off + i] + bt;
      }
    }
  }
  return tape.record(
      "batchnorm2d", xs, std::move(out), {x, gamma, beta},
      [xs, channels, hw, m, train, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        std::vector<double>* gx = grad_sink(self.parents[0]);
        std::vector<double>* gg = grad_sink(self.parents[1]);
        std::vector<double>* gb = grad_sink(self.parents[2]);
        const auto& gamma_v = self.parents[1]->value;
        const auto& dy = self.grad;
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (int b = 0; b < xs.n; ++b) {
            const std::size_t off = (b * channels + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sum_dy += dy[off + i];
              sum_dy_xhat += dy[off + i] * xhat[off + i];
            }
          }
          if (gg) (*gg)[c] += sum_dy_xhat;
          if (gb) (*gb)[c] += sum_dy;
          if (!gx) continue;
          const double g = gamma_v[c];
          const double is = inv_std[c];
          const double inv_m = 1.0 / static_cast<double>(m);
          for (int b = 0; b < xs.n; ++b) {
            const std::size_t off = (b * channels + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              (*gx)[off + i] +=
                  train ? g * is * (dy[off + i] - inv_m * sum_dy - xhat[off + i] * inv_m * sum_dy_xhat)
                        : g * is * dy[off + i];
            }
          }
        }
      });
}

Tensor relu(Tape& tape, const Tensor& x) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return tape.record("relu", x.shape(), std::move(out), {x}, [](Node& self) {
    auto& gx = self.parents[0]->ensure_grad();
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += self.grad[i];
    }
  });
}

Tensor avgpool2(Tape& tape, const Tensor& x) {
  const Shape xs = x.shape();
  require(xs.h % 2 == 0 && xs.w % 2 == 0, "avgpool2: spatial size must be even, got " + xs.str());
  const Shape os{xs.n, xs.c, xs.h / 2, xs.w / 2};
  std::vector<double> out(os.numel());
  const auto xv = x.values();
  const std::size_t planes = static_cast<std::size_t>(xs.n) * xs.c;
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = xv.data() + p * xs.plane();
    double* dst = out.data() + p * os.plane();
    for (int y = 0; y < os.h; ++y) {
      for (int xx = 0; xx < os.w; ++xx) {
        const double* r0 = src + static_cast<std::size_t>(2 * y) * xs.w + 2 * xx;
        dst[static_cast<std::size_t>(y) * os.w + xx] = 0.25 * (r0[0] + r0[1] + r0[xs.w] + r0[xs.w + 1]);
      }
    }
  }
  return tape.record("avgpool2", os, std::move(out), {x}, [xs, os, planes](Node& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t p = 0; p < planes; ++p) {
      double* dst = gx.data() + p * xs.plane();
      const double* src = self.grad.data() + p * os.plane();
      for (int y = 0; y < os.h; ++y) {
        for (int xx = 0; xx < os.w; ++xx) {
          const double g = 0.25 * src[static_cast<std::size_t>(y) * os.w + xx];
          double* r0 = dst + static_cast<std::size_t>(2 * y) * xs.w + 2 * xx;
          r0[0] += g;
          r0[1] += g;
          r0[xs.w] += g;
          r0[xs.w + 1] += g;
        }
      }
    }
  });
}

Tensor resize(Tape& tape, const Tensor& x, int out_h, int out_w, linops::Interp interp) {
  const Shape xs = x.shape();
  if (out_h < 1 || out_w < 1) throw ConfigError("resize: output size must be positive");
  const Shape os{xs.n, xs.c, out_h, out_w};
  const linops::PlaneShape in_plane{xs.w, xs.h};
  const linops::PlaneShape out_plane{out_w, out_h};
  const std::size_t planes = static_cast<std::size_t>(xs.n) * xs.c;
  std::vector<double> out(os.numel());
  for (std::size_t p = 0; p < planes; ++p) {
    linops::resample(x.values().subspan(p * xs.plane(), xs.plane()), in_plane, out_plane, interp,
                     std::span<double>(out).subspan(p * os.plane(), os.plane()));
  }
  return tape.record("resize", os, std::move(out), {x},
                     [xs, os, in_plane, out_plane, planes, interp](Node& self) {
                       auto& gx = self.parents[0]->ensure_grad();
                       std::vector<double> tmp(xs.plane());
                       for (std::size_t p = 0; p < planes; ++p) {
                         linops::resample_adjoint(
                             std::span<const double>(self.grad).subspan(p * os.plane(), os.plane()),
                             in_plane, out_plane, interp, tmp);
                         double* dst = gx.data() + p * xs.plane();
                         for (std::size_t i = 0; i < tmp.size(); ++i) dst[i] += tmp[i];
                       }
                     });
}

Tensor upsample_bilinear2(Tape& tape, const Tensor& x) {
  return resize(tape, x, 2 * x.shape().h, 2 * x.shape().w, linops::Interp::kBilinear);
}

Tensor bicubic_down(Tape& tape, const Tensor& x, int r) {
  if (r < 1) throw ConfigError("bicubic_down: factor must be >= 1");
  require(x.shape().h % r == 0 && x.shape().w % r == 0,
          "bicubic_down: spatial size " + x.shape().str() + " not divisible by " + std::to_string(r));
  return resize(tape, x, x.shape().h / r, x.shape().w / r, linops::Interp::kBicubic);
}

Tensor concat(Tape& tape, const Tensor& a, const Tensor& b) {
  const Shape as = a.shape(), bs = b.shape();
  require(as.n == bs.n && as.h == bs.h && as.w == bs.w,
          "concat: incompatible shapes " + as.str() + " and " + bs.str());
  const Shape os{as.n, as.c + bs.c, as.h, as.w};
  const std::size_t na = static_cast<std::size_t>(as.c) * as.plane();
  const std::size_t nb = static_cast<std::size_t>(bs.c) * bs.plane();
  std::vector<double> out(os.numel());
  for (int s = 0; s < as.n; ++s) {
    std::copy_n(a.values().data() + s * na, na, out.data() + s * (na + nb));
    std::copy_n(b.values().data() + s * nb, nb, out.data() + s * (na + nb) + na);
  }
  return tape.record("concat", os, std::move(out), {a, b}, [n = as.n, na, nb](Node& self) {
    std::vector<double>* ga = grad_sink(self.parents[0]);
    std::vector<double>* gb = grad_sink(self.parents[1]);
    for (int s = 0; s < n; ++s) {
      const double* src = self.grad.data() + s * (na + nb);
      if (ga) {
        for (std::size_t i = 0; i < na; ++i) (*ga)[s * na + i] += src[i];
      }
      if (gb) {
        for (std::size_t i = 0; i < nb; ++i) (*gb)[s * nb + i] += src[na + i];
      }
    }
  });
}

Tensor lincomb(Tape& tape, const Tensor& a, double ca, const Tensor& b, double cb) {
  require(a.shape() == b.shape(),
          "lincomb: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ca * a.values()[i] + cb * b.values()[i];
  return tape.record("lincomb", a.shape(), std::move(out), {a, b}, [ca, cb](Node& self) {
    if (auto* ga = grad_sink(self.parents[0])) {
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += ca * self.grad[i];
    }
    if (auto* gb = grad_sink(self.parents[1])) {
      for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += cb * self.grad[i];
    }
  });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) { return lincomb(tape, a, 1.0, b, 1.0); }
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) { return lincomb(tape, a, 1.0, b, -1.0); }

Tensor scale(Tape& tape, const Tensor& x, double s) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v *= s;
  return tape.record("scale", x.shape(), std::move(out), {x}, [s](Node& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s * self.grad[i];
  });
}

Tensor fixed_conv(Tape& tape, const Tensor& x, const std::vector<linops::Kernel2D>& kernels) {
  if (kernels.empty()) throw ConfigError("fixed_conv: empty kernel bank");
  const Shape xs = x.shape();
  const int nk = static_cast<int>(kernels.size());
  const Shape os{xs.n, xs.c * nk, xs.h, xs.w};
  const linops::PlaneShape plane{xs.w, xs.h};
  const std::size_t planes = static_cast<std::size_t>(xs.n) * xs.c;
  const std::size_t hw = xs.plane();
  std::vector<double> out(os.numel());
  for (std::size_t p = 0; p < planes; ++p) {
    for (int k = 0; k < nk; ++k) {
      linops::correlate(x.values().subspan(p * hw, hw), plane, kernels[k],
                        std::span<double>(out).subspan((p * nk + k) * hw, hw));
    }
  }
  return tape.record("fixed_conv", os, std::move(out), {x},
                     [kernels, plane, planes, hw, nk](Node& self) {
                       auto& gx = self.parents[0]->ensure_grad();
                       std::vector<double> tmp(hw);
                       for (std::size_t p = 0; p < planes; ++p) {
                         for (int k = 0; k < nk; ++k) {
                           linops::correlate_adjoint(
                               std::span<const double>(self.grad).subspan((p * nk + k) * hw, hw),
                               plane, kernels[k], tmp);
                           double* dst = gx.data() + p * hw;
                           for (std::size_t i = 0; i < hw; ++i) dst[i] += tmp[i];
                         }
                       }
                     });
}

Tensor sum(Tape& tape, const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return tape.record("sum", {}, {s}, {x}, [](Node& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (double& g : gx) g += self.grad[0];
  });
}

Tensor mean(Tape& tape, const Tensor& x) {
  return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.numel()));
}

Tensor dot_const(Tape& tape, const Tensor& x, std::vector<double> weights) {
  require(weights.size() == x.numel(), "dot_const: weight length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * x.values()[i];
  return tape.record("dot_const", {}, {s}, {x}, [w = std::move(weights)](Node& self) {
    auto& gx = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[0] * w[i];
  });
}

Tensor huber_loss(Tape& tape, const Tensor& a, const Tensor& b, double delta) {
  require(a.shape() == b.shape(),
          "huber_loss: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  if (!(delta > 0.0)) throw ConfigError("huber_loss: delta must be positive");
  const std::size_t n = a.numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = a.values()[i] - b.values()[i];
    const double ar = std::abs(r);
    s += ar <= delta ? 0.5 * r * r : delta * (ar - 0.5 * delta);
  }
  return tape.record("huber_loss", {}, {s / static_cast<double>(n)}, {a, b}, [delta, n](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    std::vector<double>* ga = grad_sink(self.parents[0]);
    std::vector<double>* gb = grad_sink(self.parents[1]);
    const double g = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = g * std::clamp(av[i] - bv[i], -delta, delta);
      if (ga) (*ga)[i] += d;
      if (gb) (*gb)[i] -= d;
    }
  });
}

Tensor mse_loss(Tape& tape, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(),
          "mse_loss: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  const std::size_t n = a.numel();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = a.values()[i] - b.values()[i];
    s += r * r;
  }
  return tape.record("mse_loss", {}, {s / static_cast<double>(n)}, {a, b}, [n](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    std::vector<double>* ga = grad_sink(self.parents[0]);
    std::vector<double>* gb = grad_sink(self.parents[1]);
    const double g = 2.0 * self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = g * (av[i] - bv[i]);
      if (ga) (*ga)[i] += d;
      if (gb) (*gb)[i] -= d;
    }
  });
}

// ---- gradient checking -----------------------------------------------------

double grad_check(const OpUnderTest& op, const std::vector<Shape>& input_shapes, double eps,
                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<std::vector<double>> inputs;
  for (const Shape& s : input_shapes) {
    std::vector<double> v(s.numel());
    for (double& x : v) x = dist(rng);
    inputs.push_back(std::move(v));
  }
  return grad_check(op, std::move(inputs), input_shapes, eps, seed + 1);
}

double grad_check(const OpUnderTest& op, std::vector<std::vector<double>> inputs,
                  const std::vector<Shape>& input_shapes, double eps, std::uint64_t seed) {
  if (inputs.size() != input_shapes.size()) throw ConfigError("grad_check: input count mismatch");
  std::vector<double> projection;
  auto evaluate = [&](bool with_grad, std::vector<std::vector<double>>* grads) {
    Tape tape;
    std::vector<Tensor> ts;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      ts.emplace_back(input_shapes[i], inputs[i], true);
    }
    Tensor out = op(tape, ts);
    if (projection.empty()) {
      std::mt19937_64 rng(seed);
      std::uniform_real_distribution<double> dist(-1.0, 1.0);
      projection.resize(out.numel());
      for (double& w : projection) w = out.numel() == 1 ? 1.0 : dist(rng);
    }
    Tensor loss = dot_const(tape, out, projection);
    if (with_grad) {
      tape.backward(loss);
      for (const auto& t : ts) grads->push_back(t.grad());
    }
    return loss.item();
  };
  std::vector<std::vector<double>> analytic;
  evaluate(true, &analytic);
  double worst = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    for (std::size_t i = 0; i < inputs[t].size(); ++i) {
      const double saved = inputs[t][i];
      inputs[t][i] = saved + eps;
      const double fp = evaluate(false, nullptr);
      inputs[t][i] = saved - eps;
      const double fm = evaluate(false, nullptr);
      inputs[t][i] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[t][i];
      worst = std::max(worst, std::abs(a - numeric) /
                                  std::max({1.0, std::abs(a), std::abs(numeric)}));
    }
  }
  return worst;
}

// ---- optimizer -------------------------------------------------------------

void adam_step(std::span<const std::span<double>> params,
               std::span<const std::span<const double>> grads, AdamState& state) {
  if (params.size() != grads.size()) throw ConfigError("adam_step: params/grads count mismatch");
  if (!(state.lr > 0.0)) throw ConfigError("adam_step: learning rate must be positive");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size()) {
      throw ConfigError("adam_step: gradient shape differs from parameter " + std::to_string(i));
    }
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ConfigError("adam_step: parameter count changed");
  ++state.step;
  if (state.kind == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t j = 0; j < params[i].size(); ++j) params[i][j] -= state.lr * grads[i][j];
    }
    return;
  }
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != params[i].size()) {
      throw ConfigError("adam_step: parameter " + std::to_string(i) + " changed shape");
    }
    for (std::size_t j = 0; j < m.size(); ++j) {
      const double g = grads[i][j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      params[i][j] -= state.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + state.eps);
    }
  }
}

void adam_step(std::vector<Tensor>& params, AdamState& state) {
  std::vector<std::vector<double>> grads;
  std::vector<std::span<double>> ps;
  std::vector<std::span<const double>> gs;
  grads.reserve(params.size());
  for (auto& p : params) {
    grads.push_back(p.grad());
    ps.emplace_back(p.mutable_values());
    gs.emplace_back(grads.back());
  }
  adam_step(ps, gs, state);
}

// ---- checkpoints -----------------------------------------------------------

namespace {

std::filesystem::path payload_path(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) return __builtin_bswap64(v);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& arrays,
                     const nlohmann::json& extra) {
  nlohmann::json manifest;
  manifest["format"] = "sifsr-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = "float64-le";
  manifest["payload"] = payload_path(path).filename().string();
  manifest["extra"] = extra;
  std::size_t offset = 0;
  std::vector<char> bytes;
  for (const auto& a : arrays) {
    std::size_t count = 1;
    for (int d : a.shape) count *= static_cast<std::size_t>(d);
    if (count != a.values.size()) {
      throw DataError("save_checkpoint: array '" + a.name + "' does not match its shape");
    }
    manifest["arrays"].push_back(
        {{"name", a.name}, {"shape", a.shape}, {"offset", offset}, {"count", count}});
    for (double v : a.values) {
      const std::uint64_t u = to_le(std::bit_cast<std::uint64_t>(v));
      const auto* p = reinterpret_cast<const char*>(&u);
      bytes.insert(bytes.end(), p, p + 8);
    }
    offset += count;
  }
  if (arrays.empty()) manifest["arrays"] = nlohmann::json::array();
  {
    std::ofstream out(payload_path(path), std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("save_checkpoint: cannot open " + payload_path(path).string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("save_checkpoint: write failed");
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("save_checkpoint: cannot open " + path.string());
  out << manifest.dump(2) << '\n';
}

std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path, nlohmann::json* extra) {
  std::ifstream in(path);
  if (!in) throw DataError("load_checkpoint: missing manifest " + path.string());
  nlohmann::json manifest;
  std::vector<NamedArray> arrays;
  std::size_t total = 0;
  try {
    in >> manifest;
    if (manifest.at("format") != "sifsr-checkpoint") {
      throw DataError("load_checkpoint: not a checkpoint manifest");
    }
    for (const auto& e : manifest.at("arrays")) {
      NamedArray a;
      a.name = e.at("name").get<std::string>();
      a.shape = e.at("shape").get<std::vector<int>>();
      const auto count = e.at("count").get<std::size_t>();
      if (e.at("offset").get<std::size_t>() != total) {
        throw DataError("load_checkpoint: non-contiguous offsets");
      }
      a.values.resize(count);
      total += count;
      arrays.push_back(std::move(a));
    }
    if (extra) *extra = manifest.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("load_checkpoint: malformed manifest: ") + e.what());
  }
  const auto bin = path.parent_path() / manifest.at("payload").get<std::string>();
  std::ifstream payload(bin, std::ios::binary);
  if (!payload) throw DataError("load_checkpoint: missing payload " + bin.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(payload)),
                          std::istreambuf_iterator<char>());
  if (bytes.size() != total * 8) {
    throw DataError("load_checkpoint: payload holds " + std::to_string(bytes.size()) +
                    " bytes, manifest expects " + std::to_string(total * 8));
  }
  std::size_t k = 0;
  for (auto& a : arrays) {
    for (double& v : a.values) {
      std::uint64_t u;
      std::memcpy(&u, bytes.data() + 8 * k++, 8);
      v = std::bit_cast<double>(to_le(u));
    }
  }
  return arrays;
}

}  // namespace sifsr::ad
