#include "sifsr/linops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sifsr/error.hpp"

namespace sifsr::linops {
namespace {

int clamp_index(int i, int n) { return std::clamp(i, 0, n - 1); }

void require_odd(const Kernel2D& k) {
  if (k.width % 2 == 0 || k.height % 2 == 0) {
    throw ConfigError("kernel must be odd-sized, got " + std::to_string(k.width) + "x" +
                      std::to_string(k.height));
  }
  if (k.weights.size() != static_cast<std::size_t>(k.width) * k.height) {
    throw ConfigError("kernel weight count does not match its size");
  }
}

void require_plane(std::span<const double> in, PlaneShape shape, std::span<double> out) {
  if (in.size() != shape.size() || out.size() != shape.size()) {
    throw DataError("plane buffer does not match its shape");
  }
}

// Catmull-Rom cubic convolution weight, a = -0.5.
double cubic_weight(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

Grid2D make_like(const Grid2D& like, int w, int h, double pixel_size, std::vector<double> values,
                 std::vector<std::uint8_t> mask) {
  Grid2D out(w, h, pixel_size, std::move(values), std::move(mask));
  out.set_units(like.units());
  return out;
}

}  // namespace

Kernel2D Kernel2D::flipped() const {
  Kernel2D f = *this;
  const std::size_t n = weights.size();
  for (std::size_t i = 0; i < n; ++i) f.weights[i] = weights[n - 1 - i];
  return f;
}

GaussianKernel gaussian_kernel(double sigma_px, int radius) {
  if (sigma_px < 0.0 || !std::isfinite(sigma_px)) {
    throw ConfigError("gaussian_kernel: sigma must be >= 0");
  }
  if (radius < 0) throw ConfigError("gaussian_kernel: radius must be >= 0");
  GaussianKernel g;
  g.sigma_px = sigma_px;
  g.radius = radius;
  const int size = 2 * radius + 1;
  g.kernel.width = size;
  g.kernel.height = size;
  g.kernel.weights.assign(static_cast<std::size_t>(size) * size, 0.0);
  if (sigma_px < 0.3) {
    g.kernel.weights[static_cast<std::size_t>(radius) * size + radius] = 1.0;
    return g;
  }
  double sum = 0.0;
  const double inv = 1.0 / (2.0 * sigma_px * sigma_px);
  for (int j = -radius; j <= radius; ++j) {
    for (int i = -radius; i <= radius; ++i) {
      const double w = std::exp(-(i * i + j * j) * inv);
      g.kernel.weights[static_cast<std::size_t>(j + radius) * size + (i + radius)] = w;
      sum += w;
    }
  }
  for (double& w : g.kernel.weights) w /= sum;
  return g;
}

GaussianKernel gaussian_kernel(double sigma_px) {
  if (sigma_px < 0.0) throw ConfigError("gaussian_kernel: sigma must be >= 0");
  return gaussian_kernel(sigma_px, static_cast<int>(std::ceil(3.0 * sigma_px - 1e-12)));
}

GaussianKernel gaussian_from_half_width(double half_width_m, double pixel_size_m) {
  if (!(half_width_m >= 0.0) || !(pixel_size_m > 0.0)) {
    throw ConfigError("gaussian_from_half_width: invalid width or pixel size");
  }
  const double radius_px = half_width_m / pixel_size_m;
  return gaussian_kernel(0.5 * radius_px, static_cast<int>(std::ceil(radius_px - 1e-9)));
}

double default_mtf_sigma(int r) { return 0.5 * r; }

void correlate(std::span<const double> in, PlaneShape shape, const Kernel2D& k,
               std::span<double> out) {
  require_odd(k);
  require_plane(in, shape, out);
  const int rx = k.width / 2;
  const int ry = k.height / 2;
  const int pw = shape.width + 2 * rx;
  const int ph = shape.height + 2 * ry;
  std::vector<double> pad(static_cast<std::size_t>(pw) * ph);
  for (int py = 0; py < ph; ++py) {
    const int sy = clamp_index(py - ry, shape.height);
    for (int px = 0; px < pw; ++px) {
      const int sx = clamp_index(px - rx, shape.width);
      pad[static_cast<std::size_t>(py) * pw + px] = in[static_cast<std::size_t>(sy) * shape.width + sx];
    }
  }
  for (int y = 0; y < shape.height; ++y) {
    for (int x = 0; x < shape.width; ++x) {
      double s = 0.0;
      for (int j = 0; j < k.height; ++j) {
        const double* row = &pad[static_cast<std::size_t>(y + j) * pw + x];
        const double* kw = &k.weights[static_cast<std::size_t>(j) * k.width];
        for (int i = 0; i < k.width; ++i) s += kw[i] * row[i];
      }
      out[static_cast<std::size_t>(y) * shape.width + x] = s;
    }
  }
}

void correlate_adjoint(std::span<const double> in, PlaneShape shape, const Kernel2D& k,
                       std::span<double> out) {
  require_odd(k);
  require_plane(in, shape, out);
  const int rx = k.width / 2;
  const int ry = k.height / 2;
  const int pw = shape.width + 2 * rx;
  const int ph = shape.height + 2 * ry;
  std::vector<double> pad(static_cast<std::size_t>(pw) * ph, 0.0);
  for (int y = 0; y < shape.height; ++y) {
    for (int x = 0; x < shape.width; ++x) {
      const double v = in[static_cast<std::size_t>(y) * shape.width + x];
      for (int j = 0; j < k.height; ++j) {
        double* row = &pad[static_cast<std::size_t>(y + j) * pw + x];
        const double* kw = &k.weights[static_cast<std::size_t>(j) * k.width];
        for (int i = 0; i < k.width; ++i) row[i] += kw[i] * v;
      }
    }
  }
  std::fill(out.begin(), out.end(), 0.0);
  for (int py = 0; py < ph; ++py) {
    const int sy = clamp_index(py - ry, shape.height);
    for (int px = 0; px < pw; ++px) {
      const int sx = clamp_index(px - rx, shape.width);
      out[static_cast<std::size_t>(sy) * shape.width + sx] += pad[static_cast<std::size_t>(py) * pw + px];
    }
  }
}

std::vector<AxisTaps> resample_taps(int in, int out, Interp interp) {
  if (in < 1 || out < 1) throw ConfigError("resample: dimensions must be >= 1");
  std::vector<AxisTaps> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    AxisTaps& t = taps[static_cast<std::size_t>(o)];
    if (interp == Interp::kBicubic) {
      const double fl = std::floor(src);
      const int i0 = static_cast<int>(fl);
      const double f = src - fl;
      t.count = 4;
      t.index = {clamp_index(i0 - 1, in), clamp_index(i0, in), clamp_index(i0 + 1, in),
                 clamp_index(i0 + 2, in)};
      t.weight = {cubic_weight(f + 1.0), cubic_weight(f), cubic_weight(1.0 - f),
                  cubic_weight(2.0 - f)};
    } else {
      src = std::max(src, 0.0);
      const double fl = std::floor(src);
      const int i0 = std::min(static_cast<int>(fl), in - 1);
      const int i1 = std::min(i0 + 1, in - 1);
      const double f = src - fl;
      t.count = 2;
      t.index = {i0, i1, 0, 0};
      t.weight = {1.0 - f, f, 0.0, 0.0};
    }
  }
  return taps;
}

void resample(std::span<const double> in, PlaneShape in_shape, PlaneShape out_shape, Interp interp,
              std::span<double> out) {
  if (in.size() != in_shape.size() || out.size() != out_shape.size()) {
    throw DataError("resample: buffer does not match its shape");
  }
  const auto tx = resample_taps(in_shape.width, out_shape.width, interp);
  const auto ty = resample_taps(in_shape.height, out_shape.height, interp);
  // rows first: (out_w x in_h)
  std::vector<double> tmp(static_cast<std::size_t>(out_shape.width) * in_shape.height);
  for (int y = 0; y < in_shape.height; ++y) {
    const double* row = &in[static_cast<std::size_t>(y) * in_shape.width];
    for (int x = 0; x < out_shape.width; ++x) {
      const AxisTaps& t = tx[static_cast<std::size_t>(x)];
      double s = 0.0;
      for (int k = 0; k < t.count; ++k) s += t.weight[k] * row[t.index[k]];
      tmp[static_cast<std::size_t>(y) * out_shape.width + x] = s;
    }
  }
  for (int y = 0; y < out_shape.height; ++y) {
    const AxisTaps& t = ty[static_cast<std::size_t>(y)];
    double* dst = &out[static_cast<std::size_t>(y) * out_shape.width];
    std::fill(dst, dst + out_shape.width, 0.0);
    for (int k = 0; k < t.count; ++k) {
      const double* src = &tmp[static_cast<std::size_t>(t.index[k]) * out_shape.width];
      const double w = t.weight[k];
      for (int x = 0; x < out_shape.width; ++x) dst[x] += w * src[x];
    }
  }
}

void resample_adjoint(std::span<const double> in, PlaneShape in_shape, PlaneShape out_shape,
                      Interp interp, std::span<double> out) {
  // `in` lives on out_shape, `out` on in_shape (transpose of resample).
  if (in.size() != out_shape.size() || out.size() != in_shape.size()) {
    throw DataError("resample_adjoint: buffer does not match its shape");
  }
  const auto tx = resample_taps(in_shape.width, out_shape.width, interp);
  const auto ty = resample_taps(in_shape.height, out_shape.height, interp);
  std::vector<double> tmp(static_cast<std::size_t>(out_shape.width) * in_shape.height, 0.0);
  for (int y = 0; y < out_shape.height; ++y) {
    const AxisTaps& t = ty[static_cast<std::size_t>(y)];
    const double* src = &in[static_cast<std::size_t>(y) * out_shape.width];
    for (int k = 0; k < t.count; ++k) {
      double* dst = &tmp[static_cast<std::size_t>(t.index[k]) * out_shape.width];
      const double w = t.weight[k];
      for (int x = 0; x < out_shape.width; ++x) dst[x] += w * src[x];
    }
  }
  std::fill(out.begin(), out.end(), 0.0);
  for (int y = 0; y < in_shape.height; ++y) {
    double* row = &out[static_cast<std::size_t>(y) * in_shape.width];
    const double* src = &tmp[static_cast<std::size_t>(y) * out_shape.width];
    for (int x = 0; x < out_shape.width; ++x) {
      const AxisTaps& t = tx[static_cast<std::size_t>(x)];
      for (int k = 0; k < t.count; ++k) row[t.index[k]] += t.weight[k] * src[x];
    }
  }
}

const std::array<Kernel2D, 4>& sobel_kernels() {
  static const std::array<Kernel2D, 4> kernels = {
      Kernel2D{3, 3, {-1, 0, 1, -2, 0, 2, -1, 0, 1}},
      Kernel2D{3, 3, {-1, -2, -1, 0, 0, 0, 1, 2, 1}},
      Kernel2D{3, 3, {0, 1, 2, -1, 0, 1, -2, -1, 0}},
      Kernel2D{3, 3, {2, 1, 0, 1, 0, -1, 0, -1, -2}},
  };
  return kernels;
}

const Kernel2D& sobel_kernel(SobelDirection d) {
  return sobel_kernels()[static_cast<std::size_t>(d)];
}

Grid2D conv_replicate(const Grid2D& image, const Kernel2D& kernel) {
  require_odd(kernel);
  const PlaneShape shape{image.width(), image.height()};
  std::vector<double> out(shape.size());
  if (image.fully_valid()) {
    correlate(image.values(), shape, kernel, out);
    return make_like(image, shape.width, shape.height, image.pixel_size(), std::move(out),
                     std::vector<std::uint8_t>(shape.size(), 1));
  }
  std::vector<std::uint8_t> mask(shape.size(), 0);
  const int rx = kernel.width / 2;
  const int ry = kernel.height / 2;
  for (int y = 0; y < shape.height; ++y) {
    for (int x = 0; x < shape.width; ++x) {
      double s = 0.0, wsum = 0.0;
      for (int j = 0; j < kernel.height; ++j) {
        const int sy = clamp_index(y + j - ry, shape.height);
        for (int i = 0; i < kernel.width; ++i) {
          const int sx = clamp_index(x + i - rx, shape.width);
          if (!image.valid(sx, sy)) continue;
          const double w = kernel(i, j);
          s += w * image(sx, sy);
          wsum += w;
        }
      }
      const std::size_t idx = static_cast<std::size_t>(y) * shape.width + x;
      if (std::abs(wsum) > 1e-12) {
        out[idx] = s / wsum;
        mask[idx] = 1;
      }
    }
  }
  return make_like(image, shape.width, shape.height, image.pixel_size(), std::move(out),
                   std::move(mask));
}

Grid2D bicubic_resize(const Grid2D& image, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1) throw ConfigError("bicubic_resize: output dims must be >= 1");
  const PlaneShape in_shape{image.width(), image.height()};
  const PlaneShape out_shape{out_w, out_h};
  const double pixel_size = image.pixel_size() * image.width() / static_cast<double>(out_w);
  std::vector<double> out(out_shape.size());
  if (image.fully_valid()) {
    resample(image.values(), in_shape, out_shape, Interp::kBicubic, out);
    return make_like(image, out_w, out_h, pixel_size, std::move(out),
                     std::vector<std::uint8_t>(out_shape.size(), 1));
  }
  const auto tx = resample_taps(in_shape.width, out_w, Interp::kBicubic);
  const auto ty = resample_taps(in_shape.height, out_h, Interp::kBicubic);
  std::vector<std::uint8_t> mask(out_shape.size(), 0);
  for (int y = 0; y < out_h; ++y) {
    const AxisTaps& t_y = ty[static_cast<std::size_t>(y)];
    for (int x = 0; x < out_w; ++x) {
      const AxisTaps& t_x = tx[static_cast<std::size_t>(x)];
      double s = 0.0, wsum = 0.0;
      for (int b = 0; b < t_y.count; ++b) {
        for (int a = 0; a < t_x.count; ++a) {
          if (!image.valid(t_x.index[a], t_y.index[b])) continue;
          const double w = t_x.weight[a] * t_y.weight[b];
          s += w * image(t_x.index[a], t_y.index[b]);
          wsum += w;
        }
      }
      const std::size_t idx = static_cast<std::size_t>(y) * out_w + x;
      if (wsum >= 0.5) {
        out[idx] = s / wsum;
        mask[idx] = 1;
      }
    }
  }
  return make_like(image, out_w, out_h, pixel_size, std::move(out), std::move(mask));
}

Grid2D mtf_degrade(const Grid2D& hr, int r, double sigma_px) {
  if (r < 1) throw ConfigError("mtf_degrade: factor must be >= 1");
  if (hr.width() % r != 0 || hr.height() % r != 0) {
    throw ConfigError("mtf_degrade: dimensions " + std::to_string(hr.width()) + "x" +
                      std::to_string(hr.height()) + " not divisible by " + std::to_string(r));
  }
  const Grid2D blurred = conv_replicate(hr, gaussian_kernel(sigma_px).kernel);
  return bicubic_resize(blurred, hr.width() / r, hr.height() / r);
}

std::array<Grid2D, 4> sobel_directional(const Grid2D& image) {
  if (image.width() < 3 || image.height() < 3) {
    throw ConfigError("sobel_directional: image must be at least 3x3");
  }
  const PlaneShape shape{image.width(), image.height()};
  const auto& kernels = sobel_kernels();
  const bool dense = image.fully_valid();
  std::array<Grid2D, 4> result;
  for (std::size_t d = 0; d < 4; ++d) {
    std::vector<double> out(shape.size());
    std::vector<std::uint8_t> mask(shape.size(), 1);
    if (dense) {
      correlate(image.values(), shape, kernels[d], out);
    } else {
      // masked neighbors take the center value
      for (int y = 0; y < shape.height; ++y) {
        for (int x = 0; x < shape.width; ++x) {
          const std::size_t idx = static_cast<std::size_t>(y) * shape.width + x;
          if (!image.valid(x, y)) {
            mask[idx] = 0;
            out[idx] = 0.0;
            continue;
          }
          const double c = image(x, y);
          double s = 0.0;
          for (int j = 0; j < 3; ++j) {
            const int sy = clamp_index(y + j - 1, shape.height);
            for (int i = 0; i < 3; ++i) {
              const int sx = clamp_index(x + i - 1, shape.width);
              s += kernels[d](i, j) * (image.valid(sx, sy) ? image(sx, sy) : c);
            }
          }
          out[idx] = s;
        }
      }
    }
    result[d] = make_like(image, shape.width, shape.height, image.pixel_size(), std::move(out),
                          std::move(mask));
  }
  return result;
}

Grid2D highpass(const Grid2D& image, const Kernel2D& kernel) {
  const Grid2D low = conv_replicate(image, kernel);
  std::vector<double> out(image.size());
  std::vector<std::uint8_t> mask(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const bool ok = image.valid(i) && low.valid(i);
    mask[i] = ok ? 1 : 0;
    out[i] = ok ? image.values()[i] - low.values()[i] : 0.0;
  }
  return make_like(image, image.width(), image.height(), image.pixel_size(), std::move(out),
                   std::move(mask));
}

std::vector<double> LinearOp::apply(std::span<const double> x) const {
  if (x.size() != in_shape.size()) throw DataError(descriptor + ": input size mismatch");
  std::vector<double> y(out_shape.size());
  forward(x, y);
  return y;
}

std::vector<double> LinearOp::apply_adjoint(std::span<const double> y) const {
  if (y.size() != out_shape.size()) throw DataError(descriptor + ": adjoint input size mismatch");
  std::vector<double> x(in_shape.size());
  adjoint(y, x);
  return x;
}

LinearOp make_operator(const OpSpec& spec) {
  const PlaneShape shape = spec.shape;
  if (shape.width < 1 || shape.height < 1) throw ConfigError("make_operator: empty shape");
  LinearOp op;
  op.descriptor = spec.descriptor;
  op.in_shape = shape;
  const std::string& d = spec.descriptor;

  if (d == "gaussian_conv" || d == "highpass") {
    const Kernel2D k = (spec.radius < 0 ? gaussian_kernel(spec.sigma_px)
                                        : gaussian_kernel(spec.sigma_px, spec.radius))
                           .kernel;
    op.out_shape = shape;
    if (d == "gaussian_conv") {
      op.forward = [k, shape](std::span<const double> x, std::span<double> y) {
        correlate(x, shape, k, y);
      };
      op.adjoint = [k, shape](std::span<const double> y, std::span<double> x) {
        correlate_adjoint(y, shape, k, x);
      };
    } else {
      op.forward = [k, shape](std::span<const double> x, std::span<double> y) {
        correlate(x, shape, k, y);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] - y[i];
      };
      op.adjoint = [k, shape](std::span<const double> y, std::span<double> x) {
        correlate_adjoint(y, shape, k, x);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = y[i] - x[i];
      };
    }
    return op;
  }
  if (d == "bicubic_down" || d == "bicubic_up") {
    if (spec.factor < 1) throw ConfigError("make_operator: factor must be >= 1");
    PlaneShape out;
    if (d == "bicubic_down") {
      if (shape.width % spec.factor != 0 || shape.height % spec.factor != 0) {
        throw ConfigError("make_operator: shape not divisible by factor");
      }
      out = {shape.width / spec.factor, shape.height / spec.factor};
    } else {
      out = {shape.width * spec.factor, shape.height * spec.factor};
    }
    op.out_shape = out;
    op.forward = [shape, out](std::span<const double> x, std::span<double> y) {
      resample(x, shape, out, Interp::kBicubic, y);
    };
    op.adjoint = [shape, out](std::span<const double> y, std::span<double> x) {
      resample_adjoint(y, shape, out, Interp::kBicubic, x);
    };
    return op;
  }
  int sobel = -1;
  if (d == "sobel_k") {
    sobel = spec.sobel_index;
  } else if (d.size() == 7 && d.rfind("sobel_", 0) == 0 && d[6] >= '0' && d[6] <= '3') {
    sobel = d[6] - '0';
  }
  if (sobel >= 0) {
    if (sobel > 3) throw ConfigError("make_operator: sobel index must be in 0..3");
    const Kernel2D k = sobel_kernels()[static_cast<std::size_t>(sobel)];
    op.out_shape = shape;
    op.forward = [k, shape](std::span<const double> x, std::span<double> y) {
      correlate(x, shape, k, y);
    };
    op.adjoint = [k, shape](std::span<const double> y, std::span<double> x) {
      correlate_adjoint(y, shape, k, x);
    };
    return op;
  }
  throw ConfigError("make_operator: unknown descriptor '" + d + "'");
}

LinearOp observation_operator(PlaneShape hr_shape, int r, double sigma_px) {
  if (r < 1 || hr_shape.width % r != 0 || hr_shape.height % r != 0) {
    throw ConfigError("observation_operator: shape not divisible by factor");
  }
  const Kernel2D k = gaussian_kernel(sigma_px).kernel;
  const PlaneShape lr{hr_shape.width / r, hr_shape.height / r};
  LinearOp op;
  op.descriptor = "observation";
  op.in_shape = hr_shape;
  op.out_shape = lr;
  op.forward = [k, hr_shape, lr](std::span<const double> x, std::span<double> y) {
    std::vector<double> blurred(hr_shape.size());
    correlate(x, hr_shape, k, blurred);
    resample(blurred, hr_shape, lr, Interp::kBicubic, y);
  };
  op.adjoint = [k, hr_shape, lr](std::span<const double> y, std::span<double> x) {
    std::vector<double> up(hr_shape.size());
    resample_adjoint(y, hr_shape, lr, Interp::kBicubic, up);
    correlate_adjoint(up, hr_shape, k, x);
  };
  return op;
}

}  // namespace sifsr::linops
