#include "sifsr/unet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "sifsr/error.hpp"
#include "sifsr/linops.hpp"

namespace sifsr::unet {
namespace {

ConvBlock make_block(std::string name, int cin, int cout, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / (9.0 * cin));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> w(static_cast<std::size_t>(cout) * cin * 9);
  for (double& v : w) v = dist(rng);
  ConvBlock b;
  b.name = std::move(name);
  b.weight = ad::Tensor({cout, cin, 3, 3}, std::move(w), true);
  b.gamma = ad::Tensor({1, cout, 1, 1}, std::vector<double>(static_cast<std::size_t>(cout), 1.0), true);
  b.beta = ad::Tensor::zeros({1, cout, 1, 1}, true);
  b.bn = ad::BatchNormState(cout);
  return b;
}

std::vector<int> dims(const ad::Shape& s) { return {s.n, s.c, s.h, s.w}; }

}  // namespace

// ---- configuration -----------------------------------------------------------

void UNetConfig::validate() const {
  if (depth != 3) throw ConfigError("UNetConfig: depth is fixed at 3");
  if (widths.size() != 4) throw ConfigError("UNetConfig: width plan needs exactly 4 entries");
  for (int w : widths) {
    if (w < 1) throw ConfigError("UNetConfig: widths must be positive");
  }
  if (in_channels != 2) throw ConfigError("UNetConfig: in_channels must be 2 (NDVI || LST)");
  if (out_channels != 1) throw ConfigError("UNetConfig: out_channels must be 1");
}

nlohmann::json to_json(const UNetConfig& cfg) {
  return {{"widths", cfg.widths},
          {"depth", cfg.depth},
          {"in_channels", cfg.in_channels},
          {"out_channels", cfg.out_channels},
          {"seed", cfg.seed}};
}

UNetConfig unet_config_from_json(const nlohmann::json& j) {
  UNetConfig cfg;
  try {
    cfg.widths = j.value("widths", cfg.widths);
    cfg.depth = j.value("depth", cfg.depth);
    cfg.in_channels = j.value("in_channels", cfg.in_channels);
    cfg.out_channels = j.value("out_channels", cfg.out_channels);
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("UNetConfig: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
  if (batch < 2) throw ConfigError("TrainConfig: batch must be >= 2");
  if (!(lr > 0.0)) throw ConfigError("TrainConfig: lr must be positive");
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"epochs", cfg.epochs},
          {"batch", cfg.batch},
          {"lr", cfg.lr},
          {"seed", cfg.seed},
          {"optimizer", cfg.optimizer == ad::OptimizerKind::kAdam ? "adam" : "sgd"}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  try {
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch = j.value("batch", cfg.batch);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.seed = j.value("seed", cfg.seed);
    const std::string opt = j.value("optimizer", std::string("adam"));
    if (opt == "adam") {
      cfg.optimizer = ad::OptimizerKind::kAdam;
    } else if (opt == "sgd") {
      cfg.optimizer = ad::OptimizerKind::kSgd;
    } else {
      throw ConfigError("TrainConfig: unknown optimizer '" + opt + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("TrainConfig: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---- network -------------------------------------------------------------------

UNet::UNet(const UNetConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const auto& c = cfg_.widths;
  std::mt19937_64 rng(cfg_.seed);
  stem_.push_back(make_block("stem0", cfg_.in_channels, c[0], rng));
  stem_.push_back(make_block("stem1", c[0], c[0], rng));
  for (int l = 1; l <= 3; ++l) {
    const std::string p = "enc" + std::to_string(l) + ".";
    encoder_.push_back({make_block(p + "0", c[l - 1], c[l - 1], rng),
                        make_block(p + "1", c[l - 1], c[l - 1], rng),
                        make_block(p + "2", c[l - 1], c[l], rng)});
  }
  for (int l = 3; l >= 1; --l) {
    const std::string p = "dec" + std::to_string(l) + ".";
    decoder_.push_back({make_block(p + "0", c[l] + c[l - 1], c[l - 1], rng),
                        make_block(p + "1", c[l - 1], c[l - 1], rng)});
  }
  const double bound = std::sqrt(6.0 / (9.0 * c[0]));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> w(static_cast<std::size_t>(c[0]) * 9);
  for (double& v : w) v = dist(rng);
  head_ = ad::Tensor({cfg_.out_channels, c[0], 3, 3}, std::move(w), true);
}

ad::Tensor UNet::block(ad::Tape& tape, ConvBlock& b, const ad::Tensor& x, bool train) {
  const ad::Tensor y = ad::conv2d(tape, x, b.weight);
  return ad::relu(tape, ad::batchnorm2d(tape, y, b.gamma, b.beta, b.bn, train));
}

ad::Tensor UNet::forward(ad::Tape& tape, const ad::Tensor& input, bool train) {
  const ad::Shape s = input.shape();
  if (s.c != cfg_.in_channels) {
    throw DataError("UNet: expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                    std::to_string(s.c));
  }
  if (s.h % 8 != 0 || s.w % 8 != 0) {
    throw DataError("UNet: spatial size " + s.str() + " must be divisible by 8");
  }
  std::vector<ad::Tensor> skips;
  ad::Tensor x = block(tape, stem_[1], block(tape, stem_[0], input, train), train);
  skips.push_back(x);
  for (auto& level : encoder_) {
    const ad::Tensor p = ad::avgpool2(tape, x);
    const ad::Tensor r = ad::add(tape, p, block(tape, level[1], block(tape, level[0], p, train), train));
    x = block(tape, level[2], r, train);
    skips.push_back(x);
  }
  for (std::size_t d = 0; d < decoder_.size(); ++d) {
    const ad::Tensor up = ad::upsample_bilinear2(tape, x);
    const ad::Tensor cat = ad::concat(tape, up, skips[skips.size() - 2 - d]);
    x = block(tape, decoder_[d][1], block(tape, decoder_[d][0], cat, train), train);
  }
  return ad::conv2d(tape, x, head_);
}

ad::Tensor UNet::forward(ad::Tape& tape, const ad::Tensor& ndvi, const ad::Tensor& lst_up,
                         bool train) {
  if (!(ndvi.shape() == lst_up.shape())) {
    throw DataError("UNet: NDVI " + ndvi.shape().str() + " and LST " + lst_up.shape().str() +
                    " inputs differ in shape");
  }
  return forward(tape, ad::concat(tape, ndvi, lst_up), train);
}

std::vector<ad::Tensor> UNet::parameters() const {
  std::vector<ad::Tensor> out;
  auto add_block = [&](const ConvBlock& b) {
    out.push_back(b.weight);
    out.push_back(b.gamma);
    out.push_back(b.beta);
  };
  for (const auto& b : stem_) add_block(b);
  for (const auto& level : encoder_) {
    for (const auto& b : level) add_block(b);
  }
  for (const auto& level : decoder_) {
    for (const auto& b : level) add_block(b);
  }
  out.push_back(head_);
  return out;
}

std::size_t UNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

std::vector<ad::NamedArray> UNet::state() const {
  std::vector<ad::NamedArray> out;
  auto add_block = [&](const ConvBlock& b) {
    auto vec = [](const ad::Tensor& t) { return std::vector<double>(t.values().begin(), t.values().end()); };
    const int c = b.gamma.shape().c;
    out.push_back({b.name + ".weight", dims(b.weight.shape()), vec(b.weight)});
    out.push_back({b.name + ".bn.gamma", {c}, vec(b.gamma)});
    out.push_back({b.name + ".bn.beta", {c}, vec(b.beta)});
    out.push_back({b.name + ".bn.running_mean", {c}, b.bn.running_mean});
    out.push_back({b.name + ".bn.running_var", {c}, b.bn.running_var});
  };
  for (const auto& b : stem_) add_block(b);
  for (const auto& level : encoder_) {
    for (const auto& b : level) add_block(b);
  }
  for (const auto& level : decoder_) {
    for (const auto& b : level) add_block(b);
  }
  out.push_back({"head.weight", dims(head_.shape()),
                 std::vector<double>(head_.values().begin(), head_.values().end())});
  return out;
}

void UNet::load_state(const std::vector<ad::NamedArray>& arrays) {
  const auto expected = state();
  if (arrays.size() != expected.size()) {
    throw DataError("UNet::load_state: expected " + std::to_string(expected.size()) +
                    " arrays, got " + std::to_string(arrays.size()));
  }
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    if (arrays[i].name != expected[i].name || arrays[i].shape != expected[i].shape) {
      throw DataError("UNet::load_state: array " + std::to_string(i) + " is '" + arrays[i].name +
                      "', expected '" + expected[i].name + "' with matching shape");
    }
  }
  std::size_t k = 0;
  auto load_block = [&](ConvBlock& b) {
    b.weight.mutable_values() = arrays[k++].values;
    b.gamma.mutable_values() = arrays[k++].values;
    b.beta.mutable_values() = arrays[k++].values;
    b.bn.running_mean = arrays[k++].values;
    b.bn.running_var = arrays[k++].values;
  };
  for (auto& b : stem_) load_block(b);
  for (auto& level : encoder_) {
    for (auto& b : level) load_block(b);
  }
  for (auto& level : decoder_) {
    for (auto& b : level) load_block(b);
  }
  head_.mutable_values() = arrays[k++].values;
}

void UNet::save(const std::filesystem::path& path, nlohmann::json extra) const {
  extra["unet"] = to_json(cfg_);
  extra["parameter_count"] = parameter_count();
  ad::save_checkpoint(path, state(), extra);
}

UNet UNet::load(const std::filesystem::path& path, nlohmann::json* extra) {
  nlohmann::json meta;
  const auto arrays = ad::load_checkpoint(path, &meta);
  if (!meta.contains("unet")) throw DataError("UNet::load: checkpoint lacks a network config");
  UNet net(unet_config_from_json(meta.at("unet")));
  net.load_state(arrays);
  if (extra) *extra = meta;
  return net;
}

std::size_t expected_parameter_count(const std::vector<int>& widths) {
  auto block = [](std::size_t cin, std::size_t cout) { return 9 * cin * cout + 2 * cout; };
  const std::size_t c0 = widths.at(0);
  std::size_t n = block(2, c0) + block(c0, c0);
  for (std::size_t l = 1; l <= 3; ++l) {
    const std::size_t a = widths.at(l - 1), b = widths.at(l);
    n += 2 * block(a, a) + block(a, b);
    n += block(b + a, a) + block(a, a);
  }
  return n + 9 * c0;
}

// ---- batching --------------------------------------------------------------

ad::Tensor stack(const std::vector<Grid2D>& grids) {
  if (grids.empty()) throw ConfigError("stack: no grids");
  const int w = grids[0].width(), h = grids[0].height();
  std::vector<double> v;
  v.reserve(grids.size() * grids[0].size());
  for (const auto& g : grids) {
    if (g.width() != w || g.height() != h) throw DataError("stack: grids differ in shape");
    if (!g.fully_valid()) throw DataError("stack: network inputs must be fully valid");
    v.insert(v.end(), g.values().begin(), g.values().end());
  }
  return ad::Tensor({static_cast<int>(grids.size()), 1, h, w}, std::move(v));
}

Grid2D unstack(const ad::Tensor& t, int index, double pixel_size) {
  const ad::Shape s = t.shape();
  if (s.c != 1 || index < 0 || index >= s.n) throw ConfigError("unstack: bad index or channels");
  const auto plane = t.values().subspan(static_cast<std::size_t>(index) * s.plane(), s.plane());
  return Grid2D(s.w, s.h, pixel_size, std::vector<double>(plane.begin(), plane.end()));
}

SifTerms sif_loss_graph(ad::Tape& tape, const ad::Tensor& candidate, const ad::Tensor& ndvi_hr,
                        const ad::Tensor& lst_lr, const objective::SifConfig& cfg) {
  cfg.validate();
  const int r = cfg.scale_factor;
  const ad::Shape cs = candidate.shape();
  if (!(cs == ndvi_hr.shape()) || cs.c != 1) {
    throw DataError("sif_loss_graph: candidate and NDVI must be equal single-channel batches");
  }
  const ad::Shape ls = lst_lr.shape();
  if (ls.n != cs.n || ls.c != 1 || cs.h != r * ls.h || cs.w != r * ls.w) {
    throw DataError("sif_loss_graph: LST batch must be r times coarser than the candidate");
  }
  const auto gauss = linops::gaussian_kernel(cfg.mtf_sigma_px).kernel;
  SifTerms t;
  t.rec = ad::huber_loss(
      tape, lst_lr, ad::bicubic_down(tape, ad::fixed_conv(tape, candidate, {gauss}), r),
      cfg.huber_delta);

  ad::Tensor g_cand, g_ndvi;
  if (cfg.texture_op == objective::TextureOp::kSobel) {
    const auto& k = linops::sobel_kernels();
    const std::vector<linops::Kernel2D> bank(k.begin(), k.end());
    g_cand = ad::fixed_conv(tape, candidate, bank);
    g_ndvi = ad::fixed_conv(tape, ndvi_hr, bank);
  } else {
    g_cand = ad::sub(tape, candidate, ad::fixed_conv(tape, candidate, {gauss}));
    g_ndvi = ad::sub(tape, ndvi_hr, ad::fixed_conv(tape, ndvi_hr, {gauss}));
  }
  // channels and batch members have equal size, so the global mean is the
  // mean of per-channel, per-image means
  t.texture = ad::huber_loss(tape, ad::scale(tape, g_ndvi, cfg.gamma), g_cand, cfg.huber_delta);
  t.total = ad::lincomb(tape, t.texture, cfg.alpha, t.rec, 1.0 - cfg.alpha);
  return t;
}

// ---- training ----------------------------------------------------------------

namespace {

struct Sample {
  Grid2D ndvi;    // network input channel 0
  Grid2D lst_up;  // network input channel 1
  Grid2D target;  // LST on the coarse grid (SIF) or on the output grid (SC)
};

using BatchLoss = std::function<SifTerms(ad::Tape&, const ad::Tensor& output,
                                         const std::vector<const Sample*>&)>;

std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order, int batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(batch));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  // a trailing singleton would give batchnorm a one-image batch
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

TrainResult run_training(const std::vector<Sample>& samples, const NormStats& stats,
                         const UNetConfig& unet_cfg, const TrainConfig& train_cfg,
                         const BatchLoss& loss_fn, const EpochCallback& on_epoch) {
  train_cfg.validate();
  TrainResult result{UNet(unet_cfg), stats, {}, 0, false, {}};
  UNet& model = result.model;
  std::vector<ad::Tensor> params = model.parameters();
  ad::AdamState opt;
  opt.kind = train_cfg.optimizer;
  opt.lr = train_cfg.lr;
  std::mt19937_64 rng(train_cfg.seed);
  std::vector<ad::NamedArray> best_state = model.state();
  double best = std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= train_cfg.epochs && !result.diverged; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochLoss e;
    e.epoch = epoch;
    std::size_t seen = 0;
    for (const auto& idx : make_batches(order, train_cfg.batch)) {
      std::vector<const Sample*> batch;
      std::vector<Grid2D> nd, lu;
      for (std::size_t i : idx) {
        batch.push_back(&samples[i]);
        nd.push_back(samples[i].ndvi);
        lu.push_back(samples[i].lst_up);
      }
      try {
        ad::Tape tape;
        const ad::Tensor out = model.forward(tape, stack(nd), stack(lu), true);
        const SifTerms terms = loss_fn(tape, out, batch);
        if (!std::isfinite(terms.total.item())) throw NumericError("non-finite loss");
        tape.backward(terms.total);
        ad::adam_step(params, opt);
        for (auto& p : params) p.zero_grad();
        const double n = static_cast<double>(idx.size());
        e.total += n * terms.total.item();
        e.rec += n * terms.rec.item();
        e.texture += n * terms.texture.item();
        seen += idx.size();
      } catch (const NumericError& err) {
        result.diverged = true;
        result.divergence_message =
            "epoch " + std::to_string(epoch) + ": " + err.what() +
            "; restored parameters from epoch " + std::to_string(result.best_epoch);
        break;
      }
    }
    if (result.diverged) break;
    e.total /= static_cast<double>(seen);
    e.rec /= static_cast<double>(seen);
    e.texture /= static_cast<double>(seen);
    result.history.push_back(e);
    if (on_epoch) on_epoch(e);
    if (e.total < best) {
      best = e.total;
      result.best_epoch = epoch;
      best_state = model.state();
    }
  }
  model.load_state(best_state);
  return result;
}

void require_uniform(std::span<const ScenePair> data) {
  if (data.empty()) throw ConfigError("training: empty dataset");
  for (const auto& p : data) {
    p.validate();
    if (!same_shape(p.ndvi_hr, data[0].ndvi_hr) || p.scale_factor != data[0].scale_factor) {
      throw DataError("training: all pairs must share shape and scale factor");
    }
  }
}

}  // namespace

std::pair<Grid2D, Grid2D> network_inputs(const ScenePair& pair, const NormStats& stats) {
  stats.validate();
  const ScenePair s = objective::standardize_pair(pair, stats);
  Grid2D up = linops::bicubic_resize(s.lst_lr, s.ndvi_hr.width(), s.ndvi_hr.height());
  return {s.ndvi_hr, up};
}

TrainResult train_sif(std::span<const ScenePair> data, const objective::SifConfig& sif_cfg,
                      const UNetConfig& unet_cfg, const TrainConfig& train_cfg,
                      const EpochCallback& on_epoch) {
  require_uniform(data);
  sif_cfg.validate();
  if (sif_cfg.scale_factor != data[0].scale_factor) {
    throw ConfigError("train_sif: objective scale factor differs from the data");
  }
  const NormStats stats = compute_norm_stats(data);
  std::vector<Sample> samples;
  for (const auto& p : data) {
    auto [nd, up] = network_inputs(p, stats);
    samples.push_back({nd, up, objective::standardize(p.lst_lr, stats.lst_mean, stats.lst_std)});
  }
  auto loss = [&](ad::Tape& tape, const ad::Tensor& out, const std::vector<const Sample*>& batch) {
    std::vector<Grid2D> nd, lr;
    for (const Sample* s : batch) {
      nd.push_back(s->ndvi);
      lr.push_back(s->target);
    }
    return sif_loss_graph(tape, out, stack(nd), stack(lr), sif_cfg);
  };
  return run_training(samples, stats, unet_cfg, train_cfg, loss, on_epoch);
}

TrainResult train_sc(std::span<const ScenePair> data, const UNetConfig& unet_cfg,
                     const TrainConfig& train_cfg, double mtf_sigma_px,
                     const EpochCallback& on_epoch) {
  require_uniform(data);
  const int r = data[0].scale_factor;
  const NormStats stats = compute_norm_stats(data);
  std::vector<Sample> samples;
  for (const auto& p : data) {
    if (p.lst_lr.width() % r != 0 || p.lst_lr.height() % r != 0) {
      throw DataError("train_sc: LST grid must be divisible by the scale factor");
    }
    const ScenePair coarse{linops::mtf_degrade(p.lst_lr, r, mtf_sigma_px),
                           linops::mtf_degrade(p.ndvi_hr, r, mtf_sigma_px), r};
    auto [nd, up] = network_inputs(coarse, stats);
    samples.push_back({nd, up, objective::standardize(p.lst_lr, stats.lst_mean, stats.lst_std)});
  }
  auto loss = [](ad::Tape& tape, const ad::Tensor& out, const std::vector<const Sample*>& batch) {
    std::vector<Grid2D> target;
    for (const Sample* s : batch) target.push_back(s->target);
    SifTerms t;
    t.total = ad::mse_loss(tape, out, stack(target));
    t.rec = t.total;
    t.texture = ad::Tensor::scalar(0.0);
    return t;
  };
  return run_training(samples, stats, unet_cfg, train_cfg, loss, on_epoch);
}

void write_history_csv(const std::vector<EpochLoss>& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("write_history_csv: cannot open " + path.string());
  out << "epoch,rec_term,texture_term,total\n";
  char buf[128];
  for (const auto& e : history) {
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g\n", e.epoch, e.rec, e.texture, e.total);
    out << buf;
  }
}

// ---- inference -----------------------------------------------------------------

Grid2D infer(UNet& model, const ScenePair& pair, const NormStats& stats) {
  pair.validate();
  auto [nd, up] = network_inputs(pair, stats);
  ad::Tape tape;
  const ad::Tensor out = model.forward(tape, stack({nd}), stack({up}), false);
  Grid2D sr = objective::destandardize(unstack(out, 0, pair.ndvi_hr.pixel_size()), stats.lst_mean,
                                       stats.lst_std);
  sr.set_units(pair.lst_lr.units().empty() ? "K" : pair.lst_lr.units());
  return sr;
}

}  // namespace sifsr::unet
