#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sifsr/autodiff.hpp"
#include "sifsr/objective.hpp"
#include "sifsr/raster.hpp"

// Multi-residual U-Net mapping (NDVI, bicubic-upsampled LST) to a sharpened
// LST field on the NDVI grid, plus its two training regimes.
//
// Layout for widths [c0, c1, c2, c3]:
//   stem:     block(2 -> c0), block(c0 -> c0)                         skip s0
//   level l:  p = avgpool(prev); r = p + block(block(p));
//             block(c_{l-1} -> c_l)(r)                                skip s_l
//   decoder:  for l = 3..1: up(x) || s_{l-1} -> block -> block (c_{l-1})
//   head:     conv(c0 -> 1)
// A block is conv3x3 (replicate padding, no bias) -> batchnorm -> relu.
namespace sifsr::unet {

struct UNetConfig {
  std::vector<int> widths{8, 16, 32, 64};
  int depth = 3;
  int in_channels = 2;
  int out_channels = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const UNetConfig& cfg);
UNetConfig unet_config_from_json(const nlohmann::json& j);

struct ConvBlock {
  std::string name;
  ad::Tensor weight;
  ad::Tensor gamma;
  ad::Tensor beta;
  ad::BatchNormState bn;
};

class UNet {
 public:
  UNet() = default;
  // Seeded He-uniform weights, batchnorm scale 1 and shift 0.
  explicit UNet(const UNetConfig& cfg);

  const UNetConfig& config() const { return cfg_; }

  // input is (n, 2, h, w) with h and w divisible by 8; returns (n, 1, h, w).
  ad::Tensor forward(ad::Tape& tape, const ad::Tensor& input, bool train);
  ad::Tensor forward(ad::Tape& tape, const ad::Tensor& ndvi, const ad::Tensor& lst_up, bool train);

  std::vector<ad::Tensor> parameters() const;
  std::size_t parameter_count() const;

  // Trainable tensors and batchnorm running statistics, in a fixed order.
  std::vector<ad::NamedArray> state() const;
  void load_state(const std::vector<ad::NamedArray>& arrays);

  void save(const std::filesystem::path& path, nlohmann::json extra = nlohmann::json::object()) const;
  static UNet load(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

 private:
  ad::Tensor block(ad::Tape& tape, ConvBlock& b, const ad::Tensor& x, bool train);

  UNetConfig cfg_;
  std::vector<ConvBlock> stem_;
  std::vector<std::vector<ConvBlock>> encoder_;  // 3 blocks per level
  std::vector<std::vector<ConvBlock>> decoder_;  // 2 blocks per level, deepest first
  ad::Tensor head_;
};

// Per-layer parameter arithmetic for a width plan, independent of UNet.
std::size_t expected_parameter_count(const std::vector<int>& widths);

// ---- batching --------------------------------------------------------------

// Stacks equally sized single-band grids into an (n, 1, h, w) tensor.
ad::Tensor stack(const std::vector<Grid2D>& grids);
Grid2D unstack(const ad::Tensor& t, int index, double pixel_size);

struct SifTerms {
  ad::Tensor total;
  ad::Tensor rec;
  ad::Tensor texture;
};

// The SIF objective on a batch in standardized units, as a differentiable
// graph. Equals the mean over the batch of objective::sif_loss.
SifTerms sif_loss_graph(ad::Tape& tape, const ad::Tensor& candidate, const ad::Tensor& ndvi_hr,
                        const ad::Tensor& lst_lr, const objective::SifConfig& cfg);

// ---- training ----------------------------------------------------------------

struct TrainConfig {
  int epochs = 200;
  int batch = 32;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  ad::OptimizerKind optimizer = ad::OptimizerKind::kAdam;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochLoss {
  int epoch = 0;
  double rec = 0.0;
  double texture = 0.0;
  double total = 0.0;
};

struct TrainResult {
  UNet model;
  NormStats stats;
  std::vector<EpochLoss> history;
  int best_epoch = 0;
  bool diverged = false;
  std::string divergence_message;
};

using EpochCallback = std::function<void(const EpochLoss&)>;

// Self-supervised minimization of the SIF objective over the network weights.
// Returns the parameters of the epoch with the lowest epoch-mean loss.
TrainResult train_sif(std::span<const ScenePair> data, const objective::SifConfig& sif_cfg,
                      const UNetConfig& unet_cfg, const TrainConfig& train_cfg,
                      const EpochCallback& on_epoch = {});

// Supervised reduced-scale training: each pair is degraded once more by r so
// that the network learns to recover the observed LST from inputs one scale
// tier coarser. Loss is MSE in standardized units (reported as `total`).
TrainResult train_sc(std::span<const ScenePair> data, const UNetConfig& unet_cfg,
                     const TrainConfig& train_cfg, double mtf_sigma_px,
                     const EpochCallback& on_epoch = {});

void write_history_csv(const std::vector<EpochLoss>& history, const std::filesystem::path& path);

// ---- inference -----------------------------------------------------------------

// Standardizes, upsamples the LST by r (bicubic), runs the network in eval
// mode and returns Kelvin on the NDVI grid.
Grid2D infer(UNet& model, const ScenePair& pair, const NormStats& stats);

// Network input for one pair: standardized NDVI and bicubic-upsampled LST.
std::pair<Grid2D, Grid2D> network_inputs(const ScenePair& pair, const NormStats& stats);

}  // namespace sifsr::unet
