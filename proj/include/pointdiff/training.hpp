#pragma once

// Encoder pretraining on visible-patch reconstruction and decoder training
// on the x0-prediction diffusion objective.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "pointdiff/diffusion.hpp"
#include "pointdiff/geometry.hpp"
#include "pointdiff/model.hpp"

namespace pointdiff {

enum class LossSetting { EntireObject, MaskedOnly };

const char* to_string(LossSetting s);
LossSetting loss_setting_from_string(const std::string& s);

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  LossSetting loss_setting = LossSetting::EntireObject;
  std::uint64_t seed = 0;
  std::size_t log_every = 0;         // 0 = silent
  std::size_t checkpoint_every = 0;  // epochs; 0 = only the final one
  std::filesystem::path checkpoint_dir;  // empty = keep checkpoints in memory only

  void validate() const;
  static TrainConfig encoder_defaults();
  static TrainConfig decoder_defaults();
};

struct LossRecord {
  std::size_t step;
  std::size_t epoch;
  double loss;
};

struct TrainResult {
  std::vector<LossRecord> steps;
  std::vector<double> epoch_loss;
  // Mean epoch loss over each checkpoint interval.
  std::vector<double> checkpoint_loss;
};

// "step,epoch,loss" rows in %.17e.
std::string loss_curve_csv(const TrainResult& result);

// One training example: the segmented low-resolution cloud that feeds the
// encoder, and the per-patch targets (group_size * upsample_factor points,
// center-relative, for all G patches).
struct TrainingView {
  PatchSet patches;
  std::vector<std::vector<Point>> targets;
  std::vector<std::vector<Point>> target_absolute;
};

// Clouds must hold exactly G * group_size * upsample_factor points. With a
// factor above one the encoder input is the farthest-point subsample of
// G * group_size points and targets are the nearest neighbours of every
// center in the full cloud.
TrainingView make_training_view(const PointCloud& cloud, const ModelConfig& cfg);

using LogFn = std::function<void(const LossRecord&)>;

template <typename T>
TrainResult pretrain_encoder(Encoder<T>& encoder, const std::vector<PointCloud>& dataset,
                             const TrainConfig& cfg, const LogFn& log = {});

// The encoder is only read.
template <typename T>
TrainResult train_decoder(const Encoder<T>& encoder, Decoder<T>& decoder,
                          const std::vector<PointCloud>& dataset, const TrainConfig& cfg,
                          const NoiseSchedule& schedule, const LogFn& log = {});

// Mask for the `draw`-th example of `epoch` in a run seeded with `seed`.
MaskSpec training_mask(const ModelConfig& cfg, std::uint64_t seed, std::size_t epoch,
                       std::size_t draw, const PatchSet& patches);

// Single-example losses as recorded graphs, shared with the gradient tests.
template <typename T>
tensor::Var encoder_loss(tensor::Graph<T>& g, const Encoder<T>& encoder, const TrainingView& view,
                         const MaskSpec& mask);

struct DiffusionSample {
  std::size_t t;
  std::vector<double> x_t;  // noisy targets in decoder order, flattened
};

DiffusionSample draw_diffusion_sample(const TrainingView& view, const MaskSpec& mask,
                                      const ModelConfig& cfg, const NoiseSchedule& schedule,
                                      std::uint64_t seed);

template <typename T>
tensor::Var decoder_loss(tensor::Graph<T>& g, const Decoder<T>& decoder,
                         const tensor::Array<T>& latent, const TrainingView& view,
                         const MaskSpec& mask, const DiffusionSample& sample, LossSetting setting);

}  // namespace pointdiff
