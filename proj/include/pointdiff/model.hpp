#pragma once

// Patch encoder and conditional denoising decoder.
//
// Encoder: per-point linear map, normalization across the patch and GELU,
// max-pool over the patch, affine to the latent width, plus a center
// position embedding; a stack of pre-norm transformer blocks over the
// visible tokens only, then a final layer norm.
// A linear head maps every latent token back to a center-relative patch and
// is only used while pretraining.
//
// Decoder: the noisy patches are flattened per patch and mapped to tokens,
// concatenated after the visible latents as [visible..., masked...], given
// position and time embeddings, run through its own transformer stack and
// read out by a linear head at the masked positions (or all positions when
// the visible patches are predicted too).

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pointdiff/geometry.hpp"
#include "pointdiff/tensor.hpp"

namespace pointdiff {

struct ModelConfig {
  std::size_t latent_width = 384;
  std::size_t enc_blocks = 12;
  std::size_t enc_heads = 6;
  std::size_t dec_blocks = 4;
  std::size_t dec_heads = 4;
  std::size_t groups = 64;
  std::size_t group_size = 32;
  double mask_ratio = 0.75;
  MaskStrategy mask_strategy = MaskStrategy::Random;
  std::size_t timesteps = 200;
  bool predict_visible = false;
  std::size_t upsample_factor = 1;
  bool use_position_embedding = true;

  void validate() const;
  std::size_t num_points() const { return groups * group_size; }
  std::size_t num_masked() const { return masked_count(groups, mask_ratio); }
  std::size_t num_visible() const { return groups - num_masked(); }
  std::size_t output_patch_points() const { return group_size * upsample_factor; }

  // Flat key=value view, used for checkpoints and resolved run configs.
  std::map<std::string, std::string> to_map() const;
  static ModelConfig from_map(const std::map<std::string, std::string>& kv);
};

const char* to_string(MaskStrategy s);
MaskStrategy mask_strategy_from_string(const std::string& s);

template <typename T>
struct LatentSet {
  tensor::Array<T> tokens;     // [visible, L], ordered by ascending patch index
  std::vector<Point> centers;  // all G centers
  MaskSpec mask;
};

struct DecoderOutput {
  // One center-relative patch of group_size * upsample_factor points per
  // prediction, in decoder sequence order.
  std::vector<std::vector<Point>> patches;
  std::vector<std::size_t> patch_ids;  // patch index of every prediction
};

// [P, n, 3] view of the selected patches.
template <typename T>
tensor::Array<T> stack_patches(const std::vector<std::vector<Point>>& patches,
                               std::span<const std::size_t> which);
template <typename T>
tensor::Array<T> stack_points(std::span<const Point> points);
template <typename T>
std::vector<std::vector<Point>> unstack_patches(std::span<const T> flat, std::size_t count,
                                                std::size_t per_patch);

// Sinusoid of width `width`: sin(t f_i) for the first half, cos(t f_i) for the
// second, f_i = 10000^(-i / (width/2)).
std::vector<double> sinusoid(std::size_t t, std::size_t width);

struct BlockParams {
  std::size_t ln1_g, ln1_b, wq, bq, wk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

template <typename T>
class Encoder {
 public:
  Encoder(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return cfg_; }
  tensor::ParameterStore<T>& params() noexcept { return params_; }
  const tensor::ParameterStore<T>& params() const noexcept { return params_; }

  // [P, group_size, 3] -> [P, L]
  tensor::Var token_embed(tensor::Graph<T>& g, tensor::Var patches, bool trainable = true) const;
  // [P, 3] -> [P, L]
  tensor::Var pos_embed(tensor::Graph<T>& g, tensor::Var centers, bool trainable = true) const;
  // Visible patches and their centers -> normalized latent tokens [P, L].
  tensor::Var forward(tensor::Graph<T>& g, tensor::Var patches, tensor::Var centers,
                      bool trainable = true) const;
  // [P, L] -> [P, group_size, 3]
  tensor::Var pretrain_head(tensor::Graph<T>& g, tensor::Var latent, bool trainable = true) const;

  LatentSet<T> encode(const PatchSet& patches, const MaskSpec& mask) const;
  LatentSet<T> encode(const PointCloud& cloud, const MaskSpec& mask) const;
  // Visible patches (center-relative, ascending patch order) supplied
  // directly, for clients that never see the full cloud.
  LatentSet<T> encode_visible(const std::vector<std::vector<Point>>& visible_patches,
                              std::vector<Point> centers, const MaskSpec& mask) const;

 private:
  ModelConfig cfg_;
  tensor::ParameterStore<T> params_;
  std::size_t tok_w1_, tok_norm_g_, tok_norm_b_, tok_w2_, tok_b2_, pos_w_, pos_b_, norm_g_, norm_b_, head_w_, head_b_;
  std::vector<BlockParams> blocks_;
};

template <typename T>
class Decoder {
 public:
  Decoder(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return cfg_; }
  tensor::ParameterStore<T>& params() noexcept { return params_; }
  const tensor::ParameterStore<T>& params() const noexcept { return params_; }

  // Number of patches the decoder predicts for a mask with `masked` patches.
  std::size_t predicted_patches(std::size_t masked) const;

  tensor::Var time_embed(tensor::Graph<T>& g, std::size_t t, bool trainable = true) const;
  // [P, n, 3] noisy patches -> [P, L]
  tensor::Var mask_tokenize(tensor::Graph<T>& g, tensor::Var noisy, bool trainable = true) const;
  // latent: [V, L]; noisy: [P_pred, n, 3]; centers_visible [V, 3], centers_masked [M, 3].
  // Returns [P_pred, n, 3] center-relative predictions.
  tensor::Var forward(tensor::Graph<T>& g, tensor::Var latent, tensor::Var noisy,
                      tensor::Var centers_visible, tensor::Var centers_masked, std::size_t t,
                      bool trainable = true) const;

  // Inference: x_t holds the flattened noisy patches in decoder order.
  DecoderOutput decode(const LatentSet<T>& latent, std::span<const double> x_t,
                       std::size_t t) const;
  // Patch index of every prediction, in decoder order.
  std::vector<std::size_t> prediction_order(const MaskSpec& mask) const;

 private:
  ModelConfig cfg_;
  tensor::ParameterStore<T> params_;
  std::size_t time_w_, time_b_, mask_w_, mask_b_, pos_w_, pos_b_, norm_g_, norm_b_, head_w_, head_b_;
  std::vector<BlockParams> blocks_;
};

}  // namespace pointdiff
