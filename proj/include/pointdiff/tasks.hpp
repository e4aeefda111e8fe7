#pragma once

// Reconstruction, completion, upsampling and the visible-patch codec.
//
// Every task reduces to: pick visible patches and centers, hand them to a
// Conditioner (normally the encoder + decoder pair), run the sampler over the
// predicted patches and assemble the result in ascending patch order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "pointdiff/diffusion.hpp"
#include "pointdiff/geometry.hpp"
#include "pointdiff/model.hpp"

namespace pointdiff {

struct Conditioning {
  std::vector<std::vector<Point>> visible_patches;  // center-relative, ascending patch order
  std::vector<Point> centers;                       // all G
  MaskSpec mask;
};

// Builds the denoiser for one cloud. The denoiser maps the flattened noisy
// patches (decoder order) and t to center-relative predictions.
using Conditioner = std::function<DenoiseFn(const Conditioning&)>;

template <typename T>
Conditioner model_conditioner(const Encoder<T>& encoder, const Decoder<T>& decoder);

struct TaskOptions {
  ModelConfig model;  // configuration the decoder was trained with
  Residual residual = Residual::SqrtSigma;
  std::uint64_t seed = 0;
  bool trace = false;
  double visible_fraction = 0.4;  // upsampling only
};

struct TaskResult {
  PointCloud cloud;
  MaskSpec mask;
  std::vector<Point> centers;
  std::vector<std::size_t> predicted;  // patch index of every predicted patch
  std::vector<PointCloud> trace;       // one assembled cloud per reverse step
};

TaskResult reconstruct(const PointCloud& cloud, const Conditioner& conditioner,
                       const NoiseSchedule& schedule, const TaskOptions& opts);

// `partial` holds the visible patches only. It is regrouped to condition the
// decoder but appears unchanged at the head of the output, followed by the
// predicted patches. With position embeddings the masked centers must be
// supplied; without, they are taken as the origin and predictions are absolute.
TaskResult complete(const PointCloud& partial, const Conditioner& conditioner,
                    const NoiseSchedule& schedule, const TaskOptions& opts,
                    std::span<const Point> masked_centers = {});

TaskResult upsample(const PointCloud& low_res, const Conditioner& conditioner,
                    const NoiseSchedule& schedule, const TaskOptions& opts);

// Codec. Layout (little-endian):
//   "DPC1" u8 version, u8 q, u16 G, u16 group_size, f64 bbox[6] (min xyz, max xyz)
//   mask: G bits, LSB first, padded to a byte
//   payload: q-bit codes of the visible points (ascending patch order), then
//            of all G centers, LSB first, padded to a byte
//   u32 FNV-1a digest of every preceding byte
inline constexpr std::uint8_t kBlobVersion = 1;
inline constexpr std::size_t kBlobHeaderBytes = 4 + 1 + 1 + 2 + 2 + 6 * 8;

struct BlobContents {
  unsigned quant_bits = 0;
  std::size_t groups = 0;
  std::size_t group_size = 0;
  Point box_min{0, 0, 0};
  Point box_max{0, 0, 0};
  std::vector<bool> mask;
  std::vector<std::vector<Point>> visible;  // absolute, dequantized, ascending patch order
  std::vector<Point> centers;               // dequantized
};

std::vector<std::uint8_t> compress(const PointCloud& cloud, const ModelConfig& cfg,
                                   std::uint64_t mask_seed, unsigned quant_bits);
BlobContents parse_blob(std::span<const std::uint8_t> blob);
TaskResult decompress(std::span<const std::uint8_t> blob, const Conditioner& conditioner,
                      const NoiseSchedule& schedule, const TaskOptions& opts);

// Closed-form blob size for the given arity.
std::size_t blob_bytes(std::size_t groups, std::size_t group_size, std::size_t visible,
                       unsigned quant_bits);
double bpp(std::span<const std::uint8_t> blob, std::size_t original_points);

std::uint32_t fnv1a32(const std::uint8_t* data, std::size_t size) noexcept;

}  // namespace pointdiff
