#include "pointdiff/tasks.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <memory>
#include <string>

#include "pointdiff/errors.hpp"
#include "pointdiff/seed.hpp"

namespace pointdiff {

namespace {

constexpr char kBlobMagic[4] = {'D', 'P', 'C', '1'};

std::uint64_t mask_seed_of(std::uint64_t seed) { return derive_seed(seed, 1); }
std::uint64_t sample_seed_of(std::uint64_t seed) { return derive_seed(seed, 2); }

// Everything needed to turn a flat prediction into a cloud.
struct Layout {
  // Emitted verbatim before any patch.
  std::vector<Point> passthrough;
  // Patches left out of the output entirely (their points are in passthrough).
  std::vector<bool> omit;
  // Absolute points emitted as-is; a non-empty entry wins over a prediction.
  std::vector<std::vector<Point>> kept;
  std::vector<Point> centers;
  std::vector<std::size_t> order;  // predicted patch ids, in decoder order
  std::size_t per_patch = 0;
};

PointCloud assemble_flat(const Layout& lay, std::span<const double> x) {
  std::vector<std::ptrdiff_t> slot(lay.centers.size(), -1);
  for (std::size_t j = 0; j < lay.order.size(); ++j) slot[lay.order[j]] = static_cast<std::ptrdiff_t>(j);
  PointCloud out;
  out.points = lay.passthrough;
  for (std::size_t i = 0; i < lay.centers.size(); ++i) {
    if (!lay.omit.empty() && lay.omit[i]) continue;
    if (slot[i] < 0 || !lay.kept[i].empty()) {
      out.points.insert(out.points.end(), lay.kept[i].begin(), lay.kept[i].end());
      continue;
    }
    const double* p = x.data() + static_cast<std::size_t>(slot[i]) * lay.per_patch * 3;
    const Point& c = lay.centers[i];
    for (std::size_t j = 0; j < lay.per_patch; ++j, p += 3)
      out.points.push_back({p[0] + c[0], p[1] + c[1], p[2] + c[2]});
  }
  return out;
}

std::vector<std::size_t> decoder_order(const MaskSpec& mask, bool predict_visible) {
  auto order = mask.masked_indices();
  if (!predict_visible) return order;
  auto all = mask.visible_indices();
  all.insert(all.end(), order.begin(), order.end());
  return all;
}

TaskResult run(Conditioning cond, Layout lay, const Conditioner& conditioner,
               const NoiseSchedule& schedule, const TaskOptions& opts) {
  if (schedule.timesteps != opts.model.timesteps)
    throw InvalidArgument("schedule has " + std::to_string(schedule.timesteps) +
                          " steps, model expects " + std::to_string(opts.model.timesteps));
  const auto denoise = conditioner(cond);
  const std::size_t values = lay.order.size() * lay.per_patch * 3;
  auto chain = sample(denoise, values, schedule, sample_seed_of(opts.seed), opts.trace, opts.residual);
  TaskResult r;
  r.cloud = assemble_flat(lay, chain.x0);
  for (const auto& step : chain.trace) r.trace.push_back(assemble_flat(lay, step));
  r.mask = std::move(cond.mask);
  r.centers = std::move(lay.centers);
  r.predicted = std::move(lay.order);
  return r;
}

// Visible patches of a segmented cloud, with the kept absolute points.
void split_patches(const PatchSet& ps, const MaskSpec& mask, bool predict_visible, Conditioning& cond,
                   Layout& lay) {
  lay.kept.assign(ps.num_groups(), {});
  for (auto i : mask.visible_indices()) {
    cond.visible_patches.push_back(ps.patches[i]);
    if (!predict_visible) lay.kept[i] = ps.absolute[i];
  }
}

}  // namespace

template <typename T>
Conditioner model_conditioner(const Encoder<T>& encoder, const Decoder<T>& decoder) {
  const auto& ec = encoder.config();
  const auto& dc = decoder.config();
  if (ec.latent_width != dc.latent_width || ec.groups != dc.groups || ec.group_size != dc.group_size)
    throw InvalidArgument("encoder and decoder checkpoints disagree on latent width, groups or group size");
  return [&encoder, &decoder](const Conditioning& c) -> DenoiseFn {
    auto latent = std::make_shared<LatentSet<T>>(encoder.encode_visible(c.visible_patches, c.centers, c.mask));
    return [latent, &decoder](std::span<const double> x_t, std::size_t t) {
      const auto out = decoder.decode(*latent, x_t, t);
      std::vector<double> flat;
      flat.reserve(x_t.size());
      for (const auto& patch : out.patches)
        for (const auto& p : patch) flat.insert(flat.end(), p.begin(), p.end());
      return flat;
    };
  };
}

TaskResult reconstruct(const PointCloud& cloud, const Conditioner& conditioner,
                       const NoiseSchedule& schedule, const TaskOptions& opts) {
  const auto& cfg = opts.model;
  cfg.validate();
  const auto ps = segment(cloud, cfg.groups, cfg.group_size);
  Conditioning cond;
  cond.mask = apply_mask(cfg.groups, cfg.mask_ratio, cfg.mask_strategy, mask_seed_of(opts.seed), ps.centers);
  cond.centers = ps.centers;
  Layout lay;
  split_patches(ps, cond.mask, cfg.predict_visible, cond, lay);
  lay.centers = ps.centers;
  lay.order = decoder_order(cond.mask, cfg.predict_visible);
  lay.per_patch = cfg.output_patch_points();
  return run(std::move(cond), std::move(lay), conditioner, schedule, opts);
}

TaskResult complete(const PointCloud& partial, const Conditioner& conditioner,
                    const NoiseSchedule& schedule, const TaskOptions& opts,
                    std::span<const Point> masked_centers) {
  const auto& cfg = opts.model;
  cfg.validate();
  const std::size_t gs = cfg.group_size;
  if (partial.empty() || partial.size() % gs != 0)
    throw InvalidArgument("complete: partial cloud of " + std::to_string(partial.size()) +
                          " points is not a whole number of " + std::to_string(gs) + "-point patches");
  const std::size_t V = partial.size() / gs;
  if (V >= cfg.groups)
    throw InvalidArgument("complete: input already holds " + std::to_string(V) + " of " +
                          std::to_string(cfg.groups) + " patches; nothing to complete");
  if (V != cfg.num_visible())
    throw InvalidArgument("complete: input has " + std::to_string(V) + " patches, mask ratio " +
                          std::to_string(cfg.mask_ratio) + " leaves " + std::to_string(cfg.num_visible()) +
                          " visible");
  const std::size_t M = cfg.groups - V;
  if (cfg.use_position_embedding && masked_centers.size() != M)
    throw InvalidArgument("complete: position-embedding mode needs " + std::to_string(M) +
                          " masked centers, got " + std::to_string(masked_centers.size()));

  const auto ps = segment(partial, V, gs);
  Conditioning cond;
  cond.mask.ratio = cfg.mask_ratio;
  cond.mask.strategy = cfg.mask_strategy;
  cond.mask.indicator.assign(cfg.groups, true);
  std::fill(cond.mask.indicator.begin(), cond.mask.indicator.begin() + static_cast<std::ptrdiff_t>(V), false);
  cond.centers = ps.centers;
  for (std::size_t j = 0; j < M; ++j)
    cond.centers.push_back(cfg.use_position_embedding ? masked_centers[j] : Point{0, 0, 0});
  cond.visible_patches = ps.patches;

  // The input is emitted as given, never regrouped, even when the decoder
  // also predicts the visible patches.
  Layout lay;
  lay.passthrough = partial.points;
  lay.omit.assign(cfg.groups, false);
  std::fill(lay.omit.begin(), lay.omit.begin() + static_cast<std::ptrdiff_t>(V), true);
  lay.kept.assign(cfg.groups, {});
  lay.centers = cond.centers;
  lay.order = decoder_order(cond.mask, cfg.predict_visible);
  lay.per_patch = cfg.output_patch_points();
  return run(std::move(cond), std::move(lay), conditioner, schedule, opts);
}

TaskResult upsample(const PointCloud& low_res, const Conditioner& conditioner,
                    const NoiseSchedule& schedule, const TaskOptions& opts) {
  const auto& cfg = opts.model;
  cfg.validate();
  if (!cfg.predict_visible)
    throw InvalidArgument("upsample: the decoder predicts masked patches only; a checkpoint trained "
                          "with predict_visible is required");
  if (!(opts.visible_fraction > 0.0 && opts.visible_fraction < 1.0))
    throw InvalidArgument("upsample: visible fraction must lie in (0, 1)");
  const auto ps = segment(low_res, cfg.groups, cfg.group_size);
  Conditioning cond;
  cond.mask = apply_mask(cfg.groups, 1.0 - opts.visible_fraction, MaskStrategy::Random,
                         mask_seed_of(opts.seed));
  cond.centers = ps.centers;
  Layout lay;
  split_patches(ps, cond.mask, true, cond, lay);
  lay.centers = ps.centers;
  lay.order = decoder_order(cond.mask, true);
  lay.per_patch = cfg.output_patch_points();
  return run(std::move(cond), std::move(lay), conditioner, schedule, opts);
}

// ------------------------------------------------------------------ codec

std::uint32_t fnv1a32(const std::uint8_t* data, std::size_t size) noexcept {
  std::uint32_t h = 0x811c9dc5u;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= data[i];
    h *= 0x01000193u;
  }
  return h;
}

namespace {

class BitWriter {
 public:
  explicit BitWriter(std::vector<std::uint8_t>& out) : out_(out) {}
  void put(std::uint32_t value, unsigned bits) {
    for (unsigned b = 0; b < bits; ++b) {
      if (used_ == 0) out_.push_back(0);
      if ((value >> b) & 1u) out_.back() |= static_cast<std::uint8_t>(1u << used_);
      used_ = (used_ + 1) % 8;
    }
  }
  void flush() { used_ = 0; }

 private:
  std::vector<std::uint8_t>& out_;
  unsigned used_ = 0;
};

class BitReader {
 public:
  BitReader(std::span<const std::uint8_t> in, std::size_t pos) : in_(in), pos_(pos) {}
  std::uint32_t get(unsigned bits) {
    std::uint32_t v = 0;
    for (unsigned b = 0; b < bits; ++b) {
      if (pos_ >= in_.size()) throw CorruptBlob("blob truncated inside the bit stream");
      if ((in_[pos_] >> used_) & 1u) v |= 1u << b;
      if (++used_ == 8) {
        used_ = 0;
        ++pos_;
      }
    }
    return v;
  }
  std::size_t align() {
    if (used_) {
      used_ = 0;
      ++pos_;
    }
    return pos_;
  }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_;
  unsigned used_ = 0;
};

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(std::span<const std::uint8_t> in, std::size_t& pos) {
  if (in.size() - pos < sizeof(U)) throw CorruptBlob("blob truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in[pos++]) << (8 * i));
  return v;
}

struct Quantizer {
  Point lo, hi;
  unsigned bits;

  std::uint32_t code(double v, int axis) const {
    const double extent = hi[axis] - lo[axis];
    if (!(extent > 0)) return 0;
    const double levels = std::ldexp(1.0, static_cast<int>(bits));
    const double c = std::floor((v - lo[axis]) / extent * levels);
    return static_cast<std::uint32_t>(std::clamp(c, 0.0, levels - 1));
  }
  double value(std::uint32_t c, int axis) const {
    const double extent = hi[axis] - lo[axis];
    if (!(extent > 0)) return lo[axis];
    return lo[axis] + (static_cast<double>(c) + 0.5) * std::ldexp(extent, -static_cast<int>(bits));
  }
};

void check_bits(unsigned q) {
  if (q < 6 || q > 16) throw InvalidArgument("quantization bits must lie in [6, 16], got " + std::to_string(q));
}

}  // namespace

std::size_t blob_bytes(std::size_t groups, std::size_t group_size, std::size_t visible, unsigned quant_bits) {
  const std::size_t values = (visible * group_size + groups) * 3;
  return kBlobHeaderBytes + (groups + 7) / 8 + (values * quant_bits + 7) / 8 + 4;
}

double bpp(std::span<const std::uint8_t> blob, std::size_t original_points) {
  if (original_points == 0) throw InvalidArgument("bpp: zero original points");
  return static_cast<double>(blob.size() * 8) / static_cast<double>(original_points);
}

std::vector<std::uint8_t> compress(const PointCloud& cloud, const ModelConfig& cfg, std::uint64_t mask_seed,
                                   unsigned quant_bits) {
  check_bits(quant_bits);
  cfg.validate();
  if (cfg.groups > 0xffff || cfg.group_size > 0xffff) throw InvalidArgument("compress: G or group size too large");
  const auto ps = segment(cloud, cfg.groups, cfg.group_size);
  const auto mask = apply_mask(cfg.groups, cfg.mask_ratio, cfg.mask_strategy, mask_seed_of(mask_seed), ps.centers);
  const auto vis = mask.visible_indices();

  Quantizer qz{ps.centers[0], ps.centers[0], quant_bits};
  auto grow = [&](const Point& p) {
    for (int k = 0; k < 3; ++k) {
      qz.lo[k] = std::min(qz.lo[k], p[k]);
      qz.hi[k] = std::max(qz.hi[k], p[k]);
    }
  };
  for (const auto& c : ps.centers) grow(c);
  for (auto i : vis)
    for (const auto& p : ps.absolute[i]) grow(p);

  std::vector<std::uint8_t> out(kBlobMagic, kBlobMagic + 4);
  out.push_back(kBlobVersion);
  out.push_back(static_cast<std::uint8_t>(quant_bits));
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(cfg.groups));
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(cfg.group_size));
  for (const Point* p : {&qz.lo, &qz.hi})
    for (int k = 0; k < 3; ++k) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>((*p)[k]));

  BitWriter bw(out);
  for (bool b : mask.indicator) bw.put(b ? 1u : 0u, 1);
  bw.flush();
  for (auto i : vis)
    for (const auto& p : ps.absolute[i])
      for (int k = 0; k < 3; ++k) bw.put(qz.code(p[k], k), quant_bits);
  for (const auto& c : ps.centers)
    for (int k = 0; k < 3; ++k) bw.put(qz.code(c[k], k), quant_bits);
  bw.flush();
  put_le<std::uint32_t>(out, fnv1a32(out.data(), out.size()));
  return out;
}

BlobContents parse_blob(std::span<const std::uint8_t> blob) {
  if (blob.size() < kBlobHeaderBytes + 4 || std::memcmp(blob.data(), kBlobMagic, 4) != 0)
    throw CorruptBlob("not a compressed point cloud (bad magic or too short)");
  std::size_t tail = blob.size() - 4;
  if (get_le<std::uint32_t>(blob, tail) != fnv1a32(blob.data(), blob.size() - 4))
    throw CorruptBlob("blob digest mismatch");
  std::size_t pos = 4;
  const auto version = get_le<std::uint8_t>(blob, pos);
  if (version != kBlobVersion) throw CorruptBlob("unsupported blob version " + std::to_string(version));
  BlobContents b;
  b.quant_bits = get_le<std::uint8_t>(blob, pos);
  if (b.quant_bits < 6 || b.quant_bits > 16) throw CorruptBlob("blob quantization bits out of range");
  b.groups = get_le<std::uint16_t>(blob, pos);
  b.group_size = get_le<std::uint16_t>(blob, pos);
  if (b.groups == 0 || b.group_size == 0) throw CorruptBlob("blob declares an empty patch layout");
  for (Point* p : {&b.box_min, &b.box_max})
    for (int k = 0; k < 3; ++k) (*p)[k] = std::bit_cast<double>(get_le<std::uint64_t>(blob, pos));

  const auto body = blob.first(blob.size() - 4);
  BitReader br(body, pos);
  b.mask.resize(b.groups);
  std::size_t visible = 0;
  for (std::size_t i = 0; i < b.groups; ++i) {
    b.mask[i] = br.get(1) != 0;
    if (!b.mask[i]) ++visible;
  }
  br.align();
  if (body.size() + 4 != blob_bytes(b.groups, b.group_size, visible, b.quant_bits))
    throw CorruptBlob("blob size does not match its header");
  const Quantizer qz{b.box_min, b.box_max, b.quant_bits};
  auto read_point = [&] {
    Point p;
    for (int k = 0; k < 3; ++k) p[k] = qz.value(br.get(b.quant_bits), k);
    return p;
  };
  for (std::size_t v = 0; v < visible; ++v) {
    std::vector<Point> patch(b.group_size);
    for (auto& p : patch) p = read_point();
    b.visible.push_back(std::move(patch));
  }
  for (std::size_t i = 0; i < b.groups; ++i) b.centers.push_back(read_point());
  return b;
}

TaskResult decompress(std::span<const std::uint8_t> blob, const Conditioner& conditioner,
                      const NoiseSchedule& schedule, const TaskOptions& opts) {
  const auto& cfg = opts.model;
  cfg.validate();
  const auto b = parse_blob(blob);
  if (b.groups != cfg.groups || b.group_size != cfg.group_size)
    throw InvalidArgument("decompress: blob has G=" + std::to_string(b.groups) + ", group size " +
                          std::to_string(b.group_size) + "; model expects G=" + std::to_string(cfg.groups) +
                          ", group size " + std::to_string(cfg.group_size));
  Conditioning cond;
  cond.mask.indicator = b.mask;
  cond.mask.ratio = cfg.mask_ratio;
  cond.mask.strategy = cfg.mask_strategy;
  if (cond.mask.num_masked() != cfg.num_masked())
    throw InvalidArgument("decompress: blob masks " + std::to_string(cond.mask.num_masked()) +
                          " patches, mask ratio " + std::to_string(cfg.mask_ratio) + " implies " +
                          std::to_string(cfg.num_masked()));
  cond.centers = b.centers;
  Layout lay;
  lay.kept.assign(cfg.groups, {});
  const auto vis = cond.mask.visible_indices();
  for (std::size_t j = 0; j < vis.size(); ++j) {
    const Point& c = b.centers[vis[j]];
    std::vector<Point> rel;
    for (const auto& p : b.visible[j]) rel.push_back(p - c);
    cond.visible_patches.push_back(std::move(rel));
    if (!cfg.predict_visible) lay.kept[vis[j]] = b.visible[j];
  }
  lay.centers = b.centers;
  lay.order = decoder_order(cond.mask, cfg.predict_visible);
  lay.per_patch = cfg.output_patch_points();
  return run(std::move(cond), std::move(lay), conditioner, schedule, opts);
}

template Conditioner model_conditioner<float>(const Encoder<float>&, const Decoder<float>&);
template Conditioner model_conditioner<double>(const Encoder<double>&, const Decoder<double>&);

}  // namespace pointdiff
