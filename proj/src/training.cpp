#include "pointdiff/training.hpp"

#include <algorithm>
#include <cstdio>
#include <exception>
#include <numeric>
#include <random>

#include "pointdiff/checkpoint.hpp"
#include "pointdiff/data_io.hpp"
#include "pointdiff/errors.hpp"
#include "pointdiff/seed.hpp"

namespace pointdiff {

using tensor::Array;
using tensor::Graph;
using tensor::Shape;
using tensor::Var;

const char* to_string(LossSetting s) {
  return s == LossSetting::EntireObject ? "entire" : "masked";
}

LossSetting loss_setting_from_string(const std::string& s) {
  if (s == "entire" || s == "a") return LossSetting::EntireObject;
  if (s == "masked" || s == "b") return LossSetting::MaskedOnly;
  throw InvalidArgument("unknown loss setting '" + s + "' (expected entire or masked)");
}

void TrainConfig::validate() const {
  if (epochs == 0) throw InvalidArgument("train: epochs must be positive");
  if (batch_size == 0) throw InvalidArgument("train: batch_size must be positive");
  if (!(lr >= 0.0)) throw InvalidArgument("train: lr must be non-negative");
}

TrainConfig TrainConfig::encoder_defaults() {
  TrainConfig c;
  c.epochs = 50;
  c.lr = 1e-3;
  return c;
}

TrainConfig TrainConfig::decoder_defaults() {
  TrainConfig c;
  c.epochs = 300;
  c.lr = 5e-4;
  return c;
}

std::string loss_curve_csv(const TrainResult& result) {
  std::string out = "step,epoch,loss\n";
  char buf[96];
  for (const auto& r : result.steps) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17e\n", r.step, r.epoch, r.loss);
    out += buf;
  }
  return out;
}

TrainingView make_training_view(const PointCloud& cloud, const ModelConfig& cfg) {
  const std::size_t base = cfg.num_points();
  const std::size_t full = base * cfg.upsample_factor;
  if (cloud.size() != full)
    throw InvalidArgument("training cloud has " + std::to_string(cloud.size()) + " points, expected " +
                          std::to_string(full) + " (groups * group_size * upsample_factor)");
  TrainingView v;
  if (cfg.upsample_factor == 1) {
    v.patches = segment(cloud, cfg.groups, cfg.group_size);
    v.targets = v.patches.patches;
    v.target_absolute = v.patches.absolute;
    return v;
  }
  v.patches = segment(resample(cloud, base, ResampleMethod::Fps, 0), cfg.groups, cfg.group_size);
  const auto idx = knn_group(cloud, v.patches.centers, cfg.output_patch_points());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::vector<Point> rel, abs;
    for (auto j : idx[i]) {
      abs.push_back(cloud[j]);
      rel.push_back(cloud[j] - v.patches.centers[i]);
    }
    v.targets.push_back(std::move(rel));
    v.target_absolute.push_back(std::move(abs));
  }
  return v;
}

MaskSpec training_mask(const ModelConfig& cfg, std::uint64_t seed, std::size_t epoch,
                       std::size_t draw, const PatchSet& patches) {
  return apply_mask(cfg.groups, cfg.mask_ratio, cfg.mask_strategy, derive_seed(seed, epoch, draw),
                    patches.centers);
}

namespace {

template <typename T>
Array<T> repeat_centers(const std::vector<Point>& centers, std::span<const std::size_t> which,
                        std::size_t n) {
  Array<T> out(Shape{which.size(), n, 3});
  std::size_t o = 0;
  for (auto i : which)
    for (std::size_t j = 0; j < n; ++j)
      for (int k = 0; k < 3; ++k) out[o++] = static_cast<T>(centers[i][k]);
  return out;
}

template <typename T>
Array<T> stack_absolute(const std::vector<std::vector<Point>>& patches, std::span<const std::size_t> which) {
  std::vector<Point> pts;
  for (auto i : which) pts.insert(pts.end(), patches[i].begin(), patches[i].end());
  return stack_points<T>(pts);
}

template <typename T>
std::vector<Point> select_centers(const std::vector<Point>& centers, std::span<const std::size_t> which) {
  std::vector<Point> out;
  for (auto i : which) out.push_back(centers[i]);
  return out;
}

template <typename T>
using ItemLoss = std::function<Var(Graph<T>&, std::size_t item, std::size_t epoch, std::size_t draw)>;

// Generic minibatch loop. Every batch holds batch_size draws taken
// cyclically from the shuffled dataset, so a dataset smaller than the batch
// contributes several draws (each with its own mask) per step. Draws of one
// batch are evaluated in parallel on private graphs and their gradients
// reduced in draw order, independent of the thread count.
template <typename T>
TrainResult run_training(tensor::ParameterStore<T>& params, std::size_t items, const TrainConfig& cfg,
                         const ItemLoss<T>& item_loss, const std::function<void(std::size_t)>& on_checkpoint,
                         const LogFn& log) {
  cfg.validate();
  if (items == 0) throw InvalidArgument("train: empty dataset");
  auto state = tensor::make_adam_state(params);
  const tensor::AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8};
  TrainResult result;
  std::size_t step = 0, since_ckpt = 0;
  double ckpt_sum = 0;
  std::vector<std::size_t> order(items);

  const std::size_t B = cfg.batch_size;
  const std::size_t batches = (items + B - 1) / B;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, epoch, 0x5eedull));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_sum = 0;

    for (std::size_t batch_index = 0; batch_index < batches; ++batch_index) {
      const std::size_t begin = batch_index * B;
      std::vector<tensor::Gradients<T>> grads(B);
      std::vector<double> losses(B);
      std::vector<std::exception_ptr> errors(B);
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(B); ++k) {
        try {
          Graph<T> g;
          const std::size_t draw = begin + static_cast<std::size_t>(k);
          const Var loss = item_loss(g, order[draw % items], epoch, draw);
          losses[k] = static_cast<double>(g.value(loss)[0]);
          grads[k] = g.backward(loss, &params);
        } catch (...) {
          errors[k] = std::current_exception();
        }
      }
      for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

      auto total = std::move(grads[0]);
      for (std::size_t k = 1; k < B; ++k)
        for (std::size_t p = 0; p < total.size(); ++p)
          for (std::size_t i = 0; i < total[p].size(); ++i) total[p][i] += grads[k][p][i];
      const T inv = T(1) / static_cast<T>(B);
      for (auto& gp : total)
        for (auto& v : gp) v *= inv;
      tensor::adam_step(params, total, state, adam);

      double batch = 0;
      for (double l : losses) batch += l;
      epoch_sum += batch;
      const LossRecord rec{step++, epoch, batch / static_cast<double>(B)};
      result.steps.push_back(rec);
      if (log && cfg.log_every && rec.step % cfg.log_every == 0) log(rec);
    }

    result.epoch_loss.push_back(epoch_sum / static_cast<double>(batches * B));
    ckpt_sum += result.epoch_loss.back();
    ++since_ckpt;
    const bool last = epoch + 1 == cfg.epochs;
    if (last || (cfg.checkpoint_every && (epoch + 1) % cfg.checkpoint_every == 0)) {
      result.checkpoint_loss.push_back(ckpt_sum / static_cast<double>(since_ckpt));
      ckpt_sum = 0;
      since_ckpt = 0;
      if (on_checkpoint) on_checkpoint(epoch + 1);
    }
  }
  return result;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, const char* network,
                                      std::size_t epoch) {
  char name[64];
  std::snprintf(name, sizeof name, "%s_epoch%04zu.ckpt", network, epoch);
  return dir / name;
}

}  // namespace

template <typename T>
Var encoder_loss(Graph<T>& g, const Encoder<T>& encoder, const TrainingView& view, const MaskSpec& mask) {
  const auto& cfg = encoder.config();
  const auto vis = mask.visible_indices();
  const Var x = g.constant(stack_patches<T>(view.patches.patches, vis));
  const Var c = g.constant(stack_points<T>(select_centers<T>(view.patches.centers, vis)));
  const Var pred = encoder.pretrain_head(g, encoder.forward(g, x, c));
  const Var abs = g.add(pred, g.constant(repeat_centers<T>(view.patches.centers, vis, cfg.group_size)));
  const Var flat = g.reshape(abs, Shape{vis.size() * cfg.group_size, 3});
  return g.chamfer_l2(flat, g.constant(stack_absolute<T>(view.patches.absolute, vis)));
}

DiffusionSample draw_diffusion_sample(const TrainingView& view, const MaskSpec& mask,
                                      const ModelConfig& cfg, const NoiseSchedule& schedule,
                                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, schedule.timesteps - 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  DiffusionSample s;
  s.t = pick(rng);
  std::vector<std::size_t> order = mask.masked_indices();
  if (cfg.predict_visible) {
    auto vis = mask.visible_indices();
    vis.insert(vis.end(), order.begin(), order.end());
    order = std::move(vis);
  }
  std::vector<double> x0, eps;
  for (auto i : order)
    for (const auto& p : view.targets[i])
      for (int k = 0; k < 3; ++k) x0.push_back(p[k]);
  eps.resize(x0.size());
  for (auto& e : eps) e = normal(rng);
  s.x_t = q_sample(x0, s.t, eps, schedule);
  return s;
}

template <typename T>
Var decoder_loss(Graph<T>& g, const Decoder<T>& decoder, const Array<T>& latent, const TrainingView& view,
                 const MaskSpec& mask, const DiffusionSample& sample, LossSetting setting) {
  const auto& cfg = decoder.config();
  const auto order = decoder.prediction_order(mask);
  const auto vis = mask.visible_indices(), msk = mask.masked_indices();
  const std::size_t n = cfg.output_patch_points();
  Array<T> noisy(Shape{order.size(), n, 3});
  if (sample.x_t.size() != noisy.size())
    throw InvalidArgument("decoder_loss: noisy sample does not match the prediction arity");
  for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] = static_cast<T>(sample.x_t[i]);

  const Var out = decoder.forward(g, g.constant(latent), g.constant(std::move(noisy)),
                                  g.constant(stack_points<T>(select_centers<T>(view.patches.centers, vis))),
                                  g.constant(stack_points<T>(select_centers<T>(view.patches.centers, msk))),
                                  sample.t);
  const Var abs = g.add(out, g.constant(repeat_centers<T>(view.patches.centers, order, n)));
  const Var flat = g.reshape(abs, Shape{order.size() * n, 3});

  const Var masked_pred =
      cfg.predict_visible ? g.slice(flat, 0, vis.size() * n, msk.size() * n) : flat;
  if (setting == LossSetting::MaskedOnly)
    return g.chamfer_l2(masked_pred, g.constant(stack_absolute<T>(view.target_absolute, msk)));

  if (cfg.predict_visible) {
    std::vector<std::size_t> all(cfg.groups);
    std::iota(all.begin(), all.end(), std::size_t{0});
    return g.chamfer_l2(flat, g.constant(stack_absolute<T>(view.target_absolute, all)));
  }
  const Var parts[] = {flat, g.constant(stack_absolute<T>(view.patches.absolute, vis))};
  const Var whole = g.concat(parts, 0);
  std::vector<Point> target;
  for (auto i : vis) target.insert(target.end(), view.patches.absolute[i].begin(), view.patches.absolute[i].end());
  for (auto i : msk) target.insert(target.end(), view.target_absolute[i].begin(), view.target_absolute[i].end());
  return g.chamfer_l2(whole, g.constant(stack_points<T>(target)));
}

namespace {

std::vector<TrainingView> make_views(const std::vector<PointCloud>& dataset, const ModelConfig& cfg) {
  std::vector<TrainingView> views(dataset.size());
  std::vector<std::exception_ptr> errors(dataset.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(dataset.size()); ++i) {
    try {
      views[i] = make_training_view(dataset[i], cfg);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return views;
}

}  // namespace

template <typename T>
TrainResult pretrain_encoder(Encoder<T>& encoder, const std::vector<PointCloud>& dataset,
                             const TrainConfig& cfg, const LogFn& log) {
  const auto& mcfg = encoder.config();
  const auto views = make_views(dataset, mcfg);
  const ItemLoss<T> loss = [&](Graph<T>& g, std::size_t item, std::size_t epoch, std::size_t draw) {
    const auto mask = training_mask(mcfg, cfg.seed, epoch, draw, views[item].patches);
    return encoder_loss(g, encoder, views[item], mask);
  };
  const auto save = [&](std::size_t epoch) {
    if (!cfg.checkpoint_dir.empty())
      save_checkpoint(make_checkpoint("encoder", mcfg, encoder.params()),
                      checkpoint_path(cfg.checkpoint_dir, "encoder", epoch));
  };
  return run_training<T>(encoder.params(), views.size(), cfg, loss, save, log);
}

template <typename T>
TrainResult train_decoder(const Encoder<T>& encoder, Decoder<T>& decoder, const std::vector<PointCloud>& dataset,
                          const TrainConfig& cfg, const NoiseSchedule& schedule, const LogFn& log) {
  const auto& ec = encoder.config();
  const auto& dc = decoder.config();
  if (ec.latent_width != dc.latent_width || ec.groups != dc.groups || ec.group_size != dc.group_size)
    throw InvalidArgument("train_decoder: encoder (L=" + std::to_string(ec.latent_width) + ", G=" +
                          std::to_string(ec.groups) + ", group " + std::to_string(ec.group_size) +
                          ") incompatible with decoder (L=" + std::to_string(dc.latent_width) + ", G=" +
                          std::to_string(dc.groups) + ", group " + std::to_string(dc.group_size) + ")");
  if (schedule.timesteps != dc.timesteps)
    throw InvalidArgument("train_decoder: schedule has " + std::to_string(schedule.timesteps) +
                          " steps, decoder expects " + std::to_string(dc.timesteps));
  const auto views = make_views(dataset, dc);
  const ItemLoss<T> loss = [&](Graph<T>& g, std::size_t item, std::size_t epoch, std::size_t draw) {
    const auto& view = views[item];
    const auto mask = training_mask(dc, cfg.seed, epoch, draw, view.patches);
    const auto latent = encoder.encode(view.patches, mask);
    const auto sample =
        draw_diffusion_sample(view, mask, dc, schedule, derive_seed(cfg.seed ^ 0xd1ffull, epoch, draw));
    return decoder_loss(g, decoder, latent.tokens, view, mask, sample, cfg.loss_setting);
  };
  const auto save = [&](std::size_t epoch) {
    if (!cfg.checkpoint_dir.empty())
      save_checkpoint(make_checkpoint("decoder", dc, decoder.params()),
                      checkpoint_path(cfg.checkpoint_dir, "decoder", epoch));
  };
  return run_training<T>(decoder.params(), views.size(), cfg, loss, save, log);
}

template Var encoder_loss<float>(Graph<float>&, const Encoder<float>&, const TrainingView&, const MaskSpec&);
template Var encoder_loss<double>(Graph<double>&, const Encoder<double>&, const TrainingView&, const MaskSpec&);
template Var decoder_loss<float>(Graph<float>&, const Decoder<float>&, const Array<float>&,
                                 const TrainingView&, const MaskSpec&, const DiffusionSample&, LossSetting);
template Var decoder_loss<double>(Graph<double>&, const Decoder<double>&, const Array<double>&,
                                  const TrainingView&, const MaskSpec&, const DiffusionSample&, LossSetting);
template TrainResult pretrain_encoder<float>(Encoder<float>&, const std::vector<PointCloud>&,
                                             const TrainConfig&, const LogFn&);
template TrainResult pretrain_encoder<double>(Encoder<double>&, const std::vector<PointCloud>&,
                                              const TrainConfig&, const LogFn&);
template TrainResult train_decoder<float>(const Encoder<float>&, Decoder<float>&,
                                          const std::vector<PointCloud>&, const TrainConfig&,
                                          const NoiseSchedule&, const LogFn&);
template TrainResult train_decoder<double>(const Encoder<double>&, Decoder<double>&,
                                           const std::vector<PointCloud>&, const TrainConfig&,
                                           const NoiseSchedule&, const LogFn&);

}  // namespace pointdiff
