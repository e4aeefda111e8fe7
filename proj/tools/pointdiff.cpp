// Command-line front end. Exit codes: 0 success, 1 runtime failure,
// 2 usage error (bad flags, bad config, missing required options).

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "pointdiff/checkpoint.hpp"
#include "pointdiff/data_io.hpp"
#include "pointdiff/errors.hpp"
#include "pointdiff/metrics.hpp"
#include "pointdiff/seed.hpp"
#include "pointdiff/tasks.hpp"
#include "pointdiff/training.hpp"
#include "run_config.hpp"

#ifndef POINTDIFF_VERSION
#define POINTDIFF_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using namespace pointdiff;
using cli::RunConfig;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string ckpt_encoder, ckpt_decoder;
  std::optional<double> mask_ratio;
  std::optional<std::string> mask_strategy;
  std::optional<std::size_t> timesteps;
  std::optional<unsigned> quant_bits;
  std::optional<std::size_t> factor;
  std::optional<std::string> loss_setting;
  std::optional<std::size_t> grid;
  std::optional<std::string> manifest;
  std::optional<std::size_t> epochs;

  std::string input;
  std::string centers;
  bool save_visible = false;
  bool steps = false;
  std::string gen, ref;
  std::string kind = "sphere";
  std::size_t n = 2048;
  double noise = 0.0;
};

// Config file first, then flags on top.
RunConfig resolve(const Flags& f) {
  try {
    RunConfig cfg = f.config.empty() ? RunConfig{} : RunConfig::load(f.config);
    auto put = [&](const char* s, const char* k, const auto& v) {
      if (!v) return;
      if constexpr (std::is_same_v<std::decay_t<decltype(*v)>, std::string>)
        cfg.set(s, k, *v);
      else
        cfg.set(s, k, std::to_string(*v));
    };
    put("run", "seed", f.seed);
    if (f.mask_ratio) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", *f.mask_ratio);
      cfg.set("model", "mask_ratio", buf);
    }
    put("model", "mask_strategy", f.mask_strategy);
    put("model", "timesteps", f.timesteps);
    put("run", "quant_bits", f.quant_bits);
    put("model", "upsample_factor", f.factor);
    put("train", "loss_setting", f.loss_setting);
    put("run", "grid", f.grid);
    put("data", "manifest", f.manifest);
    put("train", "epochs", f.epochs);
    // Validate every section once so bad values surface as usage errors.
    (void)cfg.model();
    (void)cfg.train({});
    (void)cfg.schedule();
    return cfg;
  } catch (const ParseError& e) {
    throw UsageError(f.config + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
}

void write_run_record(const fs::path& dir, const std::string& name, const std::string& resolved) {
  if (!dir.empty()) fs::create_directories(dir);
  write_atomic(dir / (name + ".run.cfg"), "# pointdiff " POINTDIFF_VERSION "\n" + resolved);
}

void require_file(const std::string& path, const std::string& flag, const std::string& kind) {
  if (path.empty()) throw UsageError("missing required option " + flag);
  if (!fs::exists(path)) throw std::runtime_error(kind + " not found: " + path);
}

fs::path default_output(const std::string& input, const std::string& suffix, const std::string& ext) {
  const fs::path p(input);
  return p.parent_path() / (p.stem().string() + suffix + ext);
}

// Inference-time settings may change the mask; the architecture comes from the checkpoint.
ModelConfig inference_model(const RunConfig& cfg, const ModelConfig& ckpt) {
  const auto m = cfg.model_over(ckpt);
  auto a = m.to_map(), b = ckpt.to_map();
  for (const auto& [k, v] : a) {
    if (k == "mask_ratio" || k == "mask_strategy") continue;
    if (b[k] != v) throw InvalidArgument(k + " = " + v + " conflicts with the checkpoint (" + b[k] + ")");
  }
  return m;
}

// Brings an input cloud to the model's point count in normalized coordinates.
Normalized prepare(const PointCloud& raw, std::size_t n, std::uint64_t seed) {
  auto norm = normalize(raw);
  if (norm.cloud.size() != n) {
    const auto method = norm.cloud.size() > n ? ResampleMethod::Fps : ResampleMethod::Random;
    norm.cloud = resample(norm.cloud, n, method, seed);
  }
  return norm;
}

std::vector<fs::path> cloud_files(const fs::path& p) {
  if (!fs::is_directory(p)) {
    if (!fs::exists(p)) throw std::runtime_error("not found: " + p.string());
    return {p};
  }
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(p)) {
    const auto ext = e.path().extension();
    if (e.is_regular_file() && (ext == ".ply" || ext == ".xyz")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw std::runtime_error("no .ply or .xyz files in " + p.string());
  return out;
}

LogFn stderr_log(std::size_t every) {
  if (every == 0) return {};
  return [](const LossRecord& r) {
    std::fprintf(stderr, "epoch %zu step %zu loss %.6e\n", r.epoch, r.step, r.loss);
  };
}

template <typename T>
int train_encoder_cmd(const Flags& f, const RunConfig& cfg) {
  const auto run = cfg.run();
  if (run.manifest.empty()) throw UsageError("train-encoder needs a dataset manifest (--manifest or [data] manifest)");
  const auto model = cfg.model();
  const auto train = cfg.train(TrainConfig::encoder_defaults());
  const fs::path out = f.out.empty() ? fs::path("encoder_run") : fs::path(f.out);
  write_run_record(out, "train-encoder", cli::resolved_text(model, &train, cfg.schedule(), run, "train-encoder"));

  const auto manifest = load_manifest(run.manifest, model.num_points() * model.upsample_factor);
  const auto data = load_dataset(manifest, Split::Train, fs::path(run.manifest).parent_path());
  Encoder<T> enc(model, derive_seed(run.seed, 1));
  auto tc = train;
  if (tc.checkpoint_every) tc.checkpoint_dir = out;
  const auto result = pretrain_encoder(enc, data, tc, stderr_log(tc.log_every));
  save_checkpoint(make_checkpoint("encoder", model, enc.params()), out / "encoder.ckpt");
  write_atomic(out / "encoder_loss.csv", loss_curve_csv(result));
  std::printf("final epoch loss %.6e\n", result.epoch_loss.back());
  return 0;
}

template <typename T>
int train_decoder_cmd(const Flags& f, const RunConfig& cfg) {
  const auto run = cfg.run();
  if (run.manifest.empty()) throw UsageError("train-decoder needs a dataset manifest (--manifest or [data] manifest)");
  require_file(f.ckpt_encoder, "--ckpt-encoder", "checkpoint");
  const auto enc = load_encoder<T>(f.ckpt_encoder);
  const auto model = cfg.model_over(enc.config());
  const auto train = cfg.train(TrainConfig::decoder_defaults());
  const auto sc = cfg.schedule();
  const fs::path out = f.out.empty() ? fs::path("decoder_run") : fs::path(f.out);
  write_run_record(out, "train-decoder", cli::resolved_text(model, &train, sc, run, "train-decoder"));

  const auto manifest = load_manifest(run.manifest, model.num_points() * model.upsample_factor);
  const auto data = load_dataset(manifest, Split::Train, fs::path(run.manifest).parent_path());
  Decoder<T> dec(model, derive_seed(run.seed, 2));
  auto tc = train;
  if (tc.checkpoint_every) tc.checkpoint_dir = out;
  const auto schedule = build_schedule(model.timesteps, sc.beta_start, sc.beta_end);
  const auto result = train_decoder(enc, dec, data, tc, schedule, stderr_log(tc.log_every));
  save_checkpoint(make_checkpoint("decoder", model, dec.params()), out / "decoder.ckpt");
  write_atomic(out / "decoder_loss.csv", loss_curve_csv(result));
  std::printf("final epoch loss %.6e\n", result.epoch_loss.back());
  return 0;
}

template <typename T>
struct Models {
  Encoder<T> enc;
  Decoder<T> dec;
  ModelConfig model;
  NoiseSchedule schedule;
  TaskOptions opts;
};

template <typename T>
Models<T> load_models(const Flags& f, const RunConfig& cfg) {
  require_file(f.ckpt_encoder, "--ckpt-encoder", "checkpoint");
  require_file(f.ckpt_decoder, "--ckpt-decoder", "checkpoint");
  auto enc = load_encoder<T>(f.ckpt_encoder);
  auto dec = load_decoder<T>(f.ckpt_decoder);
  const auto model = inference_model(cfg, dec.config());
  const auto sc = cfg.schedule();
  const auto run = cfg.run();
  TaskOptions opts;
  opts.model = model;
  opts.residual = sc.residual;
  opts.seed = run.seed;
  opts.visible_fraction = run.visible_fraction;
  auto schedule = build_schedule(model.timesteps, sc.beta_start, sc.beta_end);
  return Models<T>{std::move(enc), std::move(dec), model, std::move(schedule), opts};
}

void save_output(const PointCloud& cloud, const fs::path& path, const std::string& command,
                 const ModelConfig& model, const RunConfig& cfg) {
  write_run_record(path.parent_path(), path.filename().string(),
                   cli::resolved_text(model, nullptr, cfg.schedule(), cfg.run(), command));
  save_cloud(cloud, path);
  std::printf("wrote %zu points to %s\n", cloud.size(), path.string().c_str());
}

template <typename T>
int reconstruct_cmd(const Flags& f, const RunConfig& cfg, bool trace) {
  require_file(f.input, "--input", "input");
  auto m = load_models<T>(f, cfg);
  const auto norm = prepare(load_cloud(f.input), m.model.num_points(), m.opts.seed);
  m.opts.trace = trace;
  const auto cond = model_conditioner(m.enc, m.dec);
  const auto r = reconstruct(norm.cloud, cond, m.schedule, m.opts);

  if (trace) {
    const fs::path dir = f.out.empty() ? default_output(f.input, "_trace", "") : fs::path(f.out);
    fs::create_directories(dir);
    write_run_record(dir, "trace", cli::resolved_text(m.model, nullptr, cfg.schedule(), cfg.run(), "trace"));
    const std::size_t first = f.steps ? 0 : r.trace.size() - 1;
    for (std::size_t i = first; i < r.trace.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%04zu.ply", i);
      save_cloud(denormalize(r.trace[i], norm.record), dir / name);
    }
    std::printf("wrote %zu frames to %s\n", r.trace.size() - first, dir.string().c_str());
    return 0;
  }

  const fs::path out = f.out.empty() ? default_output(f.input, "_recon", ".ply") : fs::path(f.out);
  save_output(denormalize(r.cloud, norm.record), out, "reconstruct", m.model, cfg);
  if (f.save_visible) {
    // Model coordinates, ready for `complete`.
    const auto ps = segment(norm.cloud, m.model.groups, m.model.group_size);
    PointCloud visible, centers;
    for (std::size_t i = 0; i < ps.num_groups(); ++i) {
      if (r.mask.indicator[i]) centers.points.push_back(ps.centers[i]);
      else visible.points.insert(visible.points.end(), ps.absolute[i].begin(), ps.absolute[i].end());
    }
    save_cloud(visible, default_output(out.string(), "_visible", ".ply"));
    save_cloud(centers, default_output(out.string(), "_masked_centers", ".xyz"));
  }
  return 0;
}

template <typename T>
int complete_cmd(const Flags& f, const RunConfig& cfg) {
  require_file(f.input, "--input", "input");
  auto m = load_models<T>(f, cfg);
  const auto partial = load_cloud(f.input);
  PointCloud centers;
  if (m.model.use_position_embedding) {
    if (f.centers.empty()) throw UsageError("complete with position embeddings needs --centers");
    if (!fs::exists(f.centers)) throw std::runtime_error("centers file not found: " + f.centers);
    centers = load_cloud(f.centers);
  }
  const auto cond = model_conditioner(m.enc, m.dec);
  const auto r = complete(partial, cond, m.schedule, m.opts, centers.points);
  const fs::path out = f.out.empty() ? default_output(f.input, "_completed", ".ply") : fs::path(f.out);
  save_output(r.cloud, out, "complete", m.model, cfg);
  return 0;
}

template <typename T>
int upsample_cmd(const Flags& f, const RunConfig& cfg) {
  require_file(f.input, "--input", "input");
  auto m = load_models<T>(f, cfg);
  const auto norm = prepare(load_cloud(f.input), m.model.num_points(), m.opts.seed);
  const auto cond = model_conditioner(m.enc, m.dec);
  const auto r = upsample(norm.cloud, cond, m.schedule, m.opts);
  const fs::path out = f.out.empty() ? default_output(f.input, "_up", ".ply") : fs::path(f.out);
  save_output(denormalize(r.cloud, norm.record), out, "upsample", m.model, cfg);
  return 0;
}

int compress_cmd(const Flags& f, const RunConfig& cfg) {
  require_file(f.input, "--input", "input");
  ModelConfig model = cfg.model();
  if (!f.ckpt_encoder.empty()) {
    require_file(f.ckpt_encoder, "--ckpt-encoder", "checkpoint");
    model = inference_model(cfg, load_checkpoint(f.ckpt_encoder).model_config());
  }
  const auto run = cfg.run();
  const auto raw = load_cloud(f.input);
  const auto norm = prepare(raw, model.num_points(), run.seed);
  const auto blob = compress(norm.cloud, model, run.seed, run.quant_bits);
  const fs::path out = f.out.empty() ? default_output(f.input, "", ".dpc") : fs::path(f.out);
  write_run_record(out.parent_path(), out.filename().string(),
                   cli::resolved_text(model, nullptr, cfg.schedule(), run, "compress"));
  write_atomic(out, std::string(blob.begin(), blob.end()));
  std::printf("wrote %zu bytes to %s, %.6f bits per point\n", blob.size(), out.string().c_str(),
              bpp(blob, norm.cloud.size()));
  return 0;
}

template <typename T>
int decompress_cmd(const Flags& f, const RunConfig& cfg) {
  require_file(f.input, "--input", "input");
  auto m = load_models<T>(f, cfg);
  const auto text = read_text(f.input);
  const std::vector<std::uint8_t> blob(text.begin(), text.end());
  const auto cond = model_conditioner(m.enc, m.dec);
  const auto r = decompress(blob, cond, m.schedule, m.opts);
  const fs::path out = f.out.empty() ? default_output(f.input, "_decoded", ".ply") : fs::path(f.out);
  save_output(r.cloud, out, "decompress", m.model, cfg);
  return 0;
}

int eval_cmd(const Flags& f, const RunConfig& cfg) {
  if (f.gen.empty() || f.ref.empty()) throw UsageError("eval needs --gen and --ref");
  const auto gen_files = cloud_files(f.gen);
  const auto ref_files = cloud_files(f.ref);
  std::vector<PointCloud> gen, ref;
  std::vector<std::string> ids;
  for (const auto& p : gen_files) {
    gen.push_back(load_cloud(p));
    ids.push_back(p.stem().string());
  }
  for (const auto& p : ref_files) ref.push_back(load_cloud(p));
  EvalConfig ec;
  ec.grid_resolution = cfg.run().grid;
  ec.paired = gen_files.size() == ref_files.size();
  for (std::size_t i = 0; ec.paired && i < gen_files.size(); ++i)
    ec.paired = gen_files[i].filename() == ref_files[i].filename();
  const auto csv = report_csv(evaluate(gen, ref, ec, ids));
  if (f.out.empty()) {
    std::fputs(csv.c_str(), stdout);
  } else {
    const fs::path out(f.out);
    write_run_record(out.parent_path(), out.filename().string(),
                     cli::resolved_text(cfg.model(), nullptr, cfg.schedule(), cfg.run(), "eval"));
    write_atomic(out, csv);
  }
  return 0;
}

int synth_cmd(const Flags& f, const RunConfig& cfg) {
  if (f.out.empty()) throw UsageError("synth needs --out");
  ShapeKind kind;
  try {
    kind = shape_kind_from_string(f.kind);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  const auto cloud = synth_shape(kind, f.n, f.noise, cfg.run().seed);
  const fs::path out(f.out);
  write_run_record(out.parent_path(), out.filename().string(),
                   cli::resolved_text(cfg.model(), nullptr, cfg.schedule(), cfg.run(), "synth"));
  save_cloud(cloud, out);
  return 0;
}

template <typename T>
int dispatch(const std::string& cmd, const Flags& f, const RunConfig& cfg) {
  if (cmd == "train-encoder") return train_encoder_cmd<T>(f, cfg);
  if (cmd == "train-decoder") return train_decoder_cmd<T>(f, cfg);
  if (cmd == "reconstruct") return reconstruct_cmd<T>(f, cfg, false);
  if (cmd == "trace") return reconstruct_cmd<T>(f, cfg, true);
  if (cmd == "complete") return complete_cmd<T>(f, cfg);
  if (cmd == "upsample") return upsample_cmd<T>(f, cfg);
  if (cmd == "decompress") return decompress_cmd<T>(f, cfg);
  if (cmd == "compress") return compress_cmd(f, cfg);
  if (cmd == "eval") return eval_cmd(f, cfg);
  if (cmd == "synth") return synth_cmd(f, cfg);
  throw UsageError("unknown command " + cmd);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked point-cloud autoencoder with a conditional diffusion decoder"};
  app.set_version_flag("--version", POINTDIFF_VERSION);
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "key=value run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", f.seed, "run seed");
    sub->add_option("--out", f.out, "output file or directory");
  };
  auto masking = [&](CLI::App* sub) {
    sub->add_option("--mask-ratio", f.mask_ratio, "fraction of masked patches");
    sub->add_option("--mask-strategy", f.mask_strategy, "random or block");
  };
  auto models = [&](CLI::App* sub) {
    sub->add_option("--ckpt-encoder", f.ckpt_encoder, "encoder checkpoint");
    sub->add_option("--ckpt-decoder", f.ckpt_decoder, "decoder checkpoint");
    sub->add_option("--timesteps", f.timesteps, "diffusion steps (must match the decoder)");
    sub->add_option("--factor", f.factor, "upsampling factor (must match the decoder)");
    masking(sub);
  };
  auto input = [&](CLI::App* sub) { sub->add_option("input,--input", f.input, "input file"); };

  auto* te = app.add_subcommand("train-encoder", "pretrain the encoder on visible-patch reconstruction");
  common(te);
  masking(te);
  te->add_option("--manifest", f.manifest, "dataset manifest");
  te->add_option("--epochs", f.epochs, "training epochs");

  auto* td = app.add_subcommand("train-decoder", "train the diffusion decoder on a frozen encoder");
  common(td);
  masking(td);
  td->add_option("--manifest", f.manifest, "dataset manifest");
  td->add_option("--epochs", f.epochs, "training epochs");
  td->add_option("--ckpt-encoder", f.ckpt_encoder, "encoder checkpoint");
  td->add_option("--timesteps", f.timesteps, "diffusion steps");
  td->add_option("--factor", f.factor, "upsampling factor");
  td->add_option("--loss-setting", f.loss_setting, "entire or masked");

  auto* rc = app.add_subcommand("reconstruct", "regenerate the masked patches of a cloud");
  common(rc);
  models(rc);
  input(rc);
  rc->add_flag("--save-visible", f.save_visible, "also write the visible points and masked centers");

  auto* cp = app.add_subcommand("complete", "complete a partial cloud made of whole patches");
  common(cp);
  models(cp);
  input(cp);
  cp->add_option("--centers", f.centers, "masked patch centers (position-embedding models)");

  auto* up = app.add_subcommand("upsample", "densify a cloud with a Config 2 decoder");
  common(up);
  models(up);
  input(up);

  auto* cz = app.add_subcommand("compress", "write the visible patches and centers as a bitstream");
  common(cz);
  masking(cz);
  input(cz);
  cz->add_option("--ckpt-encoder", f.ckpt_encoder, "take the model layout from this checkpoint");
  cz->add_option("--quant-bits", f.quant_bits, "bits per coordinate, 6..16");

  auto* dz = app.add_subcommand("decompress", "regenerate a cloud from a bitstream");
  common(dz);
  models(dz);
  input(dz);

  auto* ev = app.add_subcommand("eval", "MMD-CD, 1-NN CD, JSD and HD between two sets of clouds");
  common(ev);
  ev->add_option("--gen", f.gen, "generated cloud or directory");
  ev->add_option("--ref", f.ref, "reference cloud or directory");
  ev->add_option("--grid", f.grid, "JSD voxel grid resolution");

  auto* sy = app.add_subcommand("synth", "sample a synthetic shape");
  common(sy);
  sy->add_option("--kind", f.kind, "sphere, cube, torus, cylinder or two-spheres");
  sy->add_option("--n", f.n, "point count");
  sy->add_option("--noise", f.noise, "gaussian jitter");

  auto* tr = app.add_subcommand("trace", "write the reverse-diffusion frames of a reconstruction");
  common(tr);
  models(tr);
  input(tr);
  tr->add_flag("--steps", f.steps, "one frame per reverse step (default: final frame only)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "pointdiff: %s\n", e.what());
    return 2;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    const RunConfig cfg = resolve(f);
    const char* prec = std::getenv("POINTDIFF_PRECISION");
    const std::string p = prec ? prec : "32";
    if (p == "32") return dispatch<float>(cmd, f, cfg);
    if (p == "64") return dispatch<double>(cmd, f, cfg);
    throw UsageError("POINTDIFF_PRECISION must be 32 or 64, got '" + p + "'");
  } catch (const UsageError& e) {
    std::fprintf(stderr, "pointdiff %s: %s\n", cmd.c_str(), e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "pointdiff %s: %s\n", cmd.c_str(), e.what());
    return 1;
  }
}
