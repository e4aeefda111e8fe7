#include <doctest.h>

#include <filesystem>
#include <unistd.h>

#include "pointdiff/checkpoint.hpp"
#include "pointdiff/data_io.hpp"
#include "pointdiff/errors.hpp"
#include "pointdiff/training.hpp"
#include "support.hpp"

using namespace pointdiff;
namespace fs = std::filesystem;

namespace {

// The smallest model that still has every component.
ModelConfig toy() {
  ModelConfig c;
  c.latent_width = 8;
  c.enc_blocks = 1;
  c.enc_heads = 2;
  c.dec_blocks = 1;
  c.dec_heads = 2;
  c.groups = 4;
  c.group_size = 4;
  c.mask_ratio = 0.5;
  c.timesteps = 10;
  return c;
}

ModelConfig small() {
  ModelConfig c;
  c.latent_width = 16;
  c.enc_blocks = 1;
  c.enc_heads = 2;
  c.dec_blocks = 1;
  c.dec_heads = 2;
  c.groups = 8;
  c.group_size = 8;
  c.timesteps = 20;
  return c;
}

// G tight clusters of identical points: every center-relative patch is zero.
PointCloud clustered(const ModelConfig& cfg) {
  PointCloud c;
  for (std::size_t g = 0; g < cfg.groups; ++g) {
    const double a = 6.283185307179586 * static_cast<double>(g) / static_cast<double>(cfg.groups);
    for (std::size_t j = 0; j < cfg.group_size * cfg.upsample_factor; ++j)
      c.points.push_back({0.4 * std::cos(a), 0.4 * std::sin(a), 0.05 * static_cast<double>(g % 2)});
  }
  return c;
}

template <typename T>
void zero_head(Decoder<T>& dec) {
  for (auto& p : dec.params())
    if (p.name == "dec.head.w" || p.name == "dec.head.b") std::fill(p.value.data.begin(), p.value.data.end(), T(0));
}

}  // namespace

TEST_CASE("decoder loss gradients in both settings") {
  auto cfg = toy();
  const auto cloud = testing::random_cloud(cfg.num_points(), 21);
  const auto view = make_training_view(cloud, cfg);
  const auto schedule = build_schedule(cfg.timesteps, 1e-4, 0.05);
  for (bool predict_visible : {false, true}) {
    cfg.predict_visible = predict_visible;
    for (std::uint64_t point = 0; point < 3; ++point) {
      Encoder<double> enc(cfg, 100 + point);
      Decoder<double> dec(cfg, 200 + point);
      testing::jitter(enc, 0.3, point);
      testing::jitter(dec, 0.3, 10 + point);
      const auto mask = training_mask(cfg, 5, point, 0, view.patches);
      const auto latent = enc.encode(view.patches, mask);
      const auto sample = draw_diffusion_sample(view, mask, cfg, schedule, 31 + point);
      for (auto setting : {LossSetting::EntireObject, LossSetting::MaskedOnly}) {
        std::mt19937_64 rng(point);
        const double err = tensor::grad_check_parameters(
            dec.params(),
            [&](tensor::Graph<double>& g) {
              return decoder_loss(g, dec, latent.tokens, view, mask, sample, setting);
            },
            1e-5, 6, rng);
        CHECK_MESSAGE(err < 1e-4, "predict_visible=", predict_visible, " setting=", std::string(to_string(setting)),
                      " point=", point, " err=", err);
      }
    }
  }
}

TEST_CASE("encoder loss gradients") {
  const auto cfg = toy();
  const auto view = make_training_view(testing::random_cloud(cfg.num_points(), 8), cfg);
  for (std::uint64_t point = 0; point < 3; ++point) {
    Encoder<double> enc(cfg, 40 + point);
    testing::jitter(enc, 0.3, point);
    const auto mask = training_mask(cfg, 3, point, 0, view.patches);
    std::mt19937_64 rng(point);
    const double err = tensor::grad_check_parameters(
        enc.params(), [&](tensor::Graph<double>& g) { return encoder_loss(g, enc, view, mask); }, 1e-5, 6, rng);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("a perfect decoder scores zero in both settings") {
  for (bool predict_visible : {false, true}) {
    auto cfg = small();
    cfg.predict_visible = predict_visible;
    const auto view = make_training_view(clustered(cfg), cfg);
    const auto schedule = build_schedule(cfg.timesteps, 1e-4, 0.05);
    const Encoder<double> enc(cfg, 1);
    Decoder<double> dec(cfg, 2);
    zero_head(dec);
    const auto mask = training_mask(cfg, 0, 0, 0, view.patches);
    const auto latent = enc.encode(view.patches, mask);
    const auto sample = draw_diffusion_sample(view, mask, cfg, schedule, 4);
    for (auto setting : {LossSetting::EntireObject, LossSetting::MaskedOnly}) {
      tensor::Graph<double> g(false);
      CHECK(g.value(decoder_loss(g, dec, latent.tokens, view, mask, sample, setting))[0] == 0.0);
    }
  }
}

TEST_CASE("setting (b) at the default configuration compares 1536 points with 1536") {
  const ModelConfig cfg;
  const auto cloud = synth_shape(ShapeKind::Sphere, cfg.num_points(), 0, 1);
  const auto view = make_training_view(cloud, cfg);
  const auto mask = training_mask(cfg, 0, 0, 0, view.patches);
  const auto sample = draw_diffusion_sample(view, mask, cfg, build_schedule(cfg.timesteps, 1e-4, 0.05), 1);
  CHECK(sample.x_t.size() == 1536 * 3);
  std::size_t gt = 0;
  for (auto i : mask.masked_indices()) gt += view.target_absolute[i].size();
  CHECK(gt == 1536);
}

TEST_CASE("training views") {
  auto cfg = small();
  const auto cloud = synth_shape(ShapeKind::Torus, cfg.num_points(), 0, 2);
  const auto v = make_training_view(cloud, cfg);
  CHECK(v.targets == v.patches.patches);

  cfg.upsample_factor = 4;
  const auto dense = synth_shape(ShapeKind::Torus, cfg.num_points() * 4, 0, 2);
  const auto u = make_training_view(dense, cfg);
  CHECK(u.patches.centers.size() == cfg.groups);
  for (std::size_t i = 0; i < cfg.groups; ++i) {
    REQUIRE(u.targets[i].size() == cfg.group_size * 4);
    CHECK(u.patches.patches[i].size() == cfg.group_size);
    const auto knn = testing::knn(dense, u.patches.centers[i], cfg.group_size * 4);
    for (std::size_t j = 0; j < knn.size(); ++j) CHECK(u.target_absolute[i][j] == dense[knn[j]]);
  }
  CHECK_THROWS_AS(make_training_view(cloud, cfg), InvalidArgument);
}

TEST_CASE("encoder pretraining with lr = 0") {
  const auto cfg = small();
  TrainConfig tc;
  tc.epochs = 6;
  tc.batch_size = 1;
  tc.lr = 0;
  tc.seed = 9;

  // Identical patches at identical centers: the loss cannot depend on the mask.
  const PointCloud flat{std::vector<Point>(cfg.num_points(), Point{0.1, -0.2, 0.3})};
  Encoder<double> still(cfg, 3);
  const auto r0 = pretrain_encoder(still, {flat}, tc);
  for (double l : r0.epoch_loss) CHECK(l == r0.epoch_loss.front());

  // On a real shape the parameters stay put and every step replays the
  // loss of the initial weights under that step's mask.
  const auto cloud = synth_shape(ShapeKind::Cube, cfg.num_points(), 0, 3);
  Encoder<double> enc(cfg, 3);
  const Encoder<double> init(cfg, 3);
  const auto r = pretrain_encoder(enc, {cloud}, tc);
  for (std::size_t i = 0; i < enc.params().size(); ++i) CHECK(enc.params()[i].value.data == init.params()[i].value.data);
  const auto view = make_training_view(cloud, cfg);
  REQUIRE(r.steps.size() == tc.epochs);
  for (const auto& s : r.steps) {
    tensor::Graph<double> g(false);
    CHECK(s.loss == g.value(encoder_loss(g, init, view, training_mask(cfg, tc.seed, s.epoch, 0, view.patches)))[0]);
  }
}

TEST_CASE("decoder training freezes the encoder and reproduces bitwise") {
  const auto cfg = small();
  std::vector<PointCloud> data;
  for (std::size_t i = 0; i < 3; ++i) data.push_back(synth_shape(static_cast<ShapeKind>(i), cfg.num_points(), 0, i));
  const auto schedule = build_schedule(cfg.timesteps, 1e-4, 0.05);
  TrainConfig tc;
  tc.epochs = 4;
  tc.batch_size = 2;
  tc.lr = 1e-3;
  tc.seed = 17;
  tc.checkpoint_every = 2;

  Encoder<float> enc(cfg, 1);
  pretrain_encoder(enc, data, tc);
  const auto before = enc.params();

  Decoder<float> a(cfg, 2), b(cfg, 2);
  const auto ra = train_decoder(enc, a, data, tc, schedule);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(enc.params()[i].value.data == before[i].value.data);
  const auto rb = train_decoder(enc, b, data, tc, schedule);
  CHECK(loss_curve_csv(ra) == loss_curve_csv(rb));
  for (std::size_t i = 0; i < a.params().size(); ++i) CHECK(a.params()[i].value.data == b.params()[i].value.data);

  CHECK(ra.steps.size() == 4 * 2);
  CHECK(ra.epoch_loss.size() == 4);
  REQUIRE(ra.checkpoint_loss.size() == 2);
  CHECK(ra.checkpoint_loss[0] == (ra.epoch_loss[0] + ra.epoch_loss[1]) / 2);
  const auto csv = loss_curve_csv(ra);
  CHECK(csv.rfind("step,epoch,loss\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);

  auto other = cfg;
  other.latent_width = 32;
  Decoder<float> wrong(other, 2);
  CHECK_THROWS_AS(train_decoder(enc, wrong, data, tc, schedule), InvalidArgument);
  CHECK_THROWS_AS(train_decoder(enc, a, data, tc, build_schedule(7, 1e-4, 0.05)), InvalidArgument);
  tc.epochs = 0;
  CHECK_THROWS_AS(pretrain_encoder(enc, data, tc), InvalidArgument);
}

TEST_CASE("checkpoints are written at the interval") {
  const auto dir = fs::temp_directory_path() / ("pointdiff_train_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const auto cfg = small();
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 1;
  tc.checkpoint_every = 2;
  tc.checkpoint_dir = dir;
  Encoder<float> enc(cfg, 1);
  pretrain_encoder(enc, {synth_shape(ShapeKind::Sphere, cfg.num_points(), 0, 1)}, tc);
  CHECK(fs::exists(dir / "encoder_epoch0002.ckpt"));
  CHECK(fs::exists(dir / "encoder_epoch0003.ckpt"));
  CHECK_FALSE(fs::exists(dir / "encoder_epoch0001.ckpt"));
  const auto back = load_encoder<float>(dir / "encoder_epoch0003.ckpt");
  for (std::size_t i = 0; i < enc.params().size(); ++i) CHECK(back.params()[i].value.data == enc.params()[i].value.data);
  fs::remove_all(dir);
}

TEST_CASE("loss settings parse") {
  CHECK(loss_setting_from_string(to_string(LossSetting::EntireObject)) == LossSetting::EntireObject);
  CHECK(loss_setting_from_string(to_string(LossSetting::MaskedOnly)) == LossSetting::MaskedOnly);
  CHECK_THROWS_AS(loss_setting_from_string("both"), InvalidArgument);
}
