#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "pointdiff/data_io.hpp"
#include "pointdiff/errors.hpp"
#include "pointdiff/model.hpp"
#include "pointdiff/training.hpp"
#include "support.hpp"

using namespace pointdiff;
using tensor::Array;
using tensor::Graph;
using tensor::Var;

namespace {

ModelConfig toy() {
  ModelConfig m;
  m.latent_width = 8;
  m.enc_blocks = 1;
  m.enc_heads = 2;
  m.dec_blocks = 1;
  m.dec_heads = 2;
  m.groups = 4;
  m.group_size = 4;
  m.timesteps = 10;
  m.mask_ratio = 0.5;
  return m;
}

template <typename Net>
void zero(Net& net, const std::string& name) {
  auto& p = net.params()[net.params().find(name)];
  std::fill(p.value.data.begin(), p.value.data.end(), 0.0);
}

Array<double> patch_array(const std::vector<Point>& pts) {
  return stack_patches<double>({pts}, std::vector<std::size_t>{0});
}

}  // namespace

TEST_CASE("config validation and round trip") {
  ModelConfig d;
  CHECK(d.latent_width == 384);
  CHECK(d.enc_blocks == 12);
  CHECK(d.enc_heads == 6);
  CHECK(d.dec_blocks == 4);
  CHECK(d.dec_heads == 4);
  CHECK(d.groups == 64);
  CHECK(d.group_size == 32);
  CHECK(d.mask_ratio == 0.75);
  CHECK(d.timesteps == 200);
  CHECK_NOTHROW(d.validate());
  CHECK(ModelConfig::from_map(d.to_map()).to_map() == d.to_map());

  auto bad = d;
  bad.enc_heads = 5;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  CHECK_THROWS_AS(ModelConfig::from_map({{"nonsense", "1"}}), InvalidArgument);
}

TEST_CASE("token_embed is permutation invariant and separates patches") {
  auto m = toy();
  Encoder<double> enc(m, 1);
  testing::jitter(enc, 0.3, 2);
  const auto c = testing::random_cloud(4, 3);
  auto perm = c.points;
  std::reverse(perm.begin(), perm.end());
  Graph<double> g(false);
  const auto a = g.value(enc.token_embed(g, g.constant(patch_array(c.points)), false));
  const auto b = g.value(enc.token_embed(g, g.constant(patch_array(perm)), false));
  CHECK(a == b);

  const auto d = testing::random_cloud(4, 4);
  const auto e = g.value(enc.token_embed(g, g.constant(patch_array(d.points)), false));
  CHECK(a != e);

  zero(enc, "enc.token.w2");
  zero(enc, "enc.token.b2");
  const auto z = g.value(enc.token_embed(g, g.constant(patch_array(std::vector<Point>(4, Point{0, 0, 0}))), false));
  for (double v : z) CHECK(v == 0.0);

  CHECK_THROWS_AS(enc.token_embed(g, g.constant(Array<double>({1, 3, 3})), false), ShapeError);
}

TEST_CASE("pos_embed") {
  auto m = toy();
  Encoder<double> enc(m, 1);
  testing::jitter(enc, 0.5, 7);
  Graph<double> g(false);
  const auto pos = [&](Point c) {
    return g.value(enc.pos_embed(g, g.constant(stack_points<double>(std::span<const Point>(&c, 1))), false));
  };
  CHECK(pos({0.1, 0.2, 0.3}) == pos({0.1, 0.2, 0.3}));

  // |gelu'| <= 1.13, so |pos(c + d) - pos(c)| <= 1.13 |W|_2 |d|.
  const auto& W = enc.params()[enc.params().find("enc.pos.w")].value;  // [3, L]
  double wtw[3][3] = {};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (std::size_t l = 0; l < m.latent_width; ++l) wtw[i][j] += W[i * m.latent_width + l] * W[j * m.latent_width + l];
  double v[3] = {1, 1, 1}, lambda = 0;
  for (int it = 0; it < 200; ++it) {
    double w[3] = {};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) w[i] += wtw[i][j] * v[j];
    lambda = std::sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2]);
    for (int i = 0; i < 3; ++i) v[i] = w[i] / lambda;
  }
  const double norm = std::sqrt(lambda);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 0.1);
  for (int trial = 0; trial < 50; ++trial) {
    const Point c{n(rng), n(rng), n(rng)}, d{n(rng), n(rng), n(rng)};
    const auto a = pos(c), b = pos(c + d);
    double diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
    CHECK(std::sqrt(diff) <= 1.13 * norm * std::sqrt(testing::sq(d, {0, 0, 0})) + 1e-12);
  }

  zero(enc, "enc.pos.b");
  for (double x : pos({0, 0, 0})) CHECK(x == 0.0);  // gelu(0) = 0
}

TEST_CASE("encode arity at the default configuration") {
  ModelConfig m;
  Encoder<float> enc(m, 1);
  const auto cloud = synth_shape(ShapeKind::Sphere, 2048, 0, 1);
  const auto mask = apply_mask(64, 0.75, MaskStrategy::Random, 3);
  const auto lat = enc.encode(cloud, mask);
  CHECK(lat.tokens.shape == tensor::Shape{16, 384});
  CHECK(lat.centers.size() == 64);
  for (float v : lat.tokens.data) CHECK(std::isfinite(v));
  Graph<float> g(false);
  const auto head = enc.pretrain_head(g, g.constant(lat.tokens), false);
  CHECK(g.shape(head) == tensor::Shape{16, 32, 3});
}

TEST_CASE("encode is deterministic; a single visible token works") {
  auto m = toy();
  m.mask_ratio = 0.75;
  Encoder<double> enc(m, 5);
  const auto cloud = testing::random_cloud(16, 9);
  const auto mask = apply_mask(4, 0.75, MaskStrategy::Random, 1);
  const auto a = enc.encode(cloud, mask), b = enc.encode(cloud, mask);
  CHECK(a.tokens.data == b.tokens.data);
  CHECK(a.tokens.shape == tensor::Shape{1, 8});

  const auto ps = segment(cloud, 4, 4);
  std::vector<std::vector<Point>> vis;
  for (auto i : mask.visible_indices()) vis.push_back(ps.patches[i]);
  CHECK(enc.encode_visible(vis, ps.centers, mask).tokens.data == a.tokens.data);
}

TEST_CASE("position embeddings are dropped in the w/o-pos mode") {
  auto m = toy();
  m.use_position_embedding = false;
  Encoder<double> enc(m, 5);
  const auto cloud = testing::random_cloud(16, 9);
  const auto ps = segment(cloud, 4, 4);
  const auto mask = apply_mask(4, 0.5, MaskStrategy::Random, 1);
  std::vector<std::vector<Point>> vis;
  for (auto i : mask.visible_indices()) vis.push_back(ps.patches[i]);
  auto moved = ps.centers;
  for (auto& c : moved) c = c + Point{0.3, -0.2, 0.1};
  CHECK(enc.encode_visible(vis, ps.centers, mask).tokens.data == enc.encode_visible(vis, moved, mask).tokens.data);
}

TEST_CASE("pretrain head with zero weights puts every point at its center") {
  auto m = toy();
  Encoder<double> enc(m, 1);
  zero(enc, "enc.head.w");
  zero(enc, "enc.head.b");
  Graph<double> g(false);
  const auto out = g.value(enc.pretrain_head(g, g.constant(Array<double>({2, 8}, std::vector<double>(16, 1.0))), false));
  for (double v : out) CHECK(v == 0.0);
}

TEST_CASE("sinusoid and time_embed") {
  const auto s0 = sinusoid(0, 8);
  CHECK(s0 == std::vector<double>{0, 0, 0, 0, 1, 1, 1, 1});
  const auto s3 = sinusoid(3, 8);
  for (std::size_t i = 0; i < 4; ++i) {
    const double f = std::pow(10000.0, -static_cast<double>(i) / 4.0);
    CHECK(s3[i] == doctest::Approx(std::sin(3 * f)));
    CHECK(s3[4 + i] == doctest::Approx(std::cos(3 * f)));
  }

  auto m = toy();
  Decoder<double> dec(m, 1);
  testing::jitter(dec, 0.3, 1);
  Graph<double> g(false);
  std::vector<std::vector<double>> seen;
  for (std::size_t t = 0; t < m.timesteps; ++t) {
    const auto e = g.value(dec.time_embed(g, t, false));
    for (const auto& prev : seen) CHECK(prev != e);
    seen.push_back(e);
  }
  CHECK(g.value(dec.time_embed(g, 4, false)) == seen[4]);
  CHECK_THROWS_AS(dec.time_embed(g, m.timesteps, false), InvalidArgument);
}

TEST_CASE("mask_tokenize") {
  ModelConfig m;
  Decoder<float> big(m, 1);
  Graph<float> gf(false);
  CHECK(gf.shape(big.mask_tokenize(gf, gf.constant(Array<float>({48, 32, 3})), false)) == tensor::Shape{48, 384});

  auto t = toy();
  Decoder<double> dec(t, 1);
  testing::jitter(dec, 0.3, 2);
  zero(dec, "dec.mask_token.b");
  const auto& W = dec.params()[dec.params().find("dec.mask_token.w")].value;  // [12, 8]
  const auto x = testing::random_cloud(8, 1);
  Graph<double> g(false);
  // Pre-nonlinearity: a plain linear map, so scaling commutes.
  auto pre = [&](double a) {
    std::vector<double> out(16, 0.0);
    for (std::size_t p = 0; p < 2; ++p)
      for (std::size_t l = 0; l < 8; ++l)
        for (std::size_t k = 0; k < 12; ++k) out[p * 8 + l] += a * x.points[p * 4 + k / 3][k % 3] * W[k * 8 + l];
    return out;
  };
  const auto tok = g.value(dec.mask_tokenize(g, g.constant(stack_patches<double>(
                                                  {std::vector<Point>(x.points.begin(), x.points.begin() + 4),
                                                   std::vector<Point>(x.points.begin() + 4, x.points.end())},
                                                  std::vector<std::size_t>{0, 1})),
                                              false));
  const auto lin = pre(1.0), lin2 = pre(2.0);
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(tok[i] == doctest::Approx(0.5 * lin[i] * (1 + std::erf(lin[i] / std::sqrt(2.0)))));
    CHECK(lin2[i] == doctest::Approx(2 * lin[i]));
  }
  const auto zeros = g.value(dec.mask_tokenize(g, g.constant(Array<double>({2, 4, 3})), false));
  for (double v : zeros) CHECK(v == 0.0);
  CHECK_THROWS_AS(dec.mask_tokenize(g, g.constant(Array<double>({2, 5, 3})), false), ShapeError);
}

TEST_CASE("decode arity for both output modes") {
  ModelConfig m;
  m.latent_width = 32;
  m.enc_blocks = 1;
  m.enc_heads = 2;
  m.dec_blocks = 1;
  m.dec_heads = 2;
  m.timesteps = 10;
  Encoder<float> enc(m, 1);
  Decoder<float> dec(m, 2);
  const auto cloud = synth_shape(ShapeKind::Cube, 2048, 0, 1);
  const auto mask = apply_mask(64, 0.75, MaskStrategy::Random, 3);
  const auto lat = enc.encode(cloud, mask);
  const std::vector<double> x(48 * 32 * 3, 0.1);
  const auto out = dec.decode(lat, x, 3);
  CHECK(out.patches.size() == 48);
  for (const auto& p : out.patches) CHECK(p.size() == 32);
  CHECK(out.patch_ids == mask.masked_indices());

  auto m2 = m;
  m2.predict_visible = true;
  m2.upsample_factor = 4;
  Decoder<float> dec2(m2, 2);
  const std::vector<double> x2(64 * 128 * 3, 0.1);
  const auto out2 = dec2.decode(lat, x2, 3);
  CHECK(out2.patches.size() == 64);
  std::size_t total = 0;
  for (const auto& p : out2.patches) total += p.size();
  CHECK(total == 8192);

  CHECK_THROWS_AS(dec.decode(lat, x, 10), InvalidArgument);
  CHECK_THROWS(dec.decode(lat, std::vector<double>(10, 0.0), 3));
}

TEST_CASE("zeroed decoder head predicts the patch centers") {
  auto m = toy();
  Encoder<double> enc(m, 1);
  Decoder<double> dec(m, 2);
  zero(dec, "dec.head.w");
  zero(dec, "dec.head.b");
  const auto cloud = testing::random_cloud(16, 3);
  const auto ps = segment(cloud, 4, 4);
  const auto mask = apply_mask(4, 0.5, MaskStrategy::Random, 2);
  const auto out = dec.decode(enc.encode(ps, mask), std::vector<double>(2 * 4 * 3, 0.7), 1);
  std::vector<std::vector<Point>> rel(out.patches.begin(), out.patches.end());
  const auto assembled = assemble(ps, mask.indicator, rel);
  std::size_t k = 0;
  for (auto i : mask.masked_indices())
    for (std::size_t j = 0; j < 4; ++j) CHECK(assembled[k++] == ps.centers[i]);
}

TEST_CASE("end-to-end gradients at toy scale") {
  auto m = toy();
  const auto cloud = synth_shape(ShapeKind::Sphere, 16, 0, 3);
  const auto view = make_training_view(cloud, m);
  const auto mask = apply_mask(4, 0.5, MaskStrategy::Random, 1);
  Encoder<double> enc(m, 2);
  testing::jitter(enc, 0.3, 5);
  std::mt19937_64 rng(1);
  const double e = tensor::grad_check_parameters(
      enc.params(), [&](Graph<double>& g) { return encoder_loss(g, enc, view, mask); }, 1e-5, 0, rng);
  CHECK(e < 1e-4);
}
