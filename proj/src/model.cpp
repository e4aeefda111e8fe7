#include "pointdiff/model.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "pointdiff/errors.hpp"

namespace pointdiff {

using tensor::Array;
using tensor::Graph;
using tensor::ParameterStore;
using tensor::Shape;
using tensor::Var;

namespace {

constexpr double kInitStd = 0.02;
constexpr double kNormEps = 1e-5;

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::size_t parse_count(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || v[0] == '-')
    throw InvalidArgument("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(x);
}

double parse_real(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double x = 0;
  try {
    x = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty())
    throw InvalidArgument("config: '" + key + "' expects a real number, got '" + v + "'");
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw InvalidArgument("config: '" + key + "' expects true/false, got '" + v + "'");
}

template <typename T>
std::size_t add_ones(ParameterStore<T>& ps, std::string name, std::size_t width) {
  const std::size_t id = ps.add(std::move(name), Shape{width});
  for (auto& v : ps[id].value.data) v = T(1);
  return id;
}

template <typename T>
BlockParams make_block(ParameterStore<T>& ps, const std::string& p, std::size_t width,
                       std::mt19937_64& rng) {
  const std::size_t hidden = 4 * width;
  BlockParams b{};
  b.ln1_g = add_ones(ps, p + ".ln1.g", width);
  b.ln1_b = ps.add(p + ".ln1.b", Shape{width});
  b.wq = ps.add_trunc_normal(p + ".attn.wq", Shape{width, width}, kInitStd, rng);
  b.bq = ps.add(p + ".attn.bq", Shape{width});
  b.wk = ps.add_trunc_normal(p + ".attn.wk", Shape{width, width}, kInitStd, rng);
  b.wv = ps.add_trunc_normal(p + ".attn.wv", Shape{width, width}, kInitStd, rng);
  b.bv = ps.add(p + ".attn.bv", Shape{width});
  b.wo = ps.add_trunc_normal(p + ".attn.wo", Shape{width, width}, kInitStd, rng);
  b.bo = ps.add(p + ".attn.bo", Shape{width});
  b.ln2_g = add_ones(ps, p + ".ln2.g", width);
  b.ln2_b = ps.add(p + ".ln2.b", Shape{width});
  b.w1 = ps.add_trunc_normal(p + ".mlp.w1", Shape{width, hidden}, kInitStd, rng);
  b.b1 = ps.add(p + ".mlp.b1", Shape{hidden});
  b.w2 = ps.add_trunc_normal(p + ".mlp.w2", Shape{hidden, width}, kInitStd, rng);
  b.b2 = ps.add(p + ".mlp.b2", Shape{width});
  return b;
}

template <typename T>
Var affine_norm(Graph<T>& g, const ParameterStore<T>& ps, std::size_t gain, std::size_t bias,
                Var x, bool tr) {
  const std::size_t last = g.shape(x).size() - 1;
  return g.add(g.mul(g.layer_norm(x, last, static_cast<T>(kNormEps)), g.param(ps, gain, tr)),
               g.param(ps, bias, tr));
}

template <typename T>
Var linear(Graph<T>& g, const ParameterStore<T>& ps, std::size_t w, std::size_t b, Var x, bool tr) {
  return g.conv1d_pointwise(x, g.param(ps, w, tr), g.param(ps, b, tr));
}

// Multi-head self attention over the rows of x [n, L].
template <typename T>
Var self_attention(Graph<T>& g, const ParameterStore<T>& ps, const BlockParams& b, Var x,
                   std::size_t heads, bool tr) {
  const std::size_t n = g.shape(x)[0], width = g.shape(x)[1], dh = width / heads;
  auto split_heads = [&](Var v) { return g.transpose(g.reshape(v, Shape{n, heads, dh}), 0, 1); };
  const Var q = split_heads(linear(g, ps, b.wq, b.bq, x, tr));
  // No key bias: it shifts every score of a query equally and cancels in the softmax.
  const Var k = split_heads(g.matmul(x, g.param(ps, b.wk, tr)));
  const Var v = split_heads(linear(g, ps, b.wv, b.bv, x, tr));
  const Var scores = g.scale(g.matmul(q, g.transpose(k, 1, 2)), T(1) / std::sqrt(static_cast<T>(dh)));
  const Var ctx = g.matmul(g.softmax(scores, 2), v);  // [h, n, dh]
  const Var merged = g.reshape(g.transpose(ctx, 0, 1), Shape{n, width});
  return linear(g, ps, b.wo, b.bo, merged, tr);
}

template <typename T>
Var transformer_block(Graph<T>& g, const ParameterStore<T>& ps, const BlockParams& b, Var x,
                      std::size_t heads, bool tr) {
  x = g.add(x, self_attention(g, ps, b, affine_norm(g, ps, b.ln1_g, b.ln1_b, x, tr), heads, tr));
  const Var h = g.gelu(linear(g, ps, b.w1, b.b1, affine_norm(g, ps, b.ln2_g, b.ln2_b, x, tr), tr));
  return g.add(x, linear(g, ps, b.w2, b.b2, h, tr));
}

void require_shape(const Shape& got, const Shape& want, const char* what) {
  if (got != want)
    throw ShapeError(std::string(what) + ": expected " + tensor::to_string(want) + ", got " +
                     tensor::to_string(got));
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw InvalidArgument("model config: " + m); };
  if (latent_width == 0 || latent_width % 2 != 0) fail("latent_width must be positive and even");
  if (enc_heads == 0 || latent_width % enc_heads != 0) fail("latent_width not divisible by enc_heads");
  if (dec_heads == 0 || latent_width % dec_heads != 0) fail("latent_width not divisible by dec_heads");
  if (groups < 2) fail("groups must be >= 2");
  if (group_size == 0) fail("group_size must be positive");
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) fail("mask_ratio must be in (0,1)");
  const std::size_t m = num_masked();
  if (m < 1 || m + 1 > groups) fail("mask_ratio masks all or none of the groups");
  if (timesteps == 0) fail("timesteps must be positive");
  if (upsample_factor == 0) fail("upsample_factor must be >= 1");
}

const char* to_string(MaskStrategy s) { return s == MaskStrategy::Block ? "block" : "random"; }

MaskStrategy mask_strategy_from_string(const std::string& s) {
  if (s == "random") return MaskStrategy::Random;
  if (s == "block") return MaskStrategy::Block;
  throw InvalidArgument("unknown mask strategy '" + s + "' (expected random|block)");
}

std::map<std::string, std::string> ModelConfig::to_map() const {
  return {
      {"latent_width", std::to_string(latent_width)},
      {"enc_blocks", std::to_string(enc_blocks)},
      {"enc_heads", std::to_string(enc_heads)},
      {"dec_blocks", std::to_string(dec_blocks)},
      {"dec_heads", std::to_string(dec_heads)},
      {"groups", std::to_string(groups)},
      {"group_size", std::to_string(group_size)},
      {"mask_ratio", fmt_double(mask_ratio)},
      {"mask_strategy", to_string(mask_strategy)},
      {"timesteps", std::to_string(timesteps)},
      {"predict_visible", predict_visible ? "true" : "false"},
      {"upsample_factor", std::to_string(upsample_factor)},
      {"use_position_embedding", use_position_embedding ? "true" : "false"},
  };
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  for (const auto& [k, v] : kv) {
    if (k == "latent_width") c.latent_width = parse_count(k, v);
    else if (k == "enc_blocks") c.enc_blocks = parse_count(k, v);
    else if (k == "enc_heads") c.enc_heads = parse_count(k, v);
    else if (k == "dec_blocks") c.dec_blocks = parse_count(k, v);
    else if (k == "dec_heads") c.dec_heads = parse_count(k, v);
    else if (k == "groups") c.groups = parse_count(k, v);
    else if (k == "group_size") c.group_size = parse_count(k, v);
    else if (k == "mask_ratio") c.mask_ratio = parse_real(k, v);
    else if (k == "mask_strategy") c.mask_strategy = mask_strategy_from_string(v);
    else if (k == "timesteps") c.timesteps = parse_count(k, v);
    else if (k == "predict_visible") c.predict_visible = parse_bool(k, v);
    else if (k == "upsample_factor") c.upsample_factor = parse_count(k, v);
    else if (k == "use_position_embedding") c.use_position_embedding = parse_bool(k, v);
    else throw InvalidArgument("model config: unknown key '" + k + "'");
  }
  return c;
}

template <typename T>
Array<T> stack_patches(const std::vector<std::vector<Point>>& patches,
                       std::span<const std::size_t> which) {
  if (which.empty()) throw InvalidArgument("stack_patches: no patches selected");
  const std::size_t n = patches[which[0]].size();
  Array<T> out(Shape{which.size(), n, 3});
  std::size_t o = 0;
  for (auto i : which) {
    if (patches[i].size() != n) throw ShapeError("stack_patches: ragged patch sizes");
    for (const auto& p : patches[i])
      for (int k = 0; k < 3; ++k) out[o++] = static_cast<T>(p[k]);
  }
  return out;
}

template <typename T>
Array<T> stack_points(std::span<const Point> points) {
  Array<T> out(Shape{points.size(), 3});
  for (std::size_t i = 0; i < points.size(); ++i)
    for (int k = 0; k < 3; ++k) out[3 * i + k] = static_cast<T>(points[i][k]);
  return out;
}

template <typename T>
std::vector<std::vector<Point>> unstack_patches(std::span<const T> flat, std::size_t count,
                                                std::size_t per_patch) {
  if (flat.size() != count * per_patch * 3)
    throw ShapeError("unstack_patches: " + std::to_string(flat.size()) + " values for " +
                     std::to_string(count) + " x " + std::to_string(per_patch) + " x 3");
  std::vector<std::vector<Point>> out(count, std::vector<Point>(per_patch));
  for (std::size_t p = 0; p < count; ++p)
    for (std::size_t i = 0; i < per_patch; ++i)
      for (int k = 0; k < 3; ++k)
        out[p][i][k] = static_cast<double>(flat[(p * per_patch + i) * 3 + k]);
  return out;
}

std::vector<double> sinusoid(std::size_t t, std::size_t width) {
  const std::size_t half = width / 2;
  std::vector<double> out(width, 0.0);
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::sin(static_cast<double>(t) * freq);
    out[half + i] = std::cos(static_cast<double>(t) * freq);
  }
  return out;
}

// ---------------------------------------------------------------- Encoder

template <typename T>
Encoder<T>::Encoder(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t L = cfg_.latent_width;
  auto& ps = params_;
  tok_w1_ = ps.add_trunc_normal("enc.token.w1", Shape{3, L}, kInitStd, rng);
  tok_norm_g_ = add_ones(ps, "enc.token.norm.g", L);
  tok_norm_b_ = ps.add("enc.token.norm.b", Shape{L});
  tok_w2_ = ps.add_trunc_normal("enc.token.w2", Shape{L, L}, kInitStd, rng);
  tok_b2_ = ps.add("enc.token.b2", Shape{L});
  pos_w_ = ps.add_trunc_normal("enc.pos.w", Shape{3, L}, kInitStd, rng);
  pos_b_ = ps.add("enc.pos.b", Shape{L});
  for (std::size_t i = 0; i < cfg_.enc_blocks; ++i)
    blocks_.push_back(make_block(ps, "enc.block" + std::to_string(i), L, rng));
  norm_g_ = add_ones(ps, "enc.norm.g", L);
  norm_b_ = ps.add("enc.norm.b", Shape{L});
  head_w_ = ps.add_trunc_normal("enc.head.w", Shape{L, cfg_.group_size * 3}, kInitStd, rng);
  head_b_ = ps.add("enc.head.b", Shape{cfg_.group_size * 3});
}

template <typename T>
Var Encoder<T>::token_embed(Graph<T>& g, Var patches, bool tr) const {
  const Shape& s = g.shape(patches);
  if (s.size() != 3 || s[1] != cfg_.group_size || s[2] != 3)
    throw ShapeError("token_embed: expected [P, " + std::to_string(cfg_.group_size) +
                     ", 3], got " + tensor::to_string(s));
  // Each feature is normalized across the points of its patch (as batch
  // norm would across a PointNet's points), which lifts the small
  // center-relative offsets to the scale the transformer works at. A bias
  // before that norm would cancel, so the first map has none. Sorted
  // statistics keep the token exactly independent of point order.
  const Var a = g.matmul(patches, g.param(params_, tok_w1_, tr));  // [P, n, L]
  const Var h = g.gelu(g.add(g.mul(g.layer_norm(a, 1, static_cast<T>(kNormEps), true),
                                   g.param(params_, tok_norm_g_, tr)),
                             g.param(params_, tok_norm_b_, tr)));
  return linear(g, params_, tok_w2_, tok_b2_, g.max_pool(h, 1), tr);
}

template <typename T>
Var Encoder<T>::pos_embed(Graph<T>& g, Var centers, bool tr) const {
  return g.gelu(linear(g, params_, pos_w_, pos_b_, centers, tr));
}

template <typename T>
Var Encoder<T>::forward(Graph<T>& g, Var patches, Var centers, bool tr) const {
  Var x = token_embed(g, patches, tr);
  if (cfg_.use_position_embedding) x = g.add(x, pos_embed(g, centers, tr));
  for (const auto& b : blocks_) x = transformer_block(g, params_, b, x, cfg_.enc_heads, tr);
  return affine_norm(g, params_, norm_g_, norm_b_, x, tr);
}

template <typename T>
Var Encoder<T>::pretrain_head(Graph<T>& g, Var latent, bool tr) const {
  const std::size_t p = g.shape(latent)[0];
  return g.reshape(linear(g, params_, head_w_, head_b_, latent, tr), Shape{p, cfg_.group_size, 3});
}

template <typename T>
LatentSet<T> Encoder<T>::encode(const PatchSet& patches, const MaskSpec& mask) const {
  if (patches.num_groups() != cfg_.groups || mask.num_groups() != cfg_.groups ||
      patches.group_size != cfg_.group_size)
    throw InvalidArgument("encode: patch set / mask do not match the encoder config");
  const auto vis = mask.visible_indices();
  std::vector<std::vector<Point>> visible;
  for (auto i : vis) visible.push_back(patches.patches[i]);
  return encode_visible(visible, patches.centers, mask);
}

template <typename T>
LatentSet<T> Encoder<T>::encode(const PointCloud& cloud, const MaskSpec& mask) const {
  return encode(segment(cloud, cfg_.groups, cfg_.group_size), mask);
}

template <typename T>
LatentSet<T> Encoder<T>::encode_visible(const std::vector<std::vector<Point>>& visible_patches,
                                        std::vector<Point> centers, const MaskSpec& mask) const {
  const auto vis = mask.visible_indices();
  if (centers.size() != mask.num_groups() || visible_patches.size() != vis.size())
    throw InvalidArgument("encode_visible: " + std::to_string(visible_patches.size()) +
                          " patches / " + std::to_string(centers.size()) +
                          " centers inconsistent with mask (" + std::to_string(vis.size()) +
                          " visible of " + std::to_string(mask.num_groups()) + ")");
  std::vector<std::size_t> all(visible_patches.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<Point> vc;
  for (auto i : vis) vc.push_back(centers[i]);

  Graph<T> g(false);
  const Var x = g.constant(stack_patches<T>(visible_patches, all));
  const Var c = g.constant(stack_points<T>(vc));
  const Var z = forward(g, x, c, false);
  LatentSet<T> out{g.array(z), std::move(centers), mask};
  tensor::assert_finite<T>(out.tokens.data, "encoder latent");
  return out;
}

// ---------------------------------------------------------------- Decoder

template <typename T>
Decoder<T>::Decoder(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t L = cfg_.latent_width;
  const std::size_t patch_values = cfg_.output_patch_points() * 3;
  auto& ps = params_;
  time_w_ = ps.add_trunc_normal("dec.time.w", Shape{L, L}, kInitStd, rng);
  time_b_ = ps.add("dec.time.b", Shape{L});
  mask_w_ = ps.add_trunc_normal("dec.mask_token.w", Shape{patch_values, L}, kInitStd, rng);
  mask_b_ = ps.add("dec.mask_token.b", Shape{L});
  pos_w_ = ps.add_trunc_normal("dec.pos.w", Shape{3, L}, kInitStd, rng);
  pos_b_ = ps.add("dec.pos.b", Shape{L});
  for (std::size_t i = 0; i < cfg_.dec_blocks; ++i)
    blocks_.push_back(make_block(ps, "dec.block" + std::to_string(i), L, rng));
  norm_g_ = add_ones(ps, "dec.norm.g", L);
  norm_b_ = ps.add("dec.norm.b", Shape{L});
  head_w_ = ps.add_trunc_normal("dec.head.w", Shape{L, patch_values}, kInitStd, rng);
  head_b_ = ps.add("dec.head.b", Shape{patch_values});
}

template <typename T>
std::size_t Decoder<T>::predicted_patches(std::size_t masked) const {
  return cfg_.predict_visible ? cfg_.groups : masked;
}

template <typename T>
Var Decoder<T>::time_embed(Graph<T>& g, std::size_t t, bool tr) const {
  if (t >= cfg_.timesteps)
    throw InvalidArgument("time_embed: t=" + std::to_string(t) + " outside [0, " +
                          std::to_string(cfg_.timesteps) + ")");
  const auto s = sinusoid(t, cfg_.latent_width);
  Array<T> a(Shape{1, cfg_.latent_width});
  for (std::size_t i = 0; i < s.size(); ++i) a[i] = static_cast<T>(s[i]);
  const Var e = g.gelu(linear(g, params_, time_w_, time_b_, g.constant(std::move(a)), tr));
  return g.reshape(e, Shape{cfg_.latent_width});
}

template <typename T>
Var Decoder<T>::mask_tokenize(Graph<T>& g, Var noisy, bool tr) const {
  const Shape& s = g.shape(noisy);
  const std::size_t n = cfg_.output_patch_points();
  if (s.size() != 3 || s[1] != n || s[2] != 3)
    throw ShapeError("mask_tokenize: expected [P, " + std::to_string(n) + ", 3], got " +
                     tensor::to_string(s));
  const Var flat = g.reshape(noisy, Shape{s[0], n * 3});
  return g.gelu(linear(g, params_, mask_w_, mask_b_, flat, tr));
}

template <typename T>
Var Decoder<T>::forward(Graph<T>& g, Var latent, Var noisy, Var centers_visible,
                        Var centers_masked, std::size_t t, bool tr) const {
  const std::size_t L = cfg_.latent_width;
  const std::size_t V = g.shape(latent)[0];
  const std::size_t M = g.shape(centers_masked)[0];
  const std::size_t P = predicted_patches(M);
  require_shape(g.shape(latent), Shape{V, L}, "decoder latent");
  require_shape(g.shape(centers_visible), Shape{V, 3}, "decoder visible centers");
  require_shape(g.shape(noisy), Shape{P, cfg_.output_patch_points(), 3}, "decoder noisy input");
  if (V + M != cfg_.groups)
    throw InvalidArgument("decoder: " + std::to_string(V) + " visible + " + std::to_string(M) +
                          " masked != " + std::to_string(cfg_.groups) + " groups");

  const Var tokens = mask_tokenize(g, noisy, tr);
  Var seq;
  if (cfg_.predict_visible) {
    const Var vis = g.add(latent, g.slice(tokens, 0, 0, V));
    const Var parts[] = {vis, g.slice(tokens, 0, V, M)};
    seq = g.concat(parts, 0);
  } else {
    const Var parts[] = {latent, tokens};
    seq = g.concat(parts, 0);
  }
  if (cfg_.use_position_embedding) {
    const Var cs[] = {centers_visible, centers_masked};
    seq = g.add(seq, g.gelu(linear(g, params_, pos_w_, pos_b_, g.concat(cs, 0), tr)));
  }
  seq = g.add(seq, time_embed(g, t, tr));
  for (const auto& b : blocks_) seq = transformer_block(g, params_, b, seq, cfg_.dec_heads, tr);
  seq = affine_norm(g, params_, norm_g_, norm_b_, seq, tr);
  const Var read = cfg_.predict_visible ? seq : g.slice(seq, 0, V, M);
  const Var out = linear(g, params_, head_w_, head_b_, read, tr);
  return g.reshape(out, Shape{P, cfg_.output_patch_points(), 3});
}

template <typename T>
std::vector<std::size_t> Decoder<T>::prediction_order(const MaskSpec& mask) const {
  auto order = mask.masked_indices();
  if (cfg_.predict_visible) {
    auto vis = mask.visible_indices();
    vis.insert(vis.end(), order.begin(), order.end());
    return vis;
  }
  return order;
}

template <typename T>
DecoderOutput Decoder<T>::decode(const LatentSet<T>& latent, std::span<const double> x_t,
                                 std::size_t t) const {
  const MaskSpec& mask = latent.mask;
  if (mask.num_groups() != cfg_.groups || latent.centers.size() != cfg_.groups)
    throw InvalidArgument("decode: latent does not match decoder group count");
  const std::size_t V = mask.num_visible(), M = mask.num_masked();
  if (latent.tokens.shape != Shape{V, cfg_.latent_width})
    throw InvalidArgument("decode: latent tokens " + tensor::to_string(latent.tokens.shape) +
                          " inconsistent with mask (" + std::to_string(V) + " visible)");
  const std::size_t P = predicted_patches(M), n = cfg_.output_patch_points();
  if (x_t.size() != P * n * 3)
    throw InvalidArgument("decode: x_t has " + std::to_string(x_t.size()) + " values, expected " +
                          std::to_string(P * n * 3));

  std::vector<Point> cv, cm;
  for (auto i : mask.visible_indices()) cv.push_back(latent.centers[i]);
  for (auto i : mask.masked_indices()) cm.push_back(latent.centers[i]);
  Array<T> noisy(Shape{P, n, 3});
  for (std::size_t i = 0; i < x_t.size(); ++i) noisy[i] = static_cast<T>(x_t[i]);

  Graph<T> g(false);
  const Var out = forward(g, g.constant(latent.tokens), g.constant(std::move(noisy)),
                          g.constant(stack_points<T>(cv)), g.constant(stack_points<T>(cm)), t,
                          false);
  const auto& v = g.value(out);
  tensor::assert_finite<T>(v, "decoder output");
  return DecoderOutput{unstack_patches<T>(v, P, n), prediction_order(mask)};
}

template class Encoder<float>;
template class Encoder<double>;
template class Decoder<float>;
template class Decoder<double>;
template Array<float> stack_patches<float>(const std::vector<std::vector<Point>>&,
                                           std::span<const std::size_t>);
template Array<double> stack_patches<double>(const std::vector<std::vector<Point>>&,
                                             std::span<const std::size_t>);
template Array<float> stack_points<float>(std::span<const Point>);
template Array<double> stack_points<double>(std::span<const Point>);
template std::vector<std::vector<Point>> unstack_patches<float>(std::span<const float>, std::size_t,
                                                                std::size_t);
template std::vector<std::vector<Point>> unstack_patches<double>(std::span<const double>,
                                                                 std::size_t, std::size_t);

}  // namespace pointdiff
