#include <doctest.h>

#include <bit>
#include <filesystem>
#include <unistd.h>

#include "pointdiff/checkpoint.hpp"
#include "pointdiff/errors.hpp"

using namespace pointdiff;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.latent_width = 32;
  c.enc_blocks = 2;
  c.enc_heads = 4;
  c.dec_blocks = 1;
  c.dec_heads = 2;
  c.groups = 8;
  c.group_size = 16;
  c.timesteps = 10;
  return c;
}

template <typename T>
bool same_params(const tensor::ParameterStore<T>& a, const tensor::ParameterStore<T>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].name != b[i].name || a[i].value.shape != b[i].value.shape || a[i].value.data != b[i].value.data)
      return false;
  return true;
}

void put_u32(std::vector<std::uint8_t>& b, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[at + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

// Recomputes the trailing digest after a deliberate edit.
void reseal(std::vector<std::uint8_t>& b) {
  const auto body = b.size() - 8;
  const auto d = fnv1a64(b.data(), body);
  for (int i = 0; i < 8; ++i) b[body + i] = static_cast<std::uint8_t>(d >> (8 * i));
}

}  // namespace

TEST_CASE("fnv1a64 reference values") {
  CHECK(fnv1a64(nullptr, 0) == 0xcbf29ce484222325ull);
  const std::uint8_t a[] = {'a'};
  CHECK(fnv1a64(a, 1) == 0xaf63dc4c8601ec8cull);
  const std::uint8_t foobar[] = {'f', 'o', 'o', 'b', 'a', 'r'};
  CHECK(fnv1a64(foobar, 6) == 0x85944171f73967e8ull);
}

TEST_CASE("float models round trip bitwise through a file") {
  const auto dir = fs::temp_directory_path() / ("pointdiff_ckpt_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const auto cfg = small_config();

  const Encoder<float> enc(cfg, 3);
  save_checkpoint(make_checkpoint("encoder", cfg, enc.params()), dir / "e.ckpt");
  const auto enc2 = load_encoder<float>(dir / "e.ckpt");
  CHECK(same_params(enc.params(), enc2.params()));
  CHECK(enc2.config().to_map() == cfg.to_map());

  const Decoder<float> dec(cfg, 4);
  save_checkpoint(make_checkpoint("decoder", cfg, dec.params()), dir / "d.ckpt");
  CHECK(same_params(dec.params(), load_decoder<float>(dir / "d.ckpt").params()));

  CHECK_THROWS_AS(load_decoder<float>(dir / "e.ckpt"), InvalidArgument);
  CHECK_THROWS_AS(load_encoder<float>(dir / "d.ckpt"), InvalidArgument);
  CHECK_THROWS(load_encoder<float>(dir / "absent.ckpt"));
  fs::remove_all(dir);
}

TEST_CASE("double models store float values") {
  const auto cfg = small_config();
  Encoder<double> enc(cfg, 5);
  const auto ckpt = deserialize(serialize(make_checkpoint("encoder", cfg, enc.params())));
  Encoder<double> other(cfg, 6);
  apply_checkpoint(ckpt, other.params());
  for (std::size_t i = 0; i < enc.params().size(); ++i)
    for (std::size_t j = 0; j < enc.params()[i].value.size(); ++j)
      CHECK(other.params()[i].value[j] == static_cast<double>(static_cast<float>(enc.params()[i].value[j])));
}

TEST_CASE("corruption is detected") {
  const auto cfg = small_config();
  const Encoder<float> enc(cfg, 7);
  const auto bytes = serialize(make_checkpoint("encoder", cfg, enc.params()));
  CHECK(deserialize(bytes).tensors.size() == enc.params().size());

  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    const std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    CHECK_THROWS_AS(deserialize(part), CorruptCheckpoint);
  }

  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  CHECK_THROWS_AS(deserialize(flipped), CorruptCheckpoint);

  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(deserialize(magic), CorruptCheckpoint);

  auto version = bytes;
  put_u32(version, 4, kCheckpointVersion + 1);
  CHECK_THROWS_AS(deserialize(version), UnsupportedVersion);
  reseal(version);
  CHECK_THROWS_AS(deserialize(version), UnsupportedVersion);
}

TEST_CASE("loading into a different configuration names the tensor") {
  const auto cfg = small_config();
  const Encoder<float> enc(cfg, 1);
  const auto ckpt = make_checkpoint("encoder", cfg, enc.params());

  auto wide = cfg;
  wide.latent_width = 48;
  Encoder<float> other(wide, 1);
  try {
    apply_checkpoint(ckpt, other.params());
    FAIL("expected InvalidArgument");
  } catch (const InvalidArgument& e) {
    CHECK(std::string(e.what()).find("enc.") != std::string::npos);
  }

  auto deep = cfg;
  deep.enc_blocks = 3;
  Encoder<float> deeper(deep, 1);
  CHECK_THROWS_AS(apply_checkpoint(ckpt, deeper.params()), InvalidArgument);

  // A failed load leaves the target untouched.
  Encoder<float> fresh(wide, 1);
  CHECK(same_params(other.params(), fresh.params()));
}

TEST_CASE("config survives the container") {
  auto cfg = small_config();
  cfg.mask_ratio = 0.5;
  cfg.mask_strategy = MaskStrategy::Block;
  cfg.predict_visible = true;
  cfg.upsample_factor = 2;
  cfg.use_position_embedding = false;
  const Decoder<float> dec(cfg, 2);
  const auto back = deserialize(serialize(make_checkpoint("decoder", cfg, dec.params())));
  CHECK(back.network() == "decoder");
  CHECK(back.model_config().to_map() == cfg.to_map());
}
