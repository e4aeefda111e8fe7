#include "pointdiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pointdiff/data_io.hpp"
#include "pointdiff/errors.hpp"

namespace pointdiff {

namespace {

constexpr char kMagic[4] = {'P', 'D', 'C', 'K'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t>& data() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& in, std::size_t end) : in_(in), end_(end) {}
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw CorruptCheckpoint("checkpoint truncated at byte " + std::to_string(pos_));
  }
  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in_[pos_++]) << (8 * i));
    return v;
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::string config_text(const std::map<std::string, std::string>& kv) {
  std::string s;
  for (const auto& [k, v] : kv) s += k + "=" + v + "\n";
  return s;
}

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CorruptCheckpoint("malformed config line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace

std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string Checkpoint::network() const {
  const auto it = config.find("network");
  return it == config.end() ? std::string() : it->second;
}

ModelConfig Checkpoint::model_config() const {
  auto kv = config;
  kv.erase("network");
  auto cfg = ModelConfig::from_map(kv);
  cfg.validate();
  return cfg;
}

template <typename T>
Checkpoint make_checkpoint(const std::string& network, const ModelConfig& cfg,
                           const tensor::ParameterStore<T>& params) {
  Checkpoint c;
  c.config = cfg.to_map();
  c.config["network"] = network;
  for (const auto& p : params) {
    CheckpointTensor t{p.name, p.value.shape, {}};
    t.values.reserve(p.value.size());
    for (T v : p.value.data) t.values.push_back(static_cast<float>(v));
    c.tensors.push_back(std::move(t));
  }
  return c;
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, 4);
  w.uint<std::uint32_t>(kCheckpointVersion);
  const auto cfg = config_text(ckpt.config);
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(cfg.size()));
  w.bytes(cfg.data(), cfg.size());
  w.uint<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    if (t.values.size() != tensor::numel(t.shape))
      throw InvalidArgument("checkpoint tensor '" + t.name + "' has inconsistent size");
    w.uint<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.uint<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.uint<std::uint64_t>(d);
    w.uint<std::uint64_t>(offset);
    offset += t.values.size();
  }
  w.uint<std::uint64_t>(offset);
  for (const auto& t : ckpt.tensors)
    for (float v : t.values) w.uint<std::uint32_t>(std::bit_cast<std::uint32_t>(v));
  const auto digest = fnv1a64(w.data().data(), w.data().size());
  w.uint<std::uint64_t>(digest);
  return std::move(w.data());
}

Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CorruptCheckpoint("not a checkpoint (bad magic)");
  Reader head(bytes, bytes.size());
  head.text(4);
  const auto version = head.uint<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw UnsupportedVersion("checkpoint version " + std::to_string(version) + " (supported: " +
                             std::to_string(kCheckpointVersion) + ")");
  if (bytes.size() < 16) throw CorruptCheckpoint("checkpoint truncated");
  const std::size_t body = bytes.size() - 8;

  Reader r(bytes, body);
  r.text(8);
  Checkpoint c;
  c.config = parse_config_text(r.text(r.uint<std::uint32_t>()));
  const auto count = r.uint<std::uint32_t>();
  std::vector<std::uint64_t> offsets;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = r.text(r.uint<std::uint16_t>());
    const auto rank = r.uint<std::uint8_t>();
    for (std::uint8_t k = 0; k < rank; ++k) t.shape.push_back(r.uint<std::uint64_t>());
    offsets.push_back(r.uint<std::uint64_t>());
    c.tensors.push_back(std::move(t));
  }
  const auto total = r.uint<std::uint64_t>();
  if (total > (body - r.pos()) / 4) throw CorruptCheckpoint("checkpoint payload truncated");
  if (body - r.pos() != total * 4) throw CorruptCheckpoint("checkpoint payload size mismatch");

  std::uint64_t stored = 0;
  for (std::size_t i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(bytes[body + i]) << (8 * i);
  if (stored != fnv1a64(bytes.data(), body))
    throw CorruptCheckpoint("checkpoint digest mismatch");

  std::vector<float> payload(total);
  for (auto& v : payload) v = std::bit_cast<float>(r.uint<std::uint32_t>());
  std::uint64_t expect = 0;
  for (std::size_t i = 0; i < c.tensors.size(); ++i) {
    auto& t = c.tensors[i];
    const auto n = tensor::numel(t.shape);
    if (offsets[i] != expect || expect + n > total)
      throw CorruptCheckpoint("checkpoint tensor '" + t.name + "' has a bad offset");
    t.values.assign(payload.begin() + static_cast<std::ptrdiff_t>(expect),
                    payload.begin() + static_cast<std::ptrdiff_t>(expect + n));
    expect += n;
  }
  if (expect != total) throw CorruptCheckpoint("checkpoint payload has trailing values");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize(ckpt);
  write_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

template <typename T>
void apply_checkpoint(const Checkpoint& ckpt, tensor::ParameterStore<T>& params) {
  if (ckpt.tensors.size() != params.size())
    throw InvalidArgument("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                          " tensors, model expects " + std::to_string(params.size()));
  for (const auto& t : ckpt.tensors) {
    const auto idx = params.find(t.name);
    if (idx == params.size()) throw InvalidArgument("checkpoint tensor '" + t.name + "' unknown to the model");
    auto& p = params[idx];
    if (p.value.shape != t.shape)
      throw InvalidArgument("checkpoint tensor '" + t.name + "' has shape " + tensor::to_string(t.shape) +
                            ", model expects " + tensor::to_string(p.value.shape));
  }
  for (const auto& t : ckpt.tensors) {
    auto& p = params[params.find(t.name)];
    for (std::size_t i = 0; i < t.values.size(); ++i) p.value.data[i] = static_cast<T>(t.values[i]);
  }
}

template <typename T>
Encoder<T> load_encoder(const std::filesystem::path& path) {
  const auto ckpt = load_checkpoint(path);
  if (ckpt.network() != "encoder")
    throw InvalidArgument(path.string() + " is a '" + ckpt.network() + "' checkpoint, expected encoder");
  Encoder<T> enc(ckpt.model_config(), 0);
  apply_checkpoint(ckpt, enc.params());
  return enc;
}

template <typename T>
Decoder<T> load_decoder(const std::filesystem::path& path) {
  const auto ckpt = load_checkpoint(path);
  if (ckpt.network() != "decoder")
    throw InvalidArgument(path.string() + " is a '" + ckpt.network() + "' checkpoint, expected decoder");
  Decoder<T> dec(ckpt.model_config(), 0);
  apply_checkpoint(ckpt, dec.params());
  return dec;
}

template Checkpoint make_checkpoint<float>(const std::string&, const ModelConfig&,
                                           const tensor::ParameterStore<float>&);
template Checkpoint make_checkpoint<double>(const std::string&, const ModelConfig&,
                                            const tensor::ParameterStore<double>&);
template void apply_checkpoint<float>(const Checkpoint&, tensor::ParameterStore<float>&);
template void apply_checkpoint<double>(const Checkpoint&, tensor::ParameterStore<double>&);
template Encoder<float> load_encoder<float>(const std::filesystem::path&);
template Encoder<double> load_encoder<double>(const std::filesystem::path&);
template Decoder<float> load_decoder<float>(const std::filesystem::path&);
template Decoder<double> load_decoder<double>(const std::filesystem::path&);

}  // namespace pointdiff
