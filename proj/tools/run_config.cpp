#include "run_config.hpp"

#include <charconv>
#include <cstdio>
#include <set>
#include <sstream>

#include "pointdiff/data_io.hpp"
#include "pointdiff/errors.hpp"

namespace pointdiff::cli {

namespace {

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const auto keys = [] {
    std::map<std::string, std::set<std::string>> k;
    for (const auto& [key, _] : ModelConfig{}.to_map()) k["model"].insert(key);
    k["train"] = {"epochs", "batch_size", "lr", "loss_setting", "log_every", "checkpoint_every"};
    k["schedule"] = {"beta_start", "beta_end", "residual"};
    k["data"] = {"manifest"};
    k["run"] = {"seed", "visible_fraction", "quant_bits", "grid"};
    return k;
  }();
  return keys;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename U>
U parse_unsigned(const std::string& key, const std::string& v) {
  U x{};
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc{} || p != v.data() + v.size() || v.empty())
    throw InvalidArgument("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  return x;
}

double parse_double(const std::string& key, const std::string& v) {
  double x = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc{} || p != v.data() + v.size() || v.empty())
    throw InvalidArgument("config: '" + key + "' expects a real number, got '" + v + "'");
  return x;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

const char* to_string(Residual r) { return r == Residual::Sigma ? "sigma" : "sqrt_sigma"; }

Residual residual_from_string(const std::string& s) {
  if (s == "sqrt_sigma") return Residual::SqrtSigma;
  if (s == "sigma") return Residual::Sigma;
  throw InvalidArgument("unknown residual '" + s + "' (expected sqrt_sigma or sigma)");
}

RunConfig RunConfig::parse(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError("unterminated section header", lineno);
      section = trim(line.substr(1, line.size() - 2));
      if (!known_keys().count(section)) throw ParseError("unknown section [" + section + "]", lineno);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value", lineno);
    if (section.empty()) throw ParseError("key outside of a section", lineno);
    try {
      cfg.set(section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const InvalidArgument& e) {
      throw ParseError(e.what(), lineno);
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) { return parse(read_text(path)); }

void RunConfig::set(const std::string& section, const std::string& key, const std::string& value) {
  const auto it = known_keys().find(section);
  if (it == known_keys().end()) throw InvalidArgument("unknown config section [" + section + "]");
  if (!it->second.count(key)) throw InvalidArgument("unknown key '" + key + "' in [" + section + "]");
  values_[section][key] = value;
}

std::optional<std::string> RunConfig::get(const std::string& section, const std::string& key) const {
  const auto s = values_.find(section);
  if (s == values_.end()) return std::nullopt;
  const auto k = s->second.find(key);
  if (k == s->second.end()) return std::nullopt;
  return k->second;
}

ModelConfig RunConfig::model() const { return model_over(ModelConfig{}); }

ModelConfig RunConfig::model_over(const ModelConfig& base) const {
  auto kv = base.to_map();
  if (const auto s = values_.find("model"); s != values_.end())
    for (const auto& [k, v] : s->second) kv[k] = v;
  auto cfg = ModelConfig::from_map(kv);
  cfg.validate();
  return cfg;
}

TrainConfig RunConfig::train(const TrainConfig& defaults) const {
  TrainConfig c = defaults;
  if (auto v = get("train", "epochs")) c.epochs = parse_unsigned<std::size_t>("epochs", *v);
  if (auto v = get("train", "batch_size")) c.batch_size = parse_unsigned<std::size_t>("batch_size", *v);
  if (auto v = get("train", "lr")) c.lr = parse_double("lr", *v);
  if (auto v = get("train", "loss_setting")) c.loss_setting = loss_setting_from_string(*v);
  if (auto v = get("train", "log_every")) c.log_every = parse_unsigned<std::size_t>("log_every", *v);
  if (auto v = get("train", "checkpoint_every"))
    c.checkpoint_every = parse_unsigned<std::size_t>("checkpoint_every", *v);
  c.seed = run().seed;
  c.validate();
  return c;
}

ScheduleConfig RunConfig::schedule() const {
  ScheduleConfig s;
  if (auto v = get("schedule", "beta_start")) s.beta_start = parse_double("beta_start", *v);
  if (auto v = get("schedule", "beta_end")) s.beta_end = parse_double("beta_end", *v);
  if (auto v = get("schedule", "residual")) s.residual = residual_from_string(*v);
  return s;
}

RunSettings RunConfig::run() const {
  RunSettings r;
  if (auto v = get("run", "seed")) r.seed = parse_unsigned<std::uint64_t>("seed", *v);
  if (auto v = get("run", "visible_fraction")) r.visible_fraction = parse_double("visible_fraction", *v);
  if (auto v = get("run", "quant_bits")) r.quant_bits = parse_unsigned<unsigned>("quant_bits", *v);
  if (auto v = get("run", "grid")) r.grid = parse_unsigned<std::size_t>("grid", *v);
  if (auto v = get("data", "manifest")) r.manifest = *v;
  return r;
}

std::string resolved_text(const ModelConfig& model, const TrainConfig* train, const ScheduleConfig& schedule,
                          const RunSettings& run, const std::string& command) {
  std::ostringstream os;
  os << "# resolved configuration for '" << command << "'\n[model]\n";
  for (const auto& [k, v] : model.to_map()) os << k << " = " << v << '\n';
  if (train) {
    os << "\n[train]\n"
       << "epochs = " << train->epochs << '\n'
       << "batch_size = " << train->batch_size << '\n'
       << "lr = " << fmt(train->lr) << '\n'
       << "loss_setting = " << to_string(train->loss_setting) << '\n'
       << "log_every = " << train->log_every << '\n'
       << "checkpoint_every = " << train->checkpoint_every << '\n';
  }
  os << "\n[schedule]\n"
     << "beta_start = " << fmt(schedule.beta_start) << '\n'
     << "beta_end = " << fmt(schedule.beta_end) << '\n'
     << "residual = " << to_string(schedule.residual) << '\n';
  if (!run.manifest.empty()) os << "\n[data]\nmanifest = " << run.manifest << '\n';
  os << "\n[run]\n"
     << "seed = " << run.seed << '\n'
     << "visible_fraction = " << fmt(run.visible_fraction) << '\n'
     << "quant_bits = " << run.quant_bits << '\n'
     << "grid = " << run.grid << '\n';
  return os.str();
}

}  // namespace pointdiff::cli
