#pragma once

// Sectioned key=value run configuration.
//
//   # comment
//   [model]
//   groups = 16
//
// Only keys known to a section are accepted. The config records which keys
// were set explicitly, so a checkpoint can supply the rest.

#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "pointdiff/diffusion.hpp"
#include "pointdiff/model.hpp"
#include "pointdiff/training.hpp"

namespace pointdiff::cli {

struct ScheduleConfig {
  double beta_start = 1e-4;
  double beta_end = 0.05;
  Residual residual = Residual::SqrtSigma;
};

struct RunSettings {
  std::uint64_t seed = 0;
  double visible_fraction = 0.4;
  unsigned quant_bits = 10;
  std::size_t grid = 32;
  std::string manifest;
};

class RunConfig {
 public:
  static RunConfig parse(const std::string& text);  // throws ParseError
  static RunConfig load(const std::string& path);

  // Throws InvalidArgument for unknown sections or keys.
  void set(const std::string& section, const std::string& key, const std::string& value);
  std::optional<std::string> get(const std::string& section, const std::string& key) const;
  bool has(const std::string& section, const std::string& key) const { return get(section, key).has_value(); }

  // Library defaults under the explicit keys.
  ModelConfig model() const;
  // `base` (usually a checkpoint's config) under the explicit keys.
  ModelConfig model_over(const ModelConfig& base) const;
  TrainConfig train(const TrainConfig& defaults) const;
  ScheduleConfig schedule() const;
  RunSettings run() const;

 private:
  std::map<std::string, std::map<std::string, std::string>> values_;
};

const char* to_string(Residual r);
Residual residual_from_string(const std::string& s);

// Loadable text of a fully resolved run.
std::string resolved_text(const ModelConfig& model, const TrainConfig* train,
                          const ScheduleConfig& schedule, const RunSettings& run,
                          const std::string& command);

}  // namespace pointdiff::cli
