#pragma once

// Versioned JSON application configuration.

#include <string>

#include "mrha/alert.hpp"
#include "mrha/dataset.hpp"
#include "mrha/model.hpp"
#include "mrha/stream.hpp"
#include "mrha/train.hpp"

namespace mrha {

inline constexpr int kMinConfigVersion = 1;
inline constexpr int kMaxConfigVersion = 1;

struct PathsConfig {
  std::string data_dir = "data";
  std::string checkpoint = "model.ckpt";
  std::string logs = "logs";
};

struct AppConfig {
  int version = kMaxConfigVersion;
  std::string model_preset = "reduced";  // standard | reduced | tiny
  ModelConfig model = ModelConfig::reduced(32);
  std::uint64_t init_seed = 1;
  TrainConfig train;
  double train_fraction = 0.8;
  std::uint64_t split_seed = 1;
  double pipeline_fps = 10.0;  // training sequences are resampled to this rate
  StreamConfig stream;
  GatewayConfig gateway;
  PathsConfig paths;

  PipelineOptions pipeline() const { return {model.input_grid, pipeline_fps}; }
  /// Checks every section except the gateway, which only matters when alerts
  /// are sent. Throws ConfigError.
  void validate() const;
};

/// Parses a config document. Every section and key is optional; unknown keys
/// and unsupported versions throw ConfigError, malformed JSON ParseError.
AppConfig parse_app_config(const std::string& text);
/// Reads a file and applies the MRHA_AUTH_TOKEN environment override.
AppConfig load_app_config(const std::string& path);
/// Canonical JSON with the auth token replaced by "***".
std::string to_json_text(const AppConfig& config);

}  // namespace mrha
