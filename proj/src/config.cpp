#include "mrha/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace mrha {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

// Reads obj[key] into out when present, reporting type errors by key path.
template <typename T>
void read(const json& obj, const std::string& key, const std::string& where, T& out) {
  if (!obj.contains(key)) return;
  const json& v = obj.at(key);
  try {
    if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.get<long long>() < 0) throw ConfigError("");
      }
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("");
    }
    out = v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

void parse_model(const json& j, AppConfig& c) {
  reject_unknown(j, {"preset", "grid", "dropout", "init_seed"}, "model");
  read(j, "preset", "model", c.model_preset);
  if (c.model_preset == "standard") {
    c.model = ModelConfig::standard();
  } else if (c.model_preset == "reduced") {
    c.model = ModelConfig::reduced(32);
  } else if (c.model_preset == "tiny") {
    c.model = ModelConfig::tiny();
  } else {
    throw ConfigError("model.preset must be standard, reduced or tiny");
  }
  read(j, "grid", "model", c.model.input_grid);
  read(j, "dropout", "model", c.model.dropout_rate);
  read(j, "init_seed", "model", c.init_seed);
}

void parse_train(const json& j, AppConfig& c) {
  reject_unknown(j,
                 {"batch_size", "epochs", "learning_rate", "optimizer", "beta1", "beta2", "epsilon",
                  "rho", "seed", "patience", "train_fraction", "split_seed", "target_fps"},
                 "train");
  TrainConfig& t = c.train;
  read(j, "batch_size", "train", t.batch_size);
  read(j, "epochs", "train", t.epochs);
  read(j, "learning_rate", "train", t.learning_rate);
  if (j.contains("optimizer")) {
    std::string name;
    read(j, "optimizer", "train", name);
    t.optimizer = parse_optimizer(name);
  }
  read(j, "beta1", "train", t.beta1);
  read(j, "beta2", "train", t.beta2);
  read(j, "epsilon", "train", t.epsilon);
  read(j, "rho", "train", t.rho);
  read(j, "seed", "train", t.seed);
  if (j.contains("patience") && !j.at("patience").is_null()) {
    std::size_t patience = 0;
    read(j, "patience", "train", patience);
    t.patience = patience;
  }
  read(j, "train_fraction", "train", c.train_fraction);
  read(j, "split_seed", "train", c.split_seed);
  read(j, "target_fps", "train", c.pipeline_fps);
}

void parse_stream(const json& j, StreamConfig& s) {
  reject_unknown(j,
                 {"window_frames", "hop_frames", "confidence_threshold", "consecutive_required",
                  "cooldown_seconds", "target_fps", "queue_capacity"},
                 "stream");
  read(j, "window_frames", "stream", s.window_frames);
  read(j, "hop_frames", "stream", s.hop_frames);
  read(j, "confidence_threshold", "stream", s.confidence_threshold);
  read(j, "consecutive_required", "stream", s.consecutive_required);
  read(j, "cooldown_seconds", "stream", s.cooldown_seconds);
  read(j, "target_fps", "stream", s.target_fps);
  read(j, "queue_capacity", "stream", s.queue_capacity);
}

void parse_gateway(const json& j, GatewayConfig& g) {
  reject_unknown(j,
                 {"base_url", "account_sid", "auth_token", "from_number", "recipients",
                  "max_retries", "backoff_base_seconds", "jitter_fraction", "timeout_seconds",
                  "patient_label", "utc_offset_minutes", "critical_classes"},
                 "gateway");
  read(j, "base_url", "gateway", g.base_url);
  read(j, "account_sid", "gateway", g.account_sid);
  read(j, "auth_token", "gateway", g.auth_token);
  read(j, "from_number", "gateway", g.from_number);
  read(j, "max_retries", "gateway", g.max_retries);
  read(j, "backoff_base_seconds", "gateway", g.backoff_base_seconds);
  read(j, "jitter_fraction", "gateway", g.jitter_fraction);
  read(j, "timeout_seconds", "gateway", g.timeout_seconds);
  read(j, "patient_label", "gateway", g.patient_label);
  read(j, "utc_offset_minutes", "gateway", g.utc_offset_minutes);
  for (const char* key : {"recipients", "critical_classes"}) {
    if (!j.contains(key)) continue;
    const json& list = j.at(key);
    if (!list.is_array()) throw ConfigError(std::string("gateway.") + key + " must be an array");
    std::vector<std::string> items;
    for (const json& item : list) {
      if (!item.is_string()) throw ConfigError(std::string("gateway.") + key + " must hold strings");
      items.push_back(item.get<std::string>());
    }
    if (std::string(key) == "recipients") {
      g.recipients = items;
    } else {
      g.critical_classes.clear();
      for (const std::string& code : items) g.critical_classes.insert(class_index(code));
    }
  }
}

void parse_paths(const json& j, PathsConfig& p) {
  reject_unknown(j, {"data_dir", "checkpoint", "logs"}, "paths");
  read(j, "data_dir", "paths", p.data_dir);
  read(j, "checkpoint", "paths", p.checkpoint);
  read(j, "logs", "paths", p.logs);
}

}  // namespace

void AppConfig::validate() const {
  if (version < kMinConfigVersion || version > kMaxConfigVersion) {
    throw ConfigError("unsupported config version " + std::to_string(version));
  }
  model.validate();
  train.validate();
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train.train_fraction must lie in (0, 1)");
  }
  if (!(pipeline_fps > 0.0)) throw ConfigError("train.target_fps must be positive");
  stream.validate();
}

AppConfig parse_app_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(0, std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(j, {"version", "model", "train", "stream", "gateway", "paths"}, "config");
  if (!j.contains("version")) throw ConfigError("config.version is required");
  AppConfig c;
  read(j, "version", "config", c.version);
  if (c.version < kMinConfigVersion || c.version > kMaxConfigVersion) {
    throw ConfigError("unsupported config version " + std::to_string(c.version) + " (supported " +
                      std::to_string(kMinConfigVersion) + ".." + std::to_string(kMaxConfigVersion) + ")");
  }
  if (j.contains("model")) parse_model(j["model"], c);
  if (j.contains("train")) parse_train(j["train"], c);
  if (j.contains("stream")) parse_stream(j["stream"], c.stream);
  if (j.contains("gateway")) parse_gateway(j["gateway"], c.gateway);
  if (j.contains("paths")) parse_paths(j["paths"], c.paths);
  c.validate();
  return c;
}

AppConfig load_app_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream text;
  text << in.rdbuf();
  AppConfig c = parse_app_config(text.str());
  if (const char* token = std::getenv("MRHA_AUTH_TOKEN"); token && *token) c.gateway.auth_token = token;
  return c;
}

std::string to_json_text(const AppConfig& c) {
  json critical = json::array();
  for (std::size_t i : c.gateway.critical_classes) critical.push_back(label_at(i).class_code);
  json j = {
      {"version", c.version},
      {"model",
       {{"preset", c.model_preset},
        {"grid", c.model.input_grid},
        {"dropout", c.model.dropout_rate},
        {"init_seed", c.init_seed}}},
      {"train",
       {{"batch_size", c.train.batch_size},
        {"epochs", c.train.epochs},
        {"learning_rate", c.train.learning_rate},
        {"optimizer", to_string(c.train.optimizer)},
        {"beta1", c.train.beta1},
        {"beta2", c.train.beta2},
        {"epsilon", c.train.epsilon},
        {"rho", c.train.rho},
        {"seed", c.train.seed},
        {"patience", c.train.patience ? json(*c.train.patience) : json(nullptr)},
        {"train_fraction", c.train_fraction},
        {"split_seed", c.split_seed},
        {"target_fps", c.pipeline_fps}}},
      {"stream",
       {{"window_frames", c.stream.window_frames},
        {"hop_frames", c.stream.hop_frames},
        {"confidence_threshold", c.stream.confidence_threshold},
        {"consecutive_required", c.stream.consecutive_required},
        {"cooldown_seconds", c.stream.cooldown_seconds},
        {"target_fps", c.stream.target_fps},
        {"queue_capacity", c.stream.queue_capacity}}},
      {"gateway",
       {{"base_url", c.gateway.base_url},
        {"account_sid", c.gateway.account_sid},
        {"auth_token", c.gateway.auth_token.empty() ? "" : "***"},
        {"from_number", c.gateway.from_number},
        {"recipients", c.gateway.recipients},
        {"max_retries", c.gateway.max_retries},
        {"backoff_base_seconds", c.gateway.backoff_base_seconds},
        {"jitter_fraction", c.gateway.jitter_fraction},
        {"timeout_seconds", c.gateway.timeout_seconds},
        {"patient_label", c.gateway.patient_label},
        {"utc_offset_minutes", c.gateway.utc_offset_minutes},
        {"critical_classes", critical}}},
      {"paths",
       {{"data_dir", c.paths.data_dir}, {"checkpoint", c.paths.checkpoint}, {"logs", c.paths.logs}}},
  };
  return j.dump(2);
}

}  // namespace mrha
