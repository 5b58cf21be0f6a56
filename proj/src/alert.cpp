#include "mrha/alert.hpp"

#include <cmath>
#include <cstdio>
#include <ctime>
#include <iostream>
#include <random>
#include <regex>

#include "httplib.h"
#include "json.hpp"

namespace mrha {

using nlohmann::json;

LogSink stderr_log() {
  return [](const std::string& line) { std::cerr << "[mrha] " << line << '\n'; };
}

bool is_e164(const std::string& number) {
  static const std::regex pattern(R"(^\+[1-9][0-9]{6,14}$)");
  return std::regex_match(number, pattern);
}

namespace {

struct BaseUrl {
  std::string origin;  // scheme://host[:port]
  std::string prefix;  // path without trailing slash
};

std::optional<BaseUrl> split_base_url(const std::string& url) {
  static const std::regex pattern(R"(^(https?://[^/?#]+)(/[^?#]*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, pattern)) return std::nullopt;
  BaseUrl out{m[1].str(), m[2].str()};
  while (!out.prefix.empty() && out.prefix.back() == '/') out.prefix.pop_back();
  return out;
}

}  // namespace

void GatewayConfig::validate() const {
  const auto base = split_base_url(base_url);
  if (!base) throw ConfigError("gateway.base_url must be an http(s) URL");
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  if (base->origin.rfind("https://", 0) == 0) {
    throw ConfigError("gateway.base_url uses https but this build has no TLS support");
  }
#endif
  if (account_sid.empty()) throw ConfigError("gateway.account_sid is empty");
  if (auth_token.empty()) throw ConfigError("gateway.auth_token is empty");
  if (!is_e164(from_number)) throw ConfigError("gateway.from_number is not an E.164 number");
  if (recipients.empty()) throw ConfigError("gateway.recipients is empty");
  for (const std::string& r : recipients) {
    if (!is_e164(r)) throw ConfigError("gateway recipient '" + r + "' is not an E.164 number");
  }
  if (!(backoff_base_seconds >= 0.0)) throw ConfigError("gateway.backoff_base_seconds must be >= 0");
  if (!(jitter_fraction >= 0.0)) throw ConfigError("gateway.jitter_fraction must be >= 0");
  if (!(timeout_seconds > 0.0)) throw ConfigError("gateway.timeout_seconds must be positive");
  if (utc_offset_minutes < -14 * 60 || utc_offset_minutes > 14 * 60) {
    throw ConfigError("gateway.utc_offset_minutes out of range");
  }
  for (std::size_t c : critical_classes) {
    if (c >= kClassCount) throw ConfigError("gateway.critical_classes holds an unknown class");
  }
}

// ---------------------------------------------------------------- messages

std::string iso8601(std::chrono::system_clock::time_point when, int utc_offset_minutes) {
  const auto seconds =
      std::chrono::floor<std::chrono::seconds>(when.time_since_epoch()).count() +
      static_cast<std::int64_t>(utc_offset_minutes) * 60;
  const auto t = static_cast<std::time_t>(seconds);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%S", &tm);
  const int offset = std::abs(utc_offset_minutes);
  char zone[16];
  std::snprintf(zone, sizeof zone, "%c%02d:%02d", utc_offset_minutes < 0 ? '-' : '+', offset / 60,
                offset % 60);
  return std::string(stamp) + zone;
}

std::string format_alert(const ActivityEvent& event, const std::string& patient_label,
                         std::chrono::system_clock::time_point when, int utc_offset_minutes,
                         const std::set<std::size_t>& critical_classes) {
  const ActivityLabel& label = event.label();
  if (!critical_classes.count(event.class_index)) {
    throw ContractError("class " + label.class_code + " is not critical");
  }
  char pct[16];
  std::snprintf(pct, sizeof pct, "%.1f", event.confidence * 100.0);
  return "ALERT [CRITICAL] " + patient_label + ": " + label.display_name + " detected at " +
         iso8601(when, utc_offset_minutes) + " (confidence " + pct + "%)";
}

// ---------------------------------------------------------------- wire format

std::string encode_form(const std::vector<std::pair<std::string, std::string>>& fields) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  for (const auto& [key, value] : fields) {
    if (!out.empty()) out += '&';
    for (const std::string* part : {&key, &value}) {
      for (unsigned char c : *part) {
        if (std::isalnum(c) || c == '-' || c == '.' || c == '_' || c == '~' || c == '*') {
          out += static_cast<char>(c);
        } else if (c == ' ') {
          out += '+';
        } else {
          out += '%';
          out += hex[c >> 4];
          out += hex[c & 15];
        }
      }
      if (part == &key) out += '=';
    }
  }
  return out;
}

std::map<std::string, std::string> decode_form(const std::string& body) {
  auto decode = [](const std::string& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '+') {
        out += ' ';
      } else if (s[i] == '%' && i + 2 < s.size() && std::isxdigit(static_cast<unsigned char>(s[i + 1])) &&
                 std::isxdigit(static_cast<unsigned char>(s[i + 2]))) {
        out += static_cast<char>(std::stoi(s.substr(i + 1, 2), nullptr, 16));
        i += 2;
      } else {
        out += s[i];
      }
    }
    return out;
  };
  std::map<std::string, std::string> fields;
  std::size_t pos = 0;
  while (pos <= body.size() && !body.empty()) {
    std::size_t amp = body.find('&', pos);
    if (amp == std::string::npos) amp = body.size();
    const std::string pair = body.substr(pos, amp - pos);
    const std::size_t eq = pair.find('=');
    if (!pair.empty()) {
      fields[decode(pair.substr(0, eq))] = eq == std::string::npos ? "" : decode(pair.substr(eq + 1));
    }
    pos = amp + 1;
  }
  return fields;
}

std::string to_string(DeliveryStatus status) {
  switch (status) {
    case DeliveryStatus::Accepted: return "accepted";
    case DeliveryStatus::PermanentFailure: return "permanent_failure";
    case DeliveryStatus::RetriesExhausted: return "retries_exhausted";
    case DeliveryStatus::MalformedConfig: return "malformed_config";
  }
  return "unknown";
}

DeliveryStatus parse_delivery_status(const std::string& text) {
  for (DeliveryStatus s : {DeliveryStatus::Accepted, DeliveryStatus::PermanentFailure,
                           DeliveryStatus::RetriesExhausted, DeliveryStatus::MalformedConfig}) {
    if (to_string(s) == text) return s;
  }
  throw ConfigError("unknown delivery status '" + text + "'");
}

namespace {

double jitter(double delay, double fraction) {
  static std::mutex mutex;
  static std::mt19937_64 rng{std::random_device{}()};
  if (!(delay > 0.0) || !(fraction > 0.0)) return 0.0;
  std::lock_guard lock(mutex);
  return std::uniform_real_distribution<double>(0.0, fraction * delay)(rng);
}

}  // namespace

DeliveryResult send_sms(const SmsRequest& request, const GatewayConfig& config) {
  const auto started = std::chrono::steady_clock::now();
  DeliveryResult result;
  result.to = request.to;
  try {
    config.validate();
  } catch (const ConfigError& e) {
    result.error = std::string("malformed_config: ") + e.what();
    return result;
  }
  if (!is_e164(request.to) || !is_e164(request.from)) {
    result.error = "malformed_config: phone number is not E.164";
    return result;
  }
  if (request.body.empty() || request.body.size() > 1600) {
    result.error = "malformed_config: body must hold 1 to 1600 characters";
    return result;
  }

  const BaseUrl base = *split_base_url(config.base_url);
  const std::string path = base.prefix + "/2010-04-01/Accounts/" + config.account_sid + "/Messages.json";
  const std::string body =
      encode_form({{"To", request.to}, {"From", request.from}, {"Body", request.body}});

  httplib::Client client(base.origin);
  const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(
      std::chrono::duration<double>(config.timeout_seconds));
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  client.set_basic_auth(config.account_sid, config.auth_token);

  for (std::size_t attempt = 0; attempt <= config.max_retries; ++attempt) {
    if (attempt > 0) {
      const double delay = config.backoff_base_seconds * std::pow(2.0, static_cast<double>(attempt - 1));
      std::this_thread::sleep_for(
          std::chrono::duration<double>(delay + jitter(delay, config.jitter_fraction)));
    }
    ++result.attempts;
    const httplib::Result response =
        client.Post(path, body, "application/x-www-form-urlencoded");
    if (!response) {
      result.http_status = 0;
      result.error = "transport_" + httplib::to_string(response.error());
      continue;
    }
    result.http_status = response->status;
    if (response->status == 201) {
      result.status = DeliveryStatus::Accepted;
      result.error.clear();
      try {
        const json reply = json::parse(response->body);
        if (reply.contains("sid") && reply["sid"].is_string()) result.message_id = reply["sid"];
      } catch (const json::exception&) {
      }
      break;
    }
    result.error = "http_" + std::to_string(response->status);
    if (response->status >= 400 && response->status < 500) {
      result.status = DeliveryStatus::PermanentFailure;
      break;
    }
  }
  if (result.status == DeliveryStatus::MalformedConfig) result.status = DeliveryStatus::RetriesExhausted;
  result.latency_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

// ---------------------------------------------------------------- delivery log

std::string to_json_line(const DeliveryResult& r) {
  json j = {{"event_key", r.event_key},
            {"to", r.to},
            {"status", to_string(r.status)},
            {"message_id", r.message_id},
            {"error", r.error},
            {"http_status", r.http_status},
            {"attempts", r.attempts},
            {"latency_seconds", r.latency_seconds}};
  return j.dump();
}

DeliveryResult delivery_from_json(const std::string& line) {
  const json j = json::parse(line);
  DeliveryResult r;
  r.event_key = j.at("event_key").get<std::string>();
  r.to = j.at("to").get<std::string>();
  r.status = parse_delivery_status(j.at("status").get<std::string>());
  r.message_id = j.at("message_id").get<std::string>();
  r.error = j.at("error").get<std::string>();
  r.http_status = j.at("http_status").get<int>();
  r.attempts = j.at("attempts").get<std::size_t>();
  r.latency_seconds = j.at("latency_seconds").get<double>();
  return r;
}

DeliveryLog::DeliveryLog(const std::string& path) {
  {
    std::ifstream in(path);
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
      ++number;
      if (line.empty()) continue;
      try {
        DeliveryResult r = delivery_from_json(line);
        if (r.accepted()) accepted_.insert({r.event_key, r.to});
        entries_.push_back(std::move(r));
      } catch (const std::exception& e) {
        throw ParseError(number, std::string("bad delivery log record: ") + e.what());
      }
    }
  }
  out_.open(path, std::ios::app);
  if (!out_) throw std::runtime_error("cannot open delivery log " + path);
}

void DeliveryLog::append(const DeliveryResult& result) {
  std::lock_guard lock(mutex_);
  entries_.push_back(result);
  if (result.accepted()) accepted_.insert({result.event_key, result.to});
  if (out_.is_open()) {
    out_ << to_json_line(result) << '\n';
    out_.flush();
  }
}

bool DeliveryLog::accepted(const std::string& key, const std::string& to) const {
  std::lock_guard lock(mutex_);
  return accepted_.count({key, to}) > 0;
}

std::vector<DeliveryResult> DeliveryLog::entries() const {
  std::lock_guard lock(mutex_);
  return entries_;
}

void DeliveryLog::flush() {
  std::lock_guard lock(mutex_);
  if (out_.is_open()) out_.flush();
}

std::string event_key(const ActivityEvent& event) {
  char end[32];
  std::snprintf(end, sizeof end, "%.17g", event.window_end);
  return std::to_string(event.id) + "/" + event.label().class_code + "/" + end;
}

// ---------------------------------------------------------------- dispatcher

AlertDispatcher::AlertDispatcher(GatewayConfig config, DeliveryLog& log, LogSink sink,
                                 std::size_t queue_capacity)
    : config_(std::move(config)), log_(log), sink_(std::move(sink)), queue_(queue_capacity) {
  config_.validate();
  if (!sink_) sink_ = [](const std::string&) {};
  worker_ = std::thread([this] { run(); });
}

AlertDispatcher::~AlertDispatcher() { close(); }

void AlertDispatcher::submit(const ActivityEvent& event, std::chrono::system_clock::time_point when) {
  if (!queue_.push({event, when})) throw ContractError("dispatcher is closed");
}

void AlertDispatcher::close() {
  {
    std::lock_guard lock(mutex_);
    if (closed_) return;
    closed_ = true;
  }
  queue_.close();
  if (worker_.joinable()) worker_.join();
}

void AlertDispatcher::run() {
  while (auto item = queue_.pop()) {
    if (!config_.critical_classes.count(item->event.class_index)) {
      std::lock_guard lock(mutex_);
      ++stats_.ignored;
      sink_("event " + std::to_string(item->event.id) + " (" + item->event.label().display_name +
            ") is not critical; no alert sent");
      continue;
    }
    {
      std::lock_guard lock(mutex_);
      ++stats_.critical;
    }
    if (!deliver(*item)) {
      park(*item);
    } else {
      retry_parked();
    }
  }
}

bool AlertDispatcher::deliver(const Item& item) {
  const std::string key = event_key(item.event);
  const std::string body = format_alert(item.event, config_.patient_label, item.when,
                                        config_.utc_offset_minutes, config_.critical_classes);
  bool complete = true;
  for (const std::string& to : config_.recipients) {
    if (log_.accepted(key, to)) {
      std::lock_guard lock(mutex_);
      ++stats_.skipped;
      continue;
    }
    DeliveryResult r = send_sms({to, config_.from_number, body}, config_);
    r.event_key = key;
    log_.append(r);
    if (r.accepted()) {
      std::lock_guard lock(mutex_);
      ++stats_.sent;
      continue;
    }
    sink_("alert for event " + std::to_string(item.event.id) + " to " + to + " failed: " +
          to_string(r.status) + " (" + r.error + ", attempts " + std::to_string(r.attempts) + ")");
    if (r.status == DeliveryStatus::RetriesExhausted) complete = false;
  }
  return complete;
}

void AlertDispatcher::park(const Item& item) {
  std::lock_guard lock(mutex_);
  if (parked_.size() >= kParkCapacity) {
    const ActivityEvent& oldest = parked_.front().event;
    sink_("RETRY QUEUE FULL: dropping alert for event " + std::to_string(oldest.id) + " (" +
          oldest.label().display_name + ")");
    parked_.pop_front();
    ++stats_.dropped;
  }
  parked_.push_back(item);
  stats_.parked = parked_.size();
}

void AlertDispatcher::retry_parked() {
  std::deque<Item> pending;
  {
    std::lock_guard lock(mutex_);
    pending.swap(parked_);
    stats_.parked = 0;
  }
  for (std::size_t i = 0; i < pending.size(); ++i) {
    if (!deliver(pending[i])) {
      // Still failing: put this and the untried rest back in order.
      for (std::size_t j = i; j < pending.size(); ++j) park(pending[j]);
      return;
    }
  }
}

DispatcherStats AlertDispatcher::stats() const {
  std::lock_guard lock(mutex_);
  return stats_;
}

std::vector<ActivityEvent> AlertDispatcher::parked() const {
  std::lock_guard lock(mutex_);
  std::vector<ActivityEvent> out;
  for (const Item& item : parked_) out.push_back(item.event);
  return out;
}

}  // namespace mrha
