#pragma once

// Alert messages for critical activity events and their delivery through a
// Twilio-compatible SMS endpoint.

#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "mrha/bounded_queue.hpp"
#include "mrha/stream.hpp"

namespace mrha {

using LogSink = std::function<void(const std::string&)>;

/// Writes "[mrha] <line>" to stderr.
LogSink stderr_log();

bool is_e164(const std::string& number);

inline std::set<std::size_t> default_critical_set() {
  const std::vector<std::size_t> classes = default_critical_classes();
  return {classes.begin(), classes.end()};
}

struct GatewayConfig {
  std::string base_url = "https://api.twilio.com";
  std::string account_sid;
  std::string auth_token;  // never logged
  std::string from_number;
  std::vector<std::string> recipients;
  std::size_t max_retries = 3;
  double backoff_base_seconds = 1.0;  // delay before retry k is base * 2^k plus jitter
  double jitter_fraction = 0.1;       // jitter drawn from [0, fraction * delay]
  double timeout_seconds = 10.0;
  std::string patient_label = "Patient";
  int utc_offset_minutes = 0;  // local time zone of the rendered timestamp
  std::set<std::size_t> critical_classes = default_critical_set();

  /// Throws ConfigError naming the offending field; never echoes the token.
  void validate() const;
};

/// "ALERT [CRITICAL] <patient>: <display name> detected at <local ISO-8601>
/// (confidence <pct>%)". Throws ContractError for a non-critical class.
std::string format_alert(const ActivityEvent& event, const std::string& patient_label,
                         std::chrono::system_clock::time_point when, int utc_offset_minutes,
                         const std::set<std::size_t>& critical_classes = default_critical_set());

/// ISO-8601 local time with a numeric offset, e.g. 2025-01-01T12:00:00+09:00.
std::string iso8601(std::chrono::system_clock::time_point when, int utc_offset_minutes);

struct SmsRequest {
  std::string to;
  std::string from;
  std::string body;  // 1..1600 characters
};

/// application/x-www-form-urlencoded with fields in the given order.
std::string encode_form(const std::vector<std::pair<std::string, std::string>>& fields);
std::map<std::string, std::string> decode_form(const std::string& body);

enum class DeliveryStatus { Accepted, PermanentFailure, RetriesExhausted, MalformedConfig };

std::string to_string(DeliveryStatus status);
DeliveryStatus parse_delivery_status(const std::string& text);

struct DeliveryResult {
  DeliveryStatus status = DeliveryStatus::MalformedConfig;
  std::string message_id;  // provider sid when accepted
  std::string error;       // short code such as "http_401" or "transport_connection"
  int http_status = 0;     // last response status, 0 without a response
  std::size_t attempts = 0;
  double latency_seconds = 0.0;
  std::string to;
  std::string event_key;  // set by the dispatcher

  bool accepted() const { return status == DeliveryStatus::Accepted; }
};

/// POSTs {base_url}/2010-04-01/Accounts/{sid}/Messages.json with basic auth.
/// 201 is accepted, other 4xx are permanent, 5xx and transport errors are
/// retried up to max_retries times with exponential backoff.
DeliveryResult send_sms(const SmsRequest& request, const GatewayConfig& config);

std::string to_json_line(const DeliveryResult& result);
DeliveryResult delivery_from_json(const std::string& line);

/// Append-only JSONL record of delivery results. An existing file is loaded
/// so accepted messages are not sent twice.
class DeliveryLog {
 public:
  DeliveryLog() = default;  // in memory only
  explicit DeliveryLog(const std::string& path);

  void append(const DeliveryResult& result);
  bool accepted(const std::string& event_key, const std::string& to) const;
  std::vector<DeliveryResult> entries() const;
  void flush();

 private:
  mutable std::mutex mutex_;
  std::vector<DeliveryResult> entries_;
  std::set<std::pair<std::string, std::string>> accepted_;
  std::ofstream out_;
};

/// Identity of an event across replays: id, class code and window end.
std::string event_key(const ActivityEvent& event);

struct DispatcherStats {
  std::size_t critical = 0;
  std::size_t ignored = 0;  // non-critical events, logged only
  std::size_t sent = 0;     // accepted messages
  std::size_t skipped = 0;  // already accepted according to the log
  std::size_t parked = 0;   // events currently waiting for a retry
  std::size_t dropped = 0;  // parked events evicted by newer ones
};

/// Delivers events on a worker thread. Critical events produce one SMS per
/// recipient; events whose delivery failed transiently are parked in a
/// bounded retry queue (oldest dropped when full) and retried after the next
/// successful delivery or on retry_parked().
class AlertDispatcher {
 public:
  static constexpr std::size_t kParkCapacity = 100;

  AlertDispatcher(GatewayConfig config, DeliveryLog& log, LogSink sink = stderr_log(),
                  std::size_t queue_capacity = 256);
  ~AlertDispatcher();
  AlertDispatcher(const AlertDispatcher&) = delete;
  AlertDispatcher& operator=(const AlertDispatcher&) = delete;

  void submit(const ActivityEvent& event,
              std::chrono::system_clock::time_point when = std::chrono::system_clock::now());
  /// Processes everything submitted so far and stops the worker.
  void close();
  /// Retries parked events once on the calling thread (after close()).
  void retry_parked();
  DispatcherStats stats() const;
  std::vector<ActivityEvent> parked() const;

 private:
  struct Item {
    ActivityEvent event;
    std::chrono::system_clock::time_point when;
  };

  void run();
  bool deliver(const Item& item);  // false when a transient failure remains
  void park(const Item& item);

  GatewayConfig config_;
  DeliveryLog& log_;
  LogSink sink_;
  BoundedQueue<Item> queue_;
  mutable std::mutex mutex_;
  std::deque<Item> parked_;
  DispatcherStats stats_;
  std::thread worker_;
  bool closed_ = false;
};

}  // namespace mrha
