#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "mrha/alert.hpp"
#include "mrha/mock_gateway.hpp"

namespace mrha {
namespace {

using namespace std::chrono_literals;

constexpr const char* kSid = "AC0123456789abcdef";
constexpr const char* kToken = "s3cr3t-t0ken-value";
// base64("AC0123456789abcdef:s3cr3t-t0ken-value")
constexpr const char* kBasicAuth = "Basic QUMwMTIzNDU2Nzg5YWJjZGVmOnMzY3IzdC10MGtlbi12YWx1ZQ==";

// 2025-01-01T03:00:00Z
const std::chrono::system_clock::time_point kNoonTokyo{std::chrono::seconds(1735700400)};

GatewayConfig gateway(const std::string& base_url) {
  GatewayConfig c;
  c.base_url = base_url;
  c.account_sid = kSid;
  c.auth_token = kToken;
  c.from_number = "+15559870000";
  c.recipients = {"+15551230001"};
  c.patient_label = "Room 14";
  c.utc_offset_minutes = 9 * 60;
  return c;
}

ActivityEvent event(std::uint64_t id, const std::string& code, double confidence = 0.912) {
  return {id, class_index(code), confidence, static_cast<double>(id), static_cast<double>(id) + 2.0};
}

int closed_port() {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  ::close(fd);
  return ntohs(addr.sin_port);
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() /
         ("mrha_alert_" + std::to_string(::getpid()) + "_" + name);
}

struct CapturedLog {
  std::vector<std::string> lines;
  std::mutex mutex;
  LogSink sink() {
    return [this](const std::string& line) {
      std::lock_guard lock(mutex);
      lines.push_back(line);
    };
  }
  std::size_t count(const std::string& needle) {
    std::lock_guard lock(mutex);
    return static_cast<std::size_t>(std::count_if(lines.begin(), lines.end(), [&](const std::string& l) {
      return l.find(needle) != std::string::npos;
    }));
  }
};

class MockTest : public ::testing::Test {
 protected:
  void SetUp() override { mock.start(); }
  MockSmsGateway mock;
};

TEST(E164, Pattern) {
  EXPECT_TRUE(is_e164("+15551230001"));
  EXPECT_TRUE(is_e164("+8190123456"));
  EXPECT_TRUE(is_e164("+1234567"));
  EXPECT_TRUE(is_e164("+123456789012345"));
  EXPECT_FALSE(is_e164("+1234567890123456"));
  EXPECT_FALSE(is_e164("+123456"));
  EXPECT_FALSE(is_e164("15551230001"));
  EXPECT_FALSE(is_e164("+05551230001"));
  EXPECT_FALSE(is_e164("+1555123000a"));
}

TEST(GatewayConfigTest, ValidationNamesFieldWithoutSecret) {
  GatewayConfig c = gateway("http://127.0.0.1:1");
  EXPECT_NO_THROW(c.validate());
  for (auto mutate : std::vector<std::function<void(GatewayConfig&)>>{
           [](GatewayConfig& g) { g.from_number = "5551234"; },
           [](GatewayConfig& g) { g.recipients = {"+1"}; },
           [](GatewayConfig& g) { g.recipients.clear(); },
           [](GatewayConfig& g) { g.base_url = "ftp://x"; },
           [](GatewayConfig& g) { g.account_sid.clear(); },
           [](GatewayConfig& g) { g.timeout_seconds = 0; },
           [](GatewayConfig& g) { g.critical_classes = {12}; },
       }) {
    GatewayConfig bad = c;
    mutate(bad);
    try {
      bad.validate();
      ADD_FAILURE() << "accepted invalid config";
    } catch (const ConfigError& e) {
      EXPECT_EQ(std::string(e.what()).find(kToken), std::string::npos);
    }
  }
}

TEST(FormatAlert, TemplateInstance) {
  EXPECT_EQ(format_alert(event(1, "A43"), "Room 14", kNoonTokyo, 540),
            "ALERT [CRITICAL] Room 14: falling down detected at 2025-01-01T12:00:00+09:00 "
            "(confidence 91.2%)");
}

TEST(FormatAlert, FullConfidence) {
  const std::string body = format_alert(event(1, "A43", 1.0), "Room 14", kNoonTokyo, 540);
  EXPECT_NE(body.find("(confidence 100.0%)"), std::string::npos) << body;
}

TEST(FormatAlert, NegativeOffsetAndDateRollover) {
  EXPECT_EQ(iso8601(kNoonTokyo, -(5 * 60 + 30)), "2024-12-31T21:30:00-05:30");
  EXPECT_EQ(iso8601(kNoonTokyo, 0), "2025-01-01T03:00:00+00:00");
}

TEST(FormatAlert, NonCriticalIsContractError) {
  EXPECT_THROW(format_alert(event(1, "A103"), "Room 14", kNoonTokyo, 0), ContractError);
  EXPECT_NO_THROW(format_alert(event(1, "A103"), "Room 14", kNoonTokyo, 0, {class_index("A103")}));
}

TEST(FormatAlert, SingleSegmentForShortLabels) {
  const std::string label(24, 'W');
  for (std::size_t c : default_critical_classes()) {
    const ActivityEvent e{1, c, 0.999, 0.0, 2.0};
    EXPECT_LE(format_alert(e, label, kNoonTokyo, -(9 * 60 + 30)).size(), 160u);
  }
}

TEST(FormatAlert, GoldenCriticalClasses) {
  std::ifstream in(std::string(MRHA_TEST_DATA_DIR) + "/golden/alerts.txt", std::ios::binary);
  ASSERT_TRUE(in);
  std::stringstream golden;
  golden << in.rdbuf();
  std::string produced;
  for (std::size_t c : default_critical_classes()) {
    produced += format_alert({1, c, 0.912, 0.0, 2.0}, "Room 14", kNoonTokyo, 540) + "\n";
  }
  EXPECT_EQ(produced, golden.str());
}

TEST(FormEncoding, EscapesPlusAndReserved) {
  EXPECT_EQ(encode_form({{"To", "+15551230001"},
                         {"From", "+15559870000"},
                         {"Body", "ALERT [CRITICAL] Room 14: falling down detected at "
                                  "2025-01-01T12:00:00+09:00 (confidence 91.2%)"}}),
            "To=%2B15551230001&From=%2B15559870000&Body=ALERT+%5BCRITICAL%5D+Room+14%3A+falling+"
            "down+detected+at+2025-01-01T12%3A00%3A00%2B09%3A00+%28confidence+91.2%25%29");
}

TEST(FormEncoding, RandomRoundTrip) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::pair<std::string, std::string>> fields;
    std::map<std::string, std::string> expected;
    for (int f = 0; f < 3; ++f) {
      std::string key = "k" + std::to_string(f);
      std::string value;
      for (std::size_t n = rng() % 40; n > 0; --n) value += static_cast<char>(1 + rng() % 255);
      fields.emplace_back(key, value);
      expected[key] = value;
    }
    EXPECT_EQ(decode_form(encode_form(fields)), expected);
  }
}

TEST_F(MockTest, AcceptedOnFirstAttemptWithExactWire) {
  mock.require_credentials(kSid, kToken);
  const std::string body = format_alert(event(1, "A43"), "Room 14", kNoonTokyo, 540);
  const DeliveryResult r = send_sms({"+15551230001", "+15559870000", body}, gateway(mock.base_url()));
  EXPECT_EQ(r.status, DeliveryStatus::Accepted);
  EXPECT_EQ(r.attempts, 1u);
  EXPECT_EQ(r.http_status, 201);
  EXPECT_EQ(r.message_id.rfind("SM", 0), 0u);
  EXPECT_EQ(r.message_id.size(), 34u);

  const auto requests = mock.requests();
  ASSERT_EQ(requests.size(), 1u);
  const RecordedRequest& req = requests[0];
  EXPECT_EQ(req.method, "POST");
  EXPECT_EQ(req.path, "/2010-04-01/Accounts/AC0123456789abcdef/Messages.json");
  ASSERT_EQ(req.headers.count("Authorization"), 1u);
  EXPECT_EQ(req.headers.find("Authorization")->second, kBasicAuth);
  ASSERT_EQ(req.headers.count("Content-Type"), 1u);
  EXPECT_EQ(req.headers.find("Content-Type")->second, "application/x-www-form-urlencoded");
  EXPECT_EQ(req.body,
            "To=%2B15551230001&From=%2B15559870000&Body=ALERT+%5BCRITICAL%5D+Room+14%3A+falling+"
            "down+detected+at+2025-01-01T12%3A00%3A00%2B09%3A00+%28confidence+91.2%25%29");
  EXPECT_EQ(req.form, (std::map<std::string, std::string>{
                          {"To", "+15551230001"}, {"From", "+15559870000"}, {"Body", body}}));
}

TEST_F(MockTest, BaseUrlPathPrefixIsKept) {
  const DeliveryResult r =
      send_sms({"+15551230001", "+15559870000", "hi"}, gateway(mock.base_url() + "/gw/"));
  EXPECT_TRUE(r.accepted());
  ASSERT_EQ(mock.requests().size(), 1u);
  EXPECT_EQ(mock.requests()[0].path, "/gw/2010-04-01/Accounts/AC0123456789abcdef/Messages.json");
}

TEST_F(MockTest, AuthFailureIsPermanentWithoutRetry) {
  mock.script({401});
  const DeliveryResult r = send_sms({"+15551230001", "+15559870000", "hi"}, gateway(mock.base_url()));
  EXPECT_EQ(r.status, DeliveryStatus::PermanentFailure);
  EXPECT_EQ(r.attempts, 1u);
  EXPECT_EQ(r.http_status, 401);
  EXPECT_EQ(r.error, "http_401");
  EXPECT_EQ(mock.requests().size(), 1u);
}

TEST_F(MockTest, WrongCredentialsRejected) {
  mock.require_credentials(kSid, "other");
  const DeliveryResult r = send_sms({"+15551230001", "+15559870000", "hi"}, gateway(mock.base_url()));
  EXPECT_EQ(r.status, DeliveryStatus::PermanentFailure);
  EXPECT_EQ(r.http_status, 401);
}

TEST_F(MockTest, ServerErrorsRetriedWithExponentialBackoff) {
  mock.script({500, 500, 201});
  const DeliveryResult r = send_sms({"+15551230001", "+15559870000", "hi"}, gateway(mock.base_url()));
  EXPECT_EQ(r.status, DeliveryStatus::Accepted);
  EXPECT_EQ(r.attempts, 3u);
  const auto requests = mock.requests();
  ASSERT_EQ(requests.size(), 3u);
  const double first = std::chrono::duration<double>(requests[1].received - requests[0].received).count();
  const double second = std::chrono::duration<double>(requests[2].received - requests[1].received).count();
  EXPECT_GE(first, 1.0);
  EXPECT_GE(second, 2.0);
  EXPECT_LT(first, 1.0 * 1.1 + 0.5);
  EXPECT_LT(second, 2.0 * 1.1 + 0.5);
  EXPECT_GE(r.latency_seconds, 3.0);
}

TEST_F(MockTest, RetriesExhaustedAfterMaxRetries) {
  mock.script({500, 503, 502, 500, 201});
  GatewayConfig c = gateway(mock.base_url());
  c.backoff_base_seconds = 0.001;
  const DeliveryResult r = send_sms({"+15551230001", "+15559870000", "hi"}, c);
  EXPECT_EQ(r.status, DeliveryStatus::RetriesExhausted);
  EXPECT_EQ(r.attempts, c.max_retries + 1);
  EXPECT_EQ(r.error, "http_500");
  EXPECT_EQ(mock.requests().size(), 4u);
}

TEST(SendSms, UnreachableGatewayRetriesThenGivesUp) {
  GatewayConfig c = gateway("http://127.0.0.1:" + std::to_string(closed_port()));
  c.backoff_base_seconds = 0.001;
  c.max_retries = 2;
  const DeliveryResult r = send_sms({"+15551230001", "+15559870000", "hi"}, c);
  EXPECT_EQ(r.status, DeliveryStatus::RetriesExhausted);
  EXPECT_EQ(r.attempts, 3u);
  EXPECT_EQ(r.http_status, 0);
  EXPECT_EQ(r.error.rfind("transport_", 0), 0u) << r.error;
}

TEST_F(MockTest, MalformedConfigSendsNothing) {
  GatewayConfig c = gateway(mock.base_url());
  c.from_number = "555";
  DeliveryResult r = send_sms({"+15551230001", "+15559870000", "hi"}, c);
  EXPECT_EQ(r.status, DeliveryStatus::MalformedConfig);
  EXPECT_EQ(r.attempts, 0u);
  r = send_sms({"+15551230001", "+15559870000", ""}, gateway(mock.base_url()));
  EXPECT_EQ(r.status, DeliveryStatus::MalformedConfig);
  r = send_sms({"+15551230001", "+15559870000", std::string(1601, 'x')}, gateway(mock.base_url()));
  EXPECT_EQ(r.status, DeliveryStatus::MalformedConfig);
  EXPECT_TRUE(mock.requests().empty());
}

TEST(DeliveryLogTest, JsonRoundTrip) {
  DeliveryResult r;
  r.status = DeliveryStatus::RetriesExhausted;
  r.error = "http_503";
  r.http_status = 503;
  r.attempts = 4;
  r.latency_seconds = 7.25;
  r.to = "+15551230001";
  r.event_key = "3/A43/4.5";
  const DeliveryResult back = delivery_from_json(to_json_line(r));
  EXPECT_EQ(to_json_line(back), to_json_line(r));
  EXPECT_EQ(back.status, r.status);
}

TEST_F(MockTest, NonCriticalEventSendsNothing) {
  DeliveryLog log;
  CapturedLog captured;
  {
    AlertDispatcher d(gateway(mock.base_url()), log, captured.sink());
    d.submit(event(1, "A103"));
    d.close();
    EXPECT_EQ(d.stats().ignored, 1u);
  }
  EXPECT_TRUE(mock.requests().empty());
  EXPECT_EQ(captured.count("not critical"), 1u);
}

TEST_F(MockTest, TwoRecipientsGetIdenticalBodies) {
  GatewayConfig c = gateway(mock.base_url());
  c.recipients = {"+15551230001", "+15551230002"};
  DeliveryLog log;
  {
    AlertDispatcher d(c, log, {});
    d.submit(event(1, "A43"), kNoonTokyo);
    d.close();
    EXPECT_EQ(d.stats().sent, 2u);
  }
  const auto requests = mock.requests();
  ASSERT_EQ(requests.size(), 2u);
  EXPECT_EQ(requests[0].form.at("Body"), requests[1].form.at("Body"));
  EXPECT_EQ(requests[0].form.at("To"), "+15551230001");
  EXPECT_EQ(requests[1].form.at("To"), "+15551230002");
  EXPECT_EQ(requests[0].form.at("Body"), format_alert(event(1, "A43"), "Room 14", kNoonTokyo, 540));
  EXPECT_EQ(log.entries().size(), 2u);
}

TEST(Dispatcher, OutageKeepsNewestHundredParked) {
  GatewayConfig c = gateway("http://127.0.0.1:" + std::to_string(closed_port()));
  c.max_retries = 0;
  c.backoff_base_seconds = 0.0;
  DeliveryLog log;
  CapturedLog captured;
  AlertDispatcher d(c, log, captured.sink());
  for (std::uint64_t id = 1; id <= 150; ++id) d.submit(event(id, "A43"));
  d.close();
  const DispatcherStats s = d.stats();
  EXPECT_EQ(s.critical, 150u);
  EXPECT_EQ(s.parked, 100u);
  EXPECT_EQ(s.dropped, 50u);
  const auto parked = d.parked();
  ASSERT_EQ(parked.size(), 100u);
  for (std::size_t i = 0; i < parked.size(); ++i) EXPECT_EQ(parked[i].id, 51 + i);
  EXPECT_EQ(captured.count("RETRY QUEUE FULL"), 50u);
}

TEST_F(MockTest, ParkedEventsRetriedAfterRecovery) {
  mock.script({503});
  GatewayConfig c = gateway(mock.base_url());
  c.max_retries = 0;
  DeliveryLog log;
  AlertDispatcher d(c, log, {});
  d.submit(event(1, "A43"));
  d.submit(event(2, "A42"));
  d.close();
  EXPECT_EQ(d.stats().parked, 0u);
  EXPECT_EQ(d.stats().sent, 2u);
  const auto requests = mock.requests();
  ASSERT_EQ(requests.size(), 3u);
  EXPECT_EQ(requests[0].status, 503);
  EXPECT_NE(requests[1].form.at("Body").find("staggering"), std::string::npos);
  EXPECT_NE(requests[2].form.at("Body").find("falling down"), std::string::npos);
}

TEST_F(MockTest, ReplayingDeliveryLogDoesNotResend) {
  const auto path = temp_path("deliveries.jsonl");
  std::filesystem::remove(path);
  GatewayConfig c = gateway(mock.base_url());
  c.recipients = {"+15551230001", "+15551230002"};
  {
    DeliveryLog log(path.string());
    AlertDispatcher d(c, log, {});
    d.submit(event(1, "A43"));
    d.submit(event(2, "A45"));
    d.close();
  }
  EXPECT_EQ(mock.requests().size(), 4u);
  {
    DeliveryLog log(path.string());
    EXPECT_EQ(log.entries().size(), 4u);
    AlertDispatcher d(c, log, {});
    d.submit(event(1, "A43"));
    d.submit(event(2, "A45"));
    d.submit(event(3, "A48"));
    d.close();
    EXPECT_EQ(d.stats().skipped, 4u);
    EXPECT_EQ(d.stats().sent, 2u);
  }
  EXPECT_EQ(mock.requests().size(), 6u);
  std::filesystem::remove(path);
}

TEST_F(MockTest, SecretNeverLoggedOrReported) {
  const auto path = temp_path("secret_scan.jsonl");
  std::filesystem::remove(path);
  CapturedLog captured;
  std::vector<std::string> texts;
  mock.script({401, 500, 500, 500, 500});
  GatewayConfig c = gateway(mock.base_url());
  c.backoff_base_seconds = 0.001;
  {
    DeliveryLog log(path.string());
    AlertDispatcher d(c, log, captured.sink());
    d.submit(event(1, "A43"));
    d.submit(event(2, "A43"));
    d.submit(event(3, "A103"));
    d.close();
    for (const DeliveryResult& r : log.entries()) texts.push_back(r.error);
  }
  GatewayConfig down = gateway("http://127.0.0.1:" + std::to_string(closed_port()));
  down.max_retries = 0;
  texts.push_back(send_sms({"+15551230001", "+15559870000", "x"}, down).error);
  GatewayConfig broken = c;
  broken.from_number = kToken;
  texts.push_back(send_sms({"+15551230001", "+15559870000", "x"}, broken).error);

  std::ifstream in(path);
  std::stringstream file;
  file << in.rdbuf();
  texts.push_back(file.str());
  for (const std::string& line : captured.lines) texts.push_back(line);
  ASSERT_GE(captured.lines.size(), 3u);
  const std::string encoded = std::string(kBasicAuth).substr(6);
  for (const std::string& t : texts) {
    EXPECT_EQ(t.find(kToken), std::string::npos) << t;
    EXPECT_EQ(t.find(encoded), std::string::npos) << t;
  }
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace mrha
