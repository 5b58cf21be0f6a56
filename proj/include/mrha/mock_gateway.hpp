#pragma once

// Local stand-in for the SMS provider: accepts Messages.json POSTs, answers
// with scripted status codes and records every request.

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace mrha {

struct RecordedRequest {
  std::chrono::steady_clock::time_point received;
  std::chrono::system_clock::time_point received_wall;
  std::string method;
  std::string path;
  std::multimap<std::string, std::string> headers;
  std::string body;
  std::map<std::string, std::string> form;  // decoded body fields
  int status = 0;                           // status the mock answered with
};

class MockSmsGateway {
 public:
  MockSmsGateway();
  ~MockSmsGateway();
  MockSmsGateway(const MockSmsGateway&) = delete;
  MockSmsGateway& operator=(const MockSmsGateway&) = delete;

  /// Binds 127.0.0.1 (port 0 picks a free one) and serves on a background
  /// thread. Returns the bound port.
  int start(int port = 0, const std::string& host = "127.0.0.1");
  void stop();
  int port() const;
  std::string base_url() const;

  /// Status codes for the next requests, consumed in order; once exhausted
  /// every request gets 201.
  void script(std::vector<int> statuses);
  /// When set, requests without matching basic credentials get 401.
  void require_credentials(const std::string& account_sid, const std::string& auth_token);

  std::vector<RecordedRequest> requests() const;
  void clear();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace mrha
