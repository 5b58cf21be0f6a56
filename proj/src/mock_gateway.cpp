#include "mrha/mock_gateway.hpp"

#include <cstdio>
#include <deque>
#include <mutex>
#include <regex>
#include <stdexcept>
#include <thread>

#include "httplib.h"
#include "mrha/alert.hpp"

namespace mrha {

struct MockSmsGateway::Impl {
  httplib::Server server;
  std::thread thread;
  std::string host;
  int port = 0;
  mutable std::mutex mutex;
  std::deque<int> script;
  std::optional<std::string> expected_auth;
  std::vector<RecordedRequest> requests;
  std::size_t next_sid = 1;

  void handle(const httplib::Request& req, httplib::Response& res) {
    RecordedRequest rec;
    rec.received = std::chrono::steady_clock::now();
    rec.received_wall = std::chrono::system_clock::now();
    rec.method = req.method;
    rec.path = req.path;
    rec.body = req.body;
    for (const auto& [k, v] : req.headers) rec.headers.emplace(k, v);
    rec.form = decode_form(req.body);

    std::lock_guard lock(mutex);
    int status = 201;
    if (expected_auth && req.get_header_value("Authorization") != *expected_auth) {
      status = 401;
    } else if (!script.empty()) {
      status = script.front();
      script.pop_front();
    }
    rec.status = status;
    res.status = status;
    if (status == 201) {
      char sid[40];
      std::snprintf(sid, sizeof sid, "SM%032zx", next_sid++);
      reply(res, std::string("{\"sid\":\"") + sid + "\",\"status\":\"queued\"}");
    } else {
      reply(res, "{\"code\":" + std::to_string(20000 + status) + ",\"status\":" +
                              std::to_string(status) + "}");
    }
    requests.push_back(std::move(rec));
  }

  static void reply(httplib::Response& res, const std::string& body) {
    res.set_content(body, "application/json");
  }
};

MockSmsGateway::MockSmsGateway() : impl_(std::make_unique<Impl>()) {
  impl_->server.Post(R"(/.*)", [this](const httplib::Request& req, httplib::Response& res) {
    impl_->handle(req, res);
  });
}

MockSmsGateway::~MockSmsGateway() { stop(); }

int MockSmsGateway::start(int port, const std::string& host) {
  if (impl_->thread.joinable()) throw ContractError("mock gateway already running");
  impl_->host = host;
  if (port == 0) {
    impl_->port = impl_->server.bind_to_any_port(host);
  } else {
    impl_->port = impl_->server.bind_to_port(host, port) ? port : -1;
  }
  if (impl_->port < 0) throw std::runtime_error("mock gateway cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return impl_->port;
}

void MockSmsGateway::stop() {
  if (!impl_->thread.joinable()) return;
  impl_->server.stop();
  impl_->thread.join();
}

int MockSmsGateway::port() const { return impl_->port; }

std::string MockSmsGateway::base_url() const {
  return "http://" + impl_->host + ":" + std::to_string(impl_->port);
}

void MockSmsGateway::script(std::vector<int> statuses) {
  std::lock_guard lock(impl_->mutex);
  impl_->script.assign(statuses.begin(), statuses.end());
}

void MockSmsGateway::require_credentials(const std::string& account_sid,
                                         const std::string& auth_token) {
  std::lock_guard lock(impl_->mutex);
  impl_->expected_auth = httplib::make_basic_authentication_header(account_sid, auth_token).second;
}

std::vector<RecordedRequest> MockSmsGateway::requests() const {
  std::lock_guard lock(impl_->mutex);
  return impl_->requests;
}

void MockSmsGateway::clear() {
  std::lock_guard lock(impl_->mutex);
  impl_->requests.clear();
  impl_->script.clear();
}

}  // namespace mrha
