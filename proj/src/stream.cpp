#include "mrha/stream.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <mutex>
#include <thread>

#include "json.hpp"
#include "mrha/bounded_queue.hpp"

namespace mrha {

void StreamConfig::validate() const {
  if (window_frames == 0) throw ConfigError("window_frames must be positive");
  if (hop_frames == 0) throw ConfigError("hop_frames must be positive");
  if (hop_frames > window_frames) throw ConfigError("hop_frames must not exceed window_frames");
  if (!(confidence_threshold > 0.0 && confidence_threshold < 1.0)) {
    throw ConfigError("confidence_threshold must lie in (0, 1)");
  }
  if (consecutive_required == 0) throw ConfigError("consecutive_required must be positive");
  if (!(cooldown_seconds >= 0.0)) throw ConfigError("cooldown_seconds must be non-negative");
  if (!(target_fps > 0.0)) throw ConfigError("target_fps must be positive");
  if (queue_capacity == 0) throw ConfigError("queue_capacity must be positive");
}

// ---------------------------------------------------------------- decider

EventDecider::EventDecider(const StreamConfig& config) : config_(config) { config_.validate(); }

std::optional<ActivityEvent> EventDecider::observe(const Tensor& posteriors, double window_start,
                                                   double window_end) {
  require_rank(posteriors, 1, "observe");
  const auto p = posteriors.data();
  const auto best = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
  const double confidence = p[best];
  if (confidence < config_.confidence_threshold) {
    streak_class_.reset();
    streak_ = 0;
    return std::nullopt;
  }
  if (streak_class_ == best) {
    ++streak_;
  } else {
    streak_class_ = best;
    streak_ = 1;
  }
  if (streak_ < config_.consecutive_required) return std::nullopt;
  if (auto it = last_emission_.find(best);
      it != last_emission_.end() && window_end - it->second < config_.cooldown_seconds) {
    return std::nullopt;
  }
  last_emission_[best] = window_end;
  streak_ = 0;
  streak_class_.reset();
  return ActivityEvent{next_id_++, best, confidence, window_start, window_end};
}

// ---------------------------------------------------------------- runtime

StreamRuntime::StreamRuntime(const ModelConfig& model, const ParameterSet& params,
                             const StreamConfig& config, double source_fps)
    : model_(model),
      params_(params),
      config_(config),
      resampler_(source_fps, std::min(config.target_fps, source_fps)) {
  config_.validate();
  model_.validate();
  if (auto bad = first_mismatch(model_, params_)) {
    throw ConfigError("parameter '" + *bad + "' does not match the model config");
  }
}

std::optional<Tick> StreamRuntime::append(const SkeletonFrame& resampled) {
  window_.push_back(resampled);
  if (window_.size() > config_.window_frames) window_.pop_front();
  ++since_tick_;
  if (window_.size() < config_.window_frames || since_tick_ < config_.hop_frames) {
    return std::nullopt;
  }
  since_tick_ = 0;
  const std::vector<SkeletonFrame> frames(window_.begin(), window_.end());
  Tick tick;
  tick.index = tick_count_++;
  tick.window_start = frames.front().timestamp;
  tick.window_end = frames.back().timestamp;
  tick.posteriors = classify_sequence(rasterize_sequence(frames, model_.input_grid), model_, params_);
  return tick;
}

std::vector<Tick> StreamRuntime::push_frame(const SkeletonFrame& frame) {
  std::vector<Tick> ticks;
  if (last_timestamp_ && !(frame.timestamp > *last_timestamp_)) {
    ++rejected_;
    return ticks;
  }
  try {
    frame.validate();
  } catch (const DimensionError&) {
    ++rejected_;
    return ticks;
  }
  last_timestamp_ = frame.timestamp;
  ++accepted_;
  for (const SkeletonFrame& f : resampler_.push(frame)) {
    if (auto t = append(f)) ticks.push_back(std::move(*t));
  }
  return ticks;
}

std::vector<Tick> StreamRuntime::finish() {
  std::vector<Tick> ticks;
  for (const SkeletonFrame& f : resampler_.finish()) {
    if (auto t = append(f)) ticks.push_back(std::move(*t));
  }
  return ticks;
}

// ---------------------------------------------------------------- sources

VectorSource::VectorSource(std::vector<SkeletonFrame> frames, double fps)
    : frames_(std::move(frames)), fps_(fps) {}

std::optional<SkeletonFrame> VectorSource::next() {
  if (pos_ >= frames_.size()) return std::nullopt;
  return frames_[pos_++];
}

namespace {

bool is_blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

// Header lines carry "fps"; returns the rate if text is one.
std::optional<double> header_fps(const std::string& text, std::size_t line) {
  nlohmann::json obj;
  try {
    obj = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(line, std::string("malformed JSON: ") + e.what());
  }
  if (!obj.is_object() || !obj.contains("fps")) return std::nullopt;
  if (!obj["fps"].is_number() || !(obj["fps"].get<double>() > 0.0)) {
    throw ParseError(line, "fps must be a positive number");
  }
  return obj["fps"].get<double>();
}

}  // namespace

JsonlReplaySource::JsonlReplaySource(const std::string& path, bool pace)
    : in_(path), path_(path), pace_(pace) {
  if (!in_) throw std::runtime_error("cannot open " + path);
  std::string text;
  while (std::getline(in_, text)) {
    ++line_;
    if (is_blank(text)) continue;
    if (auto fps = header_fps(text, line_)) {
      fps_ = *fps;
    } else {
      pending_ = text;
    }
    break;
  }
}

std::optional<SkeletonFrame> JsonlReplaySource::next() {
  std::string text;
  std::size_t line = line_;
  if (pending_) {
    text = std::move(*pending_);
    pending_.reset();
  } else {
    do {
      if (!std::getline(in_, text)) return std::nullopt;
      line = ++line_;
    } while (is_blank(text));
  }
  SkeletonFrame frame = parse_frame_line(text, line);
  if (pace_) {
    if (!first_timestamp_) {
      first_timestamp_ = frame.timestamp;
      started_ = std::chrono::steady_clock::now();
    }
    const auto offset = std::chrono::duration<double>(frame.timestamp - *first_timestamp_);
    std::this_thread::sleep_until(started_ +
                                  std::chrono::duration_cast<std::chrono::steady_clock::duration>(offset));
  }
  return frame;
}

SocketSource::SocketSource(std::uint16_t port, double fps, const std::string& bind_address)
    : fps_(fps) {
  if (!(fps > 0.0)) throw ConfigError("socket source fps must be positive");
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw std::runtime_error(std::string("socket: ") + std::strerror(errno));
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, bind_address.c_str(), &addr.sin_addr) != 1) {
    ::close(listen_fd_);
    throw ConfigError("invalid bind address " + bind_address);
  }
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
      ::listen(listen_fd_, 1) != 0) {
    const std::string err = std::strerror(errno);
    ::close(listen_fd_);
    throw std::runtime_error("cannot listen on port " + std::to_string(port) + ": " + err);
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

SocketSource::~SocketSource() {
  if (client_fd_ >= 0) ::close(client_fd_);
  if (listen_fd_ >= 0) ::close(listen_fd_);
}

bool SocketSource::read_line(std::string& line) {
  while (true) {
    if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
      line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      return true;
    }
    pollfd pfd{client_fd_, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, 200);
    if (stop_requested()) return false;
    if (ready < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error(std::string("poll: ") + std::strerror(errno));
    }
    if (ready == 0) continue;
    char chunk[4096];
    const ssize_t n = ::recv(client_fd_, chunk, sizeof chunk, 0);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error(std::string("recv: ") + std::strerror(errno));
    }
    if (n == 0) {
      if (buffer_.empty()) return false;
      line = std::move(buffer_);
      buffer_.clear();
      return true;
    }
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

std::optional<SkeletonFrame> SocketSource::next() {
  while (client_fd_ < 0) {
    pollfd pfd{listen_fd_, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, 200);
    if (stop_requested()) return std::nullopt;
    if (ready < 0 && errno != EINTR) {
      throw std::runtime_error(std::string("poll: ") + std::strerror(errno));
    }
    if (ready > 0) {
      client_fd_ = ::accept(listen_fd_, nullptr, nullptr);
      if (client_fd_ < 0 && errno != EINTR) {
        throw std::runtime_error(std::string("accept: ") + std::strerror(errno));
      }
    }
  }
  std::string text;
  while (read_line(text)) {
    ++line_;
    if (is_blank(text) || header_fps(text, line_)) continue;
    return parse_frame_line(text, line_);
  }
  return std::nullopt;
}

// ---------------------------------------------------------------- run loop

double percentile95(std::vector<double> values) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(values.size())));
  return values[std::max<std::size_t>(rank, 1) - 1];
}

StreamSummary run_stream(FrameSource& source, const ModelConfig& model, const ParameterSet& params,
                         const StreamConfig& config, const EventSink& sink,
                         const TickObserver& on_tick, const std::atomic<bool>* stop) {
  using Clock = std::chrono::steady_clock;
  struct Arrival {
    SkeletonFrame frame;
    Clock::time_point at;
  };
  StreamRuntime runtime(model, params, config, source.fps());
  EventDecider decider(config);
  BoundedQueue<Arrival> queue(config.queue_capacity);
  source.set_stop_flag(stop);

  std::mutex error_mutex;
  std::optional<std::string> error;
  std::size_t produced = 0;
  std::thread producer([&] {
    try {
      while (!(stop && stop->load())) {
        std::optional<SkeletonFrame> frame = source.next();
        if (!frame) break;
        ++produced;
        if (!queue.push({*frame, Clock::now()})) break;
      }
    } catch (const std::exception& e) {
      std::lock_guard lock(error_mutex);
      error = e.what();
    }
    queue.close();
  });

  StreamSummary summary;
  std::vector<double> latencies;
  auto handle = [&](std::vector<Tick> ticks, Clock::time_point arrived) {
    for (Tick& tick : ticks) {
      latencies.push_back(std::chrono::duration<double, std::milli>(Clock::now() - arrived).count());
      if (on_tick) on_tick(tick);
      if (auto event = decider.observe(tick.posteriors, tick.window_start, tick.window_end)) {
        ++summary.events;
        if (sink) sink(*event);
      }
    }
  };
  Clock::time_point last_arrival = Clock::now();
  try {
    while (auto item = queue.pop()) {
      last_arrival = item->at;
      handle(runtime.push_frame(item->frame), item->at);
      if (stop && stop->load()) break;
    }
    if (!(stop && stop->load())) handle(runtime.finish(), last_arrival);
  } catch (...) {
    queue.close();
    producer.join();
    throw;
  }
  queue.close();
  producer.join();

  summary.frames = produced;
  summary.rejected = runtime.rejected();
  summary.ticks = runtime.ticks();
  summary.p95_latency_ms = percentile95(latencies);
  summary.error = error;
  return summary;
}

}  // namespace mrha
