#pragma once

// Live inference: sliding windows over a frame source, per-window
// classification and debounced activity events.

#include <atomic>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mrha/model.hpp"
#include "mrha/skeleton.hpp"

namespace mrha {

struct StreamConfig {
  std::size_t window_frames = 20;
  std::size_t hop_frames = 5;
  double confidence_threshold = 0.7;
  std::size_t consecutive_required = 2;
  double cooldown_seconds = 30.0;
  double target_fps = 10.0;         // windows are built at this rate
  std::size_t queue_capacity = 64;  // frames between producer and consumer

  /// Throws ConfigError on violated invariants (hop <= window, threshold in
  /// (0,1), positive counts).
  void validate() const;
};

struct ActivityEvent {
  std::uint64_t id = 0;
  std::size_t class_index = 0;
  double confidence = 0.0;
  double window_start = 0.0;
  double window_end = 0.0;

  const ActivityLabel& label() const { return label_at(class_index); }
};

struct Tick {
  std::size_t index = 0;  // 0-based tick counter
  double window_start = 0.0;
  double window_end = 0.0;
  Tensor posteriors;
};

/// Turns per-tick posteriors into events: the same argmax class must reach
/// the threshold on consecutive_required consecutive ticks and lie outside
/// its cooldown (measured between window end times). Emission resets the
/// streak.
class EventDecider {
 public:
  explicit EventDecider(const StreamConfig& config);
  std::optional<ActivityEvent> observe(const Tensor& posteriors, double window_start,
                                       double window_end);
  std::uint64_t events_emitted() const { return next_id_ - 1; }

 private:
  StreamConfig config_;
  std::optional<std::size_t> streak_class_;
  std::size_t streak_ = 0;
  std::map<std::size_t, double> last_emission_;
  std::uint64_t next_id_ = 1;
};

/// Consumer side of the stream: resamples incoming frames to the target rate,
/// keeps the newest window_frames of them and classifies the window every
/// hop_frames frames once the window is full.
class StreamRuntime {
 public:
  StreamRuntime(const ModelConfig& model, const ParameterSet& params, const StreamConfig& config,
                double source_fps);

  /// Frames at or before the last accepted timestamp are rejected and
  /// counted. Returns the ticks fired by this frame (normally zero or one).
  std::vector<Tick> push_frame(const SkeletonFrame& frame);
  /// Flushes the resampler at end of stream; may fire final ticks.
  std::vector<Tick> finish();

  std::size_t rejected() const { return rejected_; }
  std::size_t accepted() const { return accepted_; }
  std::size_t buffered() const { return window_.size(); }
  std::size_t ticks() const { return tick_count_; }
  const std::deque<SkeletonFrame>& window() const { return window_; }

 private:
  std::optional<Tick> append(const SkeletonFrame& resampled);

  const ModelConfig& model_;
  const ParameterSet& params_;
  StreamConfig config_;
  OnlineResampler resampler_;
  std::deque<SkeletonFrame> window_;
  std::optional<double> last_timestamp_;
  std::size_t since_tick_ = 0;
  std::size_t tick_count_ = 0;
  std::size_t rejected_ = 0;
  std::size_t accepted_ = 0;
};

class FrameSource {
 public:
  virtual ~FrameSource() = default;
  /// Next frame, or nullopt at end of stream. Throws on source failure.
  virtual std::optional<SkeletonFrame> next() = 0;
  virtual double fps() const = 0;
  /// Lets blocking sources give up waiting once *stop becomes true.
  virtual void set_stop_flag(const std::atomic<bool>* stop) { stop_ = stop; }

 protected:
  bool stop_requested() const { return stop_ && stop_->load(); }

 private:
  const std::atomic<bool>* stop_ = nullptr;
};

class VectorSource : public FrameSource {
 public:
  VectorSource(std::vector<SkeletonFrame> frames, double fps);
  std::optional<SkeletonFrame> next() override;
  double fps() const override { return fps_; }

 private:
  std::vector<SkeletonFrame> frames_;
  double fps_;
  std::size_t pos_ = 0;
};

/// Replays a skeleton JSONL file. With pacing on, frames are released at
/// their timestamp offsets in wall-clock time.
class JsonlReplaySource : public FrameSource {
 public:
  JsonlReplaySource(const std::string& path, bool pace);
  std::optional<SkeletonFrame> next() override;
  double fps() const override { return fps_; }

 private:
  std::ifstream in_;
  std::string path_;
  bool pace_;
  double fps_ = 24.0;
  std::size_t line_ = 0;
  std::optional<std::string> pending_;
  std::optional<double> first_timestamp_;
  std::chrono::steady_clock::time_point started_;
};

/// Listens on a TCP port, accepts one client and reads newline-delimited
/// frame records (header lines are skipped). Port 0 picks a free port.
class SocketSource : public FrameSource {
 public:
  SocketSource(std::uint16_t port, double fps, const std::string& bind_address = "127.0.0.1");
  ~SocketSource() override;
  SocketSource(const SocketSource&) = delete;
  SocketSource& operator=(const SocketSource&) = delete;

  std::uint16_t port() const { return port_; }
  std::optional<SkeletonFrame> next() override;
  double fps() const override { return fps_; }

 private:
  bool read_line(std::string& line);

  int listen_fd_ = -1;
  int client_fd_ = -1;
  std::uint16_t port_ = 0;
  double fps_;
  std::string buffer_;
  std::size_t line_ = 0;
};

struct StreamSummary {
  std::size_t frames = 0;    // frames read from the source
  std::size_t rejected = 0;  // out-of-order frames
  std::size_t ticks = 0;
  std::size_t events = 0;
  double p95_latency_ms = 0.0;  // frame arrival to posterior availability
  std::optional<std::string> error;  // set when the source failed
};

using EventSink = std::function<void(const ActivityEvent&)>;
using TickObserver = std::function<void(const Tick&)>;

/// Reads the source on a producer thread into a bounded queue and classifies
/// on the calling thread. Stops at end of stream, on source failure, or when
/// *stop becomes true.
StreamSummary run_stream(FrameSource& source, const ModelConfig& model, const ParameterSet& params,
                         const StreamConfig& config, const EventSink& sink,
                         const TickObserver& on_tick = {}, const std::atomic<bool>* stop = nullptr);

/// 95th percentile by nearest rank; 0 for an empty sample.
double percentile95(std::vector<double> values);

}  // namespace mrha
