#pragma once

// Skeleton sequences: labels, JSONL interchange, frame-rate resampling and
// rasterization to grayscale grids.

#include <array>
#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mrha/tensor.hpp"

namespace mrha {

inline constexpr std::size_t kJointCount = 25;
inline constexpr std::size_t kClassCount = 12;

struct ActivityLabel {
  std::string class_code;    // "A41"
  std::string display_name;  // "sneeze/cough"
  bool critical = false;

  friend bool operator==(const ActivityLabel&, const ActivityLabel&) = default;
};

/// The closed label set in class-index order: A41..A49, A103..A105.
const std::vector<ActivityLabel>& activity_labels();
const ActivityLabel& label_at(std::size_t class_index);
/// Throws ConfigError for codes outside the set.
std::size_t class_index(const std::string& class_code);
/// Class indices flagged critical by default.
std::vector<std::size_t> default_critical_classes();

struct Joint {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend bool operator==(const Joint&, const Joint&) = default;
};

struct SkeletonFrame {
  double timestamp = 0.0;
  std::array<Joint, kJointCount> joints{};
  std::array<double, kJointCount> confidence = filled_confidence();

  /// Throws DimensionError on non-finite coordinates or confidence outside [0,1].
  void validate() const;
  bool active(std::size_t joint) const { return confidence[joint] > 0.0; }

  friend bool operator==(const SkeletonFrame&, const SkeletonFrame&) = default;

 private:
  static std::array<double, kJointCount> filled_confidence() {
    std::array<double, kJointCount> c;
    c.fill(1.0);
    return c;
  }
};

struct SkeletonSequence {
  std::vector<SkeletonFrame> frames;
  double source_fps = 24.0;
  int subject_id = 0;
  int camera_id = 0;
  std::optional<std::size_t> label;  // class index

  /// Nonempty, strictly increasing timestamps, positive fps, valid frames.
  void validate() const;
  double duration() const { return static_cast<double>(frames.size()) / source_fps; }

  friend bool operator==(const SkeletonSequence&, const SkeletonSequence&) = default;
};

// JSONL: an optional header {"fps":24,"subject":1,"camera":1,"label":"A43"}
// followed by one {"t":..,"joints":[[x,y,z]x25],"conf":[..x25]} per line.
// Errors are ParseError carrying the 1-based line number.
SkeletonSequence parse_sequence(std::istream& in);
SkeletonSequence parse_sequence_file(const std::string& path);
/// Parses a single frame record; line is used for error messages only.
SkeletonFrame parse_frame_line(const std::string& text, std::size_t line = 1);
std::string frame_to_json(const SkeletonFrame& frame);
void write_sequence(std::ostream& out, const SkeletonSequence& seq);
void save_sequence_file(const std::string& path, const SkeletonSequence& seq);

/// Source indices chosen for each target tick: nearest timestamp to
/// t0 + k/target_fps, ties to the earlier frame, ceil(duration*target_fps)
/// ticks. Throws ContractError when target_fps exceeds the source rate.
std::vector<std::size_t> resample_indices(const SkeletonSequence& seq, double target_fps);
SkeletonSequence resample_fps(const SkeletonSequence& seq, double target_fps);

/// Incremental form of resample_fps for live sources. push() returns the
/// frames whose nearest-neighbour choice became final; finish() flushes the
/// ticks that fall inside the stream's nominal duration.
class OnlineResampler {
 public:
  OnlineResampler(double source_fps, double target_fps);
  std::vector<SkeletonFrame> push(const SkeletonFrame& frame);
  std::vector<SkeletonFrame> finish();
  std::size_t emitted() const { return next_tick_; }

 private:
  double tick_time(std::size_t k) const;

  double source_fps_;
  double target_fps_;
  std::optional<double> origin_;
  std::optional<SkeletonFrame> previous_;
  std::size_t received_ = 0;
  std::size_t next_tick_ = 0;
};

using BoneList = std::vector<std::pair<std::size_t, std::size_t>>;  // 0-based joints

/// The 24 bones of the 25-joint Kinect v2 skeleton.
const BoneList& ntu_bones();

/// Per-sequence x/y bounds of active joints.
struct RasterBox {
  double min_x = 0.0, max_x = 0.0;
  double min_y = 0.0, max_y = 0.0;

  bool degenerate() const { return !(max_x > min_x) || !(max_y > min_y); }
};

/// Throws ContractError when no frame has an active joint.
RasterBox raster_box(const std::vector<SkeletonFrame>& frames);

/// Joints at intensity 1.0 and bones at 0.5 inside the [0.1, 0.9] box of a
/// G x G grid, image rows growing downward. A zero-extent axis maps to the
/// box centre and sets *degenerate. Throws ContractError when the frame has
/// no active joint.
Tensor rasterize_frame(const SkeletonFrame& frame, std::size_t grid, const RasterBox& box,
                       const BoneList& bones = ntu_bones(), bool* degenerate = nullptr);

/// Rasterizes every frame against the bounds of the whole sequence.
std::vector<Tensor> rasterize_sequence(const std::vector<SkeletonFrame>& frames, std::size_t grid,
                                       const BoneList& bones = ntu_bones(),
                                       bool* degenerate = nullptr);

/// Integer Bresenham line including both endpoints.
std::vector<std::pair<long, long>> bresenham(long x0, long y0, long x1, long y1);

}  // namespace mrha
