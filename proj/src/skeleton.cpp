#include "mrha/skeleton.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "json.hpp"

namespace mrha {

using nlohmann::json;

const std::vector<ActivityLabel>& activity_labels() {
  static const std::vector<ActivityLabel> labels{
      {"A41", "sneeze/cough", false},     {"A42", "staggering", true},
      {"A43", "falling down", true},      {"A44", "headache", false},
      {"A45", "chest pain", true},        {"A46", "back pain", false},
      {"A47", "neck pain", false},        {"A48", "vomiting", true},
      {"A49", "fan self", false},         {"A103", "yawn", false},
      {"A104", "stretch oneself", false}, {"A105", "blow nose", false},
  };
  return labels;
}

const ActivityLabel& label_at(std::size_t class_index) {
  if (class_index >= kClassCount) {
    throw ContractError("class index " + std::to_string(class_index) + " out of range");
  }
  return activity_labels()[class_index];
}

std::size_t class_index(const std::string& class_code) {
  const auto& labels = activity_labels();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].class_code == class_code) return i;
  }
  throw ConfigError("unknown activity class '" + class_code + "'");
}

std::vector<std::size_t> default_critical_classes() {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < kClassCount; ++i) {
    if (activity_labels()[i].critical) out.push_back(i);
  }
  return out;
}

void SkeletonFrame::validate() const {
  if (!std::isfinite(timestamp)) throw DimensionError("non-finite timestamp");
  for (std::size_t j = 0; j < kJointCount; ++j) {
    const Joint& p = joints[j];
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
      throw DimensionError("joint " + std::to_string(j + 1) + " has a non-finite coordinate");
    }
    if (!(confidence[j] >= 0.0 && confidence[j] <= 1.0)) {
      throw DimensionError("joint " + std::to_string(j + 1) + " confidence outside [0,1]");
    }
  }
}

void SkeletonSequence::validate() const {
  if (frames.empty()) throw DimensionError("skeleton sequence is empty");
  if (!(source_fps > 0.0) || !std::isfinite(source_fps)) {
    throw DimensionError("source fps must be positive");
  }
  for (std::size_t i = 0; i < frames.size(); ++i) {
    frames[i].validate();
    if (i > 0 && !(frames[i].timestamp > frames[i - 1].timestamp)) {
      throw DimensionError("timestamps not strictly increasing at frame " + std::to_string(i));
    }
  }
  if (label && *label >= kClassCount) throw DimensionError("label index out of range");
}

// ---------------------------------------------------------------- JSONL

namespace {

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed,
                         std::size_t line) {
  for (const auto& item : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(),
                     [&](const char* k) { return item.key() == k; })) {
      throw ParseError(line, "unknown key '" + item.key() + "'");
    }
  }
}

double number_at(const json& v, std::size_t line, const std::string& what) {
  if (!v.is_number()) throw ParseError(line, what + " must be a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw ParseError(line, what + " must be finite");
  return d;
}

SkeletonFrame frame_from_json(const json& obj, std::size_t line) {
  if (!obj.is_object()) throw ParseError(line, "frame record must be an object");
  reject_unknown_keys(obj, {"t", "joints", "conf"}, line);
  if (!obj.contains("t")) throw ParseError(line, "missing \"t\"");
  if (!obj.contains("joints")) throw ParseError(line, "missing \"joints\"");
  SkeletonFrame frame;
  frame.timestamp = number_at(obj["t"], line, "t");
  const json& joints = obj["joints"];
  if (!joints.is_array() || joints.size() != kJointCount) {
    throw ParseError(line, "expected 25 joints, got " +
                               std::to_string(joints.is_array() ? joints.size() : 0));
  }
  for (std::size_t j = 0; j < kJointCount; ++j) {
    const json& p = joints[j];
    const std::string name = "joint " + std::to_string(j + 1);
    if (!p.is_array() || p.size() != 3) throw ParseError(line, name + " must be [x,y,z]");
    frame.joints[j] = {number_at(p[0], line, name), number_at(p[1], line, name),
                       number_at(p[2], line, name)};
  }
  if (obj.contains("conf")) {
    const json& conf = obj["conf"];
    if (!conf.is_array() || conf.size() != kJointCount) {
      throw ParseError(line, "expected 25 confidences");
    }
    for (std::size_t j = 0; j < kJointCount; ++j) {
      const double c = number_at(conf[j], line, "confidence");
      if (c < 0.0 || c > 1.0) throw ParseError(line, "confidence outside [0,1]");
      frame.confidence[j] = c;
    }
  }
  return frame;
}

json parse_json_line(const std::string& text, std::size_t line) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(line, std::string("malformed JSON: ") + e.what());
  }
}

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace

SkeletonFrame parse_frame_line(const std::string& text, std::size_t line) {
  return frame_from_json(parse_json_line(text, line), line);
}

SkeletonSequence parse_sequence(std::istream& in) {
  SkeletonSequence seq;
  std::string text;
  std::size_t line = 0;
  bool seen_record = false;
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (blank(text)) continue;
    json obj = parse_json_line(text, line);
    if (!seen_record && obj.is_object() && obj.contains("fps")) {
      reject_unknown_keys(obj, {"fps", "subject", "camera", "label"}, line);
      seq.source_fps = number_at(obj["fps"], line, "fps");
      if (seq.source_fps <= 0.0) throw ParseError(line, "fps must be positive");
      if (obj.contains("subject")) {
        if (!obj["subject"].is_number_integer()) throw ParseError(line, "subject must be an integer");
        seq.subject_id = obj["subject"].get<int>();
      }
      if (obj.contains("camera")) {
        if (!obj["camera"].is_number_integer()) throw ParseError(line, "camera must be an integer");
        seq.camera_id = obj["camera"].get<int>();
      }
      if (obj.contains("label") && !obj["label"].is_null()) {
        if (!obj["label"].is_string()) throw ParseError(line, "label must be a class code");
        try {
          seq.label = class_index(obj["label"].get<std::string>());
        } catch (const ConfigError& e) {
          throw ParseError(line, e.what());
        }
      }
      seen_record = true;
      continue;
    }
    seen_record = true;
    SkeletonFrame frame = frame_from_json(obj, line);
    if (!seq.frames.empty() && !(frame.timestamp > seq.frames.back().timestamp)) {
      throw ParseError(line, "timestamp not strictly increasing");
    }
    seq.frames.push_back(frame);
  }
  if (seq.frames.empty()) throw ParseError(line, "no frames");
  return seq;
}

SkeletonSequence parse_sequence_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return parse_sequence(in);
}

std::string frame_to_json(const SkeletonFrame& frame) {
  json obj;
  obj["t"] = frame.timestamp;
  json joints = json::array();
  for (const Joint& p : frame.joints) joints.push_back({p.x, p.y, p.z});
  obj["joints"] = std::move(joints);
  if (std::any_of(frame.confidence.begin(), frame.confidence.end(),
                  [](double c) { return c != 1.0; })) {
    obj["conf"] = frame.confidence;
  }
  return obj.dump();
}

void write_sequence(std::ostream& out, const SkeletonSequence& seq) {
  json header;
  header["fps"] = seq.source_fps;
  header["subject"] = seq.subject_id;
  header["camera"] = seq.camera_id;
  if (seq.label) header["label"] = label_at(*seq.label).class_code;
  out << header.dump() << '\n';
  for (const SkeletonFrame& f : seq.frames) out << frame_to_json(f) << '\n';
}

void save_sequence_file(const std::string& path, const SkeletonSequence& seq) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_sequence(out, seq);
  if (!out) throw std::runtime_error("write failed for " + path);
}

// ---------------------------------------------------------------- resampling

namespace {

std::size_t tick_count(std::size_t frames, double source_fps, double target_fps) {
  // Guard against 20.000000000000004 rounding up to 21.
  const double exact = static_cast<double>(frames) * target_fps / source_fps;
  return static_cast<std::size_t>(std::ceil(exact - 1e-9));
}

void check_rates(double source_fps, double target_fps) {
  if (!(target_fps > 0.0)) throw ContractError("target fps must be positive");
  if (target_fps > source_fps) {
    throw ContractError("upsampling unsupported: target fps exceeds source fps");
  }
}

}  // namespace

std::vector<std::size_t> resample_indices(const SkeletonSequence& seq, double target_fps) {
  seq.validate();
  check_rates(seq.source_fps, target_fps);
  const std::size_t ticks = tick_count(seq.frames.size(), seq.source_fps, target_fps);
  const double t0 = seq.frames.front().timestamp;
  std::vector<std::size_t> out;
  out.reserve(ticks);
  std::size_t i = 0;
  for (std::size_t k = 0; k < ticks; ++k) {
    const double target = t0 + static_cast<double>(k) / target_fps;
    // Timestamps are increasing, so distance is unimodal; advance while the
    // next frame is strictly closer.
    while (i + 1 < seq.frames.size() &&
           std::abs(seq.frames[i + 1].timestamp - target) < std::abs(seq.frames[i].timestamp - target)) {
      ++i;
    }
    out.push_back(i);
  }
  return out;
}

SkeletonSequence resample_fps(const SkeletonSequence& seq, double target_fps) {
  const std::vector<std::size_t> picks = resample_indices(seq, target_fps);
  SkeletonSequence out = seq;
  out.source_fps = target_fps;
  out.frames.clear();
  const double t0 = seq.frames.front().timestamp;
  for (std::size_t k = 0; k < picks.size(); ++k) {
    SkeletonFrame f = seq.frames[picks[k]];
    f.timestamp = t0 + static_cast<double>(k) / target_fps;
    out.frames.push_back(f);
  }
  return out;
}

OnlineResampler::OnlineResampler(double source_fps, double target_fps)
    : source_fps_(source_fps), target_fps_(target_fps) {
  if (!(source_fps > 0.0)) throw ContractError("source fps must be positive");
  check_rates(source_fps, target_fps);
}

double OnlineResampler::tick_time(std::size_t k) const {
  return *origin_ + static_cast<double>(k) / target_fps_;
}

std::vector<SkeletonFrame> OnlineResampler::push(const SkeletonFrame& frame) {
  std::vector<SkeletonFrame> out;
  if (!origin_) origin_ = frame.timestamp;
  if (previous_ && !(frame.timestamp > previous_->timestamp)) {
    throw ContractError("frames must arrive in increasing timestamp order");
  }
  ++received_;
  // Tick k is final once a frame at or past its time has arrived: later
  // frames can only be farther away.
  while (tick_time(next_tick_) <= frame.timestamp) {
    const double target = tick_time(next_tick_);
    const bool take_previous =
        previous_ && std::abs(previous_->timestamp - target) <= std::abs(frame.timestamp - target);
    SkeletonFrame picked = take_previous ? *previous_ : frame;
    picked.timestamp = target;
    out.push_back(picked);
    ++next_tick_;
  }
  previous_ = frame;
  return out;
}

std::vector<SkeletonFrame> OnlineResampler::finish() {
  std::vector<SkeletonFrame> out;
  if (!previous_) return out;
  const std::size_t ticks = tick_count(received_, source_fps_, target_fps_);
  while (next_tick_ < ticks) {
    SkeletonFrame picked = *previous_;
    picked.timestamp = tick_time(next_tick_);
    out.push_back(picked);
    ++next_tick_;
  }
  return out;
}

// ---------------------------------------------------------------- rasterization

const BoneList& ntu_bones() {
  // 1-based (child, parent) pairs of the Kinect v2 joint tree.
  static const BoneList bones = [] {
    const std::pair<int, int> one_based[] = {
        {1, 2},   {2, 21},  {3, 21},  {4, 3},   {5, 21},  {6, 5},   {7, 6},   {8, 7},
        {9, 21},  {10, 9},  {11, 10}, {12, 11}, {13, 1},  {14, 13}, {15, 14}, {16, 15},
        {17, 1},  {18, 17}, {19, 18}, {20, 19}, {22, 8},  {23, 8},  {24, 12}, {25, 12},
    };
    BoneList out;
    for (auto [a, b] : one_based) {
      out.emplace_back(static_cast<std::size_t>(a - 1), static_cast<std::size_t>(b - 1));
    }
    return out;
  }();
  return bones;
}

RasterBox raster_box(const std::vector<SkeletonFrame>& frames) {
  RasterBox box;
  bool any = false;
  for (const SkeletonFrame& f : frames) {
    for (std::size_t j = 0; j < kJointCount; ++j) {
      if (!f.active(j)) continue;
      const Joint& p = f.joints[j];
      if (!any) {
        box = {p.x, p.x, p.y, p.y};
        any = true;
        continue;
      }
      box.min_x = std::min(box.min_x, p.x);
      box.max_x = std::max(box.max_x, p.x);
      box.min_y = std::min(box.min_y, p.y);
      box.max_y = std::max(box.max_y, p.y);
    }
  }
  if (!any) throw ContractError("no active joint to rasterize");
  return box;
}

std::vector<std::pair<long, long>> bresenham(long x0, long y0, long x1, long y1) {
  std::vector<std::pair<long, long>> out;
  const long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const long sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  long err = dx + dy;
  while (true) {
    out.emplace_back(x0, y0);
    if (x0 == x1 && y0 == y1) break;
    const long e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
  return out;
}

namespace {

struct PixelMap {
  long lo = 0, hi = 0;
  double min_x, span_x, min_y, span_y;

  long column(double x) const {
    if (!(span_x > 0.0)) return (lo + hi) / 2;
    return lo + std::lround((x - min_x) / span_x * static_cast<double>(hi - lo));
  }
  long row(double y) const {
    if (!(span_y > 0.0)) return (lo + hi) / 2;
    return hi - std::lround((y - min_y) / span_y * static_cast<double>(hi - lo));
  }
};

}  // namespace

Tensor rasterize_frame(const SkeletonFrame& frame, std::size_t grid, const RasterBox& box,
                       const BoneList& bones, bool* degenerate) {
  if (grid < 2) throw DimensionError("raster grid must be at least 2");
  if (std::none_of(frame.confidence.begin(), frame.confidence.end(),
                   [](double c) { return c > 0.0; })) {
    throw ContractError("frame has no active joint");
  }
  const double last = static_cast<double>(grid - 1);
  PixelMap map{std::lround(0.1 * last), std::lround(0.9 * last), box.min_x, box.max_x - box.min_x,
               box.min_y, box.max_y - box.min_y};
  if (degenerate && box.degenerate()) *degenerate = true;

  Tensor image({1, grid, grid});
  auto plot = [&](long x, long y, double value) {
    // Joints outside the sequence box cannot occur when the box came from the
    // same frames, but clip anyway for caller-supplied boxes.
    if (x < 0 || y < 0 || x >= static_cast<long>(grid) || y >= static_cast<long>(grid)) return;
    double& px = image.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
    px = std::max(px, value);
  };
  for (auto [a, b] : bones) {
    if (a >= kJointCount || b >= kJointCount) throw ContractError("bone joint index out of range");
    if (!frame.active(a) || !frame.active(b)) continue;
    for (auto [x, y] : bresenham(map.column(frame.joints[a].x), map.row(frame.joints[a].y),
                                 map.column(frame.joints[b].x), map.row(frame.joints[b].y))) {
      plot(x, y, 0.5);
    }
  }
  for (std::size_t j = 0; j < kJointCount; ++j) {
    if (frame.active(j)) plot(map.column(frame.joints[j].x), map.row(frame.joints[j].y), 1.0);
  }
  return image;
}

std::vector<Tensor> rasterize_sequence(const std::vector<SkeletonFrame>& frames, std::size_t grid,
                                       const BoneList& bones, bool* degenerate) {
  const RasterBox box = raster_box(frames);
  std::vector<Tensor> out;
  out.reserve(frames.size());
  for (const SkeletonFrame& f : frames) out.push_back(rasterize_frame(f, grid, box, bones, degenerate));
  return out;
}

}  // namespace mrha
