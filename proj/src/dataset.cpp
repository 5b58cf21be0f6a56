#include "mrha/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <cmath>
#include <map>
#include <numbers>
#include <random>

namespace mrha {

LabeledSample make_sample(const SkeletonSequence& seq, const PipelineOptions& options,
                          const std::string& source) {
  if (!seq.label) throw ContractError("sequence has no label: " + source);
  const SkeletonSequence resampled = resample_fps(seq, options.target_fps);
  LabeledSample sample;
  sample.frames = rasterize_sequence(resampled.frames, options.grid);
  sample.label = *seq.label;
  sample.provenance = {seq.subject_id, seq.camera_id, source};
  return sample;
}

std::string to_string(SplitMode mode) {
  return mode == SplitMode::CrossSubject ? "cross-subject" : "cross-view";
}

SplitMode parse_split_mode(const std::string& text) {
  if (text == "cross-subject" || text == "cross_subject") return SplitMode::CrossSubject;
  if (text == "cross-view" || text == "cross_view") return SplitMode::CrossView;
  throw ConfigError("unknown split mode '" + text + "' (expected cross-subject or cross-view)");
}

SplitResult split_dataset(const std::vector<Provenance>& samples, SplitMode mode,
                          double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ContractError("train fraction must lie in (0, 1)");
  }
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const int key = mode == SplitMode::CrossSubject ? samples[i].subject_id : samples[i].camera_id;
    groups[key].push_back(i);
  }
  if (groups.size() < 2) {
    throw ContractError("split impossible: need at least two " +
                        std::string(mode == SplitMode::CrossSubject ? "subjects" : "cameras"));
  }
  std::vector<int> order;
  for (const auto& [key, members] : groups) order.push_back(key);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const double target = train_fraction * static_cast<double>(samples.size());
  std::vector<int> train_keys, test_keys;
  double taken = 0.0;
  for (std::size_t g = 0; g < order.size(); ++g) {
    const double size = static_cast<double>(groups[order[g]].size());
    const bool last_for_test = test_keys.empty() && g + 1 == order.size();
    const bool closer = std::abs(taken + size - target) < std::abs(taken - target);
    if (!last_for_test && (closer || train_keys.empty())) {
      train_keys.push_back(order[g]);
      taken += size;
    } else {
      test_keys.push_back(order[g]);
    }
  }

  SplitResult out;
  for (int k : train_keys) out.train.insert(out.train.end(), groups[k].begin(), groups[k].end());
  for (int k : test_keys) out.test.insert(out.test.end(), groups[k].begin(), groups[k].end());
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  std::sort(train_keys.begin(), train_keys.end());
  std::sort(test_keys.begin(), test_keys.end());
  out.train_groups = std::move(train_keys);
  out.test_groups = std::move(test_keys);
  return out;
}

// ---------------------------------------------------------------- synthetic motion

namespace {

using Pose = std::array<Joint, kJointCount>;
constexpr double kPi = std::numbers::pi;

enum J : std::size_t {
  kSpineBase, kSpineMid, kNeck, kHead,
  kLShoulder, kLElbow, kLWrist, kLHand,
  kRShoulder, kRElbow, kRWrist, kRHand,
  kLHip, kLKnee, kLAnkle, kLFoot,
  kRHip, kRKnee, kRAnkle, kRFoot,
  kSpineShoulder, kLHandTip, kLThumb, kRHandTip, kRThumb,
};

Joint operator+(Joint a, Joint b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
Joint operator-(Joint a, Joint b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
Joint operator*(double s, Joint a) { return {s * a.x, s * a.y, s * a.z}; }

// Standing pose facing the camera, feet on y = 0, +x on the subject's left.
Pose rest_pose(double scale) {
  Pose p{};
  p[kSpineBase] = {0, 1.00, 0};
  p[kSpineMid] = {0, 1.25, 0};
  p[kNeck] = {0, 1.55, 0};
  p[kHead] = {0, 1.70, 0};
  p[kSpineShoulder] = {0, 1.48, 0};
  const std::pair<std::size_t, Joint> left[] = {
      {kLShoulder, {0.19, 1.47, 0}}, {kLElbow, {0.24, 1.20, 0}}, {kLWrist, {0.26, 0.97, 0}},
      {kLHand, {0.27, 0.90, 0}},     {kLHandTip, {0.28, 0.82, 0}}, {kLThumb, {0.23, 0.90, 0}},
      {kLHip, {0.10, 0.98, 0}},      {kLKnee, {0.11, 0.55, 0}},  {kLAnkle, {0.12, 0.10, 0}},
      {kLFoot, {0.12, 0.03, -0.08}},
  };
  const std::size_t mirror[] = {kRShoulder, kRElbow, kRWrist, kRHand, kRHandTip,
                                kRThumb,    kRHip,   kRKnee,  kRAnkle, kRFoot};
  for (std::size_t i = 0; i < std::size(left); ++i) {
    p[left[i].first] = left[i].second;
    p[mirror[i]] = {-left[i].second.x, left[i].second.y, left[i].second.z};
  }
  for (Joint& j : p) j = scale * j;
  return p;
}

// Puts the hand of one arm at target and bends the elbow outward.
void place_arm(Pose& p, bool left, Joint target) {
  const double side = left ? 1.0 : -1.0;
  const std::size_t sh = left ? kLShoulder : kRShoulder, el = left ? kLElbow : kRElbow,
                    wr = left ? kLWrist : kRWrist, ha = left ? kLHand : kRHand,
                    tip = left ? kLHandTip : kRHandTip, th = left ? kLThumb : kRThumb;
  const Joint elbow = 0.5 * (p[sh] + target) + Joint{side * 0.10, -0.06, 0.03};
  p[el] = elbow;
  p[ha] = target;
  p[wr] = target + 0.2 * (elbow - target);
  p[tip] = target + 0.6 * (target - p[wr]);
  p[th] = target + Joint{-side * 0.04, 0.02, -0.02};
}

bool upper_body(std::size_t j) {
  return j == kSpineMid || j == kNeck || j == kHead || (j >= kLShoulder && j <= kRHand) ||
         j >= kSpineShoulder;
}

// Forward bend of the upper body about the spine base (toward the camera).
void bend_forward(Pose& p, double angle) {
  const Joint pivot = p[kSpineBase];
  const double c = std::cos(angle), s = std::sin(angle);
  for (std::size_t j = 0; j < kJointCount; ++j) {
    if (!upper_body(j)) continue;
    const Joint d = p[j] - pivot;
    p[j] = pivot + Joint{d.x, c * d.y + s * d.z, -s * d.y + c * d.z};
  }
}

// Sideways tilt of the whole body about the point between the feet.
void tilt_sideways(Pose& p, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  for (Joint& j : p) j = {c * j.x - s * j.y, s * j.x + c * j.y, j.z};
}

void shift(Pose& p, Joint by) {
  for (Joint& j : p) j = j + by;
}

void move_head(Pose& p, Joint by) {
  p[kHead] = p[kHead] + by;
  p[kNeck] = p[kNeck] + 0.5 * by;
}

double pulse(double s, double centre, double width) {
  const double u = (s - centre) / width;
  return std::exp(-u * u);
}

Pose class_pose(std::size_t cls, double t, double s, const MotionParams& m) {
  const double a = m.amplitude, ph = m.phase;
  Pose p = rest_pose(m.body_scale);
  const double k = m.body_scale;
  const Joint head = p[kHead], neck = p[kNeck], chest = p[kSpineShoulder];
  switch (cls) {
    case 0: {  // sneeze/cough: two sharp head impulses, hand at mouth
      const double g = pulse(s, 0.35, 0.06) + pulse(s, 0.7, 0.06);
      place_arm(p, false, head + Joint{0.0, -0.12 * k, -0.10 * k});
      move_head(p, {0.0, -0.06 * a * g, -0.05 * a * g});
      bend_forward(p, 0.45 * a * g);
      break;
    }
    case 1: {  // staggering: lateral sway with tilt, arms out for balance
      const double w = std::sin(2 * kPi * 0.8 * t + ph);
      place_arm(p, true, p[kLShoulder] + Joint{0.35 * k, -0.25 * k, 0});
      place_arm(p, false, p[kRShoulder] + Joint{-0.35 * k, -0.25 * k, 0});
      tilt_sideways(p, 0.18 * a * w);
      shift(p, {0.25 * a * w, 0, 0});
      break;
    }
    case 2: {  // falling down: progressive sideways topple and drop
      const double theta = 1.3 * std::clamp(a, 0.8, 1.2) * s;
      place_arm(p, true, p[kLShoulder] + Joint{0.25 * k, -0.05 * k * s, 0});
      tilt_sideways(p, theta);
      shift(p, {0.2 * s, -0.3 * s * s, 0});
      break;
    }
    case 3: {  // headache: both hands on the head, slow sway
      place_arm(p, true, head + Joint{0.10 * k, 0, 0});
      place_arm(p, false, head + Joint{-0.10 * k, 0, 0});
      move_head(p, {0.04 * a * std::sin(2 * kPi * 0.6 * t + ph), 0, 0});
      break;
    }
    case 4: {  // chest pain: hands on chest, hunching
      place_arm(p, true, chest + Joint{0.04 * k, -0.08 * k, -0.12 * k});
      place_arm(p, false, chest + Joint{-0.04 * k, -0.08 * k, -0.12 * k});
      bend_forward(p, (0.35 + 0.15 * std::sin(2 * kPi * 0.7 * t + ph)) * a);
      break;
    }
    case 5: {  // back pain: hand on lower back, rocking bend
      place_arm(p, false, p[kSpineBase] + Joint{-0.12 * k, 0.12 * k, 0.15 * k});
      place_arm(p, true, p[kLHip] + Joint{0.08 * k, 0.02 * k, 0});
      bend_forward(p, 0.3 * a * (1.0 + std::sin(2 * kPi * 0.5 * t + ph)));
      break;
    }
    case 6: {  // neck pain: hand on neck, head rolling side to side
      place_arm(p, false, neck + Joint{-0.06 * k, 0, 0.06 * k});
      move_head(p, {0.08 * a * std::sin(2 * kPi * 0.7 * t + ph), 0, 0});
      break;
    }
    case 7: {  // vomiting: deep bend, hand at mouth, heaving
      place_arm(p, true, head + Joint{0.0, -0.12 * k, -0.10 * k});
      place_arm(p, false, p[kSpineMid] + Joint{0.0, 0.0, -0.15 * k});
      move_head(p, {0, -0.05 * a, 0});
      bend_forward(p, (0.8 + 0.15 * std::sin(2 * kPi * 1.2 * t + ph)) * a);
      break;
    }
    case 8: {  // fan self: fast hand oscillation in front of the face
      const double w = std::sin(2 * kPi * 3.0 * t + ph);
      place_arm(p, false, head + Joint{(-0.12 + 0.12 * a * w) * k, -0.05 * k, -0.20 * k});
      break;
    }
    case 9: {  // yawn: hand to mouth mid-sequence, head tipped back
      const double g = pulse(s, 0.55, 0.2);
      const Joint rest_hand = p[kRHand];
      place_arm(p, false, rest_hand + g * (head + Joint{0, -0.12 * k, -0.10 * k} - rest_hand));
      move_head(p, {0, 0.03 * a * g, 0.05 * a * g});
      break;
    }
    case 10: {  // stretch oneself: both arms sweep overhead and back
      const double e = std::sin(kPi * s) * std::clamp(a, 0.8, 1.2);
      for (bool left : {true, false}) {
        const Joint sh = p[left ? kLShoulder : kRShoulder];
        const double side = left ? 1.0 : -1.0;
        const double ang = -kPi / 2 + e * kPi * 0.95;  // 0 = horizontal
        place_arm(p, left, sh + Joint{side * 0.55 * k * std::cos(ang) * 0.6,
                                      0.55 * k * std::sin(ang), 0});
      }
      break;
    }
    case 11: {  // blow nose: both hands at the nose, small pumping
      const double w = 0.02 * a * std::sin(2 * kPi * 2.0 * t + ph);
      place_arm(p, true, head + Joint{0.03 * k, -0.06 * k + w, -0.12 * k});
      place_arm(p, false, head + Joint{-0.03 * k, -0.06 * k + w, -0.12 * k});
      break;
    }
    default:
      throw ContractError("class index out of range");
  }
  return p;
}

// Rotates the body about the vertical axis for the camera angle and places it
// 3 m in front of the sensor.
Pose view_from_camera(const Pose& p, int camera_id) {
  const double angle = (camera_id - 2) * kPi / 6.0;
  const double c = std::cos(angle), s = std::sin(angle);
  Pose out;
  for (std::size_t j = 0; j < kJointCount; ++j) {
    const Joint& q = p[j];
    out[j] = {c * q.x + s * q.z, q.y - 1.0, -s * q.x + c * q.z + 3.0};
  }
  return out;
}

}  // namespace

SkeletonSequence synthesize_sequence(std::size_t class_index, const MotionParams& params) {
  if (class_index >= kClassCount) throw ContractError("class index out of range");
  if (!(params.duration > 0.0) || !(params.fps > 0.0)) {
    throw ContractError("duration and fps must be positive");
  }
  SkeletonSequence seq;
  seq.source_fps = params.fps;
  seq.subject_id = params.subject_id;
  seq.camera_id = params.camera_id;
  seq.label = class_index;
  const auto count = static_cast<std::size_t>(std::lround(params.duration * params.fps));
  for (std::size_t i = 0; i < std::max<std::size_t>(count, 1); ++i) {
    const double t = static_cast<double>(i) / params.fps;
    const double s = count > 1 ? static_cast<double>(i) / static_cast<double>(count - 1) : 0.0;
    SkeletonFrame frame;
    frame.timestamp = t;
    frame.joints = view_from_camera(class_pose(class_index, t, s, params), params.camera_id);
    seq.frames.push_back(frame);
  }
  return seq;
}

std::vector<SkeletonSequence> generate_synthetic_corpus(std::size_t samples_per_class,
                                                        std::uint64_t seed) {
  if (samples_per_class == 0) throw ContractError("samples_per_class must be at least 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> amplitude(0.8, 1.2), phase(0.0, 2 * kPi),
      duration(2.0, 3.0);
  std::vector<SkeletonSequence> corpus;
  corpus.reserve(kClassCount * samples_per_class);
  for (std::size_t c = 0; c < kClassCount; ++c) {
    for (std::size_t j = 0; j < samples_per_class; ++j) {
      MotionParams m;
      m.subject_id = static_cast<int>(j % 10) + 1;
      m.camera_id = static_cast<int>(j % 3) + 1;
      m.body_scale = 0.9 + 0.02 * static_cast<double>(m.subject_id);
      m.amplitude = amplitude(rng);
      m.phase = phase(rng);
      m.duration = duration(rng);
      corpus.push_back(synthesize_sequence(c, m));
    }
  }
  return corpus;
}

// ---------------------------------------------------------------- manifest

std::vector<ManifestEntry> write_corpus(const std::string& dir,
                                        const std::vector<SkeletonSequence>& corpus) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir + ": " + ec.message());
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const SkeletonSequence& seq = corpus[i];
    if (!seq.label) throw ContractError("corpus sequences must be labeled");
    char name[64];
    std::snprintf(name, sizeof name, "%04zu_%s_s%02d_c%d.jsonl", i,
                  label_at(*seq.label).class_code.c_str(), seq.subject_id, seq.camera_id);
    save_sequence_file((std::filesystem::path(dir) / name).string(), seq);
    entries.push_back({name, *seq.label, seq.subject_id, seq.camera_id});
  }
  const std::string manifest = (std::filesystem::path(dir) / "manifest.csv").string();
  std::ofstream out(manifest, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + manifest);
  out << "file,label,subject,camera\n";
  for (const ManifestEntry& e : entries) {
    out << e.file << ',' << label_at(e.label).class_code << ',' << e.subject_id << ','
        << e.camera_id << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + manifest);
  return entries;
}

std::vector<ManifestEntry> read_manifest(const std::string& dir) {
  const std::string path = (std::filesystem::path(dir) / "manifest.csv").string();
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (number == 1) {
      if (line != "file,label,subject,camera") throw ParseError(1, "unexpected manifest header");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream row(line);
    for (std::string cell; std::getline(row, cell, ',');) cells.push_back(cell);
    if (cells.size() != 4) throw ParseError(number, "expected 4 columns");
    ManifestEntry e;
    e.file = cells[0];
    try {
      e.label = class_index(cells[1]);
      e.subject_id = std::stoi(cells[2]);
      e.camera_id = std::stoi(cells[3]);
    } catch (const std::exception& ex) {
      throw ParseError(number, std::string("bad manifest row: ") + ex.what());
    }
    entries.push_back(e);
  }
  if (number == 0) throw ParseError(0, "empty manifest " + path);
  return entries;
}

}  // namespace mrha
