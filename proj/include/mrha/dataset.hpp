#pragma once

// Labeled raster samples, subject/camera splits and the parametric motion
// corpus used for desk-scale training.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mrha/skeleton.hpp"
#include "mrha/tensor.hpp"

namespace mrha {

struct Provenance {
  int subject_id = 0;
  int camera_id = 0;
  std::string source;
};

struct LabeledSample {
  std::vector<Tensor> frames;  // each [1, G, G], pixels in [0, 1]
  std::size_t label = 0;
  Provenance provenance;
};

struct PipelineOptions {
  std::size_t grid = 32;
  double target_fps = 10.0;
};

/// Resamples to the target rate and rasterizes with sequence-level bounds.
/// Throws ContractError when the sequence carries no label.
LabeledSample make_sample(const SkeletonSequence& seq, const PipelineOptions& options,
                          const std::string& source = "");

enum class SplitMode { CrossSubject, CrossView };

std::string to_string(SplitMode mode);
/// Accepts "cross-subject"/"cross_subject" and "cross-view"/"cross_view".
SplitMode parse_split_mode(const std::string& text);

struct SplitResult {
  std::vector<std::size_t> train;  // sample indices, ascending
  std::vector<std::size_t> test;
  std::vector<int> train_groups;   // subject or camera ids, ascending
  std::vector<int> test_groups;
};

/// Whole groups (subjects or cameras) go to one side. Groups are visited in a
/// seeded random order and added to the training side whenever that moves its
/// size closer to train_fraction * N; each side keeps at least one group.
/// Throws ContractError with fewer than two groups.
SplitResult split_dataset(const std::vector<Provenance>& samples, SplitMode mode,
                          double train_fraction, std::uint64_t seed);

/// Knobs of one synthetic recording.
struct MotionParams {
  double duration = 2.5;   // seconds
  double fps = 24.0;
  double amplitude = 1.0;  // scales the class motion
  double phase = 0.0;      // radians, shifts periodic motions
  double body_scale = 1.0;
  int subject_id = 1;
  int camera_id = 1;       // 1..3 view the body at -30, 0, +30 degrees
};

/// One recording of class_index. Deterministic in its arguments.
SkeletonSequence synthesize_sequence(std::size_t class_index, const MotionParams& params);

/// samples_per_class recordings of each of the 12 classes, class-major.
/// Within a class, sample j gets subject j % 10 + 1 and camera j % 3 + 1;
/// amplitude, phase and duration are jittered from the seed.
std::vector<SkeletonSequence> generate_synthetic_corpus(std::size_t samples_per_class,
                                                        std::uint64_t seed);

/// One row of a corpus manifest.csv (file,label,subject,camera); file is
/// relative to the manifest directory and label a class code.
struct ManifestEntry {
  std::string file;
  std::size_t label = 0;
  int subject_id = 0;
  int camera_id = 0;
};

/// Writes each labeled sequence as JSONL into dir (created if missing) plus
/// manifest.csv. Throws std::runtime_error when dir is not writable.
std::vector<ManifestEntry> write_corpus(const std::string& dir,
                                        const std::vector<SkeletonSequence>& corpus);
/// Reads dir/manifest.csv. Throws ParseError on a malformed row.
std::vector<ManifestEntry> read_manifest(const std::string& dir);

}  // namespace mrha
