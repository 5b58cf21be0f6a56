#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "mrha/skeleton.hpp"

namespace mrha::test {

/// Joint coordinates of 16 time-normalized frames, concatenated.
inline std::vector<double> trajectory_features(const SkeletonSequence& seq) {
  constexpr std::size_t kSteps = 16;
  std::vector<double> out;
  for (std::size_t k = 0; k < kSteps; ++k) {
    const std::size_t i = k * (seq.frames.size() - 1) / (kSteps - 1);
    for (const Joint& j : seq.frames[i].joints) {
      out.push_back(j.x);
      out.push_back(j.y);
      out.push_back(j.z);
    }
  }
  return out;
}

/// 1-nearest-neighbour accuracy under Euclidean distance on raw trajectories.
inline double nearest_neighbour_accuracy(const std::vector<SkeletonSequence>& corpus,
                                         const std::vector<std::size_t>& train,
                                         const std::vector<std::size_t>& test) {
  std::vector<std::vector<double>> features;
  for (const SkeletonSequence& s : corpus) features.push_back(trajectory_features(s));
  std::size_t correct = 0;
  for (std::size_t q : test) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_label = 0;
    for (std::size_t r : train) {
      double d = 0.0;
      for (std::size_t i = 0; i < features[q].size(); ++i) {
        const double diff = features[q][i] - features[r][i];
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        best_label = *corpus[r].label;
      }
    }
    correct += best_label == *corpus[q].label;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

}  // namespace mrha::test
