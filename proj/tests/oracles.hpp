#pragma once

// Straight-line reference implementations shared by the unit and acceptance
// tests. They avoid the library's tensor kernels and autodiff entirely.

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <vector>

#include "mrha/model.hpp"
#include "mrha/stream.hpp"
#include "mrha/train.hpp"
#include "test_util.hpp"

namespace mrha::test {

inline double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// One output pixel of a stride-1 "same" convolution with odd kernel, no bias.
inline double same_conv_at(const Tensor& x, const Tensor& k, std::size_t co, std::size_t y,
                    std::size_t xx) {
  const long half = static_cast<long>(k.dim(2) / 2);
  double acc = 0.0;
  for (std::size_t ci = 0; ci < x.dim(0); ++ci)
    for (long dy = -half; dy <= half; ++dy)
      for (long dx = -half; dx <= half; ++dx) {
        const long iy = static_cast<long>(y) + dy, ix = static_cast<long>(xx) + dx;
        if (iy < 0 || ix < 0 || iy >= static_cast<long>(x.dim(1)) ||
            ix >= static_cast<long>(x.dim(2)))
          continue;
        acc += k[((co * x.dim(0) + ci) * k.dim(2) + static_cast<std::size_t>(dy + half)) *
                     k.dim(3) +
                 static_cast<std::size_t>(dx + half)] *
               x.at(ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
      }
  return acc;
}

// Per-pixel evaluation of the gate equations:
//   f = σ(Wxf*X + Whf*H + bf), i = σ(...), o = σ(...)
//   C' = f⊙C + i⊙tanh(Wxc*X + Whc*H + bc),  H' = o⊙tanh(C')
inline ConvLstmState oracle_convlstm(const Tensor& x, const ConvLstmState& s, const ConvLstmParams& p,
                              ConvLstmGates* gates = nullptr) {
  const std::size_t hc = p.hidden_channels, h = x.dim(1), w = x.dim(2);
  ConvLstmState out = ConvLstmState::zeros(hc, h, w);
  if (gates) *gates = {Tensor({hc, h, w}), Tensor({hc, h, w}), Tensor({hc, h, w}), Tensor({hc, h, w})};
  for (std::size_t c = 0; c < hc; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) {
        double pre[4];
        for (std::size_t g = 0; g < 4; ++g) {
          pre[g] = same_conv_at(x, p.input_kernels[g], c, y, xx) +
                   same_conv_at(s.hidden, p.hidden_kernels[g], c, y, xx) + p.biases[g][c];
        }
        const double f = sig(pre[0]), i = sig(pre[1]), g = std::tanh(pre[2]), o = sig(pre[3]);
        const double cell = f * s.cell.at(c, y, xx) + i * g;
        out.cell.at(c, y, xx) = cell;
        out.hidden.at(c, y, xx) = o * std::tanh(cell);
        if (gates) {
          gates->forget.at(c, y, xx) = f;
          gates->input.at(c, y, xx) = i;
          gates->candidate.at(c, y, xx) = g;
          gates->output.at(c, y, xx) = o;
        }
      }
  return out;
}

inline ConvLstmParams random_lstm(std::size_t in_c, std::size_t hc, std::size_t k, std::mt19937_64& rng,
                           double scale = 0.5) {
  ConvLstmParams p;
  p.hidden_channels = hc;
  for (std::size_t g = 0; g < 4; ++g) {
    p.input_kernels[g] = random_tensor({hc, in_c, k, k}, rng, -scale, scale);
    p.hidden_kernels[g] = random_tensor({hc, hc, k, k}, rng, -scale, scale);
    p.biases[g] = random_tensor({hc}, rng, -scale, scale);
  }
  return p;
}

// Scalar references for f(w) = (w - 3)^2, written without the library.
inline double reference_run(OptimizerKind kind, double lr, int steps) {
  double w = 0.0, m = 0.0, v = 0.0, acc = 0.0;
  for (int t = 1; t <= steps; ++t) {
    const double g = 2.0 * (w - 3.0);
    switch (kind) {
      case OptimizerKind::Adam: {
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
        w -= lr * mh / (std::sqrt(vh) + 1e-8);
        break;
      }
      case OptimizerKind::Sgd:
        w -= lr * g;
        break;
      case OptimizerKind::RmsProp:
        acc = 0.9 * acc + 0.1 * g * g;
        w -= lr * g / (std::sqrt(acc) + 1e-8);
        break;
      case OptimizerKind::Adagrad:
        acc += g * g;
        w -= lr * g / (std::sqrt(acc) + 1e-8);
        break;
    }
  }
  return w;
}

// Look-back formulation of the debounce policy: tick i emits when the last
// `required` ticks since the previous emission agree on a class above the
// threshold and that class's last event ended at least `cooldown` earlier.
struct OracleTick {
  std::size_t cls;
  double confidence;
  double start;
  double end;
};

inline std::vector<ActivityEvent> replay_oracle(const std::vector<OracleTick>& ticks,
                                         const StreamConfig& config) {
  std::vector<ActivityEvent> events;
  std::map<std::size_t, double> last_end;
  std::size_t first_eligible = 0;
  for (std::size_t i = 0; i < ticks.size(); ++i) {
    if (i + 1 < first_eligible + config.consecutive_required) continue;
    const std::size_t from = i + 1 - config.consecutive_required;
    bool agree = true;
    for (std::size_t j = from; j <= i; ++j) {
      agree = agree && ticks[j].cls == ticks[i].cls &&
              ticks[j].confidence >= config.confidence_threshold;
    }
    if (!agree) continue;
    auto it = last_end.find(ticks[i].cls);
    if (it != last_end.end() && ticks[i].end - it->second < config.cooldown_seconds) continue;
    last_end[ticks[i].cls] = ticks[i].end;
    events.push_back({events.size() + 1, ticks[i].cls, ticks[i].confidence, ticks[i].start,
                      ticks[i].end});
    first_eligible = i + 1;
  }
  return events;
}

inline OracleTick oracle_tick(const Tensor& p, double start, double end) {
  const auto d = p.data();
  const auto best = static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
  return {best, d[best], start, end};
}

// Offline windows over the resampled sequence, classified in batch.
inline std::vector<Tick> offline_ticks(const SkeletonSequence& seq, const StreamConfig& config,
                                const ModelConfig& model, const ParameterSet& params) {
  const SkeletonSequence resampled = resample_fps(seq, std::min(config.target_fps, seq.source_fps));
  std::vector<Tick> ticks;
  for (std::size_t end = config.window_frames; end <= resampled.frames.size();
       end += config.hop_frames) {
    const std::vector<SkeletonFrame> window(resampled.frames.begin() + static_cast<long>(end - config.window_frames),
                                            resampled.frames.begin() + static_cast<long>(end));
    Tick t;
    t.index = ticks.size();
    t.window_start = window.front().timestamp;
    t.window_end = window.back().timestamp;
    t.posteriors = classify_sequence(rasterize_sequence(window, model.input_grid), model, params);
    ticks.push_back(std::move(t));
  }
  return ticks;
}

}  // namespace mrha::test
