#pragma once

// ENConvLSTM: per-frame MBConv backbone -> ConvLSTM over time -> GAP -> FC
// -> dropout -> softmax.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mrha/autodiff.hpp"
#include "mrha/tensor.hpp"

namespace mrha {

struct MbConvSpec {
  std::size_t expansion_ratio = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel_size = 3;
  std::size_t stride = 1;
  std::size_t se_reduction = 1;
  bool has_residual = false;

  std::size_t expanded_channels() const { return in_channels * expansion_ratio; }
  std::size_t squeezed_channels() const { return expanded_channels() / se_reduction; }
  void validate() const;

  friend bool operator==(const MbConvSpec&, const MbConvSpec&) = default;
};

struct ModelConfig {
  static constexpr std::size_t kStageCount = 7;

  std::size_t input_grid = 64;
  std::size_t stem_channels = 8;
  std::size_t stem_kernel = 3;
  std::size_t stem_stride = 2;
  std::vector<MbConvSpec> stages;
  std::size_t hidden_channels = 32;
  std::size_t lstm_kernel = 3;
  std::size_t num_classes = 12;
  double dropout_rate = 0.2;

  /// B0 stage table with widths divided by 4.
  static ModelConfig standard();
  /// Narrow variant for desk-scale training; total stride 16.
  static ModelConfig reduced(std::size_t grid = 32);
  /// Smallest variant, sized for exhaustive finite-difference checks at G=16.
  static ModelConfig tiny();

  /// Throws ConfigError on any violated invariant, including a grid the
  /// stride chain does not divide.
  void validate() const;
  std::size_t total_stride() const;
  std::size_t feature_side() const { return input_grid / total_stride(); }
  std::size_t feature_channels() const { return stages.back().out_channels; }

  /// Canonical "key=value" lines, one per field, in a fixed order.
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Ordered named tensors.
class ParameterSet {
 public:
  void add(std::string name, Tensor value);
  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  Tensor& operator[](std::size_t i) { return values_.at(i); }
  const Tensor& operator[](std::size_t i) const { return values_.at(i); }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  std::optional<std::size_t> find(const std::string& name) const;
  std::size_t scalar_count() const;
  std::vector<Tensor>& values() { return values_; }
  const std::vector<Tensor>& values() const { return values_; }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    return a.names_ == b.names_ && a.values_ == b.values_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, std::size_t> index_;
};

/// Every parameter the config needs, zero filled, in canonical order.
ParameterSet parameter_layout(const ModelConfig& config);

/// Fan-in scaled uniform kernels, forget-gate bias +1, all other biases 0.
ParameterSet init_parameters(const ModelConfig& config, std::uint64_t seed);

// Plain-tensor parameter bundles, for calling single layers directly.

struct SeParams {
  Tensor reduce_weight;  // [squeezed, C]
  Tensor reduce_bias;    // [squeezed]
  Tensor expand_weight;  // [C, squeezed]
  Tensor expand_bias;    // [C]
};

struct MbConvParams {
  Tensor expand_kernel;  // [C_exp, C_in, 1, 1]; empty when expansion_ratio == 1
  Tensor expand_bias;
  Tensor depthwise_kernel;  // [C_exp, 1, k, k]
  Tensor depthwise_bias;
  SeParams se;
  Tensor project_kernel;  // [C_out, C_exp, 1, 1]
  Tensor project_bias;
};

enum Gate : std::size_t { kForget = 0, kInput = 1, kCandidate = 2, kOutput = 3 };

struct ConvLstmParams {
  std::array<Tensor, 4> input_kernels;   // [hidden, C_x, k, k], indexed by Gate
  std::array<Tensor, 4> hidden_kernels;  // [hidden, hidden, k, k]
  std::array<Tensor, 4> biases;          // [hidden]
  std::size_t hidden_channels = 0;
  void validate() const;
};

struct ConvLstmState {
  Tensor hidden;
  Tensor cell;
  static ConvLstmState zeros(std::size_t channels, std::size_t height, std::size_t width);
};

MbConvParams mbconv_params(const ParameterSet& params, std::size_t stage);
ConvLstmParams convlstm_params(const ParameterSet& params);

Tensor se_recalibrate(const Tensor& features, const SeParams& params);
Tensor mbconv_forward(const Tensor& x, const MbConvSpec& spec, const MbConvParams& params);
Tensor backbone_forward(const Tensor& frame, const ModelConfig& config,
                        const ParameterSet& params);
/// Post-activation gate maps of one ConvLSTM step.
struct ConvLstmGates {
  Tensor forget;
  Tensor input;
  Tensor candidate;  // tanh branch
  Tensor output;
};

ConvLstmState convlstm_step(const Tensor& input, const ConvLstmState& state,
                            const ConvLstmParams& params, ConvLstmGates* gates = nullptr);
/// Inference-mode class posteriors (dropout off). Throws ContractError on an
/// empty sequence.
Tensor classify_sequence(const std::vector<Tensor>& frames, const ModelConfig& config,
                         const ParameterSet& params);

/// Differentiable form of one ConvLSTM step, shared by ModelGraph and the
/// plain-tensor convlstm_step.
struct ConvLstmVars {
  std::array<Var, 4> input_kernels;
  std::array<Var, 4> hidden_kernels;
  std::array<Var, 4> biases;
};

struct RecurrentState {
  Var hidden;
  Var cell;
};

RecurrentState convlstm_step(Var input, const RecurrentState& state, const ConvLstmVars& params,
                             std::array<Var, 4>* gates = nullptr);

/// The model with every parameter watched on one tape. Training builds one per
/// sample; inference uses a non-recording tape.
class ModelGraph {
 public:
  ModelGraph(GradientTape& tape, const ModelConfig& config, const ParameterSet& params);

  using State = RecurrentState;

  Var backbone(Var frame);
  State convlstm_step(Var input, const State& state);
  State zero_state();
  /// Pre-softmax scores from the final hidden state; dropout applied when
  /// dropout_mask is given.
  Var logits(const std::vector<Tensor>& frames, const Tensor* dropout_mask = nullptr);
  Var probabilities(const std::vector<Tensor>& frames, const Tensor* dropout_mask = nullptr);

  const std::vector<Var>& parameters() const { return vars_; }
  Var param(const std::string& name) const;
  GradientTape& tape() { return tape_; }

 private:
  Var mbconv(Var x, std::size_t stage);

  GradientTape& tape_;
  const ModelConfig& config_;
  const ParameterSet& params_;
  std::vector<Var> vars_;
};

// Checkpoint: "ENCL1\n", ModelConfig text, "end\n", u32 tensor count, then per
// tensor u32 name length, name bytes and one tensor snapshot.
void write_checkpoint(std::ostream& out, const ModelConfig& config,
                      const ParameterSet& params);
void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const ParameterSet& params);

struct Checkpoint {
  ModelConfig config;
  ParameterSet params;
};

Checkpoint read_checkpoint(std::istream& in);
Checkpoint load_checkpoint(const std::string& path);

/// Name of the first tensor whose presence or shape disagrees with the layout
/// implied by config; nullopt when they agree.
std::optional<std::string> first_mismatch(const ModelConfig& config,
                                          const ParameterSet& params);

}  // namespace mrha
