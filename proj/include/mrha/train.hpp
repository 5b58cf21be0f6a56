#pragma once

// Training loop, optimizers and evaluation metrics.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mrha/dataset.hpp"
#include "mrha/model.hpp"

namespace mrha {

enum class OptimizerKind { Adam, Sgd, RmsProp, Adagrad };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 100;
  double learning_rate = 0.001;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double rho = 0.9;  // RMSprop decay
  std::uint64_t seed = 0;
  /// Stop after this many epochs without a lower mean loss; off when empty.
  std::optional<std::size_t> patience;

  /// Throws ConfigError on batch_size == 0, epochs == 0 or a negative rate.
  /// A zero rate is accepted and leaves parameters untouched.
  void validate() const;
};

/// -log(max(probs[true_class], 1e-12)). Throws ContractError on a bad index.
double cross_entropy_loss(const Tensor& probs, std::size_t true_class);

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// One bias-corrected Adam update at step t (1-based). Moments are created
/// on first use. Throws ContractError on shape disagreement or t == 0.
void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               std::size_t t, const TrainConfig& config);

/// Stateful optimizer covering every OptimizerKind.
class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& config);
  void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads);
  std::size_t steps() const { return t_; }

 private:
  TrainConfig config_;
  std::size_t t_ = 0;
  AdamState adam_;
  std::vector<Tensor> accum_;  // RMSprop / Adagrad square accumulator
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean over samples
  double accuracy = 0.0;  // training-mode predictions, dropout on
};

struct TrainResult {
  ParameterSet params;
  std::vector<EpochStats> history;
  bool stopped_early = false;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Throws ConfigError before the first epoch if any sample disagrees with the
/// model's grid or class count.
void check_samples(const ModelConfig& model, const std::vector<LabeledSample>& samples);

/// Minibatch training with per-sample tapes. Shuffle order and dropout masks
/// derive from config.seed, and batch gradients are summed in sample order,
/// so equal inputs give bitwise-equal results.
TrainResult train(const ModelConfig& model, ParameterSet params,
                  const std::vector<LabeledSample>& train_set, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

struct EvalReport {
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  // Per class; empty when undefined (no support, or no predictions for
  // precision).
  std::vector<std::optional<double>> precision;
  std::vector<std::optional<double>> recall;
  std::vector<std::optional<double>> f1;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<std::string> warnings;
  std::size_t total = 0;
};

/// Metrics from label pairs. Macro averages run over classes with support;
/// macro precision additionally skips classes never predicted.
EvalReport report_from_predictions(const std::vector<std::size_t>& truth,
                                   const std::vector<std::size_t>& predicted,
                                   std::size_t num_classes);

std::size_t argmax(const Tensor& probs);

/// Inference-mode predictions for each sample.
std::vector<std::size_t> predict(const ModelConfig& model, const ParameterSet& params,
                                 const std::vector<LabeledSample>& samples);

EvalReport evaluate(const ModelConfig& model, const ParameterSet& params,
                    const std::vector<LabeledSample>& test_set);

/// "key=value" lines: accuracy, macro_*, then per-class entries.
void write_report(std::ostream& out, const EvalReport& report);
/// Header "true\\pred,<codes...>", one row per true class.
void write_confusion_csv(std::ostream& out, const EvalReport& report);
/// Header "epoch,loss,accuracy".
void write_history_csv(std::ostream& out, const std::vector<EpochStats>& history);

}  // namespace mrha
