#include "mrha/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <limits>
#include <random>

namespace mrha {

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::Adam: return "adam";
    case OptimizerKind::Sgd: return "sgd";
    case OptimizerKind::RmsProp: return "rmsprop";
    case OptimizerKind::Adagrad: return "adagrad";
  }
  return "adam";
}

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "rmsprop") return OptimizerKind::RmsProp;
  if (name == "adagrad") return OptimizerKind::Adagrad;
  throw ConfigError("unknown optimizer '" + name + "'");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (epochs == 0) throw ConfigError("epochs must be at least 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be a finite non-negative number");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("rho must lie in [0, 1)");
  if (patience && *patience == 0) throw ConfigError("patience must be at least 1");
}

double cross_entropy_loss(const Tensor& probs, std::size_t true_class) {
  require_rank(probs, 1, "cross_entropy_loss");
  if (true_class >= probs.size()) {
    throw ContractError("class index " + std::to_string(true_class) + " out of range for " +
                        std::to_string(probs.size()) + " classes");
  }
  return -std::log(std::max(probs[true_class], 1e-12));
}

namespace {

void check_pairs(const std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size()) throw ContractError("parameter and gradient counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape()) {
      throw ContractError("gradient " + std::to_string(i) + " has shape " +
                          to_string(grads[i].shape()) + ", parameter has " +
                          to_string(params[i].shape()));
    }
  }
}

void ensure_zeros(std::vector<Tensor>& state, const std::vector<Tensor>& like) {
  if (state.empty()) {
    for (const Tensor& p : like) state.emplace_back(p.shape());
  }
  check_pairs(like, state);
}

}  // namespace

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state,
               std::size_t t, const TrainConfig& config) {
  if (t == 0) throw ContractError("adam step index is 1-based");
  check_pairs(params, grads);
  ensure_zeros(state.m, params);
  ensure_zeros(state.v, params);
  const double b1 = config.beta1, b2 = config.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      const double m_hat = m[k] / c1, v_hat = v[k] / c2;
      w[k] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
  }
}

Optimizer::Optimizer(const TrainConfig& config) : config_(config) { config_.validate(); }

void Optimizer::step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  ++t_;
  const double lr = config_.learning_rate;
  switch (config_.optimizer) {
    case OptimizerKind::Adam:
      adam_step(params, grads, adam_, t_, config_);
      return;
    case OptimizerKind::Sgd:
      check_pairs(params, grads);
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].data();
        auto g = grads[i].data();
        for (std::size_t k = 0; k < w.size(); ++k) w[k] -= lr * g[k];
      }
      return;
    case OptimizerKind::RmsProp:
    case OptimizerKind::Adagrad: {
      check_pairs(params, grads);
      ensure_zeros(accum_, params);
      const bool rms = config_.optimizer == OptimizerKind::RmsProp;
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].data();
        auto g = grads[i].data();
        auto a = accum_[i].data();
        for (std::size_t k = 0; k < w.size(); ++k) {
          a[k] = rms ? config_.rho * a[k] + (1.0 - config_.rho) * g[k] * g[k] : a[k] + g[k] * g[k];
          w[k] -= lr * g[k] / (std::sqrt(a[k]) + config_.epsilon);
        }
      }
      return;
    }
  }
}

void check_samples(const ModelConfig& model, const std::vector<LabeledSample>& samples) {
  const Shape frame{1, model.input_grid, model.input_grid};
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const LabeledSample& s = samples[i];
    const std::string where = "sample " + std::to_string(i) +
                              (s.provenance.source.empty() ? "" : " (" + s.provenance.source + ")");
    if (s.frames.empty()) throw ConfigError(where + " has no frames");
    if (s.label >= model.num_classes) {
      throw ConfigError(where + " label " + std::to_string(s.label) + " exceeds class count " +
                        std::to_string(model.num_classes));
    }
    for (const Tensor& f : s.frames) {
      if (f.shape() != frame) {
        throw ConfigError(where + " frame shape " + to_string(f.shape()) + " but model expects " +
                          to_string(frame));
      }
    }
  }
}

std::size_t argmax(const Tensor& probs) {
  const auto d = probs.data();
  return static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
}

namespace {

// Inverted dropout: kept entries scaled by 1/(1-rate).
Tensor dropout_mask(std::size_t size, double rate, std::uint64_t seed, std::size_t epoch,
                    std::size_t sample) {
  Tensor mask({size}, 1.0);
  if (rate <= 0.0) return mask;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(sample)};
  std::mt19937_64 rng(seq);
  std::bernoulli_distribution keep(1.0 - rate);
  for (double& m : mask.data()) m = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  return mask;
}

}  // namespace

TrainResult train(const ModelConfig& model, ParameterSet params,
                  const std::vector<LabeledSample>& train_set, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  config.validate();
  model.validate();
  if (train_set.empty()) throw ContractError("training set is empty");
  if (auto bad = first_mismatch(model, params)) {
    throw ConfigError("parameter '" + *bad + "' does not match the model config");
  }
  check_samples(model, train_set);

  TrainResult result;
  Optimizer optimizer(config);
  std::mt19937_64 shuffle_rng(config.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<Tensor> grads;
      for (const Tensor& p : params.values()) grads.emplace_back(p.shape());
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        const LabeledSample& sample = train_set[idx];
        const Tensor mask =
            dropout_mask(model.num_classes, model.dropout_rate, config.seed, epoch, idx);
        GradientTape tape;
        ModelGraph graph(tape, model, params);
        Var probs = graph.probabilities(sample.frames, &mask);
        Var loss = ad::sparse_cross_entropy(probs, sample.label);
        tape.backward(loss);
        loss_sum += loss.value()[0];
        correct += argmax(probs.value()) == sample.label;
        for (std::size_t i = 0; i < grads.size(); ++i) {
          grads[i] += tape.gradient(graph.parameters()[i]);
        }
      }
      const double scale = 1.0 / static_cast<double>(end - start);
      for (Tensor& g : grads) g *= scale;
      optimizer.step(params.values(), grads);
    }
    EpochStats stats{epoch, loss_sum / static_cast<double>(order.size()),
                     static_cast<double>(correct) / static_cast<double>(order.size())};
    result.history.push_back(stats);
    if (on_epoch) on_epoch(stats);
    if (config.patience) {
      if (stats.loss < best_loss) {
        best_loss = stats.loss;
        stale = 0;
      } else if (++stale >= *config.patience) {
        result.stopped_early = true;
        break;
      }
    }
  }
  result.params = std::move(params);
  return result;
}

EvalReport report_from_predictions(const std::vector<std::size_t>& truth,
                                   const std::vector<std::size_t>& predicted,
                                   std::size_t num_classes) {
  if (truth.size() != predicted.size()) throw ContractError("truth and prediction counts differ");
  EvalReport r;
  r.total = truth.size();
  r.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= num_classes || predicted[i] >= num_classes) {
      throw ContractError("class index out of range");
    }
    ++r.confusion[truth[i]][predicted[i]];
  }
  r.precision.assign(num_classes, std::nullopt);
  r.recall.assign(num_classes, std::nullopt);
  r.f1.assign(num_classes, std::nullopt);
  std::size_t diagonal = 0, with_support = 0, with_precision = 0;
  double p_sum = 0.0, r_sum = 0.0, f_sum = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const std::size_t tp = r.confusion[c][c];
    std::size_t support = 0, predicted_c = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
      support += r.confusion[c][k];
      predicted_c += r.confusion[k][c];
    }
    diagonal += tp;
    const std::string code = num_classes == kClassCount ? label_at(c).class_code
                                                        : "class " + std::to_string(c);
    if (support == 0) {
      r.warnings.push_back(code + " absent from the evaluation set; excluded from macro averages");
      continue;
    }
    ++with_support;
    const double rec = static_cast<double>(tp) / static_cast<double>(support);
    const std::size_t fp = predicted_c - tp, fn = support - tp;
    const double f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
    r.recall[c] = rec;
    r.f1[c] = f1;
    r_sum += rec;
    f_sum += f1;
    if (predicted_c == 0) {
      r.warnings.push_back(code + " never predicted; precision undefined and excluded");
      continue;
    }
    const double prec = static_cast<double>(tp) / static_cast<double>(predicted_c);
    r.precision[c] = prec;
    p_sum += prec;
    ++with_precision;
  }
  if (r.total > 0) r.accuracy = static_cast<double>(diagonal) / static_cast<double>(r.total);
  if (with_support > 0) {
    r.macro_recall = r_sum / static_cast<double>(with_support);
    r.macro_f1 = f_sum / static_cast<double>(with_support);
  }
  if (with_precision > 0) r.macro_precision = p_sum / static_cast<double>(with_precision);
  return r;
}

std::vector<std::size_t> predict(const ModelConfig& model, const ParameterSet& params,
                                 const std::vector<LabeledSample>& samples) {
  check_samples(model, samples);
  std::vector<std::size_t> out;
  out.reserve(samples.size());
  for (const LabeledSample& s : samples) out.push_back(argmax(classify_sequence(s.frames, model, params)));
  return out;
}

EvalReport evaluate(const ModelConfig& model, const ParameterSet& params,
                    const std::vector<LabeledSample>& test_set) {
  if (test_set.empty()) throw ContractError("evaluation set is empty");
  std::vector<std::size_t> truth;
  for (const LabeledSample& s : test_set) truth.push_back(s.label);
  return report_from_predictions(truth, predict(model, params, test_set), model.num_classes);
}

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string class_name(std::size_t c, std::size_t num_classes) {
  return num_classes == kClassCount ? label_at(c).class_code : std::to_string(c);
}

}  // namespace

void write_report(std::ostream& out, const EvalReport& r) {
  out << "samples=" << r.total << '\n'
      << "accuracy=" << num(r.accuracy) << '\n'
      << "macro_precision=" << num(r.macro_precision) << '\n'
      << "macro_recall=" << num(r.macro_recall) << '\n'
      << "macro_f1=" << num(r.macro_f1) << '\n';
  const std::size_t k = r.confusion.size();
  auto field = [&](const char* name, const std::vector<std::optional<double>>& values) {
    for (std::size_t c = 0; c < k; ++c) {
      out << name << '.' << class_name(c, k) << '=' << (values[c] ? num(*values[c]) : "undefined")
          << '\n';
    }
  };
  field("precision", r.precision);
  field("recall", r.recall);
  field("f1", r.f1);
  for (const std::string& w : r.warnings) out << "warning=" << w << '\n';
}

void write_confusion_csv(std::ostream& out, const EvalReport& r) {
  const std::size_t k = r.confusion.size();
  out << "true\\pred";
  for (std::size_t c = 0; c < k; ++c) out << ',' << class_name(c, k);
  out << '\n';
  for (std::size_t t = 0; t < k; ++t) {
    out << class_name(t, k);
    for (std::size_t p = 0; p < k; ++p) out << ',' << r.confusion[t][p];
    out << '\n';
  }
}

void write_history_csv(std::ostream& out, const std::vector<EpochStats>& history) {
  out << "epoch,loss,accuracy\n";
  for (const EpochStats& e : history) out << e.epoch << ',' << num(e.loss) << ',' << num(e.accuracy) << '\n';
}

}  // namespace mrha
