#include "mrha/model.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

namespace mrha {

void MbConvSpec::validate() const {
  auto fail = [](const std::string& why) { throw ConfigError("MBConv spec: " + why); };
  if (expansion_ratio == 0) fail("expansion_ratio must be positive");
  if (in_channels == 0 || out_channels == 0) fail("channel counts must be positive");
  if (kernel_size % 2 == 0) fail("kernel_size must be odd");
  if (stride != 1 && stride != 2) fail("stride must be 1 or 2");
  if (se_reduction == 0 || expanded_channels() % se_reduction != 0) {
    fail("se_reduction " + std::to_string(se_reduction) +
         " does not divide expanded channels " + std::to_string(expanded_channels()));
  }
  if (has_residual && (stride != 1 || in_channels != out_channels)) {
    fail("residual requires stride 1 and in_channels == out_channels");
  }
}

namespace {

MbConvSpec stage(std::size_t expansion, std::size_t in, std::size_t out, std::size_t kernel,
                 std::size_t stride, std::size_t se_reduction) {
  MbConvSpec s;
  s.expansion_ratio = expansion;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel_size = kernel;
  s.stride = stride;
  s.se_reduction = se_reduction;
  s.has_residual = stride == 1 && in == out;
  return s;
}

}  // namespace

ModelConfig ModelConfig::standard() {
  ModelConfig c;
  c.input_grid = 64;
  c.stem_channels = 8;
  c.stem_stride = 2;
  constexpr std::array<std::size_t, 7> widths{4, 6, 10, 20, 28, 48, 80};
  constexpr std::array<std::size_t, 7> kernels{3, 3, 5, 3, 5, 5, 3};
  constexpr std::array<std::size_t, 7> expansions{1, 6, 6, 6, 6, 6, 6};
  constexpr std::array<std::size_t, 7> strides{1, 2, 2, 2, 1, 2, 1};
  std::size_t in = c.stem_channels;
  for (std::size_t i = 0; i < kStageCount; ++i) {
    c.stages.push_back(stage(expansions[i], in, widths[i], kernels[i], strides[i], 4));
    in = widths[i];
  }
  c.hidden_channels = 32;
  c.lstm_kernel = 3;
  c.num_classes = 12;
  c.dropout_rate = 0.2;
  return c;
}

ModelConfig ModelConfig::reduced(std::size_t grid) {
  ModelConfig c;
  c.input_grid = grid;
  c.stem_channels = 8;
  c.stem_stride = 2;
  c.stages = {stage(1, 8, 8, 3, 1, 4),   stage(3, 8, 12, 3, 2, 4),
              stage(3, 12, 16, 5, 2, 4), stage(3, 16, 16, 3, 1, 4),
              stage(3, 16, 24, 5, 1, 4), stage(3, 24, 32, 5, 2, 4),
              stage(3, 32, 32, 3, 1, 4)};
  c.hidden_channels = 16;
  c.lstm_kernel = 3;
  c.num_classes = 12;
  c.dropout_rate = 0.2;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.input_grid = 16;
  c.stem_channels = 4;
  c.stem_stride = 2;
  c.stages = {stage(1, 4, 4, 3, 1, 2), stage(2, 4, 6, 3, 2, 2), stage(2, 6, 6, 3, 1, 2),
              stage(2, 6, 8, 3, 2, 2), stage(2, 8, 8, 3, 1, 2), stage(1, 8, 8, 3, 1, 2),
              stage(2, 8, 8, 3, 1, 2)};
  c.stages[6].has_residual = false;
  c.hidden_channels = 4;
  c.lstm_kernel = 3;
  c.num_classes = 12;
  c.dropout_rate = 0.2;
  return c;
}

std::size_t ModelConfig::total_stride() const {
  std::size_t s = stem_stride;
  for (const auto& st : stages) s *= st.stride;
  return s;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& why) { throw ConfigError("model config: " + why); };
  if (stages.size() != kStageCount) {
    fail("expected exactly 7 MBConv stages, got " + std::to_string(stages.size()));
  }
  if (input_grid == 0) fail("input_grid must be positive");
  if (stem_channels == 0) fail("stem_channels must be positive");
  if (stem_kernel % 2 == 0) fail("stem_kernel must be odd");
  if (stem_stride != 1 && stem_stride != 2) fail("stem_stride must be 1 or 2");
  std::size_t in = stem_channels;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    stages[i].validate();
    if (stages[i].in_channels != in) {
      fail("stage " + std::to_string(i + 1) + " expects " +
           std::to_string(stages[i].in_channels) + " input channels but receives " +
           std::to_string(in));
    }
    in = stages[i].out_channels;
  }
  if (input_grid % total_stride() != 0) {
    fail("input_grid " + std::to_string(input_grid) + " is not divisible by total stride " +
         std::to_string(total_stride()));
  }
  if (hidden_channels == 0) fail("hidden_channels must be positive");
  if (lstm_kernel % 2 == 0) fail("lstm_kernel must be odd");
  if (num_classes < 2) fail("num_classes must be at least 2");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must be in [0,1)");
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "input_grid=" << input_grid << '\n'
     << "stem_channels=" << stem_channels << '\n'
     << "stem_kernel=" << stem_kernel << '\n'
     << "stem_stride=" << stem_stride << '\n';
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    os << "stage" << i + 1 << "=expansion:" << s.expansion_ratio << ",in:" << s.in_channels
       << ",out:" << s.out_channels << ",kernel:" << s.kernel_size << ",stride:" << s.stride
       << ",se:" << s.se_reduction << ",residual:" << (s.has_residual ? 1 : 0) << '\n';
  }
  char rate[32];
  std::snprintf(rate, sizeof rate, "%.17g", dropout_rate);
  os << "hidden_channels=" << hidden_channels << '\n'
     << "lstm_kernel=" << lstm_kernel << '\n'
     << "num_classes=" << num_classes << '\n'
     << "dropout_rate=" << rate << '\n';
  return os.str();
}

namespace {

std::size_t parse_count(const std::string& text, const std::string& key) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != text.size()) {
    throw ConfigError("model config: bad integer '" + text + "' for " + key);
  }
  return static_cast<std::size_t>(v);
}

MbConvSpec parse_stage(const std::string& value, const std::string& key) {
  std::map<std::string, std::size_t> fields;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("model config: malformed " + key);
    fields[item.substr(0, colon)] = parse_count(item.substr(colon + 1), key);
  }
  auto need = [&](const char* f) {
    auto it = fields.find(f);
    if (it == fields.end()) throw ConfigError("model config: " + key + " lacks " + f);
    return it->second;
  };
  MbConvSpec s;
  s.expansion_ratio = need("expansion");
  s.in_channels = need("in");
  s.out_channels = need("out");
  s.kernel_size = need("kernel");
  s.stride = need("stride");
  s.se_reduction = need("se");
  s.has_residual = need("residual") != 0;
  if (fields.size() != 7) throw ConfigError("model config: unexpected field in " + key);
  return s;
}

}  // namespace

ModelConfig ModelConfig::from_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("model config: malformed line '" + line + "'");
    if (!kv.emplace(line.substr(0, eq), line.substr(eq + 1)).second) {
      throw ConfigError("model config: duplicate key " + line.substr(0, eq));
    }
  }
  auto take = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError("model config: missing key " + key);
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  ModelConfig c;
  c.input_grid = parse_count(take("input_grid"), "input_grid");
  c.stem_channels = parse_count(take("stem_channels"), "stem_channels");
  c.stem_kernel = parse_count(take("stem_kernel"), "stem_kernel");
  c.stem_stride = parse_count(take("stem_stride"), "stem_stride");
  c.stages.clear();
  for (std::size_t i = 1; i <= kStageCount; ++i) {
    const std::string key = "stage" + std::to_string(i);
    c.stages.push_back(parse_stage(take(key), key));
  }
  c.hidden_channels = parse_count(take("hidden_channels"), "hidden_channels");
  c.lstm_kernel = parse_count(take("lstm_kernel"), "lstm_kernel");
  c.num_classes = parse_count(take("num_classes"), "num_classes");
  const std::string rate = take("dropout_rate");
  try {
    std::size_t pos = 0;
    c.dropout_rate = std::stod(rate, &pos);
    if (pos != rate.size()) throw ConfigError("");
  } catch (const std::exception&) {
    throw ConfigError("model config: bad dropout_rate '" + rate + "'");
  }
  if (!kv.empty()) throw ConfigError("model config: unknown key " + kv.begin()->first);
  c.validate();
  return c;
}

void ParameterSet::add(std::string name, Tensor value) {
  if (index_.count(name)) throw ContractError("duplicate parameter " + name);
  index_[name] = names_.size();
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

std::optional<std::size_t> ParameterSet::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Tensor& ParameterSet::get(const std::string& name) {
  auto i = find(name);
  if (!i) throw ContractError("no parameter named " + name);
  return values_[*i];
}

const Tensor& ParameterSet::get(const std::string& name) const {
  auto i = find(name);
  if (!i) throw ContractError("no parameter named " + name);
  return values_[*i];
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

namespace {

constexpr std::array<const char*, 4> kGateNames{"f", "i", "c", "o"};

std::string stage_prefix(std::size_t stage) { return "stage" + std::to_string(stage + 1) + "."; }

}  // namespace

ParameterSet parameter_layout(const ModelConfig& config) {
  config.validate();
  ParameterSet p;
  const std::size_t k = config.stem_kernel;
  p.add("stem.kernel", Tensor({config.stem_channels, 1, k, k}));
  p.add("stem.bias", Tensor({config.stem_channels}));
  for (std::size_t i = 0; i < config.stages.size(); ++i) {
    const auto& s = config.stages[i];
    const std::string pre = stage_prefix(i);
    const std::size_t ce = s.expanded_channels();
    if (s.expansion_ratio != 1) {
      p.add(pre + "expand.kernel", Tensor({ce, s.in_channels, 1, 1}));
      p.add(pre + "expand.bias", Tensor({ce}));
    }
    p.add(pre + "dw.kernel", Tensor({ce, 1, s.kernel_size, s.kernel_size}));
    p.add(pre + "dw.bias", Tensor({ce}));
    p.add(pre + "se.reduce.weight", Tensor({s.squeezed_channels(), ce}));
    p.add(pre + "se.reduce.bias", Tensor({s.squeezed_channels()}));
    p.add(pre + "se.expand.weight", Tensor({ce, s.squeezed_channels()}));
    p.add(pre + "se.expand.bias", Tensor({ce}));
    p.add(pre + "project.kernel", Tensor({s.out_channels, ce, 1, 1}));
    p.add(pre + "project.bias", Tensor({s.out_channels}));
  }
  const std::size_t hc = config.hidden_channels, lk = config.lstm_kernel;
  for (const char* g : kGateNames) {
    p.add(std::string("lstm.wx.") + g, Tensor({hc, config.feature_channels(), lk, lk}));
  }
  for (const char* g : kGateNames) p.add(std::string("lstm.wh.") + g, Tensor({hc, hc, lk, lk}));
  for (const char* g : kGateNames) p.add(std::string("lstm.b.") + g, Tensor({hc}));
  p.add("head.weight", Tensor({config.num_classes, hc}));
  p.add("head.bias", Tensor({config.num_classes}));
  return p;
}

ParameterSet init_parameters(const ModelConfig& config, std::uint64_t seed) {
  ParameterSet p = parameter_layout(config);
  std::mt19937_64 rng(seed);
  // Fixed 53-bit mantissa draw so the stream does not depend on the
  // standard library's distribution implementation.
  auto uniform = [&rng](double bound) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return (2.0 * u - 1.0) * bound;
  };
  for (std::size_t i = 0; i < p.size(); ++i) {
    Tensor& t = p[i];
    const std::string& name = p.name(i);
    if (t.rank() == 1) {
      t.fill(name == "lstm.b.f" ? 1.0 : 0.0);
      continue;
    }
    std::size_t fan_in = 1;
    for (std::size_t a = 1; a < t.rank(); ++a) fan_in *= t.dim(a);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& v : t.data()) v = uniform(bound);
  }
  return p;
}

void ConvLstmParams::validate() const {
  if (hidden_channels == 0) throw ConfigError("ConvLSTM hidden_channels must be positive");
  const Tensor& ref = input_kernels[0];
  require_rank(ref, 4, "ConvLSTM input kernel");
  for (std::size_t g = 0; g < 4; ++g) {
    const Tensor& wx = input_kernels[g];
    const Tensor& wh = hidden_kernels[g];
    require_shape(wx, ref.shape(), std::string("ConvLSTM input kernel ") + kGateNames[g]);
    if (wx.dim(0) != hidden_channels) {
      throw DimensionError(std::string("ConvLSTM input kernel ") + kGateNames[g] +
                           " must produce hidden_channels outputs");
    }
    require_shape(wh, {hidden_channels, hidden_channels, ref.dim(2), ref.dim(3)},
                  std::string("ConvLSTM hidden kernel ") + kGateNames[g]);
    require_shape(biases[g], {hidden_channels}, std::string("ConvLSTM bias ") + kGateNames[g]);
  }
}

ConvLstmState ConvLstmState::zeros(std::size_t channels, std::size_t height, std::size_t width) {
  return {Tensor({channels, height, width}), Tensor({channels, height, width})};
}

MbConvParams mbconv_params(const ParameterSet& params, std::size_t stage) {
  const std::string pre = stage_prefix(stage);
  MbConvParams m;
  if (params.find(pre + "expand.kernel")) {
    m.expand_kernel = params.get(pre + "expand.kernel");
    m.expand_bias = params.get(pre + "expand.bias");
  }
  m.depthwise_kernel = params.get(pre + "dw.kernel");
  m.depthwise_bias = params.get(pre + "dw.bias");
  m.se = {params.get(pre + "se.reduce.weight"), params.get(pre + "se.reduce.bias"),
          params.get(pre + "se.expand.weight"), params.get(pre + "se.expand.bias")};
  m.project_kernel = params.get(pre + "project.kernel");
  m.project_bias = params.get(pre + "project.bias");
  return m;
}

ConvLstmParams convlstm_params(const ParameterSet& params) {
  ConvLstmParams c;
  for (std::size_t g = 0; g < 4; ++g) {
    c.input_kernels[g] = params.get(std::string("lstm.wx.") + kGateNames[g]);
    c.hidden_kernels[g] = params.get(std::string("lstm.wh.") + kGateNames[g]);
    c.biases[g] = params.get(std::string("lstm.b.") + kGateNames[g]);
  }
  c.hidden_channels = c.biases[0].size();
  return c;
}

namespace {

struct SeVars {
  Var reduce_weight, reduce_bias, expand_weight, expand_bias;
};

struct MbConvVars {
  std::optional<Var> expand_kernel, expand_bias;
  Var depthwise_kernel, depthwise_bias;
  SeVars se;
  Var project_kernel, project_bias;
};

Var se_block(Var h, const SeVars& p) {
  Var pooled = ad::global_average_pool(h);
  Var squeezed = ad::relu(ad::linear(p.reduce_weight, pooled, p.reduce_bias));
  Var scale = ad::sigmoid(ad::linear(p.expand_weight, squeezed, p.expand_bias));
  return ad::scale_channels(h, scale);
}

Var mbconv_block(Var x, const MbConvSpec& spec, const MbConvVars& p) {
  Var h = x;
  if (p.expand_kernel) {
    h = ad::swish(ad::conv2d(h, *p.expand_kernel, *p.expand_bias, 1, Padding::Same));
  }
  h = ad::swish(
      ad::depthwise_conv2d(h, p.depthwise_kernel, p.depthwise_bias, spec.stride, Padding::Same));
  h = se_block(h, p.se);
  h = ad::conv2d(h, p.project_kernel, p.project_bias, 1, Padding::Same);
  if (spec.has_residual) h = ad::add(h, x);
  return h;
}

void check_mbconv_input(const Tensor& x, const MbConvSpec& spec) {
  spec.validate();
  require_rank(x, 3, "MBConv input");
  if (x.dim(0) != spec.in_channels) {
    throw ConfigError("MBConv input has " + std::to_string(x.dim(0)) +
                      " channels, spec expects " + std::to_string(spec.in_channels));
  }
  if (x.dim(1) % spec.stride != 0 || x.dim(2) % spec.stride != 0) {
    throw ConfigError("MBConv input extent " + to_string(x.shape()) +
                      " is not divisible by stride " + std::to_string(spec.stride));
  }
}

void check_frame(const Tensor& frame, std::size_t grid) {
  require_shape(frame, {1, grid, grid}, "model input frame");
}

}  // namespace

RecurrentState convlstm_step(Var x, const RecurrentState& s, const ConvLstmVars& p,
                             std::array<Var, 4>* gates) {
  GradientTape& tape = *x.tape();
  Var zero_bias = tape.constant(Tensor(p.biases[0].shape()));
  std::array<Var, 4> pre;
  for (std::size_t g = 0; g < 4; ++g) {
    pre[g] = ad::add(ad::conv2d(x, p.input_kernels[g], p.biases[g], 1, Padding::Same),
                     ad::conv2d(s.hidden, p.hidden_kernels[g], zero_bias, 1, Padding::Same));
  }
  Var forget = ad::sigmoid(pre[kForget]);
  Var input = ad::sigmoid(pre[kInput]);
  Var candidate = ad::tanh(pre[kCandidate]);
  Var output = ad::sigmoid(pre[kOutput]);
  Var cell = ad::add(ad::mul(forget, s.cell), ad::mul(input, candidate));
  Var hidden = ad::mul(output, ad::tanh(cell));
  if (gates != nullptr) *gates = {forget, input, candidate, output};
  return {hidden, cell};
}

Tensor se_recalibrate(const Tensor& features, const SeParams& params) {
  require_rank(features, 3, "SE input");
  require_rank(params.reduce_weight, 2, "SE reduce weight");
  const std::size_t c = features.dim(0), squeezed = params.reduce_weight.dim(0);
  if (params.reduce_weight.dim(1) != c || squeezed == 0 || c % squeezed != 0) {
    throw ConfigError("SE reduction does not match " + std::to_string(c) +
                      " channels: reduce weight is " + to_string(params.reduce_weight.shape()));
  }
  GradientTape tape(false);
  SeVars v{tape.constant(params.reduce_weight), tape.constant(params.reduce_bias),
           tape.constant(params.expand_weight), tape.constant(params.expand_bias)};
  return se_block(tape.constant(features), v).value();
}

Tensor mbconv_forward(const Tensor& x, const MbConvSpec& spec, const MbConvParams& params) {
  check_mbconv_input(x, spec);
  if ((spec.expansion_ratio != 1) == params.expand_kernel.empty()) {
    throw ConfigError("MBConv expand kernel must be present exactly when expansion_ratio != 1");
  }
  GradientTape tape(false);
  MbConvVars v;
  if (!params.expand_kernel.empty()) {
    v.expand_kernel = tape.constant(params.expand_kernel);
    v.expand_bias = tape.constant(params.expand_bias);
  }
  v.depthwise_kernel = tape.constant(params.depthwise_kernel);
  v.depthwise_bias = tape.constant(params.depthwise_bias);
  v.se = {tape.constant(params.se.reduce_weight), tape.constant(params.se.reduce_bias),
          tape.constant(params.se.expand_weight), tape.constant(params.se.expand_bias)};
  v.project_kernel = tape.constant(params.project_kernel);
  v.project_bias = tape.constant(params.project_bias);
  Tensor out = mbconv_block(tape.constant(x), spec, v).value();
  if (out.dim(0) != spec.out_channels) {
    throw ConfigError("MBConv projection produced " + std::to_string(out.dim(0)) +
                      " channels, spec expects " + std::to_string(spec.out_channels));
  }
  return out;
}

Tensor backbone_forward(const Tensor& frame, const ModelConfig& config,
                        const ParameterSet& params) {
  GradientTape tape(false);
  ModelGraph graph(tape, config, params);
  return graph.backbone(tape.constant(frame)).value();
}

ConvLstmState convlstm_step(const Tensor& input, const ConvLstmState& state,
                            const ConvLstmParams& params, ConvLstmGates* gates) {
  params.validate();
  require_rank(input, 3, "ConvLSTM input");
  require_shape(state.hidden, {params.hidden_channels, input.dim(1), input.dim(2)},
                "ConvLSTM hidden state");
  require_shape(state.cell, state.hidden.shape(), "ConvLSTM cell state");
  if (params.input_kernels[0].dim(1) != input.dim(0)) {
    throw DimensionError("ConvLSTM input has " + std::to_string(input.dim(0)) +
                         " channels (axis 0), kernels expect " +
                         std::to_string(params.input_kernels[0].dim(1)));
  }
  GradientTape tape(false);
  ConvLstmVars v;
  for (std::size_t g = 0; g < 4; ++g) {
    v.input_kernels[g] = tape.constant(params.input_kernels[g]);
    v.hidden_kernels[g] = tape.constant(params.hidden_kernels[g]);
    v.biases[g] = tape.constant(params.biases[g]);
  }
  std::array<Var, 4> gate_vars;
  auto next = convlstm_step(tape.constant(input),
                        {tape.constant(state.hidden), tape.constant(state.cell)}, v, &gate_vars);
  if (gates != nullptr) {
    *gates = {gate_vars[kForget].value(), gate_vars[kInput].value(),
              gate_vars[kCandidate].value(), gate_vars[kOutput].value()};
  }
  return {next.hidden.value(), next.cell.value()};
}

Tensor classify_sequence(const std::vector<Tensor>& frames, const ModelConfig& config,
                         const ParameterSet& params) {
  GradientTape tape(false);
  ModelGraph graph(tape, config, params);
  return graph.probabilities(frames).value();
}

ModelGraph::ModelGraph(GradientTape& tape, const ModelConfig& config,
                       const ParameterSet& params)
    : tape_(tape), config_(config), params_(params) {
  config.validate();
  if (auto bad = first_mismatch(config, params)) {
    throw DimensionError("parameter " + *bad + " does not match the model config");
  }
  vars_.reserve(params.size());
  for (const Tensor& t : params.values()) vars_.push_back(tape.watch(t));
}

Var ModelGraph::param(const std::string& name) const {
  auto i = params_.find(name);
  if (!i) throw ContractError("no parameter named " + name);
  return vars_[*i];
}

Var ModelGraph::mbconv(Var x, std::size_t stage) {
  const std::string pre = stage_prefix(stage);
  MbConvVars v;
  if (config_.stages[stage].expansion_ratio != 1) {
    v.expand_kernel = param(pre + "expand.kernel");
    v.expand_bias = param(pre + "expand.bias");
  }
  v.depthwise_kernel = param(pre + "dw.kernel");
  v.depthwise_bias = param(pre + "dw.bias");
  v.se = {param(pre + "se.reduce.weight"), param(pre + "se.reduce.bias"),
          param(pre + "se.expand.weight"), param(pre + "se.expand.bias")};
  v.project_kernel = param(pre + "project.kernel");
  v.project_bias = param(pre + "project.bias");
  return mbconv_block(x, config_.stages[stage], v);
}

Var ModelGraph::backbone(Var frame) {
  check_frame(frame.value(), config_.input_grid);
  Var x = ad::swish(ad::conv2d(frame, param("stem.kernel"), param("stem.bias"),
                               config_.stem_stride, Padding::Same));
  for (std::size_t s = 0; s < config_.stages.size(); ++s) x = mbconv(x, s);
  return x;
}

ModelGraph::State ModelGraph::zero_state() {
  const std::size_t side = config_.feature_side();
  Tensor zeros({config_.hidden_channels, side, side});
  return {tape_.constant(zeros), tape_.constant(zeros)};
}

ModelGraph::State ModelGraph::convlstm_step(Var input, const State& state) {
  ConvLstmVars v;
  for (std::size_t g = 0; g < 4; ++g) {
    v.input_kernels[g] = param(std::string("lstm.wx.") + kGateNames[g]);
    v.hidden_kernels[g] = param(std::string("lstm.wh.") + kGateNames[g]);
    v.biases[g] = param(std::string("lstm.b.") + kGateNames[g]);
  }
  return mrha::convlstm_step(input, state, v);
}

Var ModelGraph::logits(const std::vector<Tensor>& frames, const Tensor* dropout_mask) {
  if (frames.empty()) throw ContractError("classify_sequence needs at least one frame");
  State state = zero_state();
  for (const Tensor& frame : frames) {
    check_frame(frame, config_.input_grid);
    state = convlstm_step(backbone(tape_.constant(frame)), state);
  }
  Var pooled = ad::global_average_pool(state.hidden);
  Var scores = ad::linear(param("head.weight"), pooled, param("head.bias"));
  if (dropout_mask != nullptr) scores = ad::mask(scores, *dropout_mask);
  return scores;
}

Var ModelGraph::probabilities(const std::vector<Tensor>& frames, const Tensor* dropout_mask) {
  return ad::softmax(logits(frames, dropout_mask));
}

namespace {

constexpr char kCheckpointMagic[] = "ENCL1";

void put_u32(std::ostream& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    const int c = in.get();
    if (c == EOF) throw ParseError(0, "truncated checkpoint");
    v |= static_cast<std::uint32_t>(c & 0xFF) << (8 * i);
  }
  return v;
}

}  // namespace

void write_checkpoint(std::ostream& out, const ModelConfig& config,
                      const ParameterSet& params) {
  out << kCheckpointMagic << '\n' << config.to_text() << "end\n";
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_snapshot(out, params[i]);
  }
}

void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const ParameterSet& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_checkpoint(out, config, params);
  if (!out) throw std::runtime_error("failed writing " + path);
}

Checkpoint read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) {
    throw ParseError(0, "not a model checkpoint (bad magic)");
  }
  std::string header;
  while (true) {
    if (!std::getline(in, line)) throw ParseError(0, "checkpoint header is not terminated");
    if (line == "end") break;
    header += line + '\n';
  }
  Checkpoint cp{ModelConfig::from_text(header), {}};
  const std::uint32_t count = get_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = get_u32(in);
    if (len > 4096) throw ParseError(0, "checkpoint tensor name too long");
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in) throw ParseError(0, "truncated checkpoint");
    cp.params.add(std::move(name), read_snapshot(in));
  }
  return cp;
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

std::optional<std::string> first_mismatch(const ModelConfig& config,
                                          const ParameterSet& params) {
  const ParameterSet layout = parameter_layout(config);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    auto j = params.find(layout.name(i));
    if (!j || params[*j].shape() != layout[i].shape()) return layout.name(i);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!layout.find(params.name(i))) return params.name(i);
  }
  return std::nullopt;
}

}  // namespace mrha
