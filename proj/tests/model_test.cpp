#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "mrha/model.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace mrha {
namespace {

using test::oracle_convlstm;
using test::random_lstm;
using test::random_tensor;
using test::sig;


// Straight-line scalar SE: GAP -> FC -> relu -> FC -> sigmoid -> scale.
Tensor oracle_se(const Tensor& f, const SeParams& p) {
  const std::size_t c = f.dim(0), h = f.dim(1), w = f.dim(2), r = p.reduce_weight.dim(0);
  std::vector<double> mean(c, 0.0), z(r, 0.0), s(c, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) mean[ch] += f.at(ch, y, x);
    mean[ch] /= static_cast<double>(h * w);
  }
  for (std::size_t j = 0; j < r; ++j) {
    double a = p.reduce_bias[j];
    for (std::size_t ch = 0; ch < c; ++ch) a += p.reduce_weight[j * c + ch] * mean[ch];
    z[j] = a > 0 ? a : 0.0;
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    double a = p.expand_bias[ch];
    for (std::size_t j = 0; j < r; ++j) a += p.expand_weight[ch * r + j] * z[j];
    s[ch] = sig(a);
  }
  Tensor out(f.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.at(ch, y, x) = s[ch] * f.at(ch, y, x);
  return out;
}

ConvLstmParams zero_lstm(std::size_t in_c, std::size_t hc) {
  ConvLstmParams p;
  p.hidden_channels = hc;
  for (std::size_t g = 0; g < 4; ++g) {
    p.input_kernels[g] = Tensor({hc, in_c, 3, 3});
    p.hidden_kernels[g] = Tensor({hc, hc, 3, 3});
    p.biases[g] = Tensor({hc});
  }
  return p;
}

SeParams zero_se(std::size_t c, std::size_t r) {
  return {Tensor({r, c}), Tensor({r}), Tensor({c, r}), Tensor({c})};
}

SeParams random_se(std::size_t c, std::size_t r, std::mt19937_64& rng) {
  return {random_tensor({r, c}, rng), random_tensor({r}, rng), random_tensor({c, r}, rng),
          random_tensor({c}, rng)};
}

TEST(SqueezeExcite, ZeroParamsHalveInput) {
  std::mt19937_64 rng(1);
  Tensor f = random_tensor({4, 3, 3}, rng);
  EXPECT_LT(max_abs_diff(se_recalibrate(f, zero_se(4, 2)), 0.5 * f), 1e-15);
}

TEST(SqueezeExcite, ZeroInputStaysZero) {
  std::mt19937_64 rng(2);
  EXPECT_EQ(se_recalibrate(Tensor({4, 3, 3}), random_se(4, 2, rng)), Tensor({4, 3, 3}));
}

TEST(SqueezeExcite, MatchesScalarOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor f = random_tensor({6, 4, 5}, rng);
    SeParams p = random_se(6, 3, rng);
    EXPECT_LT(max_abs_diff(se_recalibrate(f, p), oracle_se(f, p)), 1e-12);
  }
}

TEST(SqueezeExcite, ReductionMismatchIsConfigError) {
  EXPECT_THROW(se_recalibrate(Tensor({6, 2, 2}), zero_se(5, 1)), ConfigError);
  EXPECT_THROW(se_recalibrate(Tensor({6, 2, 2}), zero_se(6, 4)), ConfigError);
}

MbConvSpec spec(std::size_t e, std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                std::size_t r, bool residual) {
  MbConvSpec s;
  s.expansion_ratio = e;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel_size = k;
  s.stride = stride;
  s.se_reduction = r;
  s.has_residual = residual;
  return s;
}

TEST(MbConv, IdentityKernelsReduceToProjectionOfSwish) {
  // Expansion 1 has no expand conv; depthwise identity leaves swish(x), SE with
  // a large bias scales by exactly 1.0, so the block is project(swish(x)).
  std::mt19937_64 rng(4);
  const MbConvSpec s = spec(1, 3, 5, 3, 1, 3, false);
  Tensor x = random_tensor({3, 6, 6}, rng);
  MbConvParams p;
  p.depthwise_kernel = Tensor({3, 1, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) p.depthwise_kernel[c * 9 + 4] = 1.0;
  p.depthwise_bias = Tensor({3});
  p.se = zero_se(3, 1);
  p.se.expand_bias.fill(50.0);
  p.project_kernel = random_tensor({5, 3, 1, 1}, rng);
  p.project_bias = random_tensor({5}, rng);
  Tensor expected = conv2d(elementwise(Activation::Swish, x), p.project_kernel, p.project_bias, 1,
                           Padding::Same);
  EXPECT_LT(max_abs_diff(mbconv_forward(x, s, p), expected), 1e-15);
}

TEST(MbConv, ResidualPassthroughWithZeroWeights) {
  std::mt19937_64 rng(5);
  const MbConvSpec s = spec(4, 4, 4, 3, 1, 2, true);
  Tensor x = random_tensor({4, 5, 5}, rng);
  MbConvParams p;
  p.expand_kernel = Tensor({16, 4, 1, 1});
  p.expand_bias = Tensor({16});
  p.depthwise_kernel = Tensor({16, 1, 3, 3});
  p.depthwise_bias = Tensor({16});
  p.se = zero_se(16, 8);
  p.project_kernel = Tensor({4, 16, 1, 1});
  p.project_bias = Tensor({4});
  EXPECT_EQ(mbconv_forward(x, s, p), x);
}

TEST(MbConv, MatchesChainedPrimitiveOps) {
  std::mt19937_64 rng(6);
  const MbConvSpec s = spec(4, 8, 12, 3, 2, 4, false);
  Tensor x = random_tensor({8, 16, 16}, rng);
  MbConvParams p;
  p.expand_kernel = random_tensor({32, 8, 1, 1}, rng);
  p.expand_bias = random_tensor({32}, rng);
  p.depthwise_kernel = random_tensor({32, 1, 3, 3}, rng);
  p.depthwise_bias = random_tensor({32}, rng);
  p.se = random_se(32, 8, rng);
  p.project_kernel = random_tensor({12, 32, 1, 1}, rng);
  p.project_bias = random_tensor({12}, rng);

  Tensor h = elementwise(Activation::Swish, conv2d(x, p.expand_kernel, p.expand_bias, 1, Padding::Same));
  h = elementwise(Activation::Swish,
                  depthwise_conv2d(h, p.depthwise_kernel, p.depthwise_bias, 2, Padding::Same));
  h = oracle_se(h, p.se);
  h = conv2d(h, p.project_kernel, p.project_bias, 1, Padding::Same);

  Tensor got = mbconv_forward(x, s, p);
  ASSERT_EQ(got.shape(), (Shape{12, 8, 8}));
  EXPECT_LT(max_abs_diff(got, h), 1e-12);
}

TEST(MbConv, ContractViolations) {
  MbConvParams p;
  EXPECT_THROW(mbconv_forward(Tensor({3, 4, 4}), spec(1, 4, 4, 3, 1, 1, false), p), ConfigError);
  EXPECT_THROW(mbconv_forward(Tensor({4, 5, 5}), spec(1, 4, 4, 3, 2, 1, false), p), ConfigError);
  EXPECT_THROW(spec(2, 4, 6, 3, 1, 1, true).validate(), ConfigError);
  EXPECT_THROW(spec(2, 4, 6, 3, 1, 3, false).validate(), ConfigError);
  EXPECT_THROW(spec(2, 4, 6, 4, 1, 1, false).validate(), ConfigError);
}

TEST(Backbone, StandardConfigReducesSixtyFourToTwo) {
  const ModelConfig c = ModelConfig::standard();
  EXPECT_EQ(c.total_stride(), 32u);  // stem 2 x stages 2^4
  ParameterSet p = init_parameters(c, 7);
  std::mt19937_64 rng(7);
  Tensor out = backbone_forward(random_tensor({1, 64, 64}, rng, 0, 1), c, p);
  EXPECT_EQ(out.shape(), (Shape{80, 2, 2}));
}

TEST(Backbone, ZeroFrameAndZeroParamsGiveZeroFeatures) {
  const ModelConfig c = ModelConfig::tiny();
  ParameterSet p = parameter_layout(c);
  Tensor out = backbone_forward(Tensor({1, 16, 16}), c, p);
  EXPECT_EQ(out, Tensor(out.shape()));
}

TEST(Backbone, IsStatelessAcrossFrames) {
  const ModelConfig c = ModelConfig::tiny();
  ParameterSet p = init_parameters(c, 8);
  std::mt19937_64 rng(8);
  Tensor a = random_tensor({1, 16, 16}, rng, 0, 1), b = random_tensor({1, 16, 16}, rng, 0, 1);
  Tensor fa = backbone_forward(a, c, p), fb = backbone_forward(b, c, p);
  EXPECT_EQ(backbone_forward(b, c, p), fb);
  EXPECT_EQ(backbone_forward(a, c, p), fa);
}

TEST(Backbone, GridNotDivisibleByStrideIsRejectedAtValidation) {
  ModelConfig c = ModelConfig::standard();
  c.input_grid = 48;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(init_parameters(c, 1), ConfigError);
}

TEST(ModelConfigTest, InvariantsAndTextRoundTrip) {
  for (const ModelConfig& c : {ModelConfig::standard(), ModelConfig::reduced(), ModelConfig::reduced(64),
                               ModelConfig::tiny()}) {
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(ModelConfig::from_text(c.to_text()), c);
  }
  ModelConfig six = ModelConfig::standard();
  six.stages.pop_back();
  EXPECT_THROW(six.validate(), ConfigError);
  ModelConfig one_class = ModelConfig::standard();
  one_class.num_classes = 1;
  EXPECT_THROW(one_class.validate(), ConfigError);
  EXPECT_THROW(ModelConfig::from_text(ModelConfig::tiny().to_text() + "typo=1\n"), ConfigError);
}

TEST(ConvLstm, ZeroParamsHalveCell) {
  std::mt19937_64 rng(9);
  Tensor x = random_tensor({3, 4, 4}, rng);
  ConvLstmState s{random_tensor({2, 4, 4}, rng), random_tensor({2, 4, 4}, rng, -3, 3)};
  ConvLstmGates gates;
  ConvLstmState next = convlstm_step(x, s, zero_lstm(3, 2), &gates);
  EXPECT_EQ(gates.forget, Tensor({2, 4, 4}, 0.5));
  EXPECT_EQ(gates.input, Tensor({2, 4, 4}, 0.5));
  EXPECT_EQ(gates.output, Tensor({2, 4, 4}, 0.5));
  EXPECT_LT(max_abs_diff(next.cell, 0.5 * s.cell), 1e-15);
  Tensor expected_h(s.cell.shape());
  for (std::size_t i = 0; i < expected_h.size(); ++i) expected_h[i] = 0.5 * std::tanh(0.5 * s.cell[i]);
  EXPECT_LT(max_abs_diff(next.hidden, expected_h), 1e-15);
}

TEST(ConvLstm, ZeroEverythingStaysZero) {
  ConvLstmState next = convlstm_step(Tensor({3, 4, 4}), ConvLstmState::zeros(2, 4, 4), zero_lstm(3, 2));
  EXPECT_EQ(next.hidden, Tensor({2, 4, 4}));
  EXPECT_EQ(next.cell, Tensor({2, 4, 4}));
}

TEST(ConvLstm, MatchesScalarOracleAndGateRanges) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    ConvLstmParams p = random_lstm(4, 3, 3, rng);
    Tensor x = random_tensor({4, 5, 5}, rng, -2, 2);
    ConvLstmState s{random_tensor({3, 5, 5}, rng), random_tensor({3, 5, 5}, rng, -2, 2)};
    ConvLstmGates got_gates, want_gates;
    ConvLstmState got = convlstm_step(x, s, p, &got_gates);
    ConvLstmState want = oracle_convlstm(x, s, p, &want_gates);
    EXPECT_LT(max_abs_diff(got.hidden, want.hidden), 1e-12);
    EXPECT_LT(max_abs_diff(got.cell, want.cell), 1e-12);
    EXPECT_LT(max_abs_diff(got_gates.forget, want_gates.forget), 1e-12);
    for (const Tensor* g : {&got_gates.forget, &got_gates.input, &got_gates.output}) {
      for (double v : g->data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
      }
    }
    for (double v : got.hidden.data()) EXPECT_LT(std::abs(v), 1.0);
  }
}

TEST(ConvLstm, SpatialMismatchIsDimensionError) {
  EXPECT_THROW(convlstm_step(Tensor({3, 4, 4}), ConvLstmState::zeros(2, 5, 5), zero_lstm(3, 2)),
               DimensionError);
}

TEST(ConvLstm, GradientsThroughThreeStepsMatchFiniteDifferences) {
  std::mt19937_64 rng(11);
  ConvLstmParams p = random_lstm(4, 3, 3, rng);
  std::vector<Tensor> inputs;
  for (int t = 0; t < 3; ++t) inputs.push_back(random_tensor({4, 5, 5}, rng));
  Tensor probe = random_tensor({3, 5, 5}, rng);
  // Flatten params as [wx0..3, wh0..3, b0..3].
  std::vector<Tensor> flat;
  for (const auto& t : p.input_kernels) flat.push_back(t);
  for (const auto& t : p.hidden_kernels) flat.push_back(t);
  for (const auto& t : p.biases) flat.push_back(t);

  auto run = [&](GradientTape& tape, const std::vector<Tensor>& f, std::vector<Var>* watched) {
    ConvLstmVars v;
    std::vector<Var> vars;
    for (const Tensor& t : f) vars.push_back(tape.watch(t));
    for (std::size_t g = 0; g < 4; ++g) {
      v.input_kernels[g] = vars[g];
      v.hidden_kernels[g] = vars[4 + g];
      v.biases[g] = vars[8 + g];
    }
    RecurrentState s{tape.constant(Tensor({3, 5, 5})), tape.constant(Tensor({3, 5, 5}))};
    for (const Tensor& x : inputs) s = convlstm_step(tape.constant(x), s, v);
    if (watched) *watched = vars;
    return ad::sum(ad::mul(ad::add(s.hidden, s.cell), tape.constant(probe)));
  };
  GradientTape tape;
  std::vector<Var> vars;
  tape.backward(run(tape, flat, &vars));
  auto f = [&](const std::vector<Tensor>& in) {
    GradientTape t(false);
    return run(t, in, nullptr).value()[0];
  };
  for (std::size_t i = 0; i < flat.size(); ++i) {
    auto r = test::compare_gradients(tape.gradient(vars[i]), test::numeric_gradient(f, flat, i));
    EXPECT_LT(r.worst, 1e-4) << "tensor " << i << " entry " << r.worst_index;
  }
}

TEST(Init, DeterministicPerSeed) {
  const ModelConfig c = ModelConfig::reduced();
  EXPECT_EQ(init_parameters(c, 42), init_parameters(c, 42));
  EXPECT_FALSE(init_parameters(c, 42) == init_parameters(c, 43));
}

TEST(Init, BiasesAndForgetGate) {
  const ModelConfig c = ModelConfig::reduced();
  ParameterSet p = init_parameters(c, 5);
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i].rank() != 1) continue;
    const double want = p.name(i) == "lstm.b.f" ? 1.0 : 0.0;
    for (double v : p[i].data()) EXPECT_EQ(v, want) << p.name(i);
  }
  // Zero input and zero state leave only the biases, so forget = σ(1).
  ConvLstmParams lstm = convlstm_params(p);
  const std::size_t hc = lstm.hidden_channels, side = c.feature_side();
  ConvLstmGates gates;
  convlstm_step(Tensor({c.feature_channels(), side, side}), ConvLstmState::zeros(hc, side, side),
                lstm, &gates);
  for (double v : gates.forget.data()) EXPECT_NEAR(v, 0.7310585786300049, 1e-15);
  for (double v : gates.input.data()) EXPECT_EQ(v, 0.5);
}

TEST(ModelGraphTest, EndToEndGradientsMatchFiniteDifferences) {
  const ModelConfig c = ModelConfig::tiny();
  ParameterSet p = init_parameters(c, 21);
  std::mt19937_64 rng(21);
  // Perturb biases so every path carries gradient.
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i].rank() == 1) p[i] = random_tensor(p[i].shape(), rng, -0.3, 0.3);
  std::vector<Tensor> frames{random_tensor({1, 16, 16}, rng, 0, 1),
                             random_tensor({1, 16, 16}, rng, 0, 1)};
  const std::size_t target = 3;

  GradientTape tape;
  ModelGraph graph(tape, c, p);
  tape.backward(ad::sparse_cross_entropy(graph.probabilities(frames), target));

  auto f = [&](const std::vector<Tensor>& values) {
    ParameterSet q = p;
    q.values() = values;
    return -std::log(classify_sequence(frames, c, q)[target]);
  };
  double worst = 0.0;
  std::string worst_name;
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto r = test::compare_gradients(tape.gradient(graph.parameters()[i]),
                                     test::numeric_gradient(f, p.values(), i));
    if (r.worst > worst) {
      worst = r.worst;
      worst_name = p.name(i);
    }
  }
  EXPECT_LT(worst, 1e-4) << worst_name;
}

TEST(ModelGraphTest, InferenceTapeMatchesPlainForward) {
  const ModelConfig c = ModelConfig::tiny();
  ParameterSet p = init_parameters(c, 22);
  std::mt19937_64 rng(22);
  std::vector<Tensor> frames{random_tensor({1, 16, 16}, rng, 0, 1),
                             random_tensor({1, 16, 16}, rng, 0, 1)};
  GradientTape tape(false);
  ModelGraph graph(tape, c, p);
  EXPECT_LT(max_abs_diff(graph.probabilities(frames).value(), classify_sequence(frames, c, p)), 1e-15);
}

TEST(ModelGraphTest, DropoutMaskZeroesLogits) {
  const ModelConfig c = ModelConfig::tiny();
  ParameterSet p = init_parameters(c, 23);
  std::mt19937_64 rng(23);
  std::vector<Tensor> frames{random_tensor({1, 16, 16}, rng, 0, 1)};
  GradientTape tape(false);
  ModelGraph graph(tape, c, p);
  Tensor mask({c.num_classes}, 0.0);
  Tensor probs = graph.probabilities(frames, &mask).value();
  for (double v : probs.data()) EXPECT_NEAR(v, 1.0 / 12.0, 1e-15);
}

TEST(Classify, OutputIsProbabilityVector) {
  const ModelConfig c = ModelConfig::tiny();
  ParameterSet p = init_parameters(c, 3);
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Tensor> frames;
    for (int t = 0; t < 1 + trial; ++t) frames.push_back(random_tensor({1, 16, 16}, rng, 0, 1));
    Tensor probs = classify_sequence(frames, c, p);
    ASSERT_EQ(probs.shape(), (Shape{12}));
    double total = 0.0;
    for (double v : probs.data()) {
      EXPECT_GT(v, 0.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(Classify, IsOrderSensitiveAndDeterministic) {
  const ModelConfig c = ModelConfig::tiny();
  ParameterSet p = init_parameters(c, 4);
  std::mt19937_64 rng(13);
  std::vector<Tensor> frames;
  for (int t = 0; t < 4; ++t) frames.push_back(random_tensor({1, 16, 16}, rng, 0, 1));
  Tensor base = classify_sequence(frames, c, p);
  EXPECT_EQ(classify_sequence(frames, c, p), base);
  auto longer = frames;
  longer.push_back(frames.back());
  EXPECT_GT(max_abs_diff(classify_sequence(longer, c, p), base), 0.0);
  std::vector<Tensor> reversed(frames.rbegin(), frames.rend());
  EXPECT_GT(max_abs_diff(classify_sequence(reversed, c, p), base), 0.0);
}

TEST(Classify, SingleFrameEqualsManualComposition) {
  const ModelConfig c = ModelConfig::tiny();
  ParameterSet p = init_parameters(c, 5);
  std::mt19937_64 rng(14);
  Tensor frame = random_tensor({1, 16, 16}, rng, 0, 1);
  Tensor features = backbone_forward(frame, c, p);
  const std::size_t side = c.feature_side();
  ConvLstmState s = convlstm_step(features, ConvLstmState::zeros(c.hidden_channels, side, side),
                                  convlstm_params(p));
  Tensor manual = softmax(linear(p.get("head.weight"), global_average_pool(s.hidden), p.get("head.bias")));
  EXPECT_LT(max_abs_diff(classify_sequence({frame}, c, p), manual), 1e-15);
}

TEST(Classify, EmptySequenceIsContractError) {
  const ModelConfig c = ModelConfig::tiny();
  EXPECT_THROW(classify_sequence({}, c, init_parameters(c, 1)), ContractError);
}

TEST(Checkpoint, RoundTripsAndReportsMismatches) {
  const ModelConfig c = ModelConfig::tiny();
  ParameterSet p = init_parameters(c, 6);
  std::stringstream ss;
  write_checkpoint(ss, c, p);
  EXPECT_EQ(ss.str().substr(0, 6), "ENCL1\n");
  Checkpoint cp = read_checkpoint(ss);
  EXPECT_EQ(cp.config, c);
  EXPECT_EQ(cp.params, p);
  EXPECT_FALSE(first_mismatch(c, p).has_value());
  ModelConfig wider = c;
  wider.hidden_channels = 5;
  EXPECT_EQ(first_mismatch(wider, p).value_or(""), "lstm.wx.f");
}

}  // namespace
}  // namespace mrha
