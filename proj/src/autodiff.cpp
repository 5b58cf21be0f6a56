#include "mrha/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

namespace mrha {

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw ContractError("use of an unbound Var");
  return tape_->value(id_);
}

Var GradientTape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var GradientTape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var GradientTape::watch(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = recording_;
  return push(std::move(n));
}

Var GradientTape::record(std::string_view op, Tensor value,
                         std::vector<std::size_t> parents, Backward backward) {
  if (!value.all_finite()) {
    throw NumericError(std::string(op) + " produced a non-finite value");
  }
  Node n;
  n.value = std::move(value);
  if (recording_) {
    n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                  [this](std::size_t p) { return nodes_[p].requires_grad; });
    if (n.requires_grad) n.backward = std::move(backward);
  }
  return push(std::move(n));
}

void GradientTape::accumulate(std::size_t id, const Tensor& grad) {
  Node& n = nodes_.at(id);
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = grad;
  } else {
    n.grad += grad;
  }
}

void GradientTape::backward(Var loss) {
  if (loss.tape() != this) throw ContractError("loss was not recorded on this tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        to_string(loss.value().shape()));
  }
  if (!recording_) throw ContractError("backward on a tape that does not record gradients");
  for (Node& n : nodes_) n.grad = Tensor();
  accumulate(loss.id(), Tensor(loss.value().shape(), 1.0));
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    // Closures only touch nodes with smaller ids, so n stays put.
    n.backward(*this, n.grad);
  }
}

Tensor GradientTape::gradient(Var v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) return Tensor(n.value.shape());
  return n.grad;
}

namespace ad {

namespace {

GradientTape& same_tape(Var a, Var b) {
  if (a.tape() == nullptr || a.tape() != b.tape()) {
    throw ContractError("operands live on different tapes");
  }
  return *a.tape();
}

GradientTape& same_tape(Var a, Var b, Var c) {
  same_tape(a, b);
  return same_tape(b, c);
}

}  // namespace

Var conv2d(Var input, Var kernel, Var bias, std::size_t stride, Padding padding) {
  GradientTape& tape = same_tape(input, kernel, bias);
  Tensor out = mrha::conv2d(input.value(), kernel.value(), bias.value(), stride, padding);
  const std::size_t xi = input.id(), ki = kernel.id(), bi = bias.id();
  return tape.record("conv2d", std::move(out), {xi, ki, bi},
                     [=](GradientTape& t, const Tensor& g) {
                       ConvGrads grads =
                           conv2d_backward(t.value(xi), t.value(ki), g, stride, padding);
                       t.accumulate(xi, grads.input);
                       t.accumulate(ki, grads.kernel);
                       t.accumulate(bi, grads.bias);
                     });
}

Var depthwise_conv2d(Var input, Var kernel, Var bias, std::size_t stride, Padding padding) {
  GradientTape& tape = same_tape(input, kernel, bias);
  Tensor out =
      mrha::depthwise_conv2d(input.value(), kernel.value(), bias.value(), stride, padding);
  const std::size_t xi = input.id(), ki = kernel.id(), bi = bias.id();
  return tape.record("depthwise_conv2d", std::move(out), {xi, ki, bi},
                     [=](GradientTape& t, const Tensor& g) {
                       ConvGrads grads = depthwise_conv2d_backward(t.value(xi), t.value(ki),
                                                                   g, stride, padding);
                       t.accumulate(xi, grads.input);
                       t.accumulate(ki, grads.kernel);
                       t.accumulate(bi, grads.bias);
                     });
}

Var global_average_pool(Var input) {
  GradientTape& tape = *input.tape();
  const std::size_t xi = input.id();
  const Shape shape = input.shape();
  return tape.record("global_average_pool", mrha::global_average_pool(input.value()), {xi},
                     [=](GradientTape& t, const Tensor& g) {
                       t.accumulate(xi, global_average_pool_backward(shape, g));
                     });
}

Var activation(Activation op, Var input) {
  GradientTape& tape = *input.tape();
  const std::size_t xi = input.id();
  return tape.record("activation", elementwise(op, input.value()), {xi},
                     [=](GradientTape& t, const Tensor& g) {
                       const Tensor& x = t.value(xi);
                       Tensor gx(x.shape());
                       for (std::size_t i = 0; i < x.size(); ++i) {
                         gx[i] = g[i] * activate_derivative(op, x[i]);
                       }
                       t.accumulate(xi, gx);
                     });
}

Var add(Var a, Var b) {
  GradientTape& tape = same_tape(a, b);
  Tensor out = a.value() + b.value();
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record("add", std::move(out), {ai, bi},
                     [=](GradientTape& t, const Tensor& g) {
                       t.accumulate(ai, g);
                       t.accumulate(bi, g);
                     });
}

Var mul(Var a, Var b) {
  GradientTape& tape = same_tape(a, b);
  require_shape(b.value(), a.value().shape(), "mul operand");
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  const std::size_t ai = a.id(), bi = b.id();
  return tape.record("mul", std::move(out), {ai, bi},
                     [=](GradientTape& t, const Tensor& g) {
                       const Tensor& av = t.value(ai);
                       const Tensor& bv = t.value(bi);
                       Tensor ga(av.shape()), gb(bv.shape());
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         ga[i] = g[i] * bv[i];
                         gb[i] = g[i] * av[i];
                       }
                       t.accumulate(ai, ga);
                       t.accumulate(bi, gb);
                     });
}

Var scale_channels(Var x, Var scale) {
  GradientTape& tape = same_tape(x, scale);
  const Tensor& xv = x.value();
  require_rank(xv, 3, "scale_channels input");
  require_shape(scale.value(), {xv.dim(0)}, "scale_channels scale");
  const std::size_t hw = xv.dim(1) * xv.dim(2);
  Tensor out(xv.shape());
  for (std::size_t c = 0; c < xv.dim(0); ++c) {
    for (std::size_t p = 0; p < hw; ++p) out[c * hw + p] = xv[c * hw + p] * scale.value()[c];
  }
  const std::size_t xi = x.id(), si = scale.id();
  return tape.record("scale_channels", std::move(out), {xi, si},
                     [=](GradientTape& t, const Tensor& g) {
                       const Tensor& xv = t.value(xi);
                       const Tensor& sv = t.value(si);
                       Tensor gx(xv.shape()), gs(sv.shape());
                       for (std::size_t c = 0; c < sv.size(); ++c) {
                         double acc = 0.0;
                         for (std::size_t p = 0; p < hw; ++p) {
                           gx[c * hw + p] = g[c * hw + p] * sv[c];
                           acc += g[c * hw + p] * xv[c * hw + p];
                         }
                         gs[c] = acc;
                       }
                       t.accumulate(xi, gx);
                       t.accumulate(si, gs);
                     });
}

Var linear(Var weight, Var input, Var bias) {
  GradientTape& tape = same_tape(weight, input, bias);
  Tensor out = mrha::linear(weight.value(), input.value(), bias.value());
  const std::size_t wi = weight.id(), xi = input.id(), bi = bias.id();
  return tape.record("linear", std::move(out), {wi, xi, bi},
                     [=](GradientTape& t, const Tensor& g) {
                       const Tensor& w = t.value(wi);
                       const Tensor& x = t.value(xi);
                       const std::size_t n_out = w.dim(0), n_in = w.dim(1);
                       Tensor gw(w.shape()), gx(x.shape());
                       for (std::size_t o = 0; o < n_out; ++o) {
                         for (std::size_t i = 0; i < n_in; ++i) {
                           gw[o * n_in + i] = g[o] * x[i];
                           gx[i] += g[o] * w[o * n_in + i];
                         }
                       }
                       t.accumulate(wi, gw);
                       t.accumulate(xi, gx);
                       t.accumulate(bi, g);
                     });
}

Var softmax(Var logits) {
  GradientTape& tape = *logits.tape();
  Tensor out = mrha::softmax(logits.value());
  const std::size_t li = logits.id();
  const Tensor probs = out;
  return tape.record("softmax", std::move(out), {li},
                     [=](GradientTape& t, const Tensor& g) {
                       double dot = 0.0;
                       for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * probs[i];
                       Tensor gl(probs.shape());
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         gl[i] = probs[i] * (g[i] - dot);
                       }
                       t.accumulate(li, gl);
                     });
}

Var mask(Var x, const Tensor& mask) {
  GradientTape& tape = *x.tape();
  require_shape(mask, x.value().shape(), "mask");
  Tensor out(x.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * mask[i];
  const std::size_t xi = x.id();
  return tape.record("mask", std::move(out), {xi},
                     [=](GradientTape& t, const Tensor& g) {
                       Tensor gx(g.shape());
                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * mask[i];
                       t.accumulate(xi, gx);
                     });
}

Var sum(Var x) {
  GradientTape& tape = *x.tape();
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  const std::size_t xi = x.id();
  const Shape shape = x.shape();
  return tape.record("sum", Tensor::scalar(total), {xi},
                     [=](GradientTape& t, const Tensor& g) {
                       t.accumulate(xi, Tensor(shape, g[0]));
                     });
}

Var sparse_cross_entropy(Var probs, std::size_t target, double floor) {
  GradientTape& tape = *probs.tape();
  const Tensor& p = probs.value();
  require_rank(p, 1, "cross-entropy prediction");
  if (target >= p.size()) {
    throw ContractError("class index " + std::to_string(target) + " out of range for " +
                        std::to_string(p.size()) + " classes");
  }
  const double clipped = std::max(p[target], floor);
  const std::size_t pi = probs.id();
  const bool floored = p[target] < floor;
  const Shape shape = p.shape();
  return tape.record("sparse_cross_entropy", Tensor::scalar(-std::log(clipped)), {pi},
                     [=](GradientTape& t, const Tensor& g) {
                       Tensor gp(shape);
                       // Flat region below the floor.
                       if (!floored) gp[target] = -g[0] / clipped;
                       t.accumulate(pi, gp);
                     });
}

}  // namespace ad

}  // namespace mrha
