#pragma once

// Reverse-mode differentiation over the kernels in ops.hpp.
//
// A GradientTape records every value produced by the ops below, in execution
// order, together with a closure that pushes the output gradient back to the
// inputs. Because recording order is already a topological order, backward()
// just walks the tape in reverse. A tape belongs to one thread.

#include <cstddef>
#include <functional>
#include <string_view>
#include <vector>

#include "mrha/ops.hpp"
#include "mrha/tensor.hpp"

namespace mrha {

class GradientTape;

/// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  GradientTape* tape() const { return tape_; }

 private:
  friend class GradientTape;
  Var(GradientTape* tape, std::size_t id) : tape_(tape), id_(id) {}
  GradientTape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class GradientTape {
 public:
  using Backward = std::function<void(GradientTape&, const Tensor& grad_output)>;

  /// With record_gradients = false no closures are kept; values still are.
  explicit GradientTape(bool record_gradients = true) : recording_(record_gradients) {}
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  bool recording() const { return recording_; }

  Var constant(Tensor value);
  /// Leaf whose gradient is wanted.
  Var watch(Tensor value);

  /// Used by the op implementations.
  Var record(std::string_view op, Tensor value, std::vector<std::size_t> parents,
             Backward backward);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  void accumulate(std::size_t id, const Tensor& grad);

  /// Seeds d(loss)/d(loss) = 1 and propagates. loss must hold one value.
  void backward(Var loss);

  /// Accumulated gradient; a zero tensor of the right shape when v never
  /// contributed to the loss.
  Tensor gradient(Var v) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  bool recording_;
};

namespace ad {

Var conv2d(Var input, Var kernel, Var bias, std::size_t stride, Padding padding);
Var depthwise_conv2d(Var input, Var kernel, Var bias, std::size_t stride, Padding padding);
Var global_average_pool(Var input);
Var activation(Activation op, Var input);
inline Var sigmoid(Var x) { return activation(Activation::Sigmoid, x); }
inline Var tanh(Var x) { return activation(Activation::Tanh, x); }
inline Var swish(Var x) { return activation(Activation::Swish, x); }
inline Var relu(Var x) { return activation(Activation::Relu, x); }

Var add(Var a, Var b);
/// Hadamard product.
Var mul(Var a, Var b);
/// out[c,h,w] = x[c,h,w] * scale[c]
Var scale_channels(Var x, Var scale);
Var linear(Var weight, Var input, Var bias);
Var softmax(Var logits);
/// Multiplies by a fixed mask (e.g. inverted dropout); mask is not differentiated.
Var mask(Var x, const Tensor& mask);
Var sum(Var x);
/// -log(max(probs[target], floor)) as a one-element tensor.
Var sparse_cross_entropy(Var probs, std::size_t target, double floor = 1e-12);

}  // namespace ad

}  // namespace mrha
