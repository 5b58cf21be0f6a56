#pragma once

// Forward and backward kernels on plain tensors. The differentiable wrappers in
// autodiff.hpp are built from these.

#include <cstddef>

#include "mrha/tensor.hpp"

namespace mrha {

enum class Padding { Same, Valid };

/// Output extent and leading padding for one spatial axis.
struct AxisGeometry {
  std::size_t out = 0;
  std::size_t pad_before = 0;
};

/// "same" pads symmetrically with zeros; an odd total puts the extra pixel on
/// the bottom/right. Output is ceil(in/stride) for "same" and
/// floor((in - k)/stride) + 1 for "valid".
AxisGeometry axis_geometry(std::size_t in, std::size_t kernel, std::size_t stride,
                           Padding padding);

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t stride, Padding padding);

/// Direct six-loop convolution; slow, used to cross-check conv2d.
Tensor conv2d_reference(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                        std::size_t stride, Padding padding);

struct ConvGrads {
  Tensor input;
  Tensor kernel;
  Tensor bias;
};

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel,
                          const Tensor& grad_output, std::size_t stride,
                          Padding padding);

/// kernel is [C,1,kh,kw]; channel c of the output sees only channel c of the input.
Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                        std::size_t stride, Padding padding);

ConvGrads depthwise_conv2d_backward(const Tensor& input, const Tensor& kernel,
                                    const Tensor& grad_output, std::size_t stride,
                                    Padding padding);

Tensor global_average_pool(const Tensor& input);
Tensor global_average_pool_backward(const Shape& input_shape, const Tensor& grad_output);

enum class Activation { Sigmoid, Tanh, Swish, Relu };

double activate(Activation op, double x);
/// d/dx of the activation evaluated at x.
double activate_derivative(Activation op, double x);

Tensor elementwise(Activation op, const Tensor& input);

/// Numerically stable softmax over a rank-1 tensor.
Tensor softmax(const Tensor& logits);

/// weight [out,in], input [in], bias [out] -> [out]
Tensor linear(const Tensor& weight, const Tensor& input, const Tensor& bias);

}  // namespace mrha
