#include "mrha/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mrha {

AxisGeometry axis_geometry(std::size_t in, std::size_t kernel, std::size_t stride,
                           Padding padding) {
  if (stride == 0) throw ContractError("stride must be at least 1");
  AxisGeometry g;
  if (padding == Padding::Valid) {
    if (kernel > in) {
      throw DimensionError("kernel extent " + std::to_string(kernel) +
                           " exceeds input extent " + std::to_string(in) +
                           " under valid padding");
    }
    g.out = (in - kernel) / stride + 1;
    return g;
  }
  g.out = (in + stride - 1) / stride;
  const std::size_t needed = (g.out - 1) * stride + kernel;
  const std::size_t total = needed > in ? needed - in : 0;
  g.pad_before = total / 2;
  return g;
}

namespace {

struct Range {
  std::size_t lo = 0;
  std::size_t hi = 0;
};

// Outputs o with o*stride + k - pad inside [0, in).
Range valid_outputs(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                    std::size_t pad) {
  Range r;
  if (k < pad) r.lo = (pad - k + stride - 1) / stride;
  if (in + pad > k) r.hi = std::min(out, (in + pad - k + stride - 1) / stride);
  if (r.hi < r.lo) r.hi = r.lo;
  return r;
}

struct ConvShape {
  std::size_t in_c, in_h, in_w, out_c, kh, kw;
  AxisGeometry gy, gx;
};

ConvShape check_conv(const Tensor& input, const Tensor& kernel, std::size_t stride,
                     Padding padding, bool depthwise) {
  require_rank(input, 3, "conv input");
  require_rank(kernel, 4, "conv kernel");
  ConvShape s{};
  s.in_c = input.dim(0);
  s.in_h = input.dim(1);
  s.in_w = input.dim(2);
  s.out_c = kernel.dim(0);
  s.kh = kernel.dim(2);
  s.kw = kernel.dim(3);
  if (depthwise) {
    if (kernel.dim(1) != 1 || s.out_c != s.in_c) {
      throw DimensionError("depthwise kernel " + to_string(kernel.shape()) +
                           " does not match input channels (axis 0) " +
                           std::to_string(s.in_c) + "; expected [" +
                           std::to_string(s.in_c) + ",1,kh,kw]");
    }
  } else if (kernel.dim(1) != s.in_c) {
    throw DimensionError("conv2d: kernel in_channels (axis 1) = " +
                         std::to_string(kernel.dim(1)) +
                         " but input channels (axis 0) = " + std::to_string(s.in_c));
  }
  s.gy = axis_geometry(s.in_h, s.kh, stride, padding);
  s.gx = axis_geometry(s.in_w, s.kw, stride, padding);
  return s;
}

// Flat input offset touched by output (oy, ox) through kernel tap (ky, kx).
// Only called for outputs inside valid_outputs, so the result is in range.
std::size_t first_input(std::size_t oy, std::size_t ky, std::size_t ox, std::size_t kx,
                        std::size_t stride, const ConvShape& s) {
  const std::size_t iy = oy * stride + ky - s.gy.pad_before;
  const std::size_t ix = ox * stride + kx - s.gx.pad_before;
  return iy * s.in_w + ix;
}

void check_bias(const Tensor& bias, std::size_t channels) {
  require_shape(bias, {channels}, "conv bias");
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t stride, Padding padding) {
  const ConvShape s = check_conv(input, kernel, stride, padding, false);
  check_bias(bias, s.out_c);
  const std::size_t oh = s.gy.out, ow = s.gx.out;
  Tensor out({s.out_c, oh, ow});
  double* o = out.raw();
  const double* in = input.raw();
  const double* k = kernel.raw();
  for (std::size_t co = 0; co < s.out_c; ++co) {
    std::fill(o + co * oh * ow, o + (co + 1) * oh * ow, bias[co]);
  }
  for (std::size_t ky = 0; ky < s.kh; ++ky) {
    const Range ry = valid_outputs(s.in_h, oh, ky, stride, s.gy.pad_before);
    for (std::size_t kx = 0; kx < s.kw; ++kx) {
      const Range rx = valid_outputs(s.in_w, ow, kx, stride, s.gx.pad_before);
      if (rx.lo == rx.hi) continue;
      for (std::size_t co = 0; co < s.out_c; ++co) {
        double* oc = o + co * oh * ow;
        for (std::size_t ci = 0; ci < s.in_c; ++ci) {
          const double w = k[((co * s.in_c + ci) * s.kh + ky) * s.kw + kx];
          if (w == 0.0) continue;
          const double* ic = in + ci * s.in_h * s.in_w;
          for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
            const double* irow = ic + first_input(oy, ky, rx.lo, kx, stride, s);
            double* orow = oc + oy * ow + rx.lo;
            const std::size_t n = rx.hi - rx.lo;
            if (stride == 1) {
              for (std::size_t j = 0; j < n; ++j) orow[j] += w * irow[j];
            } else {
              for (std::size_t j = 0; j < n; ++j) orow[j] += w * irow[j * stride];
            }
          }
        }
      }
    }
  }
  return out;
}

Tensor conv2d_reference(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                        std::size_t stride, Padding padding) {
  const ConvShape s = check_conv(input, kernel, stride, padding, false);
  check_bias(bias, s.out_c);
  Tensor out({s.out_c, s.gy.out, s.gx.out});
  for (std::size_t co = 0; co < s.out_c; ++co) {
    for (std::size_t oy = 0; oy < s.gy.out; ++oy) {
      for (std::size_t ox = 0; ox < s.gx.out; ++ox) {
        double acc = bias[co];
        for (std::size_t ci = 0; ci < s.in_c; ++ci) {
          for (std::size_t ky = 0; ky < s.kh; ++ky) {
            for (std::size_t kx = 0; kx < s.kw; ++kx) {
              const long iy = static_cast<long>(oy * stride + ky) -
                              static_cast<long>(s.gy.pad_before);
              const long ix = static_cast<long>(ox * stride + kx) -
                              static_cast<long>(s.gx.pad_before);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(s.in_h) ||
                  ix >= static_cast<long>(s.in_w)) {
                continue;
              }
              acc += kernel[((co * s.in_c + ci) * s.kh + ky) * s.kw + kx] *
                     input.at(ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
            }
          }
        }
        out.at(co, oy, ox) = acc;
      }
    }
  }
  return out;
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel,
                          const Tensor& grad_output, std::size_t stride,
                          Padding padding) {
  const ConvShape s = check_conv(input, kernel, stride, padding, false);
  const std::size_t oh = s.gy.out, ow = s.gx.out;
  require_shape(grad_output, {s.out_c, oh, ow}, "conv2d grad_output");
  ConvGrads g{Tensor(input.shape()), Tensor(kernel.shape()), Tensor({s.out_c})};
  const double* in = input.raw();
  const double* k = kernel.raw();
  const double* go = grad_output.raw();
  double* gi = g.input.raw();
  double* gk = g.kernel.raw();
  for (std::size_t co = 0; co < s.out_c; ++co) {
    double acc = 0.0;
    for (std::size_t p = 0; p < oh * ow; ++p) acc += go[co * oh * ow + p];
    g.bias[co] = acc;
  }
  for (std::size_t ky = 0; ky < s.kh; ++ky) {
    const Range ry = valid_outputs(s.in_h, oh, ky, stride, s.gy.pad_before);
    for (std::size_t kx = 0; kx < s.kw; ++kx) {
      const Range rx = valid_outputs(s.in_w, ow, kx, stride, s.gx.pad_before);
      if (rx.lo == rx.hi) continue;
      for (std::size_t co = 0; co < s.out_c; ++co) {
        const double* gc = go + co * oh * ow;
        for (std::size_t ci = 0; ci < s.in_c; ++ci) {
          const std::size_t widx = ((co * s.in_c + ci) * s.kh + ky) * s.kw + kx;
          const double w = k[widx];
          const double* ic = in + ci * s.in_h * s.in_w;
          double* gic = gi + ci * s.in_h * s.in_w;
          double wacc = 0.0;
          for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
            const std::size_t off = first_input(oy, ky, rx.lo, kx, stride, s);
            const double* irow = ic + off;
            double* girow = gic + off;
            const double* grow = gc + oy * ow + rx.lo;
            const std::size_t n = rx.hi - rx.lo;
            if (stride == 1) {
              for (std::size_t j = 0; j < n; ++j) {
                wacc += grow[j] * irow[j];
                girow[j] += w * grow[j];
              }
            } else {
              for (std::size_t j = 0; j < n; ++j) {
                wacc += grow[j] * irow[j * stride];
                girow[j * stride] += w * grow[j];
              }
            }
          }
          gk[widx] += wacc;
        }
      }
    }
  }
  return g;
}

Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                        std::size_t stride, Padding padding) {
  const ConvShape s = check_conv(input, kernel, stride, padding, true);
  check_bias(bias, s.in_c);
  const std::size_t oh = s.gy.out, ow = s.gx.out;
  Tensor out({s.in_c, oh, ow});
  for (std::size_t c = 0; c < s.in_c; ++c) {
    double* oc = out.raw() + c * oh * ow;
    std::fill(oc, oc + oh * ow, bias[c]);
    const double* ic = input.raw() + c * s.in_h * s.in_w;
    for (std::size_t ky = 0; ky < s.kh; ++ky) {
      const Range ry = valid_outputs(s.in_h, oh, ky, stride, s.gy.pad_before);
      for (std::size_t kx = 0; kx < s.kw; ++kx) {
        const Range rx = valid_outputs(s.in_w, ow, kx, stride, s.gx.pad_before);
        const double w = kernel[(c * s.kh + ky) * s.kw + kx];
        for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
          const double* irow = ic + first_input(oy, ky, rx.lo, kx, stride, s);
          double* orow = oc + oy * ow + rx.lo;
          for (std::size_t j = 0; j < rx.hi - rx.lo; ++j) orow[j] += w * irow[j * stride];
        }
      }
    }
  }
  return out;
}

ConvGrads depthwise_conv2d_backward(const Tensor& input, const Tensor& kernel,
                                    const Tensor& grad_output, std::size_t stride,
                                    Padding padding) {
  const ConvShape s = check_conv(input, kernel, stride, padding, true);
  const std::size_t oh = s.gy.out, ow = s.gx.out;
  require_shape(grad_output, {s.in_c, oh, ow}, "depthwise grad_output");
  ConvGrads g{Tensor(input.shape()), Tensor(kernel.shape()), Tensor({s.in_c})};
  for (std::size_t c = 0; c < s.in_c; ++c) {
    const double* gc = grad_output.raw() + c * oh * ow;
    const double* ic = input.raw() + c * s.in_h * s.in_w;
    double* gic = g.input.raw() + c * s.in_h * s.in_w;
    double bacc = 0.0;
    for (std::size_t p = 0; p < oh * ow; ++p) bacc += gc[p];
    g.bias[c] = bacc;
    for (std::size_t ky = 0; ky < s.kh; ++ky) {
      const Range ry = valid_outputs(s.in_h, oh, ky, stride, s.gy.pad_before);
      for (std::size_t kx = 0; kx < s.kw; ++kx) {
        const Range rx = valid_outputs(s.in_w, ow, kx, stride, s.gx.pad_before);
        const std::size_t widx = (c * s.kh + ky) * s.kw + kx;
        const double w = kernel[widx];
        double wacc = 0.0;
        for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
          const std::size_t off = first_input(oy, ky, rx.lo, kx, stride, s);
          const double* grow = gc + oy * ow + rx.lo;
          for (std::size_t j = 0; j < rx.hi - rx.lo; ++j) {
            wacc += grow[j] * ic[off + j * stride];
            gic[off + j * stride] += w * grow[j];
          }
        }
        g.kernel[widx] = wacc;
      }
    }
  }
  return g;
}

Tensor global_average_pool(const Tensor& input) {
  require_rank(input, 3, "global_average_pool input");
  const std::size_t c = input.dim(0), hw = input.dim(1) * input.dim(2);
  Tensor out({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t p = 0; p < hw; ++p) acc += input[ch * hw + p];
    out[ch] = acc / static_cast<double>(hw);
  }
  return out;
}

Tensor global_average_pool_backward(const Shape& input_shape, const Tensor& grad_output) {
  Tensor g(input_shape);
  const std::size_t hw = input_shape.at(1) * input_shape.at(2);
  for (std::size_t ch = 0; ch < input_shape[0]; ++ch) {
    const double v = grad_output[ch] / static_cast<double>(hw);
    for (std::size_t p = 0; p < hw; ++p) g[ch * hw + p] = v;
  }
  return g;
}

double activate(Activation op, double x) {
  switch (op) {
    case Activation::Sigmoid:
      // Branch keeps exp() from overflowing for large |x|.
      if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
      else {
        const double e = std::exp(x);
        return e / (1.0 + e);
      }
    case Activation::Tanh:
      return std::tanh(x);
    case Activation::Swish:
      return x * activate(Activation::Sigmoid, x);
    case Activation::Relu:
      return x > 0.0 ? x : 0.0;
  }
  return 0.0;
}

double activate_derivative(Activation op, double x) {
  switch (op) {
    case Activation::Sigmoid: {
      const double s = activate(Activation::Sigmoid, x);
      return s * (1.0 - s);
    }
    case Activation::Tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::Swish: {
      const double s = activate(Activation::Sigmoid, x);
      return s + x * s * (1.0 - s);
    }
    case Activation::Relu:
      return x > 0.0 ? 1.0 : 0.0;
  }
  return 0.0;
}

Tensor elementwise(Activation op, const Tensor& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = activate(op, input[i]);
  return out;
}

Tensor softmax(const Tensor& logits) {
  require_rank(logits, 1, "softmax input");
  const double peak = *std::max_element(logits.data().begin(), logits.data().end());
  Tensor out(logits.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - peak);
    total += out[i];
  }
  out *= 1.0 / total;
  return out;
}

Tensor linear(const Tensor& weight, const Tensor& input, const Tensor& bias) {
  require_rank(weight, 2, "linear weight");
  const std::size_t n_out = weight.dim(0), n_in = weight.dim(1);
  require_shape(input, {n_in}, "linear input");
  require_shape(bias, {n_out}, "linear bias");
  Tensor out({n_out});
  for (std::size_t o = 0; o < n_out; ++o) {
    double acc = bias[o];
    for (std::size_t i = 0; i < n_in; ++i) acc += weight[o * n_in + i] * input[i];
    out[o] = acc;
  }
  return out;
}

}  // namespace mrha
