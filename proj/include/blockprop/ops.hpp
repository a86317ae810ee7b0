#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "blockprop/tensor.hpp"

namespace blockprop {

// Convolution hyper-parameters plus weights (Cout, Cin, Kh, Kw) and bias (Cout).
struct ConvSpec {
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t dilation = 1;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  Tensor weights;
  Tensor bias;

  static ConvSpec make(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                       std::size_t stride = 1, std::size_t pad = 0);

  void validate() const;
  std::size_t out_h(std::size_t in_h) const;
  std::size_t out_w(std::size_t in_w) const;
  // Multiply-accumulates per output pixel.
  std::size_t macs_per_pixel() const { return kernel_h * kernel_w * in_channels * out_channels; }
};

struct ConvGrads {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

// Direct convolution. Each output accumulates over input channels first, then
// kernel rows, then kernel columns, and the bias is added last; this order is
// the same for every padding/tiling so dense and block-wise runs agree.
Tensor conv2d(const Tensor& input, const ConvSpec& spec);
// With input_grad false the input gradient is left empty.
ConvGrads conv2d_grad(const Tensor& input, const ConvSpec& spec, const Tensor& grad_out, bool input_grad = true);

// Operators without parameters. Each forward has a matching backward taking the
// forward input, the forward output and the gradient of the output.
enum class OpKind {
  Relu,
  Sigmoid,
  MaxPool2,
  AvgPool2,
  GlobalAvgPool,
  UpsampleNearest2,
  UpsampleBilinear2,
};

std::string_view op_name(OpKind kind);
OpKind op_from_name(std::string_view name);

Tensor relu(const Tensor& x);
Tensor relu_backward(const Tensor& x, const Tensor& grad_out);
Tensor sigmoid(const Tensor& x);
Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_out);
Tensor add(const Tensor& a, const Tensor& b);

Tensor maxpool2(const Tensor& x);
Tensor maxpool2_backward(const Tensor& x, const Tensor& grad_out);
Tensor avgpool2(const Tensor& x);
Tensor avgpool2_backward(const Tensor& x, const Tensor& grad_out);

// Adaptive average pooling with the usual floor/ceil bin boundaries.
Tensor adaptive_avgpool(const Tensor& x, std::size_t out_h, std::size_t out_w);
Tensor adaptive_avgpool_backward(const Tensor& x, const Tensor& grad_out);

Tensor upsample_nearest(const Tensor& x, std::size_t factor);
Tensor upsample_nearest_backward(const Tensor& x, const Tensor& grad_out, std::size_t factor);
// Half-pixel-centre bilinear resize (align_corners = false) with edge clamping.
Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);
Tensor resize_bilinear_backward(const Tensor& x, const Tensor& grad_out);

Tensor apply_op(OpKind kind, const Tensor& x);
Tensor apply_op_backward(OpKind kind, const Tensor& x, const Tensor& y, const Tensor& grad_out);

Tensor concat_channels(const std::vector<const Tensor*>& parts);

}  // namespace blockprop
