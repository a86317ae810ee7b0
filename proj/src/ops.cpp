#include "blockprop/ops.hpp"

#include <algorithm>
#include <cmath>

namespace blockprop {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw Error(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Output rows [lo, hi) whose tap at kernel offset `k` lands inside [0, extent).
void valid_range(std::size_t out_extent, std::size_t in_extent, std::size_t stride, std::size_t pad,
                 std::size_t offset, std::size_t& lo, std::size_t& hi) {
  const long s = static_cast<long>(stride);
  const long shift = static_cast<long>(offset) - static_cast<long>(pad);  // in = out*s + shift
  long first = 0;
  if (shift < 0) first = (-shift + s - 1) / s;
  long last = (static_cast<long>(in_extent) - 1 - shift);  // out*s <= last
  long end = last < 0 ? 0 : last / s + 1;
  end = std::min<long>(end, static_cast<long>(out_extent));
  lo = static_cast<std::size_t>(std::min(first, end));
  hi = static_cast<std::size_t>(end);
}

}  // namespace

ConvSpec ConvSpec::make(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                        std::size_t stride, std::size_t pad) {
  ConvSpec s;
  s.kernel_h = s.kernel_w = kernel;
  s.stride = stride;
  s.pad = pad;
  s.in_channels = in_channels;
  s.out_channels = out_channels;
  s.weights = Tensor::nchw(out_channels, in_channels, kernel, kernel);
  s.bias = Tensor(Shape{out_channels});
  return s;
}

void ConvSpec::validate() const {
  if (stride < 1) throw Error("conv: stride must be >= 1");
  if (dilation < 1) throw Error("conv: dilation must be >= 1");
  if (kernel_h < 1 || kernel_w < 1) throw Error("conv: kernel extents must be >= 1");
  const Shape expected{out_channels, in_channels, kernel_h, kernel_w};
  if (weights.shape() != expected) {
    throw Error("conv: weight shape " + shape_str(weights.shape()) + " inconsistent with expected " +
                shape_str(expected));
  }
  if (bias.shape() != Shape{out_channels}) {
    throw Error("conv: bias shape " + shape_str(bias.shape()) + " inconsistent with " +
                std::to_string(out_channels) + " output channels");
  }
}

std::size_t ConvSpec::out_h(std::size_t in_h) const {
  const std::size_t span = dilation * (kernel_h - 1) + 1;
  if (in_h + 2 * pad < span) {
    throw Error("conv: input height " + std::to_string(in_h) + " too small for kernel with padding");
  }
  return (in_h + 2 * pad - span) / stride + 1;
}

std::size_t ConvSpec::out_w(std::size_t in_w) const {
  const std::size_t span = dilation * (kernel_w - 1) + 1;
  if (in_w + 2 * pad < span) {
    throw Error("conv: input width " + std::to_string(in_w) + " too small for kernel with padding");
  }
  return (in_w + 2 * pad - span) / stride + 1;
}

Tensor conv2d(const Tensor& input, const ConvSpec& spec) {
  require_rank4(input, "conv2d");
  spec.validate();
  if (input.c() != spec.in_channels) {
    throw Error("conv2d: input has " + std::to_string(input.c()) + " channels, spec expects " +
                std::to_string(spec.in_channels));
  }
  const std::size_t N = input.n(), H = input.h(), W = input.w();
  const std::size_t OH = spec.out_h(H), OW = spec.out_w(W);
  const std::size_t S = spec.stride;
  Tensor out = Tensor::nchw(N, spec.out_channels, OH, OW);

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t co = 0; co < spec.out_channels; ++co) {
      float* dst = out.plane(n, co);
      for (std::size_t ci = 0; ci < spec.in_channels; ++ci) {
        const float* src = input.plane(n, ci);
        for (std::size_t kh = 0; kh < spec.kernel_h; ++kh) {
          std::size_t oh0, oh1;
          valid_range(OH, H, S, spec.pad, kh * spec.dilation, oh0, oh1);
          for (std::size_t kw = 0; kw < spec.kernel_w; ++kw) {
            std::size_t ow0, ow1;
            valid_range(OW, W, S, spec.pad, kw * spec.dilation, ow0, ow1);
            const float wv = spec.weights.at(co, ci, kh, kw);
            for (std::size_t oh = oh0; oh < oh1; ++oh) {
              const std::size_t ih = oh * S + kh * spec.dilation - spec.pad;
              const float* row = src + ih * W;
              float* orow = dst + oh * OW;
              const std::size_t xoff = kw * spec.dilation - spec.pad;
              for (std::size_t ow = ow0; ow < ow1; ++ow) orow[ow] += wv * row[ow * S + xoff];
            }
          }
        }
      }
      const float b = spec.bias[co];
      for (std::size_t i = 0; i < OH * OW; ++i) dst[i] += b;
    }
  }
  require_finite(out, "conv2d");
  return out;
}

ConvGrads conv2d_grad(const Tensor& input, const ConvSpec& spec, const Tensor& grad_out, bool input_grad) {
  require_rank4(input, "conv2d_grad");
  spec.validate();
  if (input.c() != spec.in_channels) throw Error("conv2d_grad: input channel mismatch");
  const std::size_t N = input.n(), H = input.h(), W = input.w();
  const std::size_t OH = spec.out_h(H), OW = spec.out_w(W);
  const Shape expected{N, spec.out_channels, OH, OW};
  if (grad_out.shape() != expected) {
    throw Error("conv2d_grad: grad_out shape " + shape_str(grad_out.shape()) + " does not match output " +
                shape_str(expected));
  }
  const std::size_t S = spec.stride;
  ConvGrads g{input_grad ? Tensor(input.shape()) : Tensor(), Tensor(spec.weights.shape()), Tensor(spec.bias.shape())};

  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t co = 0; co < spec.out_channels; ++co) {
      const float* go = grad_out.plane(n, co);
      double bsum = 0.0;
      for (std::size_t i = 0; i < OH * OW; ++i) bsum += go[i];
      g.bias[co] += static_cast<float>(bsum);
      for (std::size_t ci = 0; ci < spec.in_channels; ++ci) {
        const float* src = input.plane(n, ci);
        float* gi = input_grad ? g.input.plane(n, ci) : nullptr;
        for (std::size_t kh = 0; kh < spec.kernel_h; ++kh) {
          std::size_t oh0, oh1;
          valid_range(OH, H, S, spec.pad, kh * spec.dilation, oh0, oh1);
          for (std::size_t kw = 0; kw < spec.kernel_w; ++kw) {
            std::size_t ow0, ow1;
            valid_range(OW, W, S, spec.pad, kw * spec.dilation, ow0, ow1);
            const float wv = spec.weights.at(co, ci, kh, kw);
            const std::size_t xoff = kw * spec.dilation - spec.pad;
            double wsum = 0.0;
            for (std::size_t oh = oh0; oh < oh1; ++oh) {
              const std::size_t ih = oh * S + kh * spec.dilation - spec.pad;
              const float* row = src + ih * W;
              const float* gorow = go + oh * OW;
              if (gi) {
                float* grow = gi + ih * W;
                for (std::size_t ow = ow0; ow < ow1; ++ow) grow[ow * S + xoff] += wv * gorow[ow];
              }
              float rsum = 0.0f;
              for (std::size_t ow = ow0; ow < ow1; ++ow) rsum += row[ow * S + xoff] * gorow[ow];
              wsum += rsum;
            }
            g.weights.at(co, ci, kh, kw) += static_cast<float>(wsum);
          }
        }
      }
    }
  }
  return g;
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::MaxPool2: return "maxpool2";
    case OpKind::AvgPool2: return "avgpool2";
    case OpKind::GlobalAvgPool: return "global_avgpool";
    case OpKind::UpsampleNearest2: return "upsample_nearest2";
    case OpKind::UpsampleBilinear2: return "upsample_bilinear2";
  }
  return "unknown";
}

OpKind op_from_name(std::string_view name) {
  for (OpKind k : {OpKind::Relu, OpKind::Sigmoid, OpKind::MaxPool2, OpKind::AvgPool2, OpKind::GlobalAvgPool,
                   OpKind::UpsampleNearest2, OpKind::UpsampleBilinear2}) {
    if (op_name(k) == name) return k;
  }
  throw Error("unsupported operator kind '" + std::string(name) + "'");
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.storage()) v = v > 0.0f ? v : 0.0f;
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& grad_out) {
  require_same_shape(x, grad_out, "relu_backward");
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) g[i] = x[i] > 0.0f ? grad_out[i] : 0.0f;
  return g;
}

Tensor sigmoid(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.storage()) v = 1.0f / (1.0f + std::exp(-v));
  return y;
}

Tensor sigmoid_backward(const Tensor& y, const Tensor& grad_out) {
  require_same_shape(y, grad_out, "sigmoid_backward");
  Tensor g(y.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) g[i] = grad_out[i] * y[i] * (1.0f - y[i]);
  return g;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor y = a;
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += b[i];
  return y;
}

Tensor maxpool2(const Tensor& x) {
  require_rank4(x, "maxpool2");
  if (x.h() % 2 || x.w() % 2) throw Error("maxpool2: spatial extents must be even, got " + shape_str(x.shape()));
  const std::size_t OH = x.h() / 2, OW = x.w() / 2;
  Tensor y = Tensor::nchw(x.n(), x.c(), OH, OW);
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          float m = x.at(n, c, 2 * oy, 2 * ox);
          m = std::max(m, x.at(n, c, 2 * oy, 2 * ox + 1));
          m = std::max(m, x.at(n, c, 2 * oy + 1, 2 * ox));
          m = std::max(m, x.at(n, c, 2 * oy + 1, 2 * ox + 1));
          y.at(n, c, oy, ox) = m;
        }
  return y;
}

Tensor maxpool2_backward(const Tensor& x, const Tensor& grad_out) {
  require_rank4(x, "maxpool2_backward");
  const std::size_t OH = x.h() / 2, OW = x.w() / 2;
  if (grad_out.shape() != Shape{x.n(), x.c(), OH, OW}) throw Error("maxpool2_backward: grad_out shape mismatch");
  Tensor g(x.shape());
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          std::size_t by = 2 * oy, bx = 2 * ox;
          float m = x.at(n, c, by, bx);
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const float v = x.at(n, c, 2 * oy + dy, 2 * ox + dx);
              if (v > m) {
                m = v;
                by = 2 * oy + dy;
                bx = 2 * ox + dx;
              }
            }
          g.at(n, c, by, bx) += grad_out.at(n, c, oy, ox);
        }
  return g;
}

Tensor avgpool2(const Tensor& x) {
  require_rank4(x, "avgpool2");
  if (x.h() % 2 || x.w() % 2) throw Error("avgpool2: spatial extents must be even, got " + shape_str(x.shape()));
  const std::size_t OH = x.h() / 2, OW = x.w() / 2;
  Tensor y = Tensor::nchw(x.n(), x.c(), OH, OW);
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox)
          y.at(n, c, oy, ox) = 0.25f * (x.at(n, c, 2 * oy, 2 * ox) + x.at(n, c, 2 * oy, 2 * ox + 1) +
                                        x.at(n, c, 2 * oy + 1, 2 * ox) + x.at(n, c, 2 * oy + 1, 2 * ox + 1));
  return y;
}

Tensor avgpool2_backward(const Tensor& x, const Tensor& grad_out) {
  require_rank4(x, "avgpool2_backward");
  const std::size_t OH = x.h() / 2, OW = x.w() / 2;
  if (grad_out.shape() != Shape{x.n(), x.c(), OH, OW}) throw Error("avgpool2_backward: grad_out shape mismatch");
  Tensor g(x.shape());
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t y = 0; y < x.h(); ++y)
        for (std::size_t xx = 0; xx < x.w(); ++xx) g.at(n, c, y, xx) = 0.25f * grad_out.at(n, c, y / 2, xx / 2);
  return g;
}

namespace {

std::size_t bin_start(std::size_t i, std::size_t in, std::size_t out) { return (i * in) / out; }
std::size_t bin_end(std::size_t i, std::size_t in, std::size_t out) { return ((i + 1) * in + out - 1) / out; }

}  // namespace

Tensor adaptive_avgpool(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank4(x, "adaptive_avgpool");
  if (out_h == 0 || out_w == 0 || out_h > x.h() || out_w > x.w()) {
    throw Error("adaptive_avgpool: cannot pool " + shape_str(x.shape()) + " to " + std::to_string(out_h) + "x" +
                std::to_string(out_w));
  }
  Tensor y = Tensor::nchw(x.n(), x.c(), out_h, out_w);
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const std::size_t y0 = bin_start(oy, x.h(), out_h), y1 = bin_end(oy, x.h(), out_h);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const std::size_t x0 = bin_start(ox, x.w(), out_w), x1 = bin_end(ox, x.w(), out_w);
          float s = 0.0f;
          for (std::size_t yy = y0; yy < y1; ++yy)
            for (std::size_t xx = x0; xx < x1; ++xx) s += x.at(n, c, yy, xx);
          y.at(n, c, oy, ox) = s / static_cast<float>((y1 - y0) * (x1 - x0));
        }
      }
  return y;
}

Tensor adaptive_avgpool_backward(const Tensor& x, const Tensor& grad_out) {
  require_rank4(x, "adaptive_avgpool_backward");
  require_rank4(grad_out, "adaptive_avgpool_backward");
  if (grad_out.n() != x.n() || grad_out.c() != x.c()) throw Error("adaptive_avgpool_backward: shape mismatch");
  const std::size_t out_h = grad_out.h(), out_w = grad_out.w();
  Tensor g(x.shape());
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const std::size_t y0 = bin_start(oy, x.h(), out_h), y1 = bin_end(oy, x.h(), out_h);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const std::size_t x0 = bin_start(ox, x.w(), out_w), x1 = bin_end(ox, x.w(), out_w);
          const float share = grad_out.at(n, c, oy, ox) / static_cast<float>((y1 - y0) * (x1 - x0));
          for (std::size_t yy = y0; yy < y1; ++yy)
            for (std::size_t xx = x0; xx < x1; ++xx) g.at(n, c, yy, xx) += share;
        }
      }
  return g;
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  require_rank4(x, "upsample_nearest");
  if (factor < 1) throw Error("upsample_nearest: factor must be >= 1");
  Tensor y = Tensor::nchw(x.n(), x.c(), x.h() * factor, x.w() * factor);
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t yy = 0; yy < y.h(); ++yy)
        for (std::size_t xx = 0; xx < y.w(); ++xx) y.at(n, c, yy, xx) = x.at(n, c, yy / factor, xx / factor);
  return y;
}

Tensor upsample_nearest_backward(const Tensor& x, const Tensor& grad_out, std::size_t factor) {
  require_rank4(x, "upsample_nearest_backward");
  if (grad_out.shape() != Shape{x.n(), x.c(), x.h() * factor, x.w() * factor}) {
    throw Error("upsample_nearest_backward: grad_out shape mismatch");
  }
  Tensor g(x.shape());
  for (std::size_t n = 0; n < x.n(); ++n)
    for (std::size_t c = 0; c < x.c(); ++c)
      for (std::size_t yy = 0; yy < grad_out.h(); ++yy)
        for (std::size_t xx = 0; xx < grad_out.w(); ++xx)
          g.at(n, c, yy / factor, xx / factor) += grad_out.at(n, c, yy, xx);
  return g;
}

namespace {

struct Tap {
  std::size_t i0, i1;
  float l1;  // weight of i1; i0 gets 1 - l1
};

Tap bilinear_tap(std::size_t dst, std::size_t in, std::size_t out) {
  const float scale = static_cast<float>(in) / static_cast<float>(out);
  float src = (static_cast<float>(dst) + 0.5f) * scale - 0.5f;
  if (src < 0.0f) src = 0.0f;
  std::size_t i0 = static_cast<std::size_t>(src);
  if (i0 > in - 1) i0 = in - 1;
  const std::size_t i1 = std::min(i0 + 1, in - 1);
  return {i0, i1, src - static_cast<float>(i0)};
}

}  // namespace

Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank4(x, "resize_bilinear");
  if (out_h == 0 || out_w == 0) throw Error("resize_bilinear: output extents must be positive");
  Tensor y = Tensor::nchw(x.n(), x.c(), out_h, out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const Tap ty = bilinear_tap(oy, x.h(), out_h);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const Tap tx = bilinear_tap(ox, x.w(), out_w);
      for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t c = 0; c < x.c(); ++c) {
          const float top = (1.0f - tx.l1) * x.at(n, c, ty.i0, tx.i0) + tx.l1 * x.at(n, c, ty.i0, tx.i1);
          const float bot = (1.0f - tx.l1) * x.at(n, c, ty.i1, tx.i0) + tx.l1 * x.at(n, c, ty.i1, tx.i1);
          y.at(n, c, oy, ox) = (1.0f - ty.l1) * top + ty.l1 * bot;
        }
    }
  }
  return y;
}

Tensor resize_bilinear_backward(const Tensor& x, const Tensor& grad_out) {
  require_rank4(x, "resize_bilinear_backward");
  require_rank4(grad_out, "resize_bilinear_backward");
  if (grad_out.n() != x.n() || grad_out.c() != x.c()) throw Error("resize_bilinear_backward: shape mismatch");
  const std::size_t out_h = grad_out.h(), out_w = grad_out.w();
  Tensor g(x.shape());
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const Tap ty = bilinear_tap(oy, x.h(), out_h);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const Tap tx = bilinear_tap(ox, x.w(), out_w);
      for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t c = 0; c < x.c(); ++c) {
          const float go = grad_out.at(n, c, oy, ox);
          g.at(n, c, ty.i0, tx.i0) += (1.0f - ty.l1) * (1.0f - tx.l1) * go;
          g.at(n, c, ty.i0, tx.i1) += (1.0f - ty.l1) * tx.l1 * go;
          g.at(n, c, ty.i1, tx.i0) += ty.l1 * (1.0f - tx.l1) * go;
          g.at(n, c, ty.i1, tx.i1) += ty.l1 * tx.l1 * go;
        }
    }
  }
  return g;
}

Tensor apply_op(OpKind kind, const Tensor& x) {
  switch (kind) {
    case OpKind::Relu: return relu(x);
    case OpKind::Sigmoid: return sigmoid(x);
    case OpKind::MaxPool2: return maxpool2(x);
    case OpKind::AvgPool2: return avgpool2(x);
    case OpKind::GlobalAvgPool: return adaptive_avgpool(x, 1, 1);
    case OpKind::UpsampleNearest2: return upsample_nearest(x, 2);
    case OpKind::UpsampleBilinear2: return resize_bilinear(x, x.h() * 2, x.w() * 2);
  }
  throw Error("apply_op: unsupported operator");
}

Tensor apply_op_backward(OpKind kind, const Tensor& x, const Tensor& y, const Tensor& grad_out) {
  switch (kind) {
    case OpKind::Relu: return relu_backward(x, grad_out);
    case OpKind::Sigmoid: return sigmoid_backward(y, grad_out);
    case OpKind::MaxPool2: return maxpool2_backward(x, grad_out);
    case OpKind::AvgPool2: return avgpool2_backward(x, grad_out);
    case OpKind::GlobalAvgPool: return adaptive_avgpool_backward(x, grad_out);
    case OpKind::UpsampleNearest2: return upsample_nearest_backward(x, grad_out, 2);
    case OpKind::UpsampleBilinear2: return resize_bilinear_backward(x, grad_out);
  }
  throw Error("apply_op_backward: unsupported operator");
}

Tensor concat_channels(const std::vector<const Tensor*>& parts) {
  if (parts.empty()) throw Error("concat_channels: no inputs");
  const Tensor& first = *parts.front();
  require_rank4(first, "concat_channels");
  std::size_t channels = 0;
  for (const Tensor* p : parts) {
    require_rank4(*p, "concat_channels");
    if (p->n() != first.n() || p->h() != first.h() || p->w() != first.w()) {
      throw Error("concat_channels: extent mismatch " + shape_str(p->shape()) + " vs " + shape_str(first.shape()));
    }
    channels += p->c();
  }
  Tensor out = Tensor::nchw(first.n(), channels, first.h(), first.w());
  const std::size_t plane = first.h() * first.w();
  for (std::size_t n = 0; n < first.n(); ++n) {
    std::size_t c0 = 0;
    for (const Tensor* p : parts) {
      std::copy_n(p->plane(n, 0), p->c() * plane, out.plane(n, c0));
      c0 += p->c();
    }
  }
  return out;
}

}  // namespace blockprop
