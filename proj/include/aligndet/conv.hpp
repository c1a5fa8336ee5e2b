#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "aligndet/box.hpp"
#include "aligndet/tensor.hpp"

namespace aligndet {

// Stride-1 "same" convolution spec. Weights are laid out FC-style as
// [Cout x (Cin*kh*kw)], row index c*kh*kw + i*kw + j for tap (i, j) of
// input channel c.
template <typename T>
struct ConvSpecT {
  int kernel_h = 0;
  int kernel_w = 0;
  int in_channels = 0;
  int out_channels = 0;
  TensorT<T> weights;  // [Cout x (Cin*kh*kw)]
  TensorT<T> bias;     // [Cout]

  ConvSpecT() = default;
  ConvSpecT(int kh, int kw, int cin, int cout)
      : kernel_h(kh),
        kernel_w(kw),
        in_channels(cin),
        out_channels(cout),
        weights({std::size_t(cout), std::size_t(cin * kh * kw)}),
        bias({std::size_t(cout)}) {
    if (kh <= 0 || kw <= 0 || cin <= 0 || cout <= 0)
      throw std::invalid_argument("conv spec: non-positive dimension");
  }

  std::size_t taps() const { return std::size_t(kernel_h * kernel_w); }

  void check_weights() const {
    if (weights.rank() != 2 || weights.dim(0) != std::size_t(out_channels) ||
        weights.dim(1) != std::size_t(in_channels * kernel_h * kernel_w))
      throw std::invalid_argument("conv spec: weight shape inconsistent");
    if (bias.rank() != 1 || bias.dim(0) != std::size_t(out_channels))
      throw std::invalid_argument("conv spec: bias shape inconsistent");
  }
};

using ConvSpec = ConvSpecT<double>;
using ConvSpecF = ConvSpecT<float>;

// A [C x H x W] tensor plus its image-pixel stride.
template <typename T>
struct FeatureMapT {
  TensorT<T> tensor;  // [C x H x W]
  int stride = 1;

  FeatureMapT() = default;
  FeatureMapT(TensorT<T> t, int s) : tensor(std::move(t)), stride(s) {
    if (tensor.rank() != 3) throw std::invalid_argument("feature map must be 3-D");
    if (stride < 1) throw std::invalid_argument("feature map stride must be >= 1");
  }

  int channels() const { return int(tensor.dim(0)); }
  int height() const { return int(tensor.dim(1)); }
  int width() const { return int(tensor.dim(2)); }
};

using FeatureMap = FeatureMapT<double>;
using FeatureMapF = FeatureMapT<float>;

// Per-location sampling deviations, [(2*kh*kw) x H x W] in feature-grid
// units. Channel 2*(i*kw+j) is the x (row) offset of tap (i, j), the next
// channel the y (column) offset.
template <typename T>
struct OffsetFieldT {
  TensorT<T> tensor;

  OffsetFieldT() = default;
  explicit OffsetFieldT(TensorT<T> t) : tensor(std::move(t)) {
    if (tensor.rank() != 3) throw std::invalid_argument("offset field must be 3-D");
  }

  template <typename Spec>
  void check_layout(const Spec& spec) const {
    if (tensor.dim(0) != 2 * spec.taps())
      throw std::invalid_argument("offset field: channel count != 2*kh*kw");
  }
};

using OffsetField = OffsetFieldT<double>;
using OffsetFieldF = OffsetFieldT<float>;

// Continuous feature-grid point; cell (r, c) has its center at
// (r + 0.5, c + 0.5). x runs along rows, y along columns.
struct SamplePoint {
  double x = 0.0;
  double y = 0.0;
};

namespace detail {

inline void check_equivalence_mode(int kernel, int extent, const char* axis) {
  if (kernel > 2 * extent + 1)
    throw std::invalid_argument(std::string("im2col: kernel exceeds 2*") + axis + "+1");
}

}  // namespace detail

// Unrolls stride-1 "same" convolution tiles into [(kh*kw*Cin) x (H*W)].
// Column X*W+Y holds the tile for output location (X, Y); out-of-bounds
// taps are zero.
template <typename T>
TensorT<T> im2col(const FeatureMapT<T>& f, const ConvSpecT<T>& spec) {
  const int C = f.channels(), H = f.height(), W = f.width();
  const int kh = spec.kernel_h, kw = spec.kernel_w;
  detail::check_equivalence_mode(kh, H, "H");
  detail::check_equivalence_mode(kw, W, "W");
  TensorT<T> cols({std::size_t(kh * kw * C), std::size_t(H * W)});
  const std::size_t ncols = std::size_t(H) * W;
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const std::size_t row = std::size_t(c * kh * kw + i * kw + j);
        T* out = cols.data() + row * ncols;
        for (int X = 0; X < H; ++X) {
          const int r = X - kh / 2 + i;
          for (int Y = 0; Y < W; ++Y) {
            const int cc = Y - kw / 2 + j;
            out[X * W + Y] = (r >= 0 && r < H && cc >= 0 && cc < W)
                                 ? f.tensor.at3(std::size_t(c), std::size_t(r),
                                                std::size_t(cc))
                                 : T(0);
          }
        }
      }
    }
  }
  return cols;
}

// Scatter-add adjoint of im2col: <im2col(x), y> == <x, col2im(y)>.
template <typename T>
TensorT<T> col2im(const TensorT<T>& cols, int C, int H, int W,
                  const ConvSpecT<T>& spec) {
  const int kh = spec.kernel_h, kw = spec.kernel_w;
  if (cols.rank() != 2 || cols.dim(0) != std::size_t(kh * kw * C) ||
      cols.dim(1) != std::size_t(H) * W)
    throw std::invalid_argument("col2im: cols shape mismatch");
  TensorT<T> out({std::size_t(C), std::size_t(H), std::size_t(W)});
  const std::size_t ncols = std::size_t(H) * W;
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const std::size_t row = std::size_t(c * kh * kw + i * kw + j);
        const T* in = cols.data() + row * ncols;
        for (int X = 0; X < H; ++X) {
          const int r = X - kh / 2 + i;
          if (r < 0 || r >= H) continue;
          for (int Y = 0; Y < W; ++Y) {
            const int cc = Y - kw / 2 + j;
            if (cc < 0 || cc >= W) continue;
            out.at3(std::size_t(c), std::size_t(r), std::size_t(cc)) += in[X * W + Y];
          }
        }
      }
    }
  }
  return out;
}

// conv = im2col + FC: out[Cout x H x W] = W * im2col(f) + bias.
template <typename T>
TensorT<T> conv_forward(const FeatureMapT<T>& f, const ConvSpecT<T>& spec) {
  spec.check_weights();
  if (f.channels() != spec.in_channels)
    throw std::invalid_argument("conv_forward: channel mismatch");
  const int H = f.height(), W = f.width();
  TensorT<T> out2d = gemm(spec.weights, im2col(f, spec));
  TensorT<T> out = out2d.reshaped(
      {std::size_t(spec.out_channels), std::size_t(H), std::size_t(W)});
  for (int co = 0; co < spec.out_channels; ++co) {
    const T b = spec.bias[std::size_t(co)];
    for (int p = 0; p < H * W; ++p)
      out[std::size_t(co) * H * W + std::size_t(p)] += b;
  }
  return out;
}

struct ConvGrads {
  Tensor grad_input;    // [Cin x H x W]
  Tensor grad_weights;  // [Cout x (Cin*kh*kw)]
  Tensor grad_bias;     // [Cout]
};

ConvGrads conv_backward(const FeatureMap& f, const ConvSpec& spec,
                        const Tensor& grad_out);

// Bilinear value at p under the half-integer center convention. Cells
// outside [0,H)x[0,W) contribute 0, matching convolution zero padding.
template <typename T>
T bilinear_sample(const FeatureMapT<T>& f, SamplePoint p, int channel) {
  const int H = f.height(), W = f.width();
  const double u = p.x - 0.5, v = p.y - 0.5;
  const int r0 = int(std::floor(u)), c0 = int(std::floor(v));
  const double fx = u - r0, fy = v - c0;
  T acc = T(0);
  for (int dr = 0; dr <= 1; ++dr) {
    const int r = r0 + dr;
    if (r < 0 || r >= H) continue;
    const double wx = dr ? fx : 1.0 - fx;
    if (wx == 0.0) continue;
    for (int dc = 0; dc <= 1; ++dc) {
      const int c = c0 + dc;
      if (c < 0 || c >= W) continue;
      const double wy = dc ? fy : 1.0 - fy;
      if (wy == 0.0) continue;
      acc += T(wx * wy) * f.tensor.at3(std::size_t(channel), std::size_t(r),
                                       std::size_t(c));
    }
  }
  return acc;
}

struct BilinearGrads {
  // Up to four (row, col, weight*upstream) contributions into the map.
  struct CellGrad {
    int row;
    int col;
    double value;
  };
  std::array<CellGrad, 4> cells{};
  int n_cells = 0;
  double grad_x = 0.0;
  double grad_y = 0.0;
};

// Analytic partials of bilinear_sample. On a cell-center gridline the
// point derivative takes the lower-cell limit.
BilinearGrads bilinear_grads(const FeatureMap& f, SamplePoint p, int channel,
                             double upstream);

// RoIAlign with sampling ratio 1: bin (i, j) reads the single point
// (x1 + (x2-x1)(i+0.5)/out_h, ...) / S.
template <typename T>
TensorT<T> roialign(const FeatureMapT<T>& f, const Box& roi, int out_h, int out_w) {
  if (roi.x2 < roi.x1 || roi.y2 < roi.y1)
    throw std::invalid_argument("roialign: negative-extent roi");
  if (out_h <= 0 || out_w <= 0)
    throw std::invalid_argument("roialign: non-positive output size");
  const int C = f.channels();
  const double S = double(f.stride);
  TensorT<T> out({std::size_t(C), std::size_t(out_h), std::size_t(out_w)});
  for (int i = 0; i < out_h; ++i) {
    const double px = (roi.x1 + (roi.x2 - roi.x1) * (i + 0.5) / out_h) / S;
    for (int j = 0; j < out_w; ++j) {
      const double py = (roi.y1 + (roi.y2 - roi.y1) * (j + 0.5) / out_w) / S;
      for (int c = 0; c < C; ++c)
        out.at3(std::size_t(c), std::size_t(i), std::size_t(j)) =
            bilinear_sample(f, {px, py}, c);
    }
  }
  return out;
}

// The image-space box whose RoIAlign sampling points coincide with the
// conv taps at output location (X, Y).
inline Box implicit_roi(int X, int Y, int kernel_h, int kernel_w, int stride) {
  const double S = double(stride);
  return Box{(X - kernel_h / 2) * S, (Y - kernel_w / 2) * S,
             (X - kernel_h / 2 + kernel_h) * S, (Y - kernel_w / 2 + kernel_w) * S};
}

template <typename T>
Box implicit_roi(int X, int Y, const ConvSpecT<T>& spec, int stride) {
  return implicit_roi(X, Y, spec.kernel_h, spec.kernel_w, stride);
}

// Closed-form offsets that move the conv taps onto the RoIAlign sampling
// points of the given anchor:
//   O_x(i) = x1/S - X + floor(kh/2) + ((x2-x1)/(kh*S) - 1)(i+0.5)
// and analogously for O_y(j). anchors holds one box per location, row-major.
template <typename T>
OffsetFieldT<T> roiconv_offsets(const std::vector<Box>& anchors,
                                const ConvSpecT<T>& spec, int H, int W, int stride) {
  if (anchors.size() != std::size_t(H) * W)
    throw std::invalid_argument("roiconv_offsets: one anchor per location required");
  const int kh = spec.kernel_h, kw = spec.kernel_w;
  const double S = double(stride);
  OffsetFieldT<T> field(
      TensorT<T>({2 * spec.taps(), std::size_t(H), std::size_t(W)}));
  for (int X = 0; X < H; ++X) {
    for (int Y = 0; Y < W; ++Y) {
      const Box& b = anchors[std::size_t(X) * W + Y];
      if (b.x2 < b.x1 || b.y2 < b.y1)
        throw std::invalid_argument("roiconv_offsets: negative-extent anchor");
      for (int i = 0; i < kh; ++i) {
        const double ox =
            b.x1 / S - X + kh / 2 + ((b.x2 - b.x1) / (kh * S) - 1.0) * (i + 0.5);
        for (int j = 0; j < kw; ++j) {
          const double oy =
              b.y1 / S - Y + kw / 2 + ((b.y2 - b.y1) / (kw * S) - 1.0) * (j + 0.5);
          const std::size_t tap = std::size_t(i * kw + j);
          field.tensor.at3(2 * tap, std::size_t(X), std::size_t(Y)) = T(ox);
          field.tensor.at3(2 * tap + 1, std::size_t(X), std::size_t(Y)) = T(oy);
        }
      }
    }
  }
  return field;
}

// Deformable forward: tap (i, j) at (X, Y) samples bilinearly at
// Loc_conv(i, j) + offset. Zero offsets reproduce conv_forward.
template <typename T>
TensorT<T> deform_conv_forward(const FeatureMapT<T>& f, const ConvSpecT<T>& spec,
                               const OffsetFieldT<T>& offsets) {
  spec.check_weights();
  offsets.check_layout(spec);
  if (f.channels() != spec.in_channels)
    throw std::invalid_argument("deform_conv_forward: channel mismatch");
  const int C = f.channels(), H = f.height(), W = f.width();
  const int kh = spec.kernel_h, kw = spec.kernel_w;
  if (offsets.tensor.dim(1) != std::size_t(H) || offsets.tensor.dim(2) != std::size_t(W))
    throw std::invalid_argument("deform_conv_forward: offset spatial shape mismatch");
  const std::size_t ntap = spec.taps();
  TensorT<T> out({std::size_t(spec.out_channels), std::size_t(H), std::size_t(W)});
  std::vector<T> column(std::size_t(C) * ntap);
  for (int X = 0; X < H; ++X) {
    for (int Y = 0; Y < W; ++Y) {
      for (int i = 0; i < kh; ++i) {
        for (int j = 0; j < kw; ++j) {
          const std::size_t tap = std::size_t(i * kw + j);
          const double ox =
              double(offsets.tensor.at3(2 * tap, std::size_t(X), std::size_t(Y)));
          const double oy =
              double(offsets.tensor.at3(2 * tap + 1, std::size_t(X), std::size_t(Y)));
          const SamplePoint p{X - kh / 2 + i + 0.5 + ox, Y - kw / 2 + j + 0.5 + oy};
          for (int c = 0; c < C; ++c)
            column[std::size_t(c) * ntap + tap] = bilinear_sample(f, p, c);
        }
      }
      for (int co = 0; co < spec.out_channels; ++co) {
        const T* wrow = spec.weights.data() + std::size_t(co) * C * ntap;
        T acc = spec.bias[std::size_t(co)];
        for (std::size_t k = 0; k < std::size_t(C) * ntap; ++k)
          acc += wrow[k] * column[k];
        out.at3(std::size_t(co), std::size_t(X), std::size_t(Y)) = acc;
      }
    }
  }
  return out;
}

struct DeformConvGrads {
  Tensor grad_input;
  Tensor grad_weights;
  Tensor grad_bias;
  OffsetField grad_offsets;  // populated only when offsets_trainable
};

DeformConvGrads deform_conv_backward(const FeatureMap& f, const ConvSpec& spec,
                                     const OffsetField& offsets,
                                     const Tensor& grad_out,
                                     bool offsets_trainable);

enum class ConvOpKind { kConv, kDeformConv, kRoiConv };

// Multiply-add cost model. Sampling-and-accumulate FLOPs are identical
// for all three kinds; bilinear weight arithmetic is excluded for every
// kind so the comparison isolates offset generation, which costs at most
// 6 multiply-adds per offset scalar (a linear map of the box and location).
std::int64_t flop_count(ConvOpKind kind, int kernel_h, int kernel_w, int in_channels,
                        int out_channels, int H, int W,
                        bool with_offset_generation = false);

}  // namespace aligndet
