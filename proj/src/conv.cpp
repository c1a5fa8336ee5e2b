#include "aligndet/conv.hpp"

#include <cmath>

namespace aligndet {

namespace {

Tensor transpose2d(const Tensor& a) {
  Tensor out({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out.at2(j, i) = a.at2(i, j);
  return out;
}

}  // namespace

ConvGrads conv_backward(const FeatureMap& f, const ConvSpec& spec,
                        const Tensor& grad_out) {
  spec.check_weights();
  const int H = f.height(), W = f.width();
  if (grad_out.rank() != 3 || grad_out.dim(0) != std::size_t(spec.out_channels) ||
      grad_out.dim(1) != std::size_t(H) || grad_out.dim(2) != std::size_t(W))
    throw std::invalid_argument("conv_backward: grad_out shape mismatch");

  const Tensor go2d =
      grad_out.reshaped({std::size_t(spec.out_channels), std::size_t(H) * W});
  const Tensor cols = im2col(f, spec);

  ConvGrads g;
  g.grad_weights = gemm(go2d, transpose2d(cols));
  g.grad_input =
      col2im(gemm(transpose2d(spec.weights), go2d), f.channels(), H, W, spec);
  g.grad_bias = Tensor({std::size_t(spec.out_channels)});
  for (int co = 0; co < spec.out_channels; ++co) {
    double acc = 0.0;
    for (int p = 0; p < H * W; ++p)
      acc += go2d[std::size_t(co) * H * W + std::size_t(p)];
    g.grad_bias[std::size_t(co)] = acc;
  }
  return g;
}

BilinearGrads bilinear_grads(const FeatureMap& f, SamplePoint p, int channel,
                             double upstream) {
  const int H = f.height(), W = f.width();
  const double u = p.x - 0.5, v = p.y - 0.5;
  int r0 = int(std::floor(u));
  int c0 = int(std::floor(v));
  double fx = u - r0, fy = v - c0;
  // Lower-cell limit on the measure-zero gridlines.
  if (fx == 0.0) {
    r0 -= 1;
    fx = 1.0;
  }
  if (fy == 0.0) {
    c0 -= 1;
    fy = 1.0;
  }

  auto cell = [&](int r, int c) -> double {
    if (r < 0 || r >= H || c < 0 || c >= W) return 0.0;
    return f.tensor.at3(std::size_t(channel), std::size_t(r), std::size_t(c));
  };

  BilinearGrads g;
  const double wts[2][2] = {{(1.0 - fx) * (1.0 - fy), (1.0 - fx) * fy},
                            {fx * (1.0 - fy), fx * fy}};
  for (int dr = 0; dr <= 1; ++dr) {
    for (int dc = 0; dc <= 1; ++dc) {
      const int r = r0 + dr, c = c0 + dc;
      if (r < 0 || r >= H || c < 0 || c >= W) continue;
      g.cells[std::size_t(g.n_cells++)] = {r, c, wts[dr][dc] * upstream};
    }
  }
  const double v00 = cell(r0, c0), v01 = cell(r0, c0 + 1);
  const double v10 = cell(r0 + 1, c0), v11 = cell(r0 + 1, c0 + 1);
  g.grad_x = upstream * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01));
  g.grad_y = upstream * ((1.0 - fx) * (v01 - v00) + fx * (v11 - v10));
  return g;
}

DeformConvGrads deform_conv_backward(const FeatureMap& f, const ConvSpec& spec,
                                     const OffsetField& offsets,
                                     const Tensor& grad_out,
                                     bool offsets_trainable) {
  spec.check_weights();
  offsets.check_layout(spec);
  const int C = f.channels(), H = f.height(), W = f.width();
  const int kh = spec.kernel_h, kw = spec.kernel_w;
  if (grad_out.rank() != 3 || grad_out.dim(0) != std::size_t(spec.out_channels) ||
      grad_out.dim(1) != std::size_t(H) || grad_out.dim(2) != std::size_t(W))
    throw std::invalid_argument("deform_conv_backward: grad_out shape mismatch");
  const std::size_t ntap = spec.taps();

  DeformConvGrads g;
  g.grad_input = Tensor({std::size_t(C), std::size_t(H), std::size_t(W)});
  g.grad_weights = Tensor(spec.weights.shape());
  g.grad_bias = Tensor({std::size_t(spec.out_channels)});
  if (offsets_trainable) g.grad_offsets = OffsetField(Tensor(offsets.tensor.shape()));

  for (int X = 0; X < H; ++X) {
    for (int Y = 0; Y < W; ++Y) {
      for (int i = 0; i < kh; ++i) {
        for (int j = 0; j < kw; ++j) {
          const std::size_t tap = std::size_t(i * kw + j);
          const double ox = offsets.tensor.at3(2 * tap, std::size_t(X), std::size_t(Y));
          const double oy =
              offsets.tensor.at3(2 * tap + 1, std::size_t(X), std::size_t(Y));
          const SamplePoint p{X - kh / 2 + i + 0.5 + ox, Y - kw / 2 + j + 0.5 + oy};
          for (int c = 0; c < C; ++c) {
            // upstream into this sampled value: sum_co go * w[co][c,tap]
            double up = 0.0;
            for (int co = 0; co < spec.out_channels; ++co)
              up += grad_out.at3(std::size_t(co), std::size_t(X), std::size_t(Y)) *
                    spec.weights.at2(std::size_t(co), std::size_t(c) * ntap + tap);
            const BilinearGrads bg = bilinear_grads(f, p, c, up);
            for (int k = 0; k < bg.n_cells; ++k) {
              const auto& cg = bg.cells[std::size_t(k)];
              g.grad_input.at3(std::size_t(c), std::size_t(cg.row),
                               std::size_t(cg.col)) += cg.value;
            }
            if (offsets_trainable) {
              g.grad_offsets.tensor.at3(2 * tap, std::size_t(X), std::size_t(Y)) +=
                  bg.grad_x;
              g.grad_offsets.tensor.at3(2 * tap + 1, std::size_t(X),
                                        std::size_t(Y)) += bg.grad_y;
            }
            const double sampled = bilinear_sample(f, p, c);
            for (int co = 0; co < spec.out_channels; ++co)
              g.grad_weights.at2(std::size_t(co), std::size_t(c) * ntap + tap) +=
                  grad_out.at3(std::size_t(co), std::size_t(X), std::size_t(Y)) *
                  sampled;
          }
        }
      }
      for (int co = 0; co < spec.out_channels; ++co)
        g.grad_bias[std::size_t(co)] +=
            grad_out.at3(std::size_t(co), std::size_t(X), std::size_t(Y));
    }
  }
  return g;
}

std::int64_t flop_count(ConvOpKind kind, int kernel_h, int kernel_w, int in_channels,
                        int out_channels, int H, int W, bool with_offset_generation) {
  const std::int64_t taps = std::int64_t(kernel_h) * kernel_w;
  const std::int64_t sampling =
      std::int64_t(out_channels) * in_channels * taps * H * W;
  switch (kind) {
    case ConvOpKind::kConv:
      return sampling;
    case ConvOpKind::kDeformConv:
      return sampling;
    case ConvOpKind::kRoiConv:
      // Each offset scalar is a linear map of (x1, y1, x2, y2, X, Y):
      // at most 6 multiply-adds, 2*kh*kw scalars per location.
      return sampling +
             (with_offset_generation ? 2 * taps * 6 * std::int64_t(H) * W : 0);
  }
  throw std::invalid_argument("flop_count: unknown op kind");
}

}  // namespace aligndet
