#include "aligndet/box.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace aligndet {

double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

Box clamp_box(const Box& b, double img_h, double img_w, double min_extent) {
  auto clamp_axis = [&](double lo, double hi, double bound) {
    lo = std::clamp(lo, 0.0, bound);
    hi = std::clamp(hi, 0.0, bound);
    if (hi - lo < min_extent) {
      hi = lo + min_extent;
      if (hi > bound) {
        hi = bound;
        lo = std::max(0.0, bound - min_extent);
      }
    }
    return std::pair{lo, hi};
  };
  auto [x1, x2] = clamp_axis(b.x1, b.x2, img_h);
  auto [y1, y2] = clamp_axis(b.y1, b.y2, img_w);
  return Box{x1, y1, x2, y2};
}

AnchorGrid make_anchor_grid(int feat_h, int feat_w, int stride, double scale,
                            double ratio) {
  if (feat_h <= 0 || feat_w <= 0 || stride <= 0 || scale <= 0.0 || ratio <= 0.0)
    throw std::invalid_argument("make_anchor_grid: non-positive parameter");
  AnchorGrid grid;
  grid.feat_h = feat_h;
  grid.feat_w = feat_w;
  grid.stride = stride;
  grid.scale = scale;
  grid.ratio = ratio;
  grid.boxes.reserve(std::size_t(feat_h) * feat_w);
  const double side = scale * stride;
  const double half_h = 0.5 * side * std::sqrt(ratio);
  const double half_w = 0.5 * side / std::sqrt(ratio);
  for (int X = 0; X < feat_h; ++X) {
    const double cx = (X + 0.5) * stride;
    for (int Y = 0; Y < feat_w; ++Y) {
      const double cy = (Y + 0.5) * stride;
      grid.boxes.push_back(Box{cx - half_h, cy - half_w, cx + half_h, cy + half_w});
    }
  }
  return grid;
}

std::array<double, 4> encode_box(const Box& anchor, const Box& gt) {
  const double ah = anchor.height(), aw = anchor.width();
  if (ah <= 0.0 || aw <= 0.0)
    throw std::invalid_argument("encode_box: anchor has non-positive extent");
  if (gt.height() <= 0.0 || gt.width() <= 0.0)
    throw std::domain_error("encode_box: gt has non-positive extent");
  return {(gt.center_x() - anchor.center_x()) / ah,
          (gt.center_y() - anchor.center_y()) / aw, std::log(gt.height() / ah),
          std::log(gt.width() / aw)};
}

Box decode_box(const Box& anchor, const std::array<double, 4>& delta) {
  const double ah = anchor.height(), aw = anchor.width();
  const double cx = anchor.center_x() + delta[0] * ah;
  const double cy = anchor.center_y() + delta[1] * aw;
  const double h = ah * std::exp(delta[2]);
  const double w = aw * std::exp(delta[3]);
  return Box{cx - 0.5 * h, cy - 0.5 * w, cx + 0.5 * h, cy + 0.5 * w};
}

LabelAssignment assign_labels(const std::vector<Box>& anchors,
                              const std::vector<Box>& gts, double fg_thr,
                              double bg_thr) {
  if (fg_thr < bg_thr)
    throw std::invalid_argument("assign_labels: fg_thr must be >= bg_thr");
  const std::size_t n = anchors.size();
  LabelAssignment out;
  out.labels.assign(n, AnchorLabel::kNegative);
  out.matched_gt.assign(n, -1);
  out.max_iou.assign(n, 0.0);
  if (gts.empty()) return out;

  for (std::size_t a = 0; a < n; ++a) {
    double best = -1.0;
    int best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors[a], gts[g]);
      if (v > best) {
        best = v;
        best_gt = int(g);
      }
    }
    out.max_iou[a] = best;
    if (best >= fg_thr) {
      out.labels[a] = AnchorLabel::kPositive;
      out.matched_gt[a] = best_gt;
    } else if (best >= bg_thr) {
      out.labels[a] = AnchorLabel::kIgnore;
    }
  }

  // Each gt keeps its best anchor even below fg_thr; ties go to the
  // lowest anchor index.
  for (std::size_t g = 0; g < gts.size(); ++g) {
    double best = -1.0;
    std::size_t best_a = 0;
    for (std::size_t a = 0; a < n; ++a) {
      const double v = iou(anchors[a], gts[g]);
      if (v > best) {
        best = v;
        best_a = a;
      }
    }
    if (best > 0.0) {
      out.labels[best_a] = AnchorLabel::kPositive;
      out.matched_gt[best_a] = int(g);
    }
  }

  for (std::size_t a = 0; a < n; ++a)
    if (out.labels[a] == AnchorLabel::kPositive) ++out.positive_count;
  return out;
}

std::vector<Detection> nms(const std::vector<Detection>& detections, double iou_thr) {
  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detections[a].score > detections[b].score;
  });
  std::vector<bool> suppressed(detections.size(), false);
  std::vector<Detection> kept;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    kept.push_back(detections[i]);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!suppressed[j] && iou(detections[i].box, detections[j].box) > iou_thr)
        suppressed[j] = true;
    }
  }
  return kept;
}

Box decode_offsets_to_roi(const std::vector<double>& offsets_at_loc, int X, int Y,
                          int kernel_h, int kernel_w, int stride) {
  const std::size_t ntap = std::size_t(kernel_h) * kernel_w;
  if (offsets_at_loc.size() != 2 * ntap)
    throw std::invalid_argument("decode_offsets_to_roi: offset count != 2*kh*kw");
  double min_x = std::numeric_limits<double>::infinity(), max_x = -min_x;
  double min_y = min_x, max_y = -min_x;
  for (int i = 0; i < kernel_h; ++i) {
    for (int j = 0; j < kernel_w; ++j) {
      const std::size_t tap = std::size_t(i * kernel_w + j);
      const double px = X - kernel_h / 2 + i + 0.5 + offsets_at_loc[2 * tap];
      const double py = Y - kernel_w / 2 + j + 0.5 + offsets_at_loc[2 * tap + 1];
      min_x = std::min(min_x, px);
      max_x = std::max(max_x, px);
      min_y = std::min(min_y, py);
      max_y = std::max(max_y, py);
    }
  }
  // Sample points sit at bin centers, so the hull is half a tap spacing
  // short of the generating box on every side. A 1-tap axis has no
  // measurable spacing; the unit conv spacing is used there.
  const double sp_x = kernel_h > 1 ? (max_x - min_x) / (kernel_h - 1) : 1.0;
  const double sp_y = kernel_w > 1 ? (max_y - min_y) / (kernel_w - 1) : 1.0;
  const double S = double(stride);
  return Box{(min_x - 0.5 * sp_x) * S, (min_y - 0.5 * sp_y) * S,
             (max_x + 0.5 * sp_x) * S, (max_y + 0.5 * sp_y) * S};
}

Histogram alignment_histogram(const std::vector<Box>& implicit_rois,
                              const std::vector<Box>& anchors, double bin_width) {
  if (!(bin_width > 0.0 && bin_width <= 1.0))
    throw std::invalid_argument("alignment_histogram: bin_width must be in (0, 1]");
  if (implicit_rois.size() != anchors.size())
    throw std::invalid_argument("alignment_histogram: box counts differ");
  Histogram h;
  h.bin_width = bin_width;
  const std::size_t nbins = std::size_t(std::ceil(1.0 / bin_width));
  h.counts.assign(nbins, 0);
  for (std::size_t k = 0; k < anchors.size(); ++k) {
    const double v = iou(implicit_rois[k], anchors[k]);
    const std::size_t bin =
        std::min(nbins - 1, std::size_t(std::floor(v / bin_width)));
    ++h.counts[bin];
  }
  return h;
}

double histogram_mean(const std::vector<Box>& implicit_rois,
                      const std::vector<Box>& anchors) {
  if (implicit_rois.size() != anchors.size() || anchors.empty())
    throw std::invalid_argument("histogram_mean: box counts invalid");
  double acc = 0.0;
  for (std::size_t k = 0; k < anchors.size(); ++k)
    acc += iou(implicit_rois[k], anchors[k]);
  return acc / double(anchors.size());
}

}  // namespace aligndet
