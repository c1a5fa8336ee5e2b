#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace aligndet {

// Axis-aligned rectangle in image-pixel coordinates. x runs along rows
// (paired with kernel height), y along columns.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double height() const { return x2 - x1; }
  double width() const { return y2 - y1; }
  double area() const { return height() * width(); }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
};

double iou(const Box& a, const Box& b);

// Clamps to [0, img_h] x [0, img_w] keeping at least min_extent pixels
// per side (shrinking the window from the far edge when needed).
Box clamp_box(const Box& b, double img_h, double img_w, double min_extent = 1.0);

// One anchor per feature location; anchor (X, Y) is centered at
// ((X+0.5)*S, (Y+0.5)*S) with area (scale*S)^2 split by aspect ratio
// (ratio = height/width).
struct AnchorGrid {
  int feat_h = 0;
  int feat_w = 0;
  int stride = 0;
  double scale = 1.0;
  double ratio = 1.0;
  std::vector<Box> boxes;  // row-major, feat_h * feat_w

  const Box& at(int X, int Y) const { return boxes[std::size_t(X) * feat_w + Y]; }
};

AnchorGrid make_anchor_grid(int feat_h, int feat_w, int stride, double scale,
                            double ratio);

// Standard R-CNN box deltas, no variance scaling:
// (dcx/size, dcy/size, log size ratios), per axis.
std::array<double, 4> encode_box(const Box& anchor, const Box& gt);

// Exact inverse of encode_box; no clamping here.
Box decode_box(const Box& anchor, const std::array<double, 4>& delta);

enum class AnchorLabel { kNegative, kIgnore, kPositive };

struct LabelAssignment {
  std::vector<AnchorLabel> labels;  // per anchor
  std::vector<int> matched_gt;      // gt index per anchor, -1 if none
  std::vector<double> max_iou;      // best IoU per anchor
  int positive_count = 0;
};

// Max-IoU assignment: positive above fg_thr, negative below bg_thr,
// ignore in between; each gt additionally force-matches its best anchor
// (ties to the lowest anchor index).
LabelAssignment assign_labels(const std::vector<Box>& anchors,
                              const std::vector<Box>& gts, double fg_thr,
                              double bg_thr);

struct Detection {
  Box box;
  double score = 0.0;
  int cls = 0;
};

// Greedy descending-score NMS; score ties keep the lower original index
// first. Output is in descending score order.
std::vector<Detection> nms(const std::vector<Detection>& detections, double iou_thr);

// Circumscribed rectangle of the deformed sampling points at one
// location, expanded by half a tap spacing per side and scaled to image
// pixels. Zero offsets recover implicit_roi exactly; analytic anchor
// offsets round-trip back to the anchor.
Box decode_offsets_to_roi(const std::vector<double>& offsets_at_loc, int X, int Y,
                          int kernel_h, int kernel_w, int stride);

struct Histogram {
  double bin_width = 0.0;
  std::vector<std::size_t> counts;  // bins cover [0,1], last bin right-closed
};

Histogram alignment_histogram(const std::vector<Box>& implicit_rois,
                              const std::vector<Box>& anchors, double bin_width);

double histogram_mean(const std::vector<Box>& implicit_rois,
                      const std::vector<Box>& anchors);

}  // namespace aligndet
