#pragma once

#include "duotrack/param_store.hpp"
#include "duotrack/tensor.hpp"

#include <string>
#include <utility>

namespace duotrack {

// Box in normalized search coordinates, center + extents.
struct BBox {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;

  double x1() const { return cx - 0.5 * w; }
  double y1() const { return cy - 0.5 * h; }
  double x2() const { return cx + 0.5 * w; }
  double y2() const { return cy + 0.5 * h; }
  double area() const { return w * h; }
  BBox clamped() const;
};

double iou(const BBox& a, const BBox& b);
// IoU minus the hull penalty; errors on zero-area boxes.
double giou(const BBox& a, const BBox& b);

struct HeadMaps {
  Tensor cls;     // B×1×S×S, post-sigmoid
  Tensor offset;  // B×2×S×S, (x, y) sub-cell offsets in (0,1)
  Tensor size;    // B×2×S×S, normalized (w, h) in (0,1)
  int S = 0;
};

struct HeadParams {
  // three branches, each two 3x3 convs C -> C/2 -> out with ReLU between
  Tensor cls_w1, cls_b1, cls_w2, cls_b2;
  Tensor off_w1, off_b1, off_w2, off_b2;
  Tensor size_w1, size_b1, size_w2, size_b2;
  int C = 0;
};

HeadParams make_head_params(ParamSink& store, const std::string& prefix,
                            int C);

// fused search tokens B×N_x×C -> maps; N_x must be a perfect square.
HeadMaps head_forward(const Tensor& fused_search, const HeadParams& params);

// Peak = argmax cls (ties to smallest row-major index); box read at peak.
std::pair<BBox, double> decode_bbox(const HeadMaps& maps, int batch_index = 0);

// Maps with an exact-1 peak at the box's center cell; inverse of decode.
HeadMaps encode_maps(const BBox& box, int S);

// Gaussian bump heatmap, sigma = max(1, S/16) cells, exact 1 at the peak.
Tensor make_cls_target(const BBox& gt, int S);
// Peak cell of the ground-truth box, (row i, col j).
std::pair<int, int> target_cell(const BBox& gt, int S);

// Differentiable (cx, cy, w, h) read from the maps at a fixed cell.
Tensor box_at_cell(const HeadMaps& maps, int batch_index, int i, int j);

// CenterNet-style penalty-reduced focal loss, alpha=2, beta=4, normalized by
// the positive count. cls and target are same-shape; cls must lie in (0,1).
Tensor focal_loss(const Tensor& cls, const Tensor& target);

// Differentiable GIoU of two (cx, cy, w, h) vectors.
Tensor giou_t(const Tensor& box_a, const Tensor& box_b);

// focal + 2*(1 - GIoU) + 5*L1, L1 = mean abs difference over 4 coordinates.
Tensor total_loss(const Tensor& cls, const Tensor& target_map,
                  const Tensor& pred_box, const BBox& gt_box);

}  // namespace duotrack
