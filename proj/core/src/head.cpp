#include "duotrack/head.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace duotrack {

namespace {

[[noreturn]] void fail(const std::string& what) {
  throw std::invalid_argument("duotrack::head: " + what);
}

int isqrt_exact(int n) {
  const int s = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (s * s != n) fail("token count " + std::to_string(n) + " is not square");
  return s;
}

}  // namespace

BBox BBox::clamped() const {
  BBox b = *this;
  b.w = std::clamp(b.w, 1e-6, 1.0);
  b.h = std::clamp(b.h, 1e-6, 1.0);
  b.cx = std::clamp(b.cx, b.w * 0.5, 1.0 - b.w * 0.5);
  b.cy = std::clamp(b.cy, b.h * 0.5, 1.0 - b.h * 0.5);
  return b;
}

double iou(const BBox& a, const BBox& b) {
  if (a.area() <= 0.0 || b.area() <= 0.0) fail("degenerate zero-area box");
  const double ix = std::max(0.0, std::min(a.x2(), b.x2()) -
                                      std::max(a.x1(), b.x1()));
  const double iy = std::max(0.0, std::min(a.y2(), b.y2()) -
                                      std::max(a.y1(), b.y1()));
  const double inter = ix * iy;
  return inter / (a.area() + b.area() - inter);
}

double giou(const BBox& a, const BBox& b) {
  if (a.area() <= 0.0 || b.area() <= 0.0) fail("degenerate zero-area box");
  const double ix = std::max(0.0, std::min(a.x2(), b.x2()) -
                                      std::max(a.x1(), b.x1()));
  const double iy = std::max(0.0, std::min(a.y2(), b.y2()) -
                                      std::max(a.y1(), b.y1()));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  const double hx = std::max(a.x2(), b.x2()) - std::min(a.x1(), b.x1());
  const double hy = std::max(a.y2(), b.y2()) - std::min(a.y1(), b.y1());
  const double hull = hx * hy;
  return inter / uni - (hull - uni) / hull;
}

HeadParams make_head_params(ParamSink& store, const std::string& prefix,
                            int C) {
  if (C < 2 || C % 2 != 0) fail("head width must be even and >= 2");
  const int mid = C / 2;
  const double std1 = std::sqrt(2.0 / (C * 9.0));
  const double std2 = std::sqrt(2.0 / (mid * 9.0));
  HeadParams p;
  p.C = C;
  auto conv_pair = [&](const std::string& branch, int out, Tensor& w1,
                       Tensor& b1, Tensor& w2, Tensor& b2) {
    w1 = store.create(prefix + "." + branch + ".conv1.w", {mid, C, 3, 3},
                      ParamGroup::Head, ParamInit::gaussian(std1));
    b1 = store.create(prefix + "." + branch + ".conv1.b", {mid},
                      ParamGroup::Head, ParamInit::zeros());
    w2 = store.create(prefix + "." + branch + ".conv2.w", {out, mid, 3, 3},
                      ParamGroup::Head, ParamInit::gaussian(std2));
    b2 = store.create(prefix + "." + branch + ".conv2.b", {out},
                      ParamGroup::Head, ParamInit::zeros());
  };
  conv_pair("cls", 1, p.cls_w1, p.cls_b1, p.cls_w2, p.cls_b2);
  conv_pair("offset", 2, p.off_w1, p.off_b1, p.off_w2, p.off_b2);
  conv_pair("size", 2, p.size_w1, p.size_b1, p.size_w2, p.size_b2);
  return p;
}

HeadMaps head_forward(const Tensor& fused_search, const HeadParams& params) {
  if (fused_search.rank() != 3) fail("expected tokens B×N×C");
  const int B = fused_search.extent(0);
  const int N = fused_search.extent(1);
  const int C = fused_search.extent(2);
  if (C != params.C) fail("token width mismatch");
  const int S = isqrt_exact(N);

  Tensor grid = reshape(fused_search, {B, S, S, C});
  grid = permute(grid, {0, 3, 1, 2});  // B×C×S×S

  auto branch = [&](const Tensor& w1, const Tensor& b1, const Tensor& w2,
                    const Tensor& b2) {
    Tensor h = relu(conv2d(grid, w1, b1, 1));
    return conv2d(h, w2, b2, 1);
  };
  HeadMaps maps;
  maps.S = S;
  maps.cls = sigmoid(branch(params.cls_w1, params.cls_b1, params.cls_w2,
                            params.cls_b2));
  maps.offset = sigmoid(branch(params.off_w1, params.off_b1, params.off_w2,
                               params.off_b2));
  maps.size = sigmoid(branch(params.size_w1, params.size_b1, params.size_w2,
                             params.size_b2));
  return maps;
}

std::pair<BBox, double> decode_bbox(const HeadMaps& maps, int batch_index) {
  const int S = maps.S;
  int best_i = 0, best_j = 0;
  double best = -1.0;
  for (int i = 0; i < S; ++i) {
    for (int j = 0; j < S; ++j) {
      const double v = maps.cls.at({batch_index, 0, i, j});
      if (v > best) {
        best = v;
        best_i = i;
        best_j = j;
      }
    }
  }
  BBox box;
  box.cx = (best_j + maps.offset.at({batch_index, 0, best_i, best_j})) / S;
  box.cy = (best_i + maps.offset.at({batch_index, 1, best_i, best_j})) / S;
  box.w = maps.size.at({batch_index, 0, best_i, best_j});
  box.h = maps.size.at({batch_index, 1, best_i, best_j});
  return {box, best};
}

HeadMaps encode_maps(const BBox& box, int S) {
  const auto [pi, pj] = target_cell(box, S);
  std::vector<double> cls(static_cast<std::size_t>(S) * S, 0.0);
  std::vector<double> off(2 * static_cast<std::size_t>(S) * S, 0.0);
  std::vector<double> size(2 * static_cast<std::size_t>(S) * S, 0.0);
  cls[static_cast<std::size_t>(pi) * S + pj] = 1.0;
  off[static_cast<std::size_t>(pi) * S + pj] = box.cx * S - pj;
  off[static_cast<std::size_t>(S) * S + pi * S + pj] = box.cy * S - pi;
  size[static_cast<std::size_t>(pi) * S + pj] = box.w;
  size[static_cast<std::size_t>(S) * S + pi * S + pj] = box.h;
  HeadMaps maps;
  maps.S = S;
  maps.cls = Tensor::from_data({1, 1, S, S}, std::move(cls));
  maps.offset = Tensor::from_data({1, 2, S, S}, std::move(off));
  maps.size = Tensor::from_data({1, 2, S, S}, std::move(size));
  return maps;
}

std::pair<int, int> target_cell(const BBox& gt, int S) {
  const int j = std::clamp(static_cast<int>(gt.cx * S), 0, S - 1);
  const int i = std::clamp(static_cast<int>(gt.cy * S), 0, S - 1);
  return {i, j};
}

Tensor make_cls_target(const BBox& gt, int S) {
  const auto [pi, pj] = target_cell(gt, S);
  const double sigma = std::max(1.0, S / 16.0);
  std::vector<double> data(static_cast<std::size_t>(S) * S);
  for (int i = 0; i < S; ++i) {
    for (int j = 0; j < S; ++j) {
      const double di = i - pi, dj = j - pj;
      data[static_cast<std::size_t>(i) * S + j] =
          std::exp(-(di * di + dj * dj) / (2.0 * sigma * sigma));
    }
  }
  data[static_cast<std::size_t>(pi) * S + pj] = 1.0;
  return Tensor::from_data({1, 1, S, S}, std::move(data));
}

Tensor box_at_cell(const HeadMaps& maps, int batch_index, int i, int j) {
  const int S = maps.S;
  const std::int64_t plane = static_cast<std::int64_t>(S) * S;
  const std::int64_t cell = static_cast<std::int64_t>(i) * S + j;
  const std::int64_t off_base = batch_index * 2 * plane;
  Tensor off = take(maps.offset, {off_base + cell, off_base + plane + cell});
  Tensor size = take(maps.size, {off_base + cell, off_base + plane + cell});
  Tensor grid = Tensor::from_data({2}, {static_cast<double>(j),
                                        static_cast<double>(i)});
  Tensor centers = scale(add(grid, off), 1.0 / S);
  return concat({centers, size}, 0);
}

Tensor focal_loss(const Tensor& cls, const Tensor& target) {
  if (cls.shape() != target.shape()) fail("focal_loss shape mismatch");
  const auto& pv = cls.data();
  const auto& tv = target.data();
  std::int64_t positives = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (pv[i] <= 0.0 || pv[i] >= 1.0)
      fail("focal_loss expects cls strictly inside (0,1)");
    if (tv[i] < 0.0 || tv[i] > 1.0) fail("focal_loss target outside [0,1]");
    if (tv[i] == 1.0) ++positives;
  }
  if (positives == 0) fail("focal_loss target has no positive cell");

  // pos: (1-p)^2 log p at t==1; neg: (1-t)^4 p^2 log(1-p) elsewhere
  Tensor p = clamp(cls, 1e-12, 1.0 - 1e-12);
  std::vector<double> pos_mask(pv.size()), neg_w(pv.size());
  for (std::size_t i = 0; i < tv.size(); ++i) {
    pos_mask[i] = tv[i] == 1.0 ? 1.0 : 0.0;
    const double omt = 1.0 - tv[i];
    neg_w[i] = (1.0 - pos_mask[i]) * omt * omt * omt * omt;
  }
  Tensor mask_pos = Tensor::from_data(cls.shape(), std::move(pos_mask));
  Tensor mask_neg = Tensor::from_data(cls.shape(), std::move(neg_w));
  Tensor one_minus_p = affine(p, -1.0, 1.0);
  Tensor pos_term = mul(mul(pow(one_minus_p, 2.0), log(p)), mask_pos);
  Tensor neg_term = mul(mul(pow(p, 2.0), log(one_minus_p)), mask_neg);
  Tensor total = sum_all(add(pos_term, neg_term));
  return scale(total, -1.0 / static_cast<double>(positives));
}

Tensor giou_t(const Tensor& box_a, const Tensor& box_b) {
  if (box_a.numel() != 4 || box_b.numel() != 4)
    fail("giou_t expects 4-vectors (cx, cy, w, h)");
  auto corners = [](const Tensor& b) {
    Tensor c = take(b, {0, 1});
    Tensor wh = take(b, {2, 3});
    Tensor half = scale(wh, 0.5);
    return std::pair{sub(c, half), add(c, half)};  // (x1y1, x2y2)
  };
  auto [a_lo, a_hi] = corners(box_a);
  auto [b_lo, b_hi] = corners(box_b);
  Tensor inter_wh = relu(sub(minimum(a_hi, b_hi), maximum(a_lo, b_lo)));
  Tensor inter = mul(take(inter_wh, {0}), take(inter_wh, {1}));
  auto area = [](const Tensor& lo, const Tensor& hi) {
    Tensor wh = sub(hi, lo);
    return mul(take(wh, {0}), take(wh, {1}));
  };
  Tensor uni = sub(add(area(a_lo, a_hi), area(b_lo, b_hi)), inter);
  Tensor hull_wh = sub(maximum(a_hi, b_hi), minimum(a_lo, b_lo));
  Tensor hull = mul(take(hull_wh, {0}), take(hull_wh, {1}));
  return sub(div(inter, uni), div(sub(hull, uni), hull));
}

Tensor total_loss(const Tensor& cls, const Tensor& target_map,
                  const Tensor& pred_box, const BBox& gt_box) {
  if (gt_box.area() <= 0.0) fail("degenerate ground-truth box");
  Tensor gt = Tensor::from_data({4}, {gt_box.cx, gt_box.cy, gt_box.w,
                                      gt_box.h});
  Tensor focal = focal_loss(cls, target_map);
  Tensor g = giou_t(pred_box, gt);
  Tensor giou_term = scale(affine(g, -1.0, 1.0), 2.0);
  Tensor l1 = scale(mean_all(abs(sub(pred_box, gt))), 5.0);
  return add(add(focal, giou_term), l1);
}

}  // namespace duotrack
