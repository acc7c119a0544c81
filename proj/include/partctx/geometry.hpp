#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace partctx {

// Axis-aligned box in continuous pixel coordinates.
struct Box {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 1.0;
  double y_max = 1.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }

  bool valid() const {
    return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) &&
           std::isfinite(y_max) && x_max > x_min && y_max > y_min;
  }

  friend bool operator==(const Box&, const Box&) = default;
};

inline Box make_box(double x_min, double y_min, double x_max, double y_max) {
  Box b{x_min, y_min, x_max, y_max};
  if (!b.valid()) {
    throw std::invalid_argument("invalid box: requires x_max > x_min and y_max > y_min");
  }
  return b;
}

// Center shift in units of the reference box size, plus log size ratios.
struct OffsetVector {
  double tx = 0.0;
  double ty = 0.0;
  double tw = 0.0;
  double th = 0.0;

  double& operator[](std::size_t i) { return i == 0 ? tx : i == 1 ? ty : i == 2 ? tw : th; }
  double operator[](std::size_t i) const { return i == 0 ? tx : i == 1 ? ty : i == 2 ? tw : th; }

  bool finite() const {
    return std::isfinite(tx) && std::isfinite(ty) && std::isfinite(tw) && std::isfinite(th);
  }

  friend bool operator==(const OffsetVector&, const OffsetVector&) = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (w <= 0.0 || h <= 0.0) return 0.0;
  return w * h;
}

inline double iou(const Box& a, const Box& b) {
  if (a == b) return 1.0;
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// Fraction of `part` lying inside `support`.
inline double containment_fraction(const Box& part, const Box& support) {
  return std::clamp(intersection_area(part, support) / part.area(), 0.0, 1.0);
}

inline OffsetVector encode_offset(const Box& object, const Box& part) {
  return {
      (part.center_x() - object.center_x()) / object.width(),
      (part.center_y() - object.center_y()) / object.height(),
      std::log(part.width() / object.width()),
      std::log(part.height() / object.height()),
  };
}

inline Box apply_offset(const Box& object, const OffsetVector& dv) {
  const double cx = object.center_x() + dv.tx * object.width();
  const double cy = object.center_y() + dv.ty * object.height();
  const double w = object.width() * std::exp(dv.tw);
  const double h = object.height() * std::exp(dv.th);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

// Maps `box` into the unit frame of `frame`: frame itself becomes (0,0,1,1).
inline Box normalize_to(const Box& frame, const Box& box) {
  return {(box.x_min - frame.x_min) / frame.width(), (box.y_min - frame.y_min) / frame.height(),
          (box.x_max - frame.x_min) / frame.width(), (box.y_max - frame.y_min) / frame.height()};
}

inline Box denormalize_from(const Box& frame, const Box& unit) {
  return {frame.x_min + unit.x_min * frame.width(), frame.y_min + unit.y_min * frame.height(),
          frame.x_min + unit.x_max * frame.width(), frame.y_min + unit.y_max * frame.height()};
}

inline Box clip_to(const Box& box, double width, double height) {
  return {std::clamp(box.x_min, 0.0, width), std::clamp(box.y_min, 0.0, height),
          std::clamp(box.x_max, 0.0, width), std::clamp(box.y_max, 0.0, height)};
}

struct ScoredBox {
  Box box;
  double score = 0.0;
};

// Greedy non-maxima suppression. Returns indices into `dets` of the survivors,
// ordered by descending score; equal scores keep ascending input order.
inline std::vector<std::size_t> nms_indices(std::span<const ScoredBox> dets, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) {
    throw std::invalid_argument("nms threshold must lie in (0,1)");
  }
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  std::vector<char> suppressed(dets.size(), 0);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t cur = order[i];
    if (suppressed[cur]) continue;
    keep.push_back(cur);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const std::size_t other = order[j];
      if (!suppressed[other] && iou(dets[cur].box, dets[other].box) > iou_threshold) {
        suppressed[other] = 1;
      }
    }
  }
  return keep;
}

inline std::vector<ScoredBox> nms(std::span<const ScoredBox> dets, double iou_threshold) {
  std::vector<ScoredBox> out;
  for (std::size_t i : nms_indices(dets, iou_threshold)) out.push_back(dets[i]);
  return out;
}

}  // namespace partctx
