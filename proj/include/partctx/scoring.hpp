#pragma once

// Object detections, suggested part windows and the relative-location score
//   phi_rl(p) = max over detections o and windows w_i of IoU(p, w_i) * rho_i * phi_obj(o).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "partctx/common.hpp"
#include "partctx/dataset.hpp"
#include "partctx/geometry.hpp"
#include "partctx/offsetnet.hpp"

namespace partctx {

struct ObjectDetection {
  int proposal_id = 0;
  int image_id = 0;
  std::string object_class;
  Box box;
  double score = 0.0;  // clamped to [0,1]
  std::vector<double> feature;
};

struct DetectionOptions {
  double nms_iou = 0.3;
  double score_floor = 0.05;
};

// Per-class NMS over object proposals of every image, after clamping scores to
// [0,1] and dropping those below the floor. Ordered by image, class, rank.
inline std::vector<ObjectDetection> detect_objects(const Dataset& d, const DetectionOptions& opt = {}) {
  DatasetIndex index(d);
  std::vector<ObjectDetection> out;
  const auto classes = d.object_classes();
  for (const auto& img : d.images) {
    const auto& props = index.object_proposals_in(img.id);
    for (const auto& cls : classes) {
      const auto col = d.object_scores.column(cls);
      if (!col) continue;
      std::vector<ScoredBox> cand;
      std::vector<std::size_t> src;
      for (std::size_t i : props) {
        const auto& p = d.object_proposals[i];
        const double s = std::clamp(d.object_scores.value(p.id, *col), 0.0, 1.0);
        if (s < opt.score_floor) continue;
        cand.push_back({p.box, s});
        src.push_back(i);
      }
      for (std::size_t k : nms_indices(cand, opt.nms_iou)) {
        const auto& p = d.object_proposals[src[k]];
        ObjectDetection det{p.id, img.id, cls, p.box, cand[k].score, {}};
        if (auto f = d.object_features.find(p.id); f != d.object_features.end()) det.feature = f->second;
        out.push_back(std::move(det));
      }
    }
  }
  return out;
}

struct SuggestedWindows {
  double object_score = 0.0;
  std::vector<Box> windows;      // one per mode
  std::vector<double> presence;  // rho_i in (0,1)
};

inline SuggestedWindows suggest_windows(const OffsetNetParams& params, const ObjectDetection& det,
                                        const std::string& part_class) {
  SuggestedWindows s;
  s.object_score = det.score;
  for (const auto& out : forward(params, det.feature, part_class)) {
    s.windows.push_back(apply_offset(det.box, out.offset));
    s.presence.push_back(out.presence);
  }
  return s;
}

inline std::vector<SuggestedWindows> suggest_windows(const OffsetNetParams& params,
                                                     std::span<const ObjectDetection> dets,
                                                     const std::string& part_class) {
  std::vector<SuggestedWindows> out;
  out.reserve(dets.size());
  for (const auto& d : dets) out.push_back(suggest_windows(params, d, part_class));
  return out;
}

inline double relative_location_score(const Box& part, std::span<const SuggestedWindows> sets) {
  double best = 0.0;
  for (const auto& s : sets) {
    for (std::size_t i = 0; i < s.windows.size(); ++i) {
      const double v = iou(part, s.windows[i]) * s.presence[i] * s.object_score;
      if (v > best) best = v;
    }
  }
  return best;
}

// phi_rl for the part proposals of one image. `detections` are that image's
// detections; each part class only sees detections of its owning object class.
inline std::map<std::string, std::vector<double>> score_image(std::span<const Box> part_boxes,
                                                              std::span<const ObjectDetection> detections,
                                                              const OffsetNetParams& params) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [cls, heads] : params.heads) {
    std::vector<SuggestedWindows> sets;
    for (const auto& det : detections)
      if (det.object_class == heads.object_class) sets.push_back(suggest_windows(params, det, cls));
    auto& col = out[cls];
    col.reserve(part_boxes.size());
    for (const auto& b : part_boxes) col.push_back(relative_location_score(b, sets));
  }
  return out;
}

// phi_rl for every part proposal of the dataset; columns are the OffsetNet classes.
inline ScoreTable relative_location_scores(const Dataset& d, std::span<const ObjectDetection> detections,
                                           const OffsetNetParams& params) {
  DatasetIndex index(d);
  std::map<int, std::vector<ObjectDetection>> per_image;
  for (const auto& det : detections) per_image[det.image_id].push_back(det);

  ScoreTable t;
  for (const auto& [cls, h] : params.heads) t.classes.push_back(cls);
  for (const auto& img : d.images) {
    const auto& props = index.part_proposals_in(img.id);
    std::vector<Box> boxes;
    for (std::size_t i : props) boxes.push_back(d.part_proposals[i].box);
    static const std::vector<ObjectDetection> none;
    auto it = per_image.find(img.id);
    const auto scores = score_image(boxes, it == per_image.end() ? none : it->second, params);
    for (std::size_t k = 0; k < props.size(); ++k) {
      std::vector<double> row;
      for (const auto& cls : t.classes) row.push_back(scores.at(cls)[k]);
      t.rows.emplace(d.part_proposals[props[k]].id, std::move(row));
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Heatmaps

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
};

// phi_rl on a dense grid: cell (r, c) scores a proposal centered on the cell,
// sized like the average suggested window of this image. `detections` are the
// image's detections; cells are row-major, values in [0,1].
struct DenseHeatmap {
  int cols = 0;
  int rows = 0;
  std::vector<double> values;
};

inline DenseHeatmap dense_rl_heatmap(std::span<const ObjectDetection> detections, const OffsetNetParams& params,
                                     const std::string& part_class, double image_width, double image_height,
                                     int cols, int rows) {
  DenseHeatmap hm{cols, rows, std::vector<double>(static_cast<std::size_t>(cols) * rows, 0.0)};
  const auto& owner = params.head(part_class).object_class;
  std::vector<SuggestedWindows> sets;
  double w = 0.0, h = 0.0;
  std::size_t n = 0;
  for (const auto& det : detections) {
    if (det.object_class != owner) continue;
    sets.push_back(suggest_windows(params, det, part_class));
    for (const auto& win : sets.back().windows) {
      w += win.width();
      h += win.height();
      ++n;
    }
  }
  if (n == 0) return hm;
  w /= static_cast<double>(n);
  h /= static_cast<double>(n);
  for (int r = 0; r < rows; ++r) {
    const double cy = (r + 0.5) * image_height / rows;
    for (int c = 0; c < cols; ++c) {
      const double cx = (c + 0.5) * image_width / cols;
      const Box p{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
      hm.values[static_cast<std::size_t>(r) * cols + c] = relative_location_score(p, sets);
    }
  }
  return hm;
}

inline GrayImage to_gray(const DenseHeatmap& hm) {
  GrayImage g{hm.cols, hm.rows, std::vector<std::uint8_t>(hm.values.size(), 0)};
  for (std::size_t i = 0; i < hm.values.size(); ++i)
    g.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(hm.values[i], 0.0, 1.0)));
  return g;
}

// Binary PGM (P5), maxval 255.
inline void write_pgm(const std::string& path, const GrayImage& g) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << "P5\n" << g.width << ' ' << g.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(g.pixels.data()), static_cast<std::streamsize>(g.pixels.size()));
}

}  // namespace partctx
