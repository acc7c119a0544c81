#pragma once

// Per-class convex mixing of initial and relative-location scores, with the
// weight picked by grid search on training AP.

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "partctx/common.hpp"
#include "partctx/eval.hpp"
#include "partctx/geometry.hpp"

namespace partctx {

inline double mix(double initial, double rl, double alpha) { return (1.0 - alpha) * initial + alpha * rl; }

struct MixCandidate {
  int id = 0;
  int image_id = 0;
  Box box;
  double initial = 0.0;
  double rl = 0.0;
};

struct ClassCandidates {
  std::vector<MixCandidate> candidates;
  std::vector<GroundTruth> ground_truth;
};

// Mixed scores, per-image NMS, survivors as detections.
inline std::vector<Detection> mixed_detections(std::span<const MixCandidate> cands, double alpha, double nms_iou) {
  std::map<int, std::vector<std::size_t>> per_image;
  for (std::size_t i = 0; i < cands.size(); ++i) per_image[cands[i].image_id].push_back(i);
  std::vector<Detection> out;
  std::vector<ScoredBox> boxes;
  for (const auto& [image, idx] : per_image) {
    boxes.clear();
    for (std::size_t i : idx) boxes.push_back({cands[i].box, mix(cands[i].initial, cands[i].rl, alpha)});
    for (std::size_t k : nms_indices(boxes, nms_iou)) {
      const auto& c = cands[idx[k]];
      out.push_back({c.id, c.image_id, c.box, boxes[k].score});
    }
  }
  return out;
}

inline std::optional<double> mixed_ap(const ClassCandidates& cc, double alpha, double nms_iou, double iou_threshold = 0.5) {
  const auto dets = mixed_detections(cc.candidates, alpha, nms_iou);
  const auto r = average_precision(dets, cc.ground_truth, iou_threshold);
  if (!r) return std::nullopt;
  return r->ap;
}

inline std::vector<double> alpha_grid(double step) {
  if (!(step > 0.0 && step <= 1.0)) throw Error("grid step must lie in (0,1]");
  const int n = static_cast<int>(std::lround(1.0 / step));
  std::vector<double> g;
  for (int i = 0; i <= n; ++i) g.push_back(static_cast<double>(i) / n);
  return g;
}

struct MixingWeights {
  double grid_step = 0.05;
  std::map<std::string, double> alpha;
  std::map<std::string, std::vector<double>> grid_ap;  // training AP per grid point

  double at(const std::string& cls) const {
    auto it = alpha.find(cls);
    return it == alpha.end() ? 0.0 : it->second;
  }
};

struct MixOptions {
  double grid_step = 0.05;
  double nms_iou = 0.3;
  double tie_tolerance = 1e-12;
};

// Grid argmax of training AP; a grid point must beat the incumbent by more than
// the tie tolerance, so ties resolve toward smaller alpha.
inline MixingWeights fit_weights(const std::map<std::string, ClassCandidates>& classes, const MixOptions& opt = {}) {
  MixingWeights w;
  w.grid_step = opt.grid_step;
  const auto grid = alpha_grid(opt.grid_step);
  for (const auto& [cls, cc] : classes) {
    if (cc.ground_truth.empty()) {
      warn("mixing: part class '" + cls + "' has no training ground truth; alpha = 0");
      w.alpha[cls] = 0.0;
      continue;
    }
    double best_alpha = 0.0, best_ap = -1.0;
    auto& trace = w.grid_ap[cls];
    for (double a : grid) {
      const double ap = *mixed_ap(cc, a, opt.nms_iou);
      trace.push_back(ap);
      if (ap > best_ap + opt.tie_tolerance) {
        best_ap = ap;
        best_alpha = a;
      }
    }
    w.alpha[cls] = best_alpha;
  }
  return w;
}

inline nlohmann::json to_json(const MixingWeights& w) {
  return {{"grid_step", w.grid_step}, {"alpha", w.alpha}, {"training_ap", w.grid_ap}};
}

inline MixingWeights mixing_from_json(const nlohmann::json& j) {
  MixingWeights w;
  w.grid_step = j.at("grid_step").get<double>();
  w.alpha = j.at("alpha").get<std::map<std::string, double>>();
  if (j.contains("training_ap")) w.grid_ap = j.at("training_ap").get<std::map<std::string, std::vector<double>>>();
  for (const auto& [cls, a] : w.alpha)
    if (!(a >= 0.0 && a <= 1.0)) throw Error("mixing weight for '" + cls + "' outside [0,1]");
  return w;
}

}  // namespace partctx
