#pragma once

// VOC-style average precision, PCP/POP under best-overlap object assignment,
// occluded-only views and report output.

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "partctx/common.hpp"
#include "partctx/dataset.hpp"
#include "partctx/geometry.hpp"

namespace partctx {

struct Detection {
  int id = 0;  // tie-break key: equal scores rank by ascending id
  int image_id = 0;
  Box box;
  double score = 0.0;
};

struct GroundTruth {
  int image_id = 0;
  Box box;
};

struct ApResult {
  double ap = 0.0;
  std::vector<double> recall;     // after each ranked detection
  std::vector<double> precision;  // raw (non-interpolated)
  std::size_t num_gt = 0;
  std::size_t num_det = 0;
};

// Descending score, ascending id.
inline std::vector<std::size_t> rank_detections(std::span<const Detection> dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return dets[a].id < dets[b].id;
  });
  return order;
}

// All-points interpolated area under the precision/recall curve.
inline double interpolated_ap(std::span<const double> recall, std::span<const double> precision) {
  std::vector<double> mrec{0.0}, mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i) mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double ap = 0.0;
  for (std::size_t i = 1; i < mrec.size(); ++i) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  return ap;
}

// Returns nullopt when there is no ground truth (AP undefined).
// Matching follows the VOC devkit: each detection is compared with the
// best-overlapping ground truth of its image; it is a true positive when that
// overlap exceeds the threshold and the ground truth is still unclaimed.
inline std::optional<ApResult> average_precision(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                                                 double iou_threshold = 0.5) {
  if (gts.empty()) return std::nullopt;
  std::unordered_map<int, std::vector<std::size_t>> gt_in;
  for (std::size_t g = 0; g < gts.size(); ++g) gt_in[gts[g].image_id].push_back(g);

  ApResult r;
  r.num_gt = gts.size();
  r.num_det = dets.size();
  std::vector<char> claimed(gts.size(), 0);
  std::size_t tp = 0, fp = 0;
  for (std::size_t idx : rank_detections(dets)) {
    const auto& det = dets[idx];
    double best = -1.0;
    std::size_t best_g = 0;
    auto it = gt_in.find(det.image_id);
    if (it != gt_in.end()) {
      for (std::size_t g : it->second) {
        const double o = iou(det.box, gts[g].box);
        if (o > best) {
          best = o;
          best_g = g;
        }
      }
    }
    if (best > iou_threshold && !claimed[best_g]) {
      claimed[best_g] = 1;
      ++tp;
    } else {
      ++fp;
    }
    r.recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
    r.precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  r.ap = interpolated_ap(r.recall, r.precision);
  return r;
}

// ---------------------------------------------------------------------------
// PCP / POP

struct ObjectGroundTruth {
  int id = 0;
  int image_id = 0;
  Box box;
};

struct OwnedPartGroundTruth {
  int object_id = 0;
  Box box;
};

struct SupportedPartDetection {
  int image_id = 0;
  Box box;
  double score = 0.0;
  int support = -1;  // index into the object detection list, -1 when unsupported
};

struct PcpPop {
  double pcp = 0.0;
  double pop = 0.0;
  std::size_t objects = 0;            // objects owning the part in ground truth
  std::size_t objects_estimated = 0;  // ... with at least one part detection
  std::size_t correct = 0;            // ... whose top part detection is correct
};

// `object_dets` holds the object detections of the part's owning class; part
// detections refer to them through `support`.
inline PcpPop pcp_pop(std::span<const SupportedPartDetection> part_dets, std::span<const Detection> object_dets,
                      std::span<const ObjectGroundTruth> object_gts, std::span<const OwnedPartGroundTruth> part_gts,
                      double iou_threshold = 0.5) {
  std::unordered_map<int, std::vector<std::size_t>> parts_of;
  for (std::size_t i = 0; i < part_gts.size(); ++i) parts_of[part_gts[i].object_id].push_back(i);

  PcpPop r;
  for (const auto& obj : object_gts) {
    auto owned = parts_of.find(obj.id);
    if (owned == parts_of.end()) continue;
    ++r.objects;

    int best_det = -1;
    double best = 0.0;
    for (std::size_t k = 0; k < object_dets.size(); ++k) {
      if (object_dets[k].image_id != obj.image_id) continue;
      const double o = iou(object_dets[k].box, obj.box);
      if (o > best) {
        best = o;
        best_det = static_cast<int>(k);
      }
    }
    if (best_det < 0) continue;

    const SupportedPartDetection* top = nullptr;
    for (const auto& pd : part_dets) {
      if (pd.support != best_det || pd.image_id != obj.image_id) continue;
      if (!top || pd.score > top->score) top = &pd;
    }
    if (!top) continue;
    ++r.objects_estimated;
    for (std::size_t g : owned->second) {
      if (iou(top->box, part_gts[g].box) > iou_threshold) {
        ++r.correct;
        break;
      }
    }
  }
  if (r.objects > 0) r.pop = static_cast<double>(r.objects_estimated) / static_cast<double>(r.objects);
  if (r.objects_estimated > 0) r.pcp = static_cast<double>(r.correct) / static_cast<double>(r.objects_estimated);
  return r;
}

// ---------------------------------------------------------------------------
// Occlusion filtering

inline Dataset filter_occluded(const Dataset& d) {
  if (!d.has_occlusion_flags) {
    throw Error("occluded-only evaluation needs an 'occluded' flag on every record of objects.jsonl");
  }
  Dataset out = d;
  out.objects.clear();
  out.parts.clear();
  std::set<int> keep;
  for (const auto& o : d.objects) {
    if (!o.occluded) continue;
    keep.insert(o.id);
    out.objects.push_back(o);
  }
  for (const auto& p : d.parts)
    if (keep.contains(p.object_id)) out.parts.push_back(p);
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct ClassReport {
  std::optional<double> ap;
  std::vector<double> recall;
  std::vector<double> precision;
  std::size_t num_gt = 0;
  std::size_t num_det = 0;
  std::optional<PcpPop> pcp_pop;
};

struct EvalReport {
  std::map<std::string, ClassReport> classes;
  std::optional<double> map;
  bool occluded_only = false;
  std::vector<std::string> notes;

  void finalize() {
    double sum = 0.0;
    std::size_t n = 0;
    notes.clear();
    for (const auto& [name, c] : classes) {
      if (c.ap) {
        sum += *c.ap;
        ++n;
      } else {
        notes.push_back("class '" + name + "' has no ground truth; excluded from mAP");
      }
    }
    map = n ? std::optional<double>(sum / static_cast<double>(n)) : std::nullopt;
  }
};

inline nlohmann::json to_json(const EvalReport& r, bool include_curves = false) {
  using nlohmann::json;
  json classes = json::object();
  for (const auto& [name, c] : r.classes) {
    json e = {{"ap", c.ap ? json(*c.ap) : json(nullptr)}, {"num_gt", c.num_gt}, {"num_det", c.num_det}};
    if (include_curves) e["pr_curve"] = {{"recall", c.recall}, {"precision", c.precision}};
    if (c.pcp_pop) {
      e["pcp"] = c.pcp_pop->pcp;
      e["pop"] = c.pcp_pop->pop;
      e["pcp_pop_objects"] = c.pcp_pop->objects;
    }
    classes[name] = std::move(e);
  }
  return {{"map", r.map ? json(*r.map) : json(nullptr)},
          {"occluded_only", r.occluded_only},
          {"classes", classes},
          {"notes", r.notes}};
}

inline std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline void write_table(std::ostream& os, const EvalReport& r) {
  std::size_t width = 10;
  for (const auto& [name, c] : r.classes) width = std::max(width, name.size());
  const bool pcp = std::any_of(r.classes.begin(), r.classes.end(), [](const auto& kv) { return kv.second.pcp_pop.has_value(); });
  auto pad = [&](const std::string& s, std::size_t w) { return s + std::string(w > s.size() ? w - s.size() : 0, ' '); };

  os << pad("class", width) << "  " << pad("AP", 8) << pad("#GT", 8) << pad("#det", 8);
  if (pcp) os << pad("PCP", 8) << pad("POP", 8);
  os << '\n';
  for (const auto& [name, c] : r.classes) {
    os << pad(name, width) << "  " << pad(c.ap ? fixed(*c.ap) : "n/a", 8) << pad(std::to_string(c.num_gt), 8)
       << pad(std::to_string(c.num_det), 8);
    if (pcp && c.pcp_pop) os << pad(fixed(c.pcp_pop->pcp), 8) << pad(fixed(c.pcp_pop->pop), 8);
    os << '\n';
  }
  os << pad("mAP", width) << "  " << (r.map ? fixed(*r.map) : "n/a") << '\n';
  for (const auto& n : r.notes) os << "note: " << n << '\n';
}

inline void write_pr_csv(std::ostream& os, const EvalReport& r) {
  os << "class,rank,recall,precision\n";
  for (const auto& [name, c] : r.classes)
    for (std::size_t i = 0; i < c.recall.size(); ++i)
      os << name << ',' << (i + 1) << ',' << fixed(c.recall[i], 6) << ',' << fixed(c.precision[i], 6) << '\n';
}

}  // namespace partctx
