#pragma once

// Relative-location priors: part boxes accumulated in their owner's unit frame,
// mode-count estimation, and the horizontal mode split used for training targets.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "partctx/catalog.hpp"
#include "partctx/common.hpp"
#include "partctx/dataset.hpp"
#include "partctx/geometry.hpp"
#include "partctx/random.hpp"

namespace partctx {

// Normalized coordinates are clamped to this range; the heatmap spans it.
inline constexpr double kFrameLo = -0.5;
inline constexpr double kFrameHi = 1.5;

struct PriorOptions {
  int grid = 64;
  int histogram_bins = 32;
  double peak_fraction = 0.2;
  int max_modes = 4;
  std::map<std::string, int> mode_overrides;
};

struct ModeInterval {
  double lo = 0.0;
  double hi = 1.0;
  friend bool operator==(const ModeInterval&, const ModeInterval&) = default;
};

struct PriorModel {
  std::string part_class;
  std::string object_class;
  int grid = 64;
  std::vector<double> heatmap;  // grid x grid, row-major (row = y)
  int modes = 1;
  std::vector<ModeInterval> intervals;
  std::vector<std::optional<Box>> mean_boxes;  // per mode, in the unit frame
  std::size_t instances = 0;

  double mass() const {
    double s = 0.0;
    for (double v : heatmap) s += v;
    return s;
  }
};

inline std::vector<ModeInterval> mode_intervals(int modes) {
  std::vector<ModeInterval> out;
  for (int m = 0; m < modes; ++m)
    out.push_back({static_cast<double>(m) / modes, static_cast<double>(m + 1) / modes});
  return out;
}

// Index of the equal-width horizontal interval holding normalized x.
inline int mode_of(double normalized_x, int modes) {
  const int m = static_cast<int>(std::floor(normalized_x * modes));
  return std::clamp(m, 0, modes - 1);
}

inline Box clamp_normalized(const Box& b) {
  return {std::clamp(b.x_min, kFrameLo, kFrameHi), std::clamp(b.y_min, kFrameLo, kFrameHi),
          std::clamp(b.x_max, kFrameLo, kFrameHi), std::clamp(b.y_max, kFrameLo, kFrameHi)};
}

// Adds unit mass spread uniformly over the (clamped) box; a box squashed to zero
// area by clamping deposits its mass in the cell of its center.
inline void rasterize(std::vector<double>& heatmap, int grid, const Box& unit_box) {
  const Box b = clamp_normalized(unit_box);
  const double cell = (kFrameHi - kFrameLo) / grid;
  auto cell_of = [&](double v) { return std::clamp(static_cast<int>(std::floor((v - kFrameLo) / cell)), 0, grid - 1); };
  const double area = (b.x_max - b.x_min) * (b.y_max - b.y_min);
  if (!(area > 0.0)) {
    heatmap[static_cast<std::size_t>(cell_of(b.center_y())) * grid + cell_of(b.center_x())] += 1.0;
    return;
  }
  const int c0 = cell_of(b.x_min), c1 = cell_of(b.x_max);
  const int r0 = cell_of(b.y_min), r1 = cell_of(b.y_max);
  for (int r = r0; r <= r1; ++r) {
    const double y0 = kFrameLo + r * cell;
    const double oy = std::min(b.y_max, y0 + cell) - std::max(b.y_min, y0);
    if (oy <= 0.0) continue;
    for (int c = c0; c <= c1; ++c) {
      const double x0 = kFrameLo + c * cell;
      const double ox = std::min(b.x_max, x0 + cell) - std::max(b.x_min, x0);
      if (ox <= 0.0) continue;
      heatmap[static_cast<std::size_t>(r) * grid + c] += ox * oy / area;
    }
  }
}

// Counts peaks of the smoothed histogram of normalized horizontal centers.
inline int estimate_mode_count(std::span<const double> centers_x, const PriorOptions& opt = {}) {
  if (centers_x.empty()) return 1;
  const int bins = opt.histogram_bins;
  std::vector<double> hist(bins, 0.0);
  for (double x : centers_x) hist[std::clamp(static_cast<int>(std::floor(std::clamp(x, 0.0, 1.0) * bins)), 0, bins - 1)] += 1.0;

  std::vector<double> smooth(bins, 0.0);
  for (int i = 0; i < bins; ++i) {
    double s = 0.0;
    int n = 0;
    for (int k = i - 1; k <= i + 1; ++k) {
      if (k < 0 || k >= bins) continue;
      s += hist[k];
      ++n;
    }
    smooth[i] = s / n;
  }
  const double top = *std::max_element(smooth.begin(), smooth.end());

  // Collapse plateaus into runs, then count runs higher than both neighbours.
  struct Run {
    double v;
  };
  std::vector<Run> runs;
  for (double v : smooth)
    if (runs.empty() || runs.back().v != v) runs.push_back({v});
  int peaks = 0;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const bool left = i == 0 || runs[i - 1].v < runs[i].v;
    const bool right = i + 1 == runs.size() || runs[i + 1].v < runs[i].v;
    if (left && right && runs[i].v > 0.0 && runs[i].v >= opt.peak_fraction * top) ++peaks;
  }
  return std::clamp(peaks, 1, opt.max_modes);
}

inline PriorModel build_prior(const Dataset& d, const DatasetIndex& index, const std::string& part_class,
                              const PriorOptions& opt = {}, const std::string& split = "train") {
  PriorModel pm;
  pm.part_class = part_class;
  pm.grid = opt.grid;
  pm.heatmap.assign(static_cast<std::size_t>(opt.grid) * opt.grid, 0.0);

  std::vector<Box> unit;
  for (const auto& p : d.parts) {
    if (p.part_class != part_class) continue;
    if (!split.empty() && index.image(p.image_id).split != split) continue;
    const auto& owner = index.object(p.object_id);
    pm.object_class = owner.object_class;
    unit.push_back(normalize_to(owner.box, p.box));
  }
  if (unit.empty()) throw Error("part class '" + part_class + "' has no training instances");
  pm.instances = unit.size();

  std::vector<double> centers;
  for (const auto& u : unit) {
    rasterize(pm.heatmap, pm.grid, u);
    centers.push_back(u.center_x());
  }

  auto ov = opt.mode_overrides.find(part_class);
  pm.modes = ov != opt.mode_overrides.end() ? ov->second : estimate_mode_count(centers, opt);
  if (pm.modes < 1) throw Error("mode override for '" + part_class + "' must be >= 1");
  pm.intervals = mode_intervals(pm.modes);

  std::vector<Box> sum(pm.modes, Box{0, 0, 0, 0});
  std::vector<std::size_t> n(pm.modes, 0);
  for (const auto& u : unit) {
    const int m = mode_of(u.center_x(), pm.modes);
    sum[m].x_min += u.x_min;
    sum[m].y_min += u.y_min;
    sum[m].x_max += u.x_max;
    sum[m].y_max += u.y_max;
    ++n[m];
  }
  for (int m = 0; m < pm.modes; ++m) {
    if (n[m] == 0) {
      pm.mean_boxes.emplace_back();
      continue;
    }
    const double k = static_cast<double>(n[m]);
    pm.mean_boxes.emplace_back(Box{sum[m].x_min / k, sum[m].y_min / k, sum[m].x_max / k, sum[m].y_max / k});
  }
  return pm;
}

using PriorSet = std::map<std::string, PriorModel>;

inline PriorSet build_priors(const Dataset& d, const PartClassCatalog& cat, const PriorOptions& opt = {},
                             const std::string& split = "train") {
  DatasetIndex index(d);
  PriorSet out;
  for (const auto& name : cat.kept()) out.emplace(name, build_prior(d, index, name, opt, split));
  return out;
}

inline PartClassCatalog with_modes(PartClassCatalog cat, const PriorSet& priors) {
  for (const auto& [name, pm] : priors) {
    auto it = cat.classes.find(name);
    if (it != cat.classes.end()) it->second.modes = pm.modes;
  }
  return cat;
}

// Per mode: index into `parts` of the assigned part, or nullopt when the
// interval is empty. Ties within an interval are broken uniformly at random.
inline std::vector<std::optional<std::size_t>> assign_modes(const Box& object, std::span<const Box> parts, int modes,
                                                            Rng& rng) {
  std::vector<std::vector<std::size_t>> buckets(modes);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Box u = normalize_to(object, parts[i]);
    buckets[mode_of(u.center_x(), modes)].push_back(i);
  }
  std::vector<std::optional<std::size_t>> out(modes);
  for (int m = 0; m < modes; ++m) {
    const auto& b = buckets[m];
    if (b.empty()) continue;
    out[m] = b.size() == 1 ? b.front() : b[rng.index(b.size())];
  }
  return out;
}

inline nlohmann::json to_json(const PriorModel& pm, bool include_heatmap = true) {
  nlohmann::json intervals = nlohmann::json::array();
  for (const auto& iv : pm.intervals) intervals.push_back({iv.lo, iv.hi});
  nlohmann::json means = nlohmann::json::array();
  for (const auto& b : pm.mean_boxes) means.push_back(b ? detail::box_json(*b) : nlohmann::json(nullptr));
  nlohmann::json j = {{"object_class", pm.object_class}, {"modes", pm.modes},
                      {"intervals", intervals},          {"mean_boxes", means},
                      {"instances", pm.instances},       {"grid", pm.grid}};
  if (include_heatmap) j["heatmap"] = pm.heatmap;
  return j;
}

inline nlohmann::json to_json(const PriorSet& priors, bool include_heatmap = true) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, pm] : priors) j[name] = to_json(pm, include_heatmap);
  return j;
}

inline PriorSet priors_from_json(const nlohmann::json& j) {
  PriorSet out;
  for (const auto& [name, e] : j.items()) {
    PriorModel pm;
    pm.part_class = name;
    pm.object_class = e.at("object_class").get<std::string>();
    pm.modes = e.at("modes").get<int>();
    pm.grid = e.at("grid").get<int>();
    pm.instances = e.at("instances").get<std::size_t>();
    for (const auto& iv : e.at("intervals")) pm.intervals.push_back({iv.at(0).get<double>(), iv.at(1).get<double>()});
    for (const auto& b : e.at("mean_boxes")) {
      if (b.is_null()) pm.mean_boxes.emplace_back();
      else pm.mean_boxes.emplace_back(Box{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()});
    }
    if (e.contains("heatmap")) pm.heatmap = e.at("heatmap").get<std::vector<double>>();
    if (pm.modes < 1 || static_cast<int>(pm.intervals.size()) != pm.modes) {
      throw Error("prior for '" + name + "': inconsistent mode count");
    }
    out.emplace(name, std::move(pm));
  }
  return out;
}

}  // namespace partctx
