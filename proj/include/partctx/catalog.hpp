#pragma once

// Part-class vocabulary cleanup: merge qualifier variants, drop tiny and rare classes.

#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "partctx/common.hpp"
#include "partctx/dataset.hpp"

namespace partctx {

enum class PartClassStatus { kept, merged, discarded_tiny, discarded_rare };

inline const char* to_string(PartClassStatus s) {
  switch (s) {
    case PartClassStatus::kept: return "kept";
    case PartClassStatus::merged: return "merged-into";
    case PartClassStatus::discarded_tiny: return "discarded-tiny";
    case PartClassStatus::discarded_rare: return "discarded-rare";
  }
  return "?";
}

inline PartClassStatus status_from_string(const std::string& s) {
  if (s == "kept") return PartClassStatus::kept;
  if (s == "merged-into") return PartClassStatus::merged;
  if (s == "discarded-tiny") return PartClassStatus::discarded_tiny;
  if (s == "discarded-rare") return PartClassStatus::discarded_rare;
  throw Error("unknown part class status '" + s + "'");
}

// Raw part name -> canonical name. Chains are followed; cycles are rejected.
class MergeTable {
 public:
  MergeTable() = default;
  explicit MergeTable(std::map<std::string, std::string> m) : map_(std::move(m)) {}

  void add(const std::string& from, const std::string& to) { map_[from] = to; }
  const std::map<std::string, std::string>& entries() const { return map_; }

  std::string resolve(const std::string& name) const {
    std::set<std::string> seen{name};
    std::string cur = name;
    for (auto it = map_.find(cur); it != map_.end() && it->second != cur; it = map_.find(cur)) {
      cur = it->second;
      if (!seen.insert(cur).second) throw Error("merge table cycle through '" + cur + "'");
    }
    return cur;
  }

  // Throws if any chain cycles.
  void validate() const {
    for (const auto& [from, to] : map_) (void)resolve(from);
  }

 private:
  std::map<std::string, std::string> map_;
};

inline const std::vector<std::string>& default_qualifiers() {
  static const std::vector<std::string> q{"front", "back",  "left",   "right", "upper",
                                          "lower", "top",   "bottom", "middle"};
  return q;
}

// Builds a table that strips qualifier tokens ("wheel_front_left" -> "wheel").
inline MergeTable make_merge_table(const std::vector<std::string>& raw_names,
                                   const std::vector<std::string>& qualifiers = default_qualifiers(),
                                   char separator = '_') {
  const std::set<std::string> drop(qualifiers.begin(), qualifiers.end());
  MergeTable table;
  for (const auto& name : raw_names) {
    std::stringstream ss(name);
    std::string token, canonical;
    while (std::getline(ss, token, separator)) {
      if (token.empty() || drop.contains(token)) continue;
      if (!canonical.empty()) canonical += separator;
      canonical += token;
    }
    if (!canonical.empty() && canonical != name) table.add(name, canonical);
  }
  return table;
}

struct PartClassInfo {
  std::string name;
  std::string object_class;
  PartClassStatus status = PartClassStatus::kept;
  std::string merged_into;  // set when status == merged
  int modes = 1;
  std::size_t count = 0;
  double mean_width = 0.0;
  double mean_height = 0.0;

  friend bool operator==(const PartClassInfo&, const PartClassInfo&) = default;
};

struct PartClassCatalog {
  std::map<std::string, PartClassInfo> classes;

  std::vector<std::string> kept() const {
    std::vector<std::string> out;
    for (const auto& [name, info] : classes)
      if (info.status == PartClassStatus::kept) out.push_back(name);
    return out;
  }

  bool is_kept(const std::string& name) const {
    auto it = classes.find(name);
    return it != classes.end() && it->second.status == PartClassStatus::kept;
  }

  // Canonical kept class for a raw name, or empty when discarded/unknown.
  std::string resolve(const std::string& raw) const {
    std::string cur = raw;
    for (int guard = 0; guard <= static_cast<int>(classes.size()); ++guard) {
      auto it = classes.find(cur);
      if (it == classes.end()) return {};
      if (it->second.status == PartClassStatus::kept) return cur;
      if (it->second.status != PartClassStatus::merged) return {};
      cur = it->second.merged_into;
    }
    return {};
  }

  const PartClassInfo& at(const std::string& name) const {
    auto it = classes.find(name);
    if (it == classes.end()) throw Error("unknown part class '" + name + "'");
    return it->second;
  }

  friend bool operator==(const PartClassCatalog&, const PartClassCatalog&) = default;
};

struct RawPartInstance {
  std::string name;
  std::string object_class;
  double width = 0.0;
  double height = 0.0;
};

struct CatalogOptions {
  double min_avg_size = 15.0;
  std::size_t min_count = 10;
};

inline PartClassCatalog preprocess_catalog(const std::vector<RawPartInstance>& raw, const MergeTable& merge,
                                           const CatalogOptions& opt = {}) {
  merge.validate();
  PartClassCatalog cat;

  struct Acc {
    std::string object_class;
    std::size_t n = 0;
    double w = 0.0, h = 0.0;
  };
  std::map<std::string, Acc> acc;
  for (const auto& r : raw) {
    const std::string canonical = merge.resolve(r.name);
    if (canonical != r.name) {
      auto& info = cat.classes[r.name];
      info.name = r.name;
      info.object_class = r.object_class;
      info.status = PartClassStatus::merged;
      info.merged_into = canonical;
      ++info.count;
    }
    auto& a = acc[canonical];
    if (a.n > 0 && a.object_class != r.object_class) {
      throw Error("part class '" + canonical + "' spans object classes '" + a.object_class + "' and '" +
                  r.object_class + "'");
    }
    a.object_class = r.object_class;
    ++a.n;
    a.w += r.width;
    a.h += r.height;
  }

  for (const auto& [name, a] : acc) {
    PartClassInfo info;
    info.name = name;
    info.object_class = a.object_class;
    info.count = a.n;
    info.mean_width = a.w / static_cast<double>(a.n);
    info.mean_height = a.h / static_cast<double>(a.n);
    if (info.mean_width <= opt.min_avg_size && info.mean_height <= opt.min_avg_size) {
      info.status = PartClassStatus::discarded_tiny;
    } else if (a.n < opt.min_count) {
      info.status = PartClassStatus::discarded_rare;
    }
    cat.classes[name] = info;
  }
  return cat;
}

// Training-split part instances of a dataset, named as annotated.
inline std::vector<RawPartInstance> raw_part_instances(const Dataset& d, const std::string& split = "train") {
  DatasetIndex index(d);
  std::vector<RawPartInstance> out;
  for (const auto& p : d.parts) {
    if (!split.empty() && index.image(p.image_id).split != split) continue;
    out.push_back({p.part_class, index.object(p.object_id).object_class, p.box.width(), p.box.height()});
  }
  return out;
}

// Renames parts to their canonical class and drops discarded ones. Score columns
// are kept only for kept classes.
inline Dataset apply_catalog(const Dataset& d, const PartClassCatalog& cat) {
  Dataset out = d;
  out.parts.clear();
  for (auto p : d.parts) {
    std::string name = cat.resolve(p.part_class);
    if (name.empty()) continue;
    p.part_class = std::move(name);
    out.parts.push_back(std::move(p));
  }
  ScoreTable scores;
  std::vector<std::size_t> cols;
  for (std::size_t c = 0; c < d.part_scores.classes.size(); ++c) {
    if (cat.is_kept(d.part_scores.classes[c])) {
      scores.classes.push_back(d.part_scores.classes[c]);
      cols.push_back(c);
    }
  }
  for (const auto& [id, row] : d.part_scores.rows) {
    std::vector<double> r;
    for (auto c : cols) r.push_back(row[c]);
    scores.rows.emplace(id, std::move(r));
  }
  out.part_scores = std::move(scores);
  return out;
}

inline nlohmann::json to_json(const PartClassCatalog& cat) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, c] : cat.classes) {
    nlohmann::json e = {{"object_class", c.object_class}, {"status", to_string(c.status)}, {"modes", c.modes},
                        {"count", c.count}, {"mean_width", c.mean_width}, {"mean_height", c.mean_height}};
    if (c.status == PartClassStatus::merged) e["merged_into"] = c.merged_into;
    j[name] = std::move(e);
  }
  return j;
}

inline PartClassCatalog catalog_from_json(const nlohmann::json& j) {
  PartClassCatalog cat;
  for (const auto& [name, e] : j.items()) {
    PartClassInfo c;
    c.name = name;
    c.object_class = e.at("object_class").get<std::string>();
    c.status = status_from_string(e.at("status").get<std::string>());
    c.modes = e.at("modes").get<int>();
    c.count = e.at("count").get<std::size_t>();
    c.mean_width = e.at("mean_width").get<double>();
    c.mean_height = e.at("mean_height").get<double>();
    if (c.status == PartClassStatus::merged) c.merged_into = e.at("merged_into").get<std::string>();
    if (c.modes < 1) throw Error("part class '" + name + "' has mode count < 1");
    cat.classes[name] = c;
  }
  return cat;
}

}  // namespace partctx
