#pragma once

// Annotation, proposal and score records plus their JSONL serialization.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "partctx/common.hpp"
#include "partctx/geometry.hpp"

namespace partctx {

inline constexpr const char* kBackgroundClass = "__background__";

struct Image {
  int id = 0;
  double width = 0.0;
  double height = 0.0;
  std::string split = "train";

  friend bool operator==(const Image&, const Image&) = default;
};

struct ObjectAnnotation {
  int id = 0;
  int image_id = 0;
  std::string object_class;
  Box box;
  bool occluded = false;

  friend bool operator==(const ObjectAnnotation&, const ObjectAnnotation&) = default;
};

struct PartAnnotation {
  int id = 0;
  int image_id = 0;
  std::string part_class;
  int object_id = 0;
  Box box;

  friend bool operator==(const PartAnnotation&, const PartAnnotation&) = default;
};

struct Proposal {
  int id = 0;
  int image_id = 0;
  Box box;

  friend bool operator==(const Proposal&, const Proposal&) = default;
};

// Dense per-proposal score rows; `classes` fixes the column order.
struct ScoreTable {
  std::vector<std::string> classes;
  std::map<int, std::vector<double>> rows;

  bool empty() const { return rows.empty(); }

  std::optional<std::size_t> column(const std::string& name) const {
    auto it = std::find(classes.begin(), classes.end(), name);
    if (it == classes.end()) return std::nullopt;
    return static_cast<std::size_t>(it - classes.begin());
  }

  double value(int proposal_id, std::size_t col) const {
    auto it = rows.find(proposal_id);
    if (it == rows.end()) return 0.0;
    return it->second[col];
  }

  friend bool operator==(const ScoreTable&, const ScoreTable&) = default;
};

struct Dataset {
  std::vector<Image> images;
  std::vector<ObjectAnnotation> objects;
  std::vector<PartAnnotation> parts;
  std::vector<Proposal> part_proposals;
  std::vector<Proposal> object_proposals;
  ScoreTable part_scores;
  ScoreTable object_scores;  // includes the background column
  std::map<int, std::vector<double>> object_features;
  // True when every object record carried an explicit occlusion flag.
  bool has_occlusion_flags = false;

  std::size_t feature_dim() const {
    return object_features.empty() ? 0 : object_features.begin()->second.size();
  }

  // Object classes (background excluded), sorted.
  std::vector<std::string> object_classes() const {
    std::set<std::string> s;
    for (const auto& o : objects) s.insert(o.object_class);
    for (const auto& c : object_scores.classes)
      if (c != kBackgroundClass) s.insert(c);
    return {s.begin(), s.end()};
  }

  std::vector<std::string> part_classes() const {
    std::set<std::string> s;
    for (const auto& p : parts) s.insert(p.part_class);
    for (const auto& c : part_scores.classes) s.insert(c);
    return {s.begin(), s.end()};
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Lookup tables over a dataset. Holds a reference; the dataset must outlive it.
class DatasetIndex {
 public:
  explicit DatasetIndex(const Dataset& d) : data_(&d) {
    for (std::size_t i = 0; i < d.images.size(); ++i) image_pos_[d.images[i].id] = i;
    for (std::size_t i = 0; i < d.objects.size(); ++i) {
      object_pos_[d.objects[i].id] = i;
      objects_in_[d.objects[i].image_id].push_back(i);
    }
    for (std::size_t i = 0; i < d.parts.size(); ++i) {
      parts_in_[d.parts[i].image_id].push_back(i);
      parts_of_[d.parts[i].object_id].push_back(i);
    }
    for (std::size_t i = 0; i < d.part_proposals.size(); ++i)
      part_props_in_[d.part_proposals[i].image_id].push_back(i);
    for (std::size_t i = 0; i < d.object_proposals.size(); ++i)
      object_props_in_[d.object_proposals[i].image_id].push_back(i);
  }

  const Dataset& data() const { return *data_; }

  const Image& image(int id) const { return data_->images.at(image_pos_.at(id)); }
  bool has_object(int id) const { return object_pos_.contains(id); }
  const ObjectAnnotation& object(int id) const { return data_->objects.at(object_pos_.at(id)); }

  const std::vector<std::size_t>& objects_in(int image_id) const { return get(objects_in_, image_id); }
  const std::vector<std::size_t>& parts_in(int image_id) const { return get(parts_in_, image_id); }
  const std::vector<std::size_t>& parts_of(int object_id) const { return get(parts_of_, object_id); }
  const std::vector<std::size_t>& part_proposals_in(int image_id) const {
    return get(part_props_in_, image_id);
  }
  const std::vector<std::size_t>& object_proposals_in(int image_id) const {
    return get(object_props_in_, image_id);
  }

 private:
  using Groups = std::unordered_map<int, std::vector<std::size_t>>;
  static const std::vector<std::size_t>& get(const Groups& g, int key) {
    static const std::vector<std::size_t> empty;
    auto it = g.find(key);
    return it == g.end() ? empty : it->second;
  }

  const Dataset* data_;
  std::unordered_map<int, std::size_t> image_pos_;
  std::unordered_map<int, std::size_t> object_pos_;
  Groups objects_in_, parts_in_, parts_of_, part_props_in_, object_props_in_;
};

// ---------------------------------------------------------------------------
// JSONL serialization

namespace files {
inline constexpr const char* kImages = "images.jsonl";
inline constexpr const char* kObjects = "objects.jsonl";
inline constexpr const char* kParts = "parts.jsonl";
inline constexpr const char* kPartProposals = "part_proposals.jsonl";
inline constexpr const char* kObjectProposals = "object_proposals.jsonl";
inline constexpr const char* kPartScores = "part_scores.jsonl";
inline constexpr const char* kObjectScores = "object_scores.jsonl";
inline constexpr const char* kObjectFeatures = "object_features.jsonl";
}  // namespace files

namespace detail {

struct LineContext {
  std::string file;
  std::size_t line = 0;

  [[noreturn]] void fail(const std::string& field, const std::string& what) const {
    std::ostringstream os;
    os << file << ":" << line << ": field '" << field << "': " << what;
    throw Error(os.str());
  }
};

inline const nlohmann::json& require(const nlohmann::json& rec, const char* field, const LineContext& ctx) {
  auto it = rec.find(field);
  if (it == rec.end()) ctx.fail(field, "missing");
  return *it;
}

inline int read_int(const nlohmann::json& rec, const char* field, const LineContext& ctx) {
  const auto& v = require(rec, field, ctx);
  if (!v.is_number_integer()) ctx.fail(field, "expected integer");
  return v.get<int>();
}

inline double read_real(const nlohmann::json& v, const char* field, const LineContext& ctx) {
  if (!v.is_number()) ctx.fail(field, "expected number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) ctx.fail(field, "not finite");
  return x;
}

inline std::string read_string(const nlohmann::json& rec, const char* field, const LineContext& ctx) {
  const auto& v = require(rec, field, ctx);
  if (!v.is_string()) ctx.fail(field, "expected string");
  return v.get<std::string>();
}

inline Box read_box(const nlohmann::json& rec, const char* field, const LineContext& ctx) {
  const auto& v = require(rec, field, ctx);
  if (!v.is_array() || v.size() != 4) ctx.fail(field, "expected [x_min, y_min, x_max, y_max]");
  Box b{read_real(v[0], field, ctx), read_real(v[1], field, ctx), read_real(v[2], field, ctx),
        read_real(v[3], field, ctx)};
  if (!(b.x_max > b.x_min)) ctx.fail(field, "x_max must exceed x_min");
  if (!(b.y_max > b.y_min)) ctx.fail(field, "y_max must exceed y_min");
  return b;
}

inline nlohmann::json box_json(const Box& b) { return nlohmann::json::array({b.x_min, b.y_min, b.x_max, b.y_max}); }

// Calls `fn(record, ctx)` per non-empty line. A missing optional file yields no records.
template <typename Fn>
bool for_each_record(const std::filesystem::path& path, bool required, Fn&& fn) {
  std::ifstream in(path);
  if (!in) {
    if (required) throw Error("missing input file: " + path.string());
    return false;
  }
  LineContext ctx{path.filename().string(), 0};
  std::string line;
  while (std::getline(in, line)) {
    ++ctx.line;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      ctx.fail("<record>", std::string("malformed JSON: ") + e.what());
    }
    if (!rec.is_object()) ctx.fail("<record>", "expected a JSON object");
    fn(rec, ctx);
  }
  return true;
}

inline void check_in_image(const Box& b, const Image& img, const char* field, const LineContext& ctx) {
  constexpr double tol = 1e-6;
  if (b.x_min < -tol || b.y_min < -tol || b.x_max > img.width + tol || b.y_max > img.height + tol) {
    ctx.fail(field, "box lies outside image " + std::to_string(img.id));
  }
}

inline ScoreTable read_score_table(const std::filesystem::path& path, const std::set<int>& proposal_ids) {
  struct Raw {
    int id;
    std::map<std::string, double> scores;
    LineContext ctx;
  };
  std::vector<Raw> raw;
  std::set<std::string> names;
  const bool present = for_each_record(path, false, [&](const nlohmann::json& rec, const LineContext& ctx) {
    Raw r{read_int(rec, "proposal_id", ctx), {}, ctx};
    if (!proposal_ids.contains(r.id)) ctx.fail("proposal_id", "unknown proposal " + std::to_string(r.id));
    const auto& s = require(rec, "scores", ctx);
    if (!s.is_object()) ctx.fail("scores", "expected an object of class -> score");
    for (const auto& [k, v] : s.items()) {
      r.scores[k] = read_real(v, "scores", ctx);
      names.insert(k);
    }
    raw.push_back(std::move(r));
  });
  ScoreTable t;
  if (!present) return t;
  t.classes.assign(names.begin(), names.end());
  for (const auto& r : raw) {
    if (t.rows.contains(r.id)) r.ctx.fail("proposal_id", "duplicate row for proposal " + std::to_string(r.id));
    std::vector<double> row(t.classes.size(), 0.0);
    for (const auto& [k, v] : r.scores) row[*t.column(k)] = v;
    t.rows.emplace(r.id, std::move(row));
  }
  if (!raw.empty() && t.rows.size() != proposal_ids.size()) {
    throw Error(path.filename().string() + ": expected one row per proposal (" +
                std::to_string(proposal_ids.size()) + "), found " + std::to_string(t.rows.size()));
  }
  return t;
}

inline void write_lines(const std::filesystem::path& path, const std::vector<nlohmann::json>& recs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& r : recs) out << r.dump() << '\n';
}

}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& dir) {
  using namespace detail;
  Dataset d;
  std::unordered_map<int, std::size_t> image_pos;

  for_each_record(dir / files::kImages, true, [&](const nlohmann::json& rec, const LineContext& ctx) {
    Image img;
    img.id = read_int(rec, "id", ctx);
    img.width = read_real(require(rec, "width", ctx), "width", ctx);
    img.height = read_real(require(rec, "height", ctx), "height", ctx);
    if (img.width <= 0.0) ctx.fail("width", "must be positive");
    if (img.height <= 0.0) ctx.fail("height", "must be positive");
    if (rec.contains("split")) img.split = read_string(rec, "split", ctx);
    if (!image_pos.emplace(img.id, d.images.size()).second) ctx.fail("id", "duplicate image id");
    d.images.push_back(img);
  });

  auto image_of = [&](int id, const LineContext& ctx) -> const Image& {
    auto it = image_pos.find(id);
    if (it == image_pos.end()) ctx.fail("image_id", "unknown image " + std::to_string(id));
    return d.images[it->second];
  };

  std::unordered_map<int, std::size_t> object_pos;
  bool all_flagged = true;
  for_each_record(dir / files::kObjects, true, [&](const nlohmann::json& rec, const LineContext& ctx) {
    ObjectAnnotation o;
    o.id = read_int(rec, "id", ctx);
    o.image_id = read_int(rec, "image_id", ctx);
    o.object_class = read_string(rec, "class", ctx);
    if (o.object_class == kBackgroundClass) ctx.fail("class", "reserved class name");
    o.box = read_box(rec, "box", ctx);
    check_in_image(o.box, image_of(o.image_id, ctx), "box", ctx);
    if (rec.contains("occluded")) {
      if (!rec["occluded"].is_boolean()) ctx.fail("occluded", "expected boolean");
      o.occluded = rec["occluded"].get<bool>();
    } else {
      all_flagged = false;
    }
    if (!object_pos.emplace(o.id, d.objects.size()).second) ctx.fail("id", "duplicate object id");
    d.objects.push_back(o);
  });
  d.has_occlusion_flags = all_flagged && !d.objects.empty();

  std::map<std::string, std::string> part_owner_class;
  std::set<int> part_ids;
  for_each_record(dir / files::kParts, true, [&](const nlohmann::json& rec, const LineContext& ctx) {
    PartAnnotation p;
    p.id = read_int(rec, "id", ctx);
    p.image_id = read_int(rec, "image_id", ctx);
    p.part_class = read_string(rec, "class", ctx);
    p.object_id = read_int(rec, "object_id", ctx);
    p.box = read_box(rec, "box", ctx);
    check_in_image(p.box, image_of(p.image_id, ctx), "box", ctx);
    auto it = object_pos.find(p.object_id);
    if (it == object_pos.end()) ctx.fail("object_id", "dangling reference to object " + std::to_string(p.object_id));
    const auto& owner = d.objects[it->second];
    if (owner.image_id != p.image_id) ctx.fail("object_id", "owner object lies in a different image");
    auto [cls, inserted] = part_owner_class.emplace(p.part_class, owner.object_class);
    if (!inserted && cls->second != owner.object_class) {
      ctx.fail("class", "part class '" + p.part_class + "' used with object classes '" + cls->second +
                            "' and '" + owner.object_class + "'");
    }
    if (!part_ids.insert(p.id).second) ctx.fail("id", "duplicate part id");
    d.parts.push_back(p);
  });

  auto read_proposals = [&](const char* name, std::vector<Proposal>& out) {
    std::set<int> ids;
    for_each_record(dir / name, true, [&](const nlohmann::json& rec, const LineContext& ctx) {
      Proposal p;
      p.id = read_int(rec, "id", ctx);
      p.image_id = read_int(rec, "image_id", ctx);
      p.box = read_box(rec, "box", ctx);
      check_in_image(p.box, image_of(p.image_id, ctx), "box", ctx);
      if (!ids.insert(p.id).second) ctx.fail("id", "duplicate proposal id");
      out.push_back(p);
    });
    return ids;
  };
  const auto part_prop_ids = read_proposals(files::kPartProposals, d.part_proposals);
  const auto object_prop_ids = read_proposals(files::kObjectProposals, d.object_proposals);

  d.part_scores = read_score_table(dir / files::kPartScores, part_prop_ids);
  d.object_scores = read_score_table(dir / files::kObjectScores, object_prop_ids);

  for_each_record(dir / files::kObjectFeatures, false, [&](const nlohmann::json& rec, const LineContext& ctx) {
    const int id = read_int(rec, "proposal_id", ctx);
    if (!object_prop_ids.contains(id)) ctx.fail("proposal_id", "unknown object proposal " + std::to_string(id));
    const auto& f = require(rec, "features", ctx);
    if (!f.is_array() || f.empty()) ctx.fail("features", "expected a non-empty array");
    std::vector<double> v;
    for (const auto& x : f) v.push_back(read_real(x, "features", ctx));
    if (!d.object_features.empty() && v.size() != d.feature_dim()) ctx.fail("features", "inconsistent dimension");
    if (!d.object_features.emplace(id, std::move(v)).second) ctx.fail("proposal_id", "duplicate feature row");
  });
  if (!d.object_features.empty() && d.object_features.size() != d.object_proposals.size()) {
    throw Error(std::string(files::kObjectFeatures) + ": expected one row per object proposal");
  }
  return d;
}

inline void save_score_table(const std::filesystem::path& path, const ScoreTable& t) {
  std::vector<nlohmann::json> out;
  for (const auto& [id, row] : t.rows) {
    nlohmann::json s = nlohmann::json::object();
    for (std::size_t c = 0; c < t.classes.size(); ++c) s[t.classes[c]] = row[c];
    out.push_back({{"proposal_id", id}, {"scores", std::move(s)}});
  }
  detail::write_lines(path, out);
}

// Score table for the given proposals; the file must exist.
inline ScoreTable load_score_table(const std::filesystem::path& path, std::span<const Proposal> proposals) {
  if (!std::filesystem::exists(path)) throw Error("missing input file: " + path.string());
  std::set<int> ids;
  for (const auto& p : proposals) ids.insert(p.id);
  return detail::read_score_table(path, ids);
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& d) {
  using nlohmann::json;
  using detail::box_json;
  std::filesystem::create_directories(dir);
  std::vector<json> recs;

  for (const auto& i : d.images)
    recs.push_back({{"id", i.id}, {"width", i.width}, {"height", i.height}, {"split", i.split}});
  detail::write_lines(dir / files::kImages, recs);

  recs.clear();
  for (const auto& o : d.objects) {
    json r = {{"id", o.id}, {"image_id", o.image_id}, {"class", o.object_class}, {"box", box_json(o.box)}};
    if (d.has_occlusion_flags) r["occluded"] = o.occluded;
    recs.push_back(std::move(r));
  }
  detail::write_lines(dir / files::kObjects, recs);

  recs.clear();
  for (const auto& p : d.parts)
    recs.push_back({{"id", p.id},
                    {"image_id", p.image_id},
                    {"class", p.part_class},
                    {"object_id", p.object_id},
                    {"box", box_json(p.box)}});
  detail::write_lines(dir / files::kParts, recs);

  auto write_props = [&](const char* name, const std::vector<Proposal>& props) {
    std::vector<json> out;
    for (const auto& p : props) out.push_back({{"id", p.id}, {"image_id", p.image_id}, {"box", box_json(p.box)}});
    detail::write_lines(dir / name, out);
  };
  write_props(files::kPartProposals, d.part_proposals);
  write_props(files::kObjectProposals, d.object_proposals);

  save_score_table(dir / files::kPartScores, d.part_scores);
  save_score_table(dir / files::kObjectScores, d.object_scores);

  recs.clear();
  for (const auto& [id, f] : d.object_features) recs.push_back({{"proposal_id", id}, {"features", f}});
  detail::write_lines(dir / files::kObjectFeatures, recs);
}

inline std::vector<Image> images_in_split(const Dataset& d, const std::string& split) {
  std::vector<Image> out;
  for (const auto& i : d.images)
    if (split.empty() || i.split == split) out.push_back(i);
  return out;
}

}  // namespace partctx
