#pragma once

// Seeded synthetic scenes with planted multi-modal part layouts, viewpoint
// dependent mode activity, and noisy appearance/object scores and features.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "partctx/catalog.hpp"
#include "partctx/common.hpp"
#include "partctx/dataset.hpp"
#include "partctx/geometry.hpp"
#include "partctx/random.hpp"

namespace partctx {

struct SynthPartClass {
  std::string name;
  std::vector<Box> anchors;  // one per mode, in the owner's unit frame
  // Viewpoint -> active mode indices. Viewpoints not listed have every mode active.
  std::map<std::string, std::vector<int>> activity;

  std::vector<int> active_modes(const std::string& viewpoint) const {
    auto it = activity.find(viewpoint);
    if (it != activity.end()) return it->second;
    std::vector<int> all(anchors.size());
    for (std::size_t m = 0; m < all.size(); ++m) all[m] = static_cast<int>(m);
    return all;
  }
};

struct SynthObjectClass {
  std::string name;
  double min_width = 120.0;
  double max_width = 200.0;
  double min_aspect = 0.5;  // height / width
  double max_aspect = 0.8;
  std::vector<SynthPartClass> parts;
};

struct SynthConfig {
  std::uint64_t seed = 0;
  int num_images = 100;
  double image_width = 480.0;
  double image_height = 360.0;
  double test_fraction = 0.5;
  int min_objects = 1;
  int max_objects = 2;
  std::vector<std::string> viewpoints{"profile", "oblique", "frontal"};
  std::vector<SynthObjectClass> object_classes;

  double sigma_app = 0.5;
  double sigma_obj = 0.3;
  double sigma_feat = 0.1;
  std::size_t feature_dim = 16;

  double part_jitter = 0.02;      // std of normalized center shift and log-size change
  double proposal_jitter = 0.08;  // std of proposal shift/log-size relative to the box
  double protrusion = 0.0;        // parts may extend this fraction beyond their owner
  int part_proposal_copies = 3;
  int object_proposal_copies = 3;
  int part_distractors_inside = 12;
  int part_distractors_outside = 8;
  int object_distractors = 4;

  double occlusion_probability = 0.3;
  // "random": each object occluded with the probability above.
  // "twin": every scene is emitted twice; the copy has all objects occluded.
  std::string occlusion_mode = "random";
};

// Everything the generator planted.
struct ManifestPartClass {
  std::string name;
  std::string object_class;
  int modes = 1;
  std::map<std::string, std::vector<int>> activity;
};

struct ManifestObject {
  int object_id = 0;
  int image_id = 0;
  std::string viewpoint;
  bool occluded = false;
};

struct ManifestPart {
  int part_id = 0;
  int object_id = 0;
  std::string part_class;
  int mode = 0;
  Box normalized_box;
};

struct Manifest {
  std::vector<ManifestPartClass> part_classes;
  std::vector<ManifestObject> objects;
  std::vector<ManifestPart> parts;
};

struct SynthOutput {
  Dataset dataset;
  Manifest manifest;
};

inline void validate(const SynthConfig& c) {
  auto prob = [](double p, const char* what) {
    if (!(p >= 0.0 && p <= 1.0)) throw Error(std::string("synth config: ") + what + " must lie in [0,1]");
  };
  prob(c.test_fraction, "test_fraction");
  prob(c.occlusion_probability, "occlusion_probability");
  if (c.num_images < 1) throw Error("synth config: num_images must be positive");
  if (c.min_objects < 0 || c.max_objects < c.min_objects) throw Error("synth config: bad object count range");
  if (c.viewpoints.empty()) throw Error("synth config: at least one viewpoint required");
  if (c.feature_dim < c.viewpoints.size() + 3) throw Error("synth config: feature_dim too small for viewpoint one-hot + geometry");
  if (c.occlusion_mode != "random" && c.occlusion_mode != "twin") throw Error("synth config: occlusion_mode must be random or twin");
  if (c.object_classes.empty()) throw Error("synth config: no object classes");
  for (const auto& oc : c.object_classes) {
    if (!(oc.min_width > 0 && oc.max_width >= oc.min_width && oc.min_aspect > 0 && oc.max_aspect >= oc.min_aspect))
      throw Error("synth config: bad size range for '" + oc.name + "'");
    if (oc.max_width > c.image_width || oc.max_width * oc.max_aspect > c.image_height)
      throw Error("synth config: objects of '" + oc.name + "' do not fit the image");
    for (const auto& pc : oc.parts) {
      if (pc.anchors.empty()) throw Error("synth config: part class '" + pc.name + "' has no modes");
      for (const auto& a : pc.anchors) {
        if (!a.valid() || a.x_min < -0.5 || a.y_min < -0.5 || a.x_max > 1.5 || a.y_max > 1.5)
          throw Error("synth config: anchor of '" + pc.name + "' outside [-0.5,1.5]^2");
      }
      for (const auto& [vp, modes] : pc.activity)
        for (int m : modes)
          if (m < 0 || m >= static_cast<int>(pc.anchors.size()))
            throw Error("synth config: activity of '" + pc.name + "' names a missing mode");
    }
  }
}

namespace detail {

struct SceneObject {
  std::string object_class;
  std::string viewpoint;
  Box box;
  bool occluded = false;
  struct Part {
    std::string part_class;
    int mode;
    Box box;
  };
  std::vector<Part> parts;
};

struct Scene {
  std::vector<SceneObject> objects;
  std::vector<Box> part_proposals;
  std::vector<Box> object_proposals;
};

inline Box jitter_box(const Box& b, double sigma, Rng& rng) {
  const double cx = b.center_x() + rng.normal() * sigma * b.width();
  const double cy = b.center_y() + rng.normal() * sigma * b.height();
  const double w = b.width() * std::exp(rng.normal() * sigma);
  const double h = b.height() * std::exp(rng.normal() * sigma);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

// Clips to the image; falls back to the unjittered box when clipping collapses it.
inline Box fit_in_image(const Box& b, const Box& fallback, const SynthConfig& c) {
  Box out = clip_to(b, c.image_width, c.image_height);
  if (out.width() < 1.0 || out.height() < 1.0) return fallback;
  return out;
}

inline std::vector<double> object_feature(const SynthConfig& c, const SceneObject* obj, const Box& box, Rng& rng) {
  std::vector<double> f(c.feature_dim, 0.0);
  if (obj) {
    const auto it = std::find(c.viewpoints.begin(), c.viewpoints.end(), obj->viewpoint);
    f[static_cast<std::size_t>(it - c.viewpoints.begin())] = 1.0;
  }
  const std::size_t g = c.viewpoints.size();
  f[g] = box.width() / c.image_width;
  f[g + 1] = box.height() / c.image_height;
  f[g + 2] = box.height() / box.width();
  for (double& v : f) v += c.sigma_feat * rng.normal();
  return f;
}

inline double noisy_score(bool indicator, double sigma, Rng& rng) {
  const double u = rng.uniform(), u2 = rng.uniform();
  return std::clamp((indicator ? 1.0 - sigma * u : 0.0) + sigma * u2, 0.0, 1.0);
}

inline Scene make_scene(const SynthConfig& c, Rng& rng) {
  Scene s;
  const int n_obj = c.min_objects + static_cast<int>(rng.index(static_cast<std::uint64_t>(c.max_objects - c.min_objects + 1)));
  for (int k = 0; k < n_obj; ++k) {
    const auto& oc = c.object_classes[rng.index(c.object_classes.size())];
    const std::string vp = c.viewpoints[rng.index(c.viewpoints.size())];
    Box box;
    bool placed = false;
    for (int attempt = 0; attempt < 30 && !placed; ++attempt) {
      const double w = rng.uniform(oc.min_width, oc.max_width);
      const double h = w * rng.uniform(oc.min_aspect, oc.max_aspect);
      const double x = rng.uniform(0.0, c.image_width - w);
      const double y = rng.uniform(0.0, c.image_height - h);
      box = {x, y, x + w, y + h};
      placed = std::none_of(s.objects.begin(), s.objects.end(),
                            [&](const SceneObject& o) { return intersection_area(o.box, box) > 0.0; });
    }
    if (!placed) continue;
    SceneObject obj{oc.name, vp, box, c.occlusion_mode == "random" && rng.bernoulli(c.occlusion_probability), {}};

    const Box limit = clip_to({box.x_min - c.protrusion * box.width(), box.y_min - c.protrusion * box.height(),
                               box.x_max + c.protrusion * box.width(), box.y_max + c.protrusion * box.height()},
                              c.image_width, c.image_height);
    for (const auto& pc : oc.parts) {
      for (int m : pc.active_modes(vp)) {
        const Box& a = pc.anchors[m];
        const double cx = a.center_x() + rng.normal() * c.part_jitter;
        const double cy = a.center_y() + rng.normal() * c.part_jitter;
        const double w = a.width() * std::exp(rng.normal() * c.part_jitter);
        const double h = a.height() * std::exp(rng.normal() * c.part_jitter);
        Box pb = denormalize_from(box, {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
        pb = {std::max(pb.x_min, limit.x_min), std::max(pb.y_min, limit.y_min), std::min(pb.x_max, limit.x_max),
              std::min(pb.y_max, limit.y_max)};
        if (pb.width() < 2.0 || pb.height() < 2.0) continue;
        obj.parts.push_back({pc.name, m, pb});
      }
    }
    s.objects.push_back(std::move(obj));
  }

  for (const auto& o : s.objects) {
    s.object_proposals.push_back(o.box);
    for (int k = 0; k < c.object_proposal_copies; ++k)
      s.object_proposals.push_back(fit_in_image(jitter_box(o.box, c.proposal_jitter, rng), o.box, c));
    for (const auto& p : o.parts) {
      s.part_proposals.push_back(p.box);
      for (int k = 0; k < c.part_proposal_copies; ++k)
        s.part_proposals.push_back(fit_in_image(jitter_box(p.box, c.proposal_jitter, rng), p.box, c));
    }
  }
  for (int k = 0; k < c.object_distractors; ++k) {
    const double w = rng.uniform(40.0, 0.6 * c.image_width), h = rng.uniform(40.0, 0.6 * c.image_height);
    const double x = rng.uniform(0.0, c.image_width - w), y = rng.uniform(0.0, c.image_height - h);
    s.object_proposals.push_back({x, y, x + w, y + h});
  }

  // Distractor part proposals: sized like a random anchor of a random class.
  std::vector<const Box*> anchors;
  for (const auto& oc : c.object_classes)
    for (const auto& pc : oc.parts)
      for (const auto& a : pc.anchors) anchors.push_back(&a);
  auto random_part_box = [&](const Box& frame, const Box& region) {
    const Box& a = *anchors[rng.index(anchors.size())];
    const double w = std::min(a.width() * frame.width(), region.width());
    const double h = std::min(a.height() * frame.height(), region.height());
    const double x = rng.uniform(region.x_min, region.x_max - w);
    const double y = rng.uniform(region.y_min, region.y_max - h);
    return Box{x, y, x + w, y + h};
  };
  const Box whole{0.0, 0.0, c.image_width, c.image_height};
  for (int k = 0; k < c.part_distractors_inside && !s.objects.empty(); ++k) {
    const auto& o = s.objects[rng.index(s.objects.size())];
    s.part_proposals.push_back(random_part_box(o.box, o.box));
  }
  for (int k = 0; k < c.part_distractors_outside; ++k) {
    const double scale = rng.uniform(100.0, 200.0);
    s.part_proposals.push_back(random_part_box({0, 0, scale, scale}, whole));
  }
  // Proposal ids must not reveal which boxes are ground-truth copies.
  auto shuffle = [&](std::vector<Box>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.index(i)]);
  };
  shuffle(s.part_proposals);
  shuffle(s.object_proposals);
  return s;
}

}  // namespace detail

inline SynthOutput generate(const SynthConfig& c) {
  validate(c);
  SynthOutput out;
  Dataset& d = out.dataset;
  Manifest& man = out.manifest;
  d.has_occlusion_flags = true;

  std::set<std::string> part_names;
  for (const auto& oc : c.object_classes) {
    for (const auto& pc : oc.parts) {
      if (!part_names.insert(pc.name).second) throw Error("synth config: duplicate part class '" + pc.name + "'");
      man.part_classes.push_back({pc.name, oc.name, static_cast<int>(pc.anchors.size()), pc.activity});
    }
  }
  std::set<std::string> object_names;
  for (const auto& oc : c.object_classes) object_names.insert(oc.name);
  d.part_scores.classes.assign(part_names.begin(), part_names.end());
  d.object_scores.classes.push_back(kBackgroundClass);
  for (const auto& n : object_names) d.object_scores.classes.push_back(n);
  std::sort(d.object_scores.classes.begin(), d.object_scores.classes.end());

  const int first_test = static_cast<int>(std::lround(c.num_images * (1.0 - c.test_fraction)));
  const int copies = c.occlusion_mode == "twin" ? 2 : 1;
  int next_image = 0, next_object = 0, next_part = 0, next_pp = 0, next_op = 0;

  for (int i = 0; i < c.num_images; ++i) {
    Rng scene_rng = Rng::split(c.seed, static_cast<std::uint64_t>(i));
    const detail::Scene scene = detail::make_scene(c, scene_rng);
    for (int copy = 0; copy < copies; ++copy) {
      // Noise streams depend only on (scene, copy).
      Rng noise = Rng::split(c.seed ^ 0x5eedf00dULL, static_cast<std::uint64_t>(i) * 2 + copy);
      const int image_id = next_image++;
      d.images.push_back({image_id, c.image_width, c.image_height, i < first_test ? "train" : "test"});

      std::vector<const detail::SceneObject*> owners;
      for (const auto& o : scene.objects) {
        const bool occluded = copy == 1 ? true : (c.occlusion_mode == "twin" ? false : o.occluded);
        const int oid = next_object++;
        d.objects.push_back({oid, image_id, o.object_class, o.box, occluded});
        man.objects.push_back({oid, image_id, o.viewpoint, occluded});
        for (const auto& p : o.parts) {
          const int pid = next_part++;
          d.parts.push_back({pid, image_id, p.part_class, oid, p.box});
          man.parts.push_back({pid, oid, p.part_class, p.mode, normalize_to(o.box, p.box)});
        }
      }

      for (const auto& b : scene.part_proposals) {
        const int id = next_pp++;
        d.part_proposals.push_back({id, image_id, b});
        std::vector<double> row;
        for (const auto& cls : d.part_scores.classes) {
          bool hit = false;
          for (const auto& o : scene.objects)
            for (const auto& p : o.parts)
              if (p.part_class == cls && iou(b, p.box) > 0.5) hit = true;
          row.push_back(detail::noisy_score(hit, c.sigma_app, noise));
        }
        d.part_scores.rows.emplace(id, std::move(row));
      }

      for (const auto& b : scene.object_proposals) {
        const int id = next_op++;
        d.object_proposals.push_back({id, image_id, b});
        const detail::SceneObject* match = nullptr;
        double best = 0.5;
        for (const auto& o : scene.objects) {
          const double v = iou(b, o.box);
          if (v > best) {
            best = v;
            match = &o;
          }
        }
        std::vector<double> row;
        for (const auto& cls : d.object_scores.classes) {
          const bool hit = cls == kBackgroundClass ? match == nullptr : (match && match->object_class == cls);
          row.push_back(detail::noisy_score(hit, c.sigma_obj, noise));
        }
        d.object_scores.rows.emplace(id, std::move(row));
        d.object_features.emplace(id, detail::object_feature(c, match, b, noise));
      }
    }
  }

  const auto cat = preprocess_catalog(raw_part_instances(d), MergeTable{});
  if (cat.kept().empty()) throw Error("synth config yields no kept part classes");
  return out;
}

inline Manifest truth_manifest(const SynthConfig& c) { return generate(c).manifest; }

// ---------------------------------------------------------------------------
// Serialization

inline void save_manifest(const std::filesystem::path& path, const Manifest& m) {
  std::vector<nlohmann::json> recs;
  for (const auto& pc : m.part_classes)
    recs.push_back({{"kind", "part_class"}, {"name", pc.name}, {"object_class", pc.object_class},
                    {"modes", pc.modes}, {"activity", pc.activity}});
  for (const auto& o : m.objects)
    recs.push_back({{"kind", "object"}, {"object_id", o.object_id}, {"image_id", o.image_id},
                    {"viewpoint", o.viewpoint}, {"occluded", o.occluded}});
  for (const auto& p : m.parts)
    recs.push_back({{"kind", "part"}, {"part_id", p.part_id}, {"object_id", p.object_id},
                    {"class", p.part_class}, {"mode", p.mode}, {"normalized_box", detail::box_json(p.normalized_box)}});
  detail::write_lines(path, recs);
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  Manifest m;
  detail::for_each_record(path, true, [&](const nlohmann::json& r, const detail::LineContext& ctx) {
    const std::string kind = detail::read_string(r, "kind", ctx);
    if (kind == "part_class") {
      m.part_classes.push_back({r.at("name").get<std::string>(), r.at("object_class").get<std::string>(),
                                r.at("modes").get<int>(),
                                r.at("activity").get<std::map<std::string, std::vector<int>>>()});
    } else if (kind == "object") {
      m.objects.push_back({r.at("object_id").get<int>(), r.at("image_id").get<int>(),
                           r.at("viewpoint").get<std::string>(), r.at("occluded").get<bool>()});
    } else if (kind == "part") {
      m.parts.push_back({r.at("part_id").get<int>(), r.at("object_id").get<int>(), r.at("class").get<std::string>(),
                         r.at("mode").get<int>(), detail::read_box(r, "normalized_box", ctx)});
    } else {
      ctx.fail("kind", "unknown record kind '" + kind + "'");
    }
  });
  return m;
}

inline nlohmann::json to_json(const SynthConfig& c) {
  using nlohmann::json;
  json classes = json::array();
  for (const auto& oc : c.object_classes) {
    json parts = json::array();
    for (const auto& pc : oc.parts) {
      json anchors = json::array();
      for (const auto& a : pc.anchors) anchors.push_back(detail::box_json(a));
      parts.push_back({{"name", pc.name}, {"anchors", anchors}, {"activity", pc.activity}});
    }
    classes.push_back({{"name", oc.name},
                       {"width", {oc.min_width, oc.max_width}},
                       {"aspect", {oc.min_aspect, oc.max_aspect}},
                       {"parts", parts}});
  }
  return {{"seed", c.seed},
          {"num_images", c.num_images},
          {"image_size", {c.image_width, c.image_height}},
          {"test_fraction", c.test_fraction},
          {"objects_per_image", {c.min_objects, c.max_objects}},
          {"viewpoints", c.viewpoints},
          {"object_classes", classes},
          {"sigma_app", c.sigma_app},
          {"sigma_obj", c.sigma_obj},
          {"sigma_feat", c.sigma_feat},
          {"feature_dim", c.feature_dim},
          {"part_jitter", c.part_jitter},
          {"proposal_jitter", c.proposal_jitter},
          {"protrusion", c.protrusion},
          {"part_proposal_copies", c.part_proposal_copies},
          {"object_proposal_copies", c.object_proposal_copies},
          {"part_distractors_inside", c.part_distractors_inside},
          {"part_distractors_outside", c.part_distractors_outside},
          {"object_distractors", c.object_distractors},
          {"occlusion_probability", c.occlusion_probability},
          {"occlusion_mode", c.occlusion_mode}};
}

// Missing keys keep the values already in `base`.
inline SynthConfig synth_config_from_json(const nlohmann::json& j, SynthConfig c = {}) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("seed", c.seed);
  get("num_images", c.num_images);
  if (j.contains("image_size")) {
    c.image_width = j["image_size"].at(0).get<double>();
    c.image_height = j["image_size"].at(1).get<double>();
  }
  get("test_fraction", c.test_fraction);
  if (j.contains("objects_per_image")) {
    c.min_objects = j["objects_per_image"].at(0).get<int>();
    c.max_objects = j["objects_per_image"].at(1).get<int>();
  }
  get("viewpoints", c.viewpoints);
  if (j.contains("object_classes")) {
    c.object_classes.clear();
    for (const auto& e : j["object_classes"]) {
      SynthObjectClass oc;
      oc.name = e.at("name").get<std::string>();
      oc.min_width = e.at("width").at(0).get<double>();
      oc.max_width = e.at("width").at(1).get<double>();
      oc.min_aspect = e.at("aspect").at(0).get<double>();
      oc.max_aspect = e.at("aspect").at(1).get<double>();
      for (const auto& pe : e.at("parts")) {
        SynthPartClass pc;
        pc.name = pe.at("name").get<std::string>();
        for (const auto& a : pe.at("anchors"))
          pc.anchors.push_back({a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>(), a.at(3).get<double>()});
        if (pe.contains("activity")) pc.activity = pe["activity"].get<std::map<std::string, std::vector<int>>>();
        oc.parts.push_back(std::move(pc));
      }
      c.object_classes.push_back(std::move(oc));
    }
  }
  get("sigma_app", c.sigma_app);
  get("sigma_obj", c.sigma_obj);
  get("sigma_feat", c.sigma_feat);
  get("feature_dim", c.feature_dim);
  get("part_jitter", c.part_jitter);
  get("proposal_jitter", c.proposal_jitter);
  get("protrusion", c.protrusion);
  get("part_proposal_copies", c.part_proposal_copies);
  get("object_proposal_copies", c.object_proposal_copies);
  get("part_distractors_inside", c.part_distractors_inside);
  get("part_distractors_outside", c.part_distractors_outside);
  get("object_distractors", c.object_distractors);
  get("occlusion_probability", c.occlusion_probability);
  get("occlusion_mode", c.occlusion_mode);
  return c;
}

// Cars and dogs with 1- to 4-mode part classes; profile views hide the middle
// wheel and the plate, frontal views hide the doors.
inline SynthConfig benchmark_config(std::uint64_t seed = 0, int num_images = 500) {
  SynthConfig c;
  c.seed = seed;
  c.num_images = num_images;
  // Puts the appearance-only mAP near 0.46.
  c.sigma_app = 1.03;

  SynthObjectClass car{"car", 150.0, 230.0, 0.5, 0.7, {}};
  car.parts.push_back({"car-wheel",
                       {{0.06, 0.62, 0.24, 0.98}, {0.41, 0.62, 0.59, 0.98}, {0.76, 0.62, 0.94, 0.98}},
                       {{"profile", {0, 2}}, {"frontal", {0, 2}}}});
  car.parts.push_back({"car-door", {{0.16, 0.2, 0.44, 0.62}, {0.56, 0.2, 0.84, 0.62}}, {{"oblique", {0}}, {"frontal", {}}}});
  car.parts.push_back({"car-plate", {{0.38, 0.66, 0.62, 0.84}}, {{"profile", {}}}});

  SynthObjectClass dog{"dog", 130.0, 210.0, 0.6, 0.85, {}};
  dog.parts.push_back({"dog-leg",
                       {{0.07, 0.6, 0.18, 1.0}, {0.32, 0.6, 0.43, 1.0}, {0.57, 0.6, 0.68, 1.0}, {0.82, 0.6, 0.93, 1.0}},
                       {{"frontal", {1, 2}}, {"oblique", {0, 1, 2}}}});
  dog.parts.push_back({"dog-head", {{0.62, 0.0, 0.98, 0.42}}, {}});

  c.object_classes = {car, dog};
  return c;
}

}  // namespace partctx
