#pragma once

// Stage functions wiring the modules together, plus the run configuration.

#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "partctx/catalog.hpp"
#include "partctx/combine.hpp"
#include "partctx/context.hpp"
#include "partctx/dataset.hpp"
#include "partctx/eval.hpp"
#include "partctx/offsetnet.hpp"
#include "partctx/prior.hpp"
#include "partctx/scoring.hpp"

namespace partctx {

struct RunConfig {
  std::uint64_t seed = 0;
  double nms_iou = 0.3;
  double score_floor = 0.05;
  double containment = 0.9;
  double grid_step = 0.05;
  double eval_iou = 0.5;
  std::string train_split = "train";
  std::string test_split = "test";
  bool occluded_only = false;
  bool pcp_pop = false;
  CatalogOptions catalog;
  PriorOptions priors;
  CombinerOptions combiner;
  OffsetNetConfig offsetnet;

  void validate() const {
    auto open_unit = [](double v, const char* name) {
      if (!(v > 0.0 && v < 1.0)) throw Error(std::string("config: ") + name + " must lie in (0,1)");
    };
    open_unit(nms_iou, "nms_iou");
    open_unit(score_floor, "score_floor");
    open_unit(containment, "containment");
    open_unit(eval_iou, "eval_iou");
    if (!(grid_step > 0.0 && grid_step <= 1.0)) throw Error("config: grid_step must lie in (0,1]");
    if (offsetnet.batch_size == 0 || offsetnet.hidden_dim == 0) throw Error("config: offsetnet sizes must be positive");
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json phases = nlohmann::json::array();
  for (const auto& p : c.offsetnet.phases) phases.push_back({{"epochs", p.epochs}, {"learning_rate", p.learning_rate}});
  return {{"seed", c.seed},
          {"nms_iou", c.nms_iou},
          {"score_floor", c.score_floor},
          {"containment", c.containment},
          {"grid_step", c.grid_step},
          {"eval_iou", c.eval_iou},
          {"train_split", c.train_split},
          {"test_split", c.test_split},
          {"occluded_only", c.occluded_only},
          {"pcp_pop", c.pcp_pop},
          {"catalog", {{"min_avg_size", c.catalog.min_avg_size}, {"min_count", c.catalog.min_count}}},
          {"priors",
           {{"grid", c.priors.grid},
            {"histogram_bins", c.priors.histogram_bins},
            {"peak_fraction", c.priors.peak_fraction},
            {"max_modes", c.priors.max_modes},
            {"mode_overrides", c.priors.mode_overrides}}},
          {"combiner",
           {{"positive_iou", c.combiner.positive_iou},
            {"negative_iou", c.combiner.negative_iou},
            {"step", c.combiner.step},
            {"iterations", c.combiner.iterations},
            {"l2", c.combiner.l2},
            {"use_features", c.combiner.use_features}}},
          {"offsetnet",
           {{"hidden_dim", c.offsetnet.hidden_dim},
            {"batch_size", c.offsetnet.batch_size},
            {"momentum", c.offsetnet.momentum},
            {"object_iou", c.offsetnet.object_iou},
            {"phases", phases}}}};
}

// Keys absent from `j` keep their current values.
inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig c = {}) {
  auto get = [](const nlohmann::json& o, const char* key, auto& field) {
    if (o.contains(key)) field = o.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get(j, "seed", c.seed);
  get(j, "nms_iou", c.nms_iou);
  get(j, "score_floor", c.score_floor);
  get(j, "containment", c.containment);
  get(j, "grid_step", c.grid_step);
  get(j, "eval_iou", c.eval_iou);
  get(j, "train_split", c.train_split);
  get(j, "test_split", c.test_split);
  get(j, "occluded_only", c.occluded_only);
  get(j, "pcp_pop", c.pcp_pop);
  if (j.contains("catalog")) {
    get(j["catalog"], "min_avg_size", c.catalog.min_avg_size);
    get(j["catalog"], "min_count", c.catalog.min_count);
  }
  if (j.contains("priors")) {
    const auto& p = j["priors"];
    get(p, "grid", c.priors.grid);
    get(p, "histogram_bins", c.priors.histogram_bins);
    get(p, "peak_fraction", c.priors.peak_fraction);
    get(p, "max_modes", c.priors.max_modes);
    get(p, "mode_overrides", c.priors.mode_overrides);
  }
  if (j.contains("combiner")) {
    const auto& p = j["combiner"];
    get(p, "positive_iou", c.combiner.positive_iou);
    get(p, "negative_iou", c.combiner.negative_iou);
    get(p, "step", c.combiner.step);
    get(p, "iterations", c.combiner.iterations);
    get(p, "l2", c.combiner.l2);
    get(p, "use_features", c.combiner.use_features);
  }
  if (j.contains("offsetnet")) {
    const auto& p = j["offsetnet"];
    get(p, "hidden_dim", c.offsetnet.hidden_dim);
    get(p, "batch_size", c.offsetnet.batch_size);
    get(p, "momentum", c.offsetnet.momentum);
    get(p, "object_iou", c.offsetnet.object_iou);
    if (p.contains("phases")) {
      c.offsetnet.phases.clear();
      for (const auto& ph : p["phases"])
        c.offsetnet.phases.push_back({ph.at("epochs").get<int>(), ph.at("learning_rate").get<double>()});
    }
  }
  c.offsetnet.seed = c.seed;
  return c;
}

// ---------------------------------------------------------------------------
// Stages

inline Dataset preprocess(const Dataset& raw, const MergeTable& merge, const RunConfig& cfg, PartClassCatalog* catalog) {
  auto cat = preprocess_catalog(raw_part_instances(raw, cfg.train_split), merge, cfg.catalog);
  Dataset out = apply_catalog(raw, cat);
  if (catalog) *catalog = std::move(cat);
  return out;
}

inline OffsetNetParams train_offsetnet(const Dataset& d, const PriorSet& priors, const RunConfig& cfg,
                                       TrainingTrace* trace = nullptr) {
  OffsetNetConfig oc = cfg.offsetnet;
  oc.seed = cfg.seed;
  const auto samples = make_object_samples(d, priors, oc, cfg.train_split);
  if (d.feature_dim() == 0) throw Error("offsetnet training needs object_features.jsonl");
  return train_offsetnet(samples, priors, d.feature_dim(), oc, trace);
}

inline std::vector<ObjectDetection> object_detections(const Dataset& d, const RunConfig& cfg) {
  return detect_objects(d, {cfg.nms_iou, cfg.score_floor});
}

struct PartDetection {
  int proposal_id = 0;
  int image_id = 0;
  std::string part_class;
  Box box;
  double score = 0.0;
};

// Per image and class NMS over a score table; only images of `split` (all when empty).
inline std::vector<PartDetection> detect_parts(const Dataset& d, const ScoreTable& scores, double nms_iou,
                                               const std::string& split = {}) {
  DatasetIndex index(d);
  std::vector<PartDetection> out;
  std::vector<ScoredBox> boxes;
  for (const auto& img : d.images) {
    if (!split.empty() && img.split != split) continue;
    const auto& props = index.part_proposals_in(img.id);
    for (std::size_t c = 0; c < scores.classes.size(); ++c) {
      boxes.clear();
      for (std::size_t i : props) boxes.push_back({d.part_proposals[i].box, scores.value(d.part_proposals[i].id, c)});
      for (std::size_t k : nms_indices(boxes, nms_iou)) {
        const auto& p = d.part_proposals[props[k]];
        out.push_back({p.id, img.id, scores.classes[c], p.box, boxes[k].score});
      }
    }
  }
  return out;
}

inline void save_detections(const std::filesystem::path& path, std::span<const PartDetection> dets) {
  std::vector<nlohmann::json> recs;
  for (const auto& d : dets)
    recs.push_back({{"proposal_id", d.proposal_id},
                    {"image_id", d.image_id},
                    {"class", d.part_class},
                    {"box", detail::box_json(d.box)},
                    {"score", d.score}});
  detail::write_lines(path, recs);
}

inline std::vector<PartDetection> load_detections(const std::filesystem::path& path) {
  std::vector<PartDetection> out;
  detail::for_each_record(path, true, [&](const nlohmann::json& r, const detail::LineContext& ctx) {
    out.push_back({detail::read_int(r, "proposal_id", ctx), detail::read_int(r, "image_id", ctx),
                   detail::read_string(r, "class", ctx), detail::read_box(r, "box", ctx),
                   detail::read_real(detail::require(r, "score", ctx), "score", ctx)});
  });
  return out;
}

inline ScoreTable mix_scores(const ScoreTable& initial, const ScoreTable& rl, const MixingWeights& w) {
  ScoreTable out;
  out.classes = initial.classes;
  std::vector<std::optional<std::size_t>> rl_col;
  for (const auto& c : initial.classes) rl_col.push_back(rl.column(c));
  for (const auto& [id, row] : initial.rows) {
    std::vector<double> r(row.size());
    for (std::size_t c = 0; c < row.size(); ++c) {
      const double phi = rl_col[c] ? rl.value(id, *rl_col[c]) : 0.0;
      r[c] = mix(row[c], phi, w.at(initial.classes[c]));
    }
    out.rows.emplace(id, std::move(r));
  }
  return out;
}

inline std::map<std::string, ClassCandidates> mixing_candidates(const Dataset& d, const ScoreTable& initial,
                                                                const ScoreTable& rl, const std::string& split) {
  DatasetIndex index(d);
  std::map<std::string, ClassCandidates> out;
  for (std::size_t c = 0; c < initial.classes.size(); ++c) {
    const auto& cls = initial.classes[c];
    auto& cc = out[cls];
    const auto rc = rl.column(cls);
    for (const auto& img : d.images) {
      if (!split.empty() && img.split != split) continue;
      for (std::size_t i : index.part_proposals_in(img.id)) {
        const auto& p = d.part_proposals[i];
        cc.candidates.push_back({p.id, img.id, p.box, initial.value(p.id, c), rc ? rl.value(p.id, *rc) : 0.0});
      }
      for (std::size_t g : index.parts_in(img.id))
        if (d.parts[g].part_class == cls) cc.ground_truth.push_back({img.id, d.parts[g].box});
    }
  }
  return out;
}

inline MixingWeights fit_mixing(const Dataset& d, const ScoreTable& initial, const ScoreTable& rl, const RunConfig& cfg) {
  return fit_weights(mixing_candidates(d, initial, rl, cfg.train_split), {cfg.grid_step, cfg.nms_iou});
}

// AP per class on `split`; with cfg.pcp_pop also PCP/POP using the object
// detections as supports. `gt` may be an occluded-only view of the data.
inline EvalReport evaluate(const Dataset& gt, std::span<const PartDetection> dets, const std::vector<std::string>& classes,
                           const RunConfig& cfg, std::span<const ObjectDetection> object_dets = {}) {
  DatasetIndex index(gt);
  std::set<int> in_split;
  for (const auto& img : gt.images)
    if (cfg.test_split.empty() || img.split == cfg.test_split) in_split.insert(img.id);

  std::map<std::string, std::string> owner_class;
  for (const auto& p : gt.parts) owner_class[p.part_class] = index.object(p.object_id).object_class;

  EvalReport report;
  report.occluded_only = cfg.occluded_only;
  for (const auto& cls : classes) {
    std::vector<Detection> cd;
    std::vector<GroundTruth> cg;
    for (const auto& d : dets)
      if (d.part_class == cls && in_split.contains(d.image_id)) cd.push_back({d.proposal_id, d.image_id, d.box, d.score});
    for (const auto& p : gt.parts)
      if (p.part_class == cls && in_split.contains(p.image_id)) cg.push_back({p.image_id, p.box});
    ClassReport cr;
    cr.num_det = cd.size();
    cr.num_gt = cg.size();
    if (auto ap = average_precision(cd, cg, cfg.eval_iou)) {
      cr.ap = ap->ap;
      cr.recall = std::move(ap->recall);
      cr.precision = std::move(ap->precision);
    }

    if (cfg.pcp_pop && owner_class.contains(cls)) {
      const auto& oc = owner_class[cls];
      std::vector<Detection> od;
      std::map<int, std::vector<std::size_t>> od_in;
      std::vector<std::vector<double>> rows;
      for (const auto& o : object_dets) {
        if (o.object_class != oc || !in_split.contains(o.image_id)) continue;
        od_in[o.image_id].push_back(od.size());
        od.push_back({o.proposal_id, o.image_id, o.box, o.score});
        rows.push_back({0.0, o.score});
      }
      std::vector<SupportedPartDetection> pd;
      for (const auto& d : cd) {
        if (d.score < cfg.score_floor) continue;
        std::vector<ObjectCandidate> cands;
        for (std::size_t k : od_in[d.image_id]) cands.push_back({od[k].id, od[k].box, rows[k]});
        int support = -1;
        if (auto s = select_support(d.box, cands, cfg.containment)) support = static_cast<int>(od_in[d.image_id][*s]);
        pd.push_back({d.image_id, d.box, d.score, support});
      }
      std::vector<ObjectGroundTruth> og;
      for (const auto& o : gt.objects)
        if (o.object_class == oc && in_split.contains(o.image_id)) og.push_back({o.id, o.image_id, o.box});
      std::vector<OwnedPartGroundTruth> pg;
      for (const auto& p : gt.parts)
        if (p.part_class == cls && in_split.contains(p.image_id)) pg.push_back({p.object_id, p.box});
      cr.pcp_pop = pcp_pop(pd, od, og, pg, cfg.eval_iou);
    }
    report.classes[cls] = std::move(cr);
  }
  report.finalize();
  return report;
}

// Everything a full run produces.
struct PipelineResult {
  Dataset data;  // after catalog preprocessing
  PartClassCatalog catalog;
  PriorSet priors;
  OffsetNetParams offsetnet;
  ContextCombinerParams combiner;
  MixingWeights mixing;
  ScoreTable initial;
  ScoreTable rl;
  std::vector<ObjectDetection> objects;
  std::vector<PartDetection> baseline_detections;
  std::vector<PartDetection> detections;
  EvalReport baseline;
  EvalReport full;
};

inline PipelineResult run_pipeline(const Dataset& raw, const RunConfig& cfg, const MergeTable& merge = {}) {
  cfg.validate();
  PipelineResult r;
  r.data = preprocess(raw, merge, cfg, &r.catalog);
  r.priors = build_priors(r.data, r.catalog, cfg.priors, cfg.train_split);
  r.catalog = with_modes(r.catalog, r.priors);
  r.offsetnet = train_offsetnet(r.data, r.priors, cfg);
  const auto assignments = assign_supports(r.data, cfg.containment);
  r.combiner = train_combiner(r.data, assignments, cfg.combiner, cfg.train_split);
  r.initial = initial_scores(r.data, assignments, r.combiner);
  r.objects = object_detections(r.data, cfg);
  r.rl = relative_location_scores(r.data, r.objects, r.offsetnet);
  r.mixing = fit_mixing(r.data, r.initial, r.rl, cfg);
  r.detections = detect_parts(r.data, mix_scores(r.initial, r.rl, r.mixing), cfg.nms_iou, cfg.test_split);
  r.baseline_detections = detect_parts(r.data, r.data.part_scores, cfg.nms_iou, cfg.test_split);

  const Dataset gt = cfg.occluded_only ? filter_occluded(r.data) : r.data;
  const auto classes = r.catalog.kept();
  r.full = evaluate(gt, r.detections, classes, cfg, r.objects);
  r.baseline = evaluate(gt, r.baseline_detections, classes, cfg, r.objects);
  return r;
}

}  // namespace partctx
