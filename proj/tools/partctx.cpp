// partctx command-line driver. Each subcommand reads the artifacts of earlier
// stages and writes its own into --out together with run_config.json.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "partctx/pipeline.hpp"
#include "partctx/synth.hpp"

using namespace partctx;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kRunConfig = "run_config.json";
constexpr const char* kCatalog = "catalog.json";
constexpr const char* kInitialScores = "initial_scores.jsonl";
constexpr const char* kRlScores = "rl_scores.jsonl";

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> nms_iou;
  std::optional<double> score_floor;
  std::optional<double> grid_step;
  bool occluded_only = false;
  bool pcp_pop = false;
  std::string out;
};

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("missing input file: " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(p.string() + ": malformed JSON: " + e.what());
  }
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config.empty()) cfg = run_config_from_json(read_json(c.config), cfg);
  if (c.seed) cfg.seed = *c.seed;
  if (c.nms_iou) cfg.nms_iou = *c.nms_iou;
  if (c.score_floor) cfg.score_floor = *c.score_floor;
  if (c.grid_step) cfg.grid_step = *c.grid_step;
  cfg.occluded_only = cfg.occluded_only || c.occluded_only;
  cfg.pcp_pop = cfg.pcp_pop || c.pcp_pop;
  cfg.offsetnet.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

fs::path prepare_out(const Common& c, const RunConfig& cfg, const std::string& command, json inputs) {
  const fs::path out(c.out);
  fs::create_directories(out);
  json j = to_json(cfg);
  j["command"] = command;
  j["inputs"] = std::move(inputs);
  write_json(out / kRunConfig, j);
  return out;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "run configuration (JSON)")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "random seed");
  sub->add_option("--nms-iou", c.nms_iou, "NMS overlap threshold");
  sub->add_option("--score-floor", c.score_floor, "object detection score floor");
  sub->add_option("--grid-step", c.grid_step, "mixing weight grid step");
  sub->add_flag("--occluded-only", c.occluded_only, "evaluate on occluded objects only");
  sub->add_flag("--pcp-pop", c.pcp_pop, "also report PCP and POP");
  sub->add_option("--out", c.out, "output directory")->required();
}

PartClassCatalog load_catalog_or_derive(const fs::path& data_dir, const Dataset& d) {
  if (fs::exists(data_dir / kCatalog)) return catalog_from_json(read_json(data_dir / kCatalog));
  PartClassCatalog cat;
  DatasetIndex index(d);
  for (const auto& p : d.parts) {
    auto& info = cat.classes[p.part_class];
    info.name = p.part_class;
    info.object_class = index.object(p.object_id).object_class;
    ++info.count;
  }
  for (const auto& name : d.part_scores.classes) cat.classes[name].name = name;
  return cat;
}

void print_report(const EvalReport& r, bool ap_only) {
  if (!ap_only) {
    write_table(std::cout, r);
    return;
  }
  for (const auto& [name, c] : r.classes)
    if (c.ap) std::printf("%s AP=%.10g\n", name.c_str(), *c.ap);
  if (r.map) std::printf("mAP=%.10g\n", *r.map);
}

std::string safe_name(std::string s) {
  for (char& ch : s)
    if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_') ch = '_';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Part detection with object context"};
  app.require_subcommand(1);
  Common c;

  // synth-gen
  int images = 100;
  auto* synth = app.add_subcommand("synth-gen", "generate a synthetic dataset and its truth manifest");
  add_common(synth, c);
  synth->add_option("--images", images, "number of images")->check(CLI::PositiveNumber);

  // preprocess
  std::string data, merge;
  bool auto_merge = false;
  auto* pre = app.add_subcommand("preprocess", "merge part subdivisions and drop tiny or rare classes");
  add_common(pre, c);
  pre->add_option("--data", data, "raw dataset directory")->required()->check(CLI::ExistingDirectory);
  pre->add_option("--merge", merge, "merge table (JSON object raw -> canonical)")->check(CLI::ExistingFile);
  pre->add_flag("--auto-merge", auto_merge, "strip positional qualifiers from part names");

  // priors
  auto* pri = app.add_subcommand("priors", "build relative-location priors and mode counts");
  add_common(pri, c);
  pri->add_option("--data", data, "preprocessed dataset directory")->required()->check(CLI::ExistingDirectory);

  // train-offsetnet
  std::string priors_path;
  auto* ton = app.add_subcommand("train-offsetnet", "train the offset and presence regressor");
  add_common(ton, c);
  ton->add_option("--data", data, "preprocessed dataset directory")->required()->check(CLI::ExistingDirectory);
  ton->add_option("--priors", priors_path, "priors.json")->required()->check(CLI::ExistingFile);

  // train-combiner
  auto* tco = app.add_subcommand("train-combiner", "train the per-class context combiner");
  add_common(tco, c);
  tco->add_option("--data", data, "preprocessed dataset directory")->required()->check(CLI::ExistingDirectory);

  // score
  std::string offsetnet_path, combiner_path;
  auto* sco = app.add_subcommand("score", "initial and relative-location scores for every part proposal");
  add_common(sco, c);
  sco->add_option("--data", data, "preprocessed dataset directory")->required()->check(CLI::ExistingDirectory);
  sco->add_option("--combiner", combiner_path, "combiner.json")->required()->check(CLI::ExistingFile);
  sco->add_option("--offsetnet", offsetnet_path, "offsetnet.json")->required()->check(CLI::ExistingFile);

  // fit-mix
  std::string scores_dir;
  auto* mix = app.add_subcommand("fit-mix", "grid-search the per-class mixing weight");
  add_common(mix, c);
  mix->add_option("--data", data, "preprocessed dataset directory")->required()->check(CLI::ExistingDirectory);
  mix->add_option("--scores", scores_dir, "output directory of score")->required()->check(CLI::ExistingDirectory);

  // detect
  std::string mixing_path;
  auto* det = app.add_subcommand("detect", "mix scores and run NMS on the test split");
  add_common(det, c);
  det->add_option("--data", data, "preprocessed dataset directory")->required()->check(CLI::ExistingDirectory);
  det->add_option("--scores", scores_dir, "output directory of score")->required()->check(CLI::ExistingDirectory);
  det->add_option("--mixing", mixing_path, "mixing.json")->required()->check(CLI::ExistingFile);

  // eval
  std::string detections_path;
  bool ap_only = false;
  auto* ev = app.add_subcommand("eval", "AP per part class, optionally PCP/POP");
  add_common(ev, c);
  ev->add_option("--data", data, "dataset directory with ground truth")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--detections", detections_path, "detections.jsonl")->required()->check(CLI::ExistingFile);
  ev->add_flag("--ap-only", ap_only, "print only AP lines");

  // heatmap
  std::optional<int> image_id;
  std::string part_class;
  int cols = 96, rows = 72;
  auto* hm = app.add_subcommand("heatmap", "relative-location score over a dense proposal grid, as PGM");
  add_common(hm, c);
  hm->add_option("--data", data, "preprocessed dataset directory")->required()->check(CLI::ExistingDirectory);
  hm->add_option("--offsetnet", offsetnet_path, "offsetnet.json")->required()->check(CLI::ExistingFile);
  hm->add_option("--image", image_id, "image id (default: first test image)");
  hm->add_option("--class", part_class, "part class (default: all)");
  hm->add_option("--cols", cols, "grid columns")->check(CLI::PositiveNumber);
  hm->add_option("--rows", rows, "grid rows")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    const RunConfig cfg = resolve(c);

    if (*synth) {
      SynthConfig sc = benchmark_config(cfg.seed, images);
      if (!c.config.empty()) {
        const auto j = read_json(c.config);
        if (j.contains("synth")) sc = synth_config_from_json(j["synth"], sc);
      }
      sc.seed = cfg.seed;
      sc.num_images = images;
      const auto out = prepare_out(c, cfg, "synth-gen", {{"images", images}});
      const auto gen = generate(sc);
      save_dataset(out, gen.dataset);
      save_manifest(out / "manifest.jsonl", gen.manifest);
      write_json(out / "synth_config.json", to_json(sc));
      std::printf("wrote %zu images, %zu objects, %zu parts to %s\n", gen.dataset.images.size(),
                  gen.dataset.objects.size(), gen.dataset.parts.size(), out.string().c_str());
    } else if (*pre) {
      const auto out = prepare_out(c, cfg, "preprocess", {{"data", data}, {"merge", merge}, {"auto_merge", auto_merge}});
      const Dataset raw = load_dataset(data);
      MergeTable table;
      if (auto_merge) table = make_merge_table(raw.part_classes());
      if (!merge.empty())
        for (const auto& [from, to] : read_json(merge).get<std::map<std::string, std::string>>()) table.add(from, to);
      table.validate();
      PartClassCatalog cat;
      const Dataset d = preprocess(raw, table, cfg, &cat);
      save_dataset(out, d);
      write_json(out / kCatalog, to_json(cat));
      for (const auto& [name, info] : cat.classes)
        std::printf("%-24s %s\n", name.c_str(), to_string(info.status));
    } else if (*pri) {
      const auto out = prepare_out(c, cfg, "priors", {{"data", data}});
      const Dataset d = load_dataset(data);
      const auto cat = load_catalog_or_derive(data, d);
      const auto priors = build_priors(d, cat, cfg.priors, cfg.train_split);
      write_json(out / "priors.json", to_json(priors));
      write_json(out / kCatalog, to_json(with_modes(cat, priors)));
      for (const auto& [name, pm] : priors) {
        DenseHeatmap h{pm.grid, pm.grid, pm.heatmap};
        const double peak = *std::max_element(h.values.begin(), h.values.end());
        if (peak > 0.0)
          for (double& v : h.values) v /= peak;
        write_pgm((out / ("prior_" + safe_name(name) + ".pgm")).string(), to_gray(h));
        std::printf("%-24s modes=%d instances=%zu\n", name.c_str(), pm.modes, pm.instances);
      }
    } else if (*ton) {
      const auto out = prepare_out(c, cfg, "train-offsetnet", {{"data", data}, {"priors", priors_path}});
      const Dataset d = load_dataset(data);
      const auto priors = priors_from_json(read_json(priors_path));
      TrainingTrace trace;
      const auto params = train_offsetnet(d, priors, cfg, &trace);
      write_json(out / "offsetnet.json", to_json(params));
      write_json(out / "training_trace.json",
                 {{"initial_loss", trace.initial_loss}, {"epoch_loss", trace.epoch_loss}, {"best_loss", trace.best_loss}});
      std::printf("loss %.6g -> %.6g\n", trace.initial_loss, trace.best_loss);
    } else if (*tco) {
      const auto out = prepare_out(c, cfg, "train-combiner", {{"data", data}});
      const Dataset d = load_dataset(data);
      const auto params = train_combiner(d, assign_supports(d, cfg.containment), cfg.combiner, cfg.train_split);
      write_json(out / "combiner.json", to_json(params));
    } else if (*sco) {
      const auto out = prepare_out(c, cfg, "score",
                                   {{"data", data}, {"combiner", combiner_path}, {"offsetnet", offsetnet_path}});
      const Dataset d = load_dataset(data);
      const auto combiner = combiner_from_json(read_json(combiner_path));
      const auto net = offsetnet_from_json(read_json(offsetnet_path));
      save_score_table(out / kInitialScores, initial_scores(d, assign_supports(d, cfg.containment), combiner));
      save_score_table(out / kRlScores, relative_location_scores(d, object_detections(d, cfg), net));
    } else if (*mix) {
      const auto out = prepare_out(c, cfg, "fit-mix", {{"data", data}, {"scores", scores_dir}});
      const Dataset d = load_dataset(data);
      const auto initial = load_score_table(fs::path(scores_dir) / kInitialScores, d.part_proposals);
      const auto rl = load_score_table(fs::path(scores_dir) / kRlScores, d.part_proposals);
      const auto w = fit_mixing(d, initial, rl, cfg);
      write_json(out / "mixing.json", to_json(w));
      for (const auto& [name, a] : w.alpha) std::printf("%-24s alpha=%.2f\n", name.c_str(), a);
    } else if (*det) {
      const auto out = prepare_out(c, cfg, "detect", {{"data", data}, {"scores", scores_dir}, {"mixing", mixing_path}});
      const Dataset d = load_dataset(data);
      const auto initial = load_score_table(fs::path(scores_dir) / kInitialScores, d.part_proposals);
      const auto rl = load_score_table(fs::path(scores_dir) / kRlScores, d.part_proposals);
      const auto w = mixing_from_json(read_json(mixing_path));
      save_detections(out / "detections.jsonl", detect_parts(d, mix_scores(initial, rl, w), cfg.nms_iou, cfg.test_split));
      save_detections(out / "baseline_detections.jsonl", detect_parts(d, d.part_scores, cfg.nms_iou, cfg.test_split));
    } else if (*ev) {
      const auto out = prepare_out(c, cfg, "eval", {{"data", data}, {"detections", detections_path}});
      const Dataset d = load_dataset(data);
      const auto dets = load_detections(detections_path);
      const auto cat = load_catalog_or_derive(data, d);
      std::vector<ObjectDetection> objects;
      if (cfg.pcp_pop) {
        if (d.object_scores.empty()) throw Error("--pcp-pop needs object_scores.jsonl in " + data);
        objects = object_detections(d, cfg);
      }
      const Dataset gt = cfg.occluded_only ? filter_occluded(d) : d;
      const auto report = evaluate(gt, dets, cat.kept(), cfg, objects);
      write_json(out / "report.json", to_json(report, true));
      std::ofstream table(out / "report.txt", std::ios::binary);
      write_table(table, report);
      std::ofstream csv(out / "pr_curves.csv", std::ios::binary);
      write_pr_csv(csv, report);
      print_report(report, ap_only);
    } else if (*hm) {
      const auto out = prepare_out(c, cfg, "heatmap", {{"data", data}, {"offsetnet", offsetnet_path}});
      const Dataset d = load_dataset(data);
      const auto net = offsetnet_from_json(read_json(offsetnet_path));
      const Image* img = nullptr;
      for (const auto& i : d.images)
        if (image_id ? i.id == *image_id : i.split == cfg.test_split) {
          img = &i;
          break;
        }
      if (!img) throw Error(image_id ? "unknown image " + std::to_string(*image_id) : "no image in split '" + cfg.test_split + "'");
      std::vector<ObjectDetection> mine;
      for (const auto& o : object_detections(d, cfg))
        if (o.image_id == img->id) mine.push_back(o);
      std::vector<std::string> classes;
      if (!part_class.empty()) {
        (void)net.head(part_class);
        classes.push_back(part_class);
      } else {
        for (const auto& [name, h] : net.heads) classes.push_back(name);
      }
      for (const auto& cls : classes) {
        const auto map = dense_rl_heatmap(mine, net, cls, img->width, img->height, cols, rows);
        const auto path = out / ("heatmap_" + std::to_string(img->id) + "_" + safe_name(cls) + ".pgm");
        write_pgm(path.string(), to_gray(map));
        std::printf("%s\n", path.string().c_str());
      }
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
