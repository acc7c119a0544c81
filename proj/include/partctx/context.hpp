#pragma once

// Supporting object proposal selection and the linear context combiner that
// turns part appearance plus object class/appearance cues into initial scores.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "partctx/common.hpp"
#include "partctx/dataset.hpp"
#include "partctx/geometry.hpp"

namespace partctx {

struct ObjectCandidate {
  int id = 0;
  Box box;
  std::span<const double> class_scores;  // K+1 values, background first
};

// Index into `candidates` of the supporting proposal, if any qualifies.
// Score = max over object classes (background excluded); ties go to the lowest id.
inline std::optional<std::size_t> select_support(const Box& part, std::span<const ObjectCandidate> candidates,
                                                 double containment_threshold = 0.9) {
  std::optional<std::size_t> best;
  double best_score = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    if (containment_fraction(part, c.box) < containment_threshold) continue;
    double s = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k < c.class_scores.size(); ++k) s = std::max(s, c.class_scores[k]);
    if (!best || s > best_score || (s == best_score && c.id < candidates[*best].id)) {
      best = i;
      best_score = s;
    }
  }
  return best;
}

struct SupportAssignment {
  int part_proposal_id = 0;
  std::optional<int> support_id;  // object proposal id
  double support_score = 0.0;
  std::vector<double> object_row;  // K+1, background first; zeros without support
};

// Column order for object score rows: background, then object classes sorted.
inline std::vector<std::string> object_columns(const Dataset& d) {
  std::vector<std::string> cols{kBackgroundClass};
  for (const auto& c : d.object_classes()) cols.push_back(c);
  return cols;
}

inline std::vector<double> object_row(const Dataset& d, const std::vector<std::string>& columns, int proposal_id) {
  std::vector<double> row(columns.size(), 0.0);
  auto it = d.object_scores.rows.find(proposal_id);
  if (it == d.object_scores.rows.end()) return row;
  for (std::size_t c = 0; c < columns.size(); ++c) {
    if (auto col = d.object_scores.column(columns[c])) row[c] = it->second[*col];
  }
  return row;
}

// One assignment per part proposal, in dataset order.
inline std::vector<SupportAssignment> assign_supports(const Dataset& d, double containment_threshold = 0.9) {
  DatasetIndex index(d);
  const auto columns = object_columns(d);
  std::map<int, std::vector<double>> rows;
  for (const auto& op : d.object_proposals) rows[op.id] = object_row(d, columns, op.id);

  std::vector<SupportAssignment> out;
  out.reserve(d.part_proposals.size());
  std::map<int, std::vector<ObjectCandidate>> per_image;
  for (const auto& img : d.images) {
    auto& cands = per_image[img.id];
    for (std::size_t i : index.object_proposals_in(img.id)) {
      const auto& op = d.object_proposals[i];
      cands.push_back({op.id, op.box, rows[op.id]});
    }
  }
  for (const auto& pp : d.part_proposals) {
    SupportAssignment a;
    a.part_proposal_id = pp.id;
    const auto& cands = per_image[pp.image_id];
    if (auto s = select_support(pp.box, cands, containment_threshold)) {
      a.support_id = cands[*s].id;
      a.object_row.assign(cands[*s].class_scores.begin(), cands[*s].class_scores.end());
      a.support_score = *std::max_element(a.object_row.begin() + 1, a.object_row.end());
    } else {
      a.object_row.assign(columns.size(), 0.0);
    }
    out.push_back(std::move(a));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Logistic combiner

struct CombinerWeights {
  double appearance = 1.0;
  std::vector<double> object_scores;  // K+1
  std::vector<double> features;       // D, empty when features are unused
  double bias = 0.0;

  friend bool operator==(const CombinerWeights&, const CombinerWeights&) = default;
};

struct ContextCombinerParams {
  std::vector<std::string> object_columns;
  std::size_t feature_dim = 0;
  std::map<std::string, CombinerWeights> classes;

  friend bool operator==(const ContextCombinerParams&, const ContextCombinerParams&) = default;
};

struct CombinerOptions {
  double positive_iou = 0.6;
  double negative_iou = 0.3;
  double step = 0.1;
  int iterations = 500;
  double l2 = 1e-4;
  bool use_features = true;
  bool standardize = true;
};

inline CombinerWeights passthrough_weights(std::size_t k1, std::size_t d) {
  return {1.0, std::vector<double>(k1, 0.0), std::vector<double>(d, 0.0), 0.0};
}

// Input layout: [logit(appearance), object row (K+1), features (D)]. The
// appearance score is clamped to [1e-4, 1 - 1e-4] first, so passthrough
// weights reproduce it.
inline std::vector<double> combiner_input(double appearance, std::span<const double> object_row,
                                          std::span<const double> features, std::size_t feature_dim) {
  std::vector<double> x;
  x.reserve(1 + object_row.size() + feature_dim);
  constexpr double eps = 1e-4;
  const double a = std::clamp(appearance, eps, 1.0 - eps);
  x.push_back(std::log(a / (1.0 - a)));
  x.insert(x.end(), object_row.begin(), object_row.end());
  if (feature_dim > 0) {
    if (features.empty()) x.insert(x.end(), feature_dim, 0.0);
    else x.insert(x.end(), features.begin(), features.end());
  }
  return x;
}

inline double combiner_logit(const CombinerWeights& w, std::span<const double> x) {
  double z = w.bias + w.appearance * x[0];
  std::size_t j = 1;
  for (double v : w.object_scores) z += v * x[j++];
  for (double v : w.features) z += v * x[j++];
  return z;
}

// Mean logistic loss with L2 on the weights (not the bias).
inline double logistic_objective(std::span<const double> w, double b, const std::vector<std::vector<double>>& xs,
                                 std::span<const int> ys, double l2) {
  double loss = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double z = b;
    for (std::size_t j = 0; j < w.size(); ++j) z += w[j] * xs[i][j];
    loss += softplus(ys[i] ? -z : z);
  }
  double reg = 0.0;
  for (double v : w) reg += v * v;
  return loss / static_cast<double>(xs.size()) + 0.5 * l2 * reg;
}

// Full-batch gradient descent. Labels are 0/1. Returns weights followed by bias.
// With opt.standardize the descent runs on z-scored inputs (the L2 term and the
// loss trace refer to those coordinates) and the result is mapped back to raw inputs.
inline std::vector<double> fit_logistic(const std::vector<std::vector<double>>& raw, std::span<const int> ys,
                                        const CombinerOptions& opt, std::vector<double>* loss_trace = nullptr) {
  const std::size_t dim = raw.empty() ? 0 : raw.front().size();
  std::vector<double> mean(dim, 0.0), scale(dim, 1.0);
  const double inv_n = 1.0 / static_cast<double>(raw.size());
  if (opt.standardize) {
    for (const auto& x : raw)
      for (std::size_t j = 0; j < dim; ++j) mean[j] += x[j] * inv_n;
    for (std::size_t j = 0; j < dim; ++j) {
      double var = 0.0;
      for (const auto& x : raw) var += (x[j] - mean[j]) * (x[j] - mean[j]) * inv_n;
      scale[j] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
  }
  std::vector<std::vector<double>> xs = raw;
  for (auto& x : xs)
    for (std::size_t j = 0; j < dim; ++j) x[j] = (x[j] - mean[j]) / scale[j];

  std::vector<double> w(dim, 0.0), g(dim);
  double b = 0.0;
  for (int it = 0; it < opt.iterations; ++it) {
    std::fill(g.begin(), g.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      double z = b;
      for (std::size_t j = 0; j < dim; ++j) z += w[j] * xs[i][j];
      const double r = sigmoid(z) - ys[i];
      for (std::size_t j = 0; j < dim; ++j) g[j] += r * xs[i][j];
      gb += r;
    }
    for (std::size_t j = 0; j < dim; ++j) w[j] -= opt.step * (g[j] * inv_n + opt.l2 * w[j]);
    b -= opt.step * gb * inv_n;
    if (loss_trace) loss_trace->push_back(logistic_objective(w, b, xs, ys, opt.l2));
  }
  for (std::size_t j = 0; j < dim; ++j) {
    w[j] /= scale[j];
    b -= w[j] * mean[j];
  }
  w.push_back(b);
  return w;
}

inline std::span<const double> support_features(const Dataset& d, const SupportAssignment& a) {
  if (!a.support_id) return {};
  auto it = d.object_features.find(*a.support_id);
  if (it == d.object_features.end()) return {};
  return it->second;
}

// Trains one combiner per part class on the given split. Proposals overlapping a
// same-class part by more than `positive_iou` are positives, those below
// `negative_iou` negatives; the rest are ignored.
inline ContextCombinerParams train_combiner(const Dataset& d, const std::vector<SupportAssignment>& assignments,
                                            const CombinerOptions& opt = {}, const std::string& split = "train") {
  if (assignments.size() != d.part_proposals.size()) throw Error("one support assignment per part proposal required");
  DatasetIndex index(d);
  ContextCombinerParams params;
  params.object_columns = object_columns(d);
  params.feature_dim = opt.use_features ? d.feature_dim() : 0;
  const std::size_t k1 = params.object_columns.size();

  for (const auto& cls : d.part_classes()) {
    const auto col = d.part_scores.column(cls);
    std::vector<std::vector<double>> xs;
    std::vector<int> ys;
    std::size_t positives = 0;
    for (std::size_t i = 0; i < d.part_proposals.size(); ++i) {
      const auto& pp = d.part_proposals[i];
      if (!split.empty() && index.image(pp.image_id).split != split) continue;
      double best = 0.0;
      for (std::size_t g : index.parts_in(pp.image_id)) {
        if (d.parts[g].part_class == cls) best = std::max(best, iou(pp.box, d.parts[g].box));
      }
      int label;
      if (best > opt.positive_iou) label = 1;
      else if (best < opt.negative_iou) label = 0;
      else continue;
      const double app = col ? d.part_scores.value(pp.id, *col) : 0.0;
      xs.push_back(combiner_input(app, assignments[i].object_row, support_features(d, assignments[i]), params.feature_dim));
      ys.push_back(label);
      positives += static_cast<std::size_t>(label);
    }
    if (positives == 0) {
      warn("combiner: part class '" + cls + "' has no positive samples; using appearance passthrough");
      params.classes[cls] = passthrough_weights(k1, params.feature_dim);
      continue;
    }
    const auto w = fit_logistic(xs, ys, opt);
    CombinerWeights cw;
    cw.appearance = w[0];
    cw.object_scores.assign(w.begin() + 1, w.begin() + 1 + static_cast<std::ptrdiff_t>(k1));
    cw.features.assign(w.begin() + 1 + static_cast<std::ptrdiff_t>(k1), w.end() - 1);
    cw.bias = w.back();
    params.classes[cls] = std::move(cw);
  }
  return params;
}

// Initial part scores in (0,1), one row per part proposal, columns = params classes.
inline ScoreTable initial_scores(const Dataset& d, const std::vector<SupportAssignment>& assignments,
                                 const ContextCombinerParams& params) {
  if (assignments.size() != d.part_proposals.size()) throw Error("one support assignment per part proposal required");
  ScoreTable t;
  std::vector<std::optional<std::size_t>> cols;
  for (const auto& [name, w] : params.classes) {
    t.classes.push_back(name);
    cols.push_back(d.part_scores.column(name));
  }
  for (std::size_t i = 0; i < d.part_proposals.size(); ++i) {
    const auto& pp = d.part_proposals[i];
    const auto& a = assignments[i];
    std::vector<double> row;
    row.reserve(t.classes.size());
    std::size_t c = 0;
    for (const auto& [name, w] : params.classes) {
      const double app = cols[c] ? d.part_scores.value(pp.id, *cols[c]) : 0.0;
      const auto x = combiner_input(app, a.object_row, support_features(d, a), params.feature_dim);
      row.push_back(sigmoid(combiner_logit(w, x)));
      ++c;
    }
    t.rows.emplace(pp.id, std::move(row));
  }
  return t;
}

inline nlohmann::json to_json(const ContextCombinerParams& p) {
  nlohmann::json classes = nlohmann::json::object();
  for (const auto& [name, w] : p.classes) {
    classes[name] = {{"appearance", w.appearance},
                     {"object_scores", w.object_scores},
                     {"features", w.features},
                     {"bias", w.bias}};
  }
  return {{"object_columns", p.object_columns}, {"feature_dim", p.feature_dim}, {"classes", classes}};
}

inline ContextCombinerParams combiner_from_json(const nlohmann::json& j) {
  ContextCombinerParams p;
  p.object_columns = j.at("object_columns").get<std::vector<std::string>>();
  p.feature_dim = j.at("feature_dim").get<std::size_t>();
  for (const auto& [name, e] : j.at("classes").items()) {
    CombinerWeights w;
    w.appearance = e.at("appearance").get<double>();
    w.object_scores = e.at("object_scores").get<std::vector<double>>();
    w.features = e.at("features").get<std::vector<double>>();
    w.bias = e.at("bias").get<double>();
    if (w.object_scores.size() != p.object_columns.size() || w.features.size() != p.feature_dim) {
      throw Error("combiner weights for '" + name + "' have the wrong shape");
    }
    p.classes[name] = std::move(w);
  }
  return p;
}

}  // namespace partctx
