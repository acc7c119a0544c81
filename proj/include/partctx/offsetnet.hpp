#pragma once

// Multi-head offset/presence regressor. A shared rectified trunk maps an object
// feature vector to a hidden code; every part class owns N parallel heads, each
// predicting a 4-d offset vector and a presence logit. Heads beyond a class's
// mode count are inactive: they take no part in the loss and never change.

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
#include "partctx/prior.hpp"
#include "partctx/random.hpp"

namespace partctx {

struct OffsetHeads {
  std::string object_class;
  int modes = 1;
  std::vector<double> offset_w;    // N x 4 x H
  std::vector<double> offset_b;    // N x 4
  std::vector<double> presence_w;  // N x H
  std::vector<double> presence_b;  // N

  friend bool operator==(const OffsetHeads&, const OffsetHeads&) = default;
};

struct OffsetNetParams {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t max_modes = 1;
  std::vector<double> trunk_w;  // H x D
  std::vector<double> trunk_b;  // H
  std::map<std::string, OffsetHeads> heads;

  OffsetNetParams() = default;

  OffsetNetParams(std::size_t d, std::size_t h, const std::map<std::string, std::pair<std::string, int>>& classes)
      : input_dim(d), hidden_dim(h) {
    for (const auto& [name, entry] : classes) max_modes = std::max<std::size_t>(max_modes, entry.second);
    trunk_w.assign(h * d, 0.0);
    trunk_b.assign(h, 0.0);
    for (const auto& [name, entry] : classes) {
      if (entry.second < 1) throw Error("part class '" + name + "' needs at least one mode");
      OffsetHeads hd;
      hd.object_class = entry.first;
      hd.modes = entry.second;
      hd.offset_w.assign(max_modes * 4 * h, 0.0);
      hd.offset_b.assign(max_modes * 4, 0.0);
      hd.presence_w.assign(max_modes * h, 0.0);
      hd.presence_b.assign(max_modes, 0.0);
      heads.emplace(name, std::move(hd));
    }
  }

  const OffsetHeads& head(const std::string& cls) const {
    auto it = heads.find(cls);
    if (it == heads.end()) throw Error("offsetnet has no heads for part class '" + cls + "'");
    return it->second;
  }
  OffsetHeads& head(const std::string& cls) { return const_cast<OffsetHeads&>(std::as_const(*this).head(cls)); }

  bool active(const std::string& cls, std::size_t mode) const { return mode < static_cast<std::size_t>(head(cls).modes); }

  // Every parameter array, in a fixed order.
  std::vector<std::span<double>> blocks() {
    std::vector<std::span<double>> out{trunk_w, trunk_b};
    for (auto& [name, h] : heads) {
      out.emplace_back(h.offset_w);
      out.emplace_back(h.offset_b);
      out.emplace_back(h.presence_w);
      out.emplace_back(h.presence_b);
    }
    return out;
  }
  std::vector<std::span<const double>> blocks() const {
    std::vector<std::span<const double>> out;
    for (auto s : const_cast<OffsetNetParams*>(this)->blocks()) out.emplace_back(s);
    return out;
  }

  OffsetNetParams zeros_like() const {
    OffsetNetParams z = *this;
    for (auto s : z.blocks()) std::fill(s.begin(), s.end(), 0.0);
    return z;
  }

  friend bool operator==(const OffsetNetParams&, const OffsetNetParams&) = default;
};

// Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)); zero biases.
inline void glorot_init(OffsetNetParams& p, Rng& rng) {
  auto fill = [&](std::vector<double>& w, std::size_t fan_in, std::size_t fan_out) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (double& v : w) v = rng.uniform(-a, a);
  };
  fill(p.trunk_w, p.input_dim, p.hidden_dim);
  std::fill(p.trunk_b.begin(), p.trunk_b.end(), 0.0);
  for (auto& [name, h] : p.heads) {
    fill(h.offset_w, p.hidden_dim, 4);
    fill(h.presence_w, p.hidden_dim, 1);
    std::fill(h.offset_b.begin(), h.offset_b.end(), 0.0);
    std::fill(h.presence_b.begin(), h.presence_b.end(), 0.0);
  }
}

struct ModeOutput {
  OffsetVector offset;
  double logit = 0.0;
  double presence = 0.5;
};

struct ModeTarget {
  std::vector<double> feature;
  std::vector<std::optional<OffsetVector>> modes;  // absent mode => presence label -1
};

inline double smooth_l1(double r) { return std::abs(r) < 1.0 ? 0.5 * r * r : std::abs(r) - 0.5; }
inline double smooth_l1_grad(double r) { return std::abs(r) < 1.0 ? r : (r > 0.0 ? 1.0 : -1.0); }

namespace detail {

inline void trunk_forward(const OffsetNetParams& p, std::span<const double> f, std::vector<double>& z,
                          std::vector<double>& h) {
  if (f.size() != p.input_dim) {
    throw Error("offsetnet: feature dimension " + std::to_string(f.size()) + " does not match " +
                std::to_string(p.input_dim));
  }
  const std::size_t H = p.hidden_dim, D = p.input_dim;
  z.assign(H, 0.0);
  h.assign(H, 0.0);
  for (std::size_t j = 0; j < H; ++j) {
    double s = p.trunk_b[j];
    const double* w = &p.trunk_w[j * D];
    for (std::size_t i = 0; i < D; ++i) s += w[i] * f[i];
    z[j] = s;
    h[j] = s > 0.0 ? s : 0.0;
  }
}

inline ModeOutput head_forward(const OffsetNetParams& p, const OffsetHeads& hd, std::size_t m,
                               std::span<const double> h) {
  const std::size_t H = p.hidden_dim;
  ModeOutput out;
  for (std::size_t k = 0; k < 4; ++k) {
    double s = hd.offset_b[m * 4 + k];
    const double* w = &hd.offset_w[(m * 4 + k) * H];
    for (std::size_t j = 0; j < H; ++j) s += w[j] * h[j];
    out.offset[k] = s;
  }
  double x = hd.presence_b[m];
  const double* w = &hd.presence_w[m * H];
  for (std::size_t j = 0; j < H; ++j) x += w[j] * h[j];
  out.logit = x;
  out.presence = sigmoid(x);
  return out;
}

}  // namespace detail

inline std::vector<ModeOutput> forward(const OffsetNetParams& p, std::span<const double> feature,
                                       const std::string& part_class) {
  const auto& hd = p.head(part_class);
  std::vector<double> z, h;
  detail::trunk_forward(p, feature, z, h);
  std::vector<ModeOutput> out;
  for (int m = 0; m < hd.modes; ++m) out.push_back(detail::head_forward(p, hd, static_cast<std::size_t>(m), h));
  return out;
}

struct ClassTarget {
  const std::string* part_class;
  const std::vector<std::optional<OffsetVector>>* modes;
};

// Loss of one feature vector over several part classes. Adds the gradient to
// `grad` when given. The trunk is evaluated once.
inline double accumulate_sample(const OffsetNetParams& p, std::span<const double> feature,
                                std::span<const ClassTarget> targets, OffsetNetParams* grad) {
  const std::size_t H = p.hidden_dim, D = p.input_dim;
  std::vector<double> z, h;
  detail::trunk_forward(p, feature, z, h);
  std::vector<double> gh(grad ? H : 0, 0.0);
  double loss = 0.0;

  for (const auto& t : targets) {
    const auto& hd = p.head(*t.part_class);
    OffsetHeads* gd = grad ? &grad->head(*t.part_class) : nullptr;
    if (t.modes->size() != static_cast<std::size_t>(hd.modes)) {
      throw Error("offsetnet: target for '" + *t.part_class + "' has wrong mode count");
    }
    for (std::size_t m = 0; m < static_cast<std::size_t>(hd.modes); ++m) {
      const ModeOutput out = detail::head_forward(p, hd, m, h);
      const auto& target = (*t.modes)[m];
      double go[4] = {0, 0, 0, 0};
      double gx;
      if (target) {
        for (std::size_t k = 0; k < 4; ++k) {
          const double r = out.offset[k] - (*target)[k];
          loss += smooth_l1(r);
          go[k] = smooth_l1_grad(r);
        }
        loss += softplus(-out.logit);
        gx = -sigmoid(-out.logit);
      } else {
        loss += softplus(out.logit);
        gx = sigmoid(out.logit);
      }
      if (!gd) continue;
      for (std::size_t k = 0; k < 4; ++k) {
        if (go[k] == 0.0) continue;
        double* gw = &gd->offset_w[(m * 4 + k) * H];
        const double* w = &hd.offset_w[(m * 4 + k) * H];
        for (std::size_t j = 0; j < H; ++j) {
          gw[j] += go[k] * h[j];
          gh[j] += go[k] * w[j];
        }
        gd->offset_b[m * 4 + k] += go[k];
      }
      double* gw = &gd->presence_w[m * H];
      const double* w = &hd.presence_w[m * H];
      for (std::size_t j = 0; j < H; ++j) {
        gw[j] += gx * h[j];
        gh[j] += gx * w[j];
      }
      gd->presence_b[m] += gx;
    }
  }

  if (grad) {
    for (std::size_t j = 0; j < H; ++j) {
      if (z[j] <= 0.0) continue;
      const double gz = gh[j];
      double* gw = &grad->trunk_w[j * D];
      for (std::size_t i = 0; i < D; ++i) gw[i] += gz * feature[i];
      grad->trunk_b[j] += gz;
    }
  }
  return loss;
}

// Sum over samples and active modes: present modes contribute smooth-L1 on the
// offset residuals plus log(1+e^{-x}); absent modes contribute log(1+e^{x}).
inline double loss(const OffsetNetParams& p, std::span<const ModeTarget> batch, const std::string& part_class) {
  double total = 0.0;
  for (const auto& s : batch) {
    const ClassTarget t{&part_class, &s.modes};
    total += accumulate_sample(p, s.feature, std::span(&t, 1), nullptr);
  }
  return total;
}

inline OffsetNetParams grad(const OffsetNetParams& p, std::span<const ModeTarget> batch, const std::string& part_class) {
  OffsetNetParams g = p.zeros_like();
  for (const auto& s : batch) {
    const ClassTarget t{&part_class, &s.modes};
    accumulate_sample(p, s.feature, std::span(&t, 1), &g);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Training

struct LearningPhase {
  int epochs = 0;
  double learning_rate = 0.0;
};

struct OffsetNetConfig {
  std::size_t hidden_dim = 64;
  std::size_t batch_size = 64;
  double momentum = 0.9;
  std::vector<LearningPhase> phases{{12, 1e-3}, {4, 1e-4}};
  double object_iou = 0.7;
  std::uint64_t seed = 0;
};

// One object sample: a box with its feature vector plus per-class mode targets,
// encoded relative to that box.
struct ObjectSample {
  int proposal_id = 0;
  int object_id = 0;
  std::string object_class;
  Box box;
  std::vector<double> feature;
  std::map<std::string, std::vector<std::optional<OffsetVector>>> targets;
};

// Object samples are the object proposals overlapping a ground-truth object by
// at least `object_iou` (a ground-truth box contributes through its identical
// proposal). Part ground truth is split into modes on the owner's frame.
inline std::vector<ObjectSample> make_object_samples(const Dataset& d, const PriorSet& priors,
                                                     const OffsetNetConfig& cfg, const std::string& split = "train") {
  DatasetIndex index(d);
  Rng rng = Rng::split(cfg.seed, 0x6d6f646573ULL);
  std::map<std::string, std::vector<std::string>> classes_of;
  for (const auto& [name, pm] : priors) classes_of[pm.object_class].push_back(name);

  std::vector<ObjectSample> out;
  std::size_t missing_features = 0;
  for (const auto& img : d.images) {
    if (!split.empty() && img.split != split) continue;
    for (std::size_t pi : index.object_proposals_in(img.id)) {
      const auto& prop = d.object_proposals[pi];
      const ObjectAnnotation* owner = nullptr;
      double best = 0.0;
      for (std::size_t oi : index.objects_in(img.id)) {
        const double o = iou(prop.box, d.objects[oi].box);
        if (o > best) {
          best = o;
          owner = &d.objects[oi];
        }
      }
      if (!owner || best < cfg.object_iou) continue;
      auto feat = d.object_features.find(prop.id);
      if (feat == d.object_features.end()) {
        ++missing_features;
        continue;
      }
      ObjectSample s;
      s.proposal_id = prop.id;
      s.object_id = owner->id;
      s.object_class = owner->object_class;
      s.box = prop.box;
      s.feature = feat->second;
      auto cls = classes_of.find(owner->object_class);
      if (cls == classes_of.end()) continue;
      for (const auto& name : cls->second) {
        std::vector<Box> parts;
        for (std::size_t g : index.parts_of(owner->id))
          if (d.parts[g].part_class == name) parts.push_back(d.parts[g].box);
        const int modes = priors.at(name).modes;
        const auto assigned = assign_modes(owner->box, parts, modes, rng);
        std::vector<std::optional<OffsetVector>> t(modes);
        for (int m = 0; m < modes; ++m)
          if (assigned[m]) t[m] = encode_offset(prop.box, parts[*assigned[m]]);
        s.targets.emplace(name, std::move(t));
      }
      out.push_back(std::move(s));
    }
  }
  if (missing_features > 0) {
    warn("offsetnet: " + std::to_string(missing_features) + " object samples skipped for lack of features");
  }
  return out;
}

inline double sample_loss(const OffsetNetParams& p, const ObjectSample& s, OffsetNetParams* grad = nullptr) {
  std::vector<ClassTarget> ts;
  for (const auto& [name, modes] : s.targets) ts.push_back({&name, &modes});
  return accumulate_sample(p, s.feature, ts, grad);
}

inline double mean_loss(const OffsetNetParams& p, std::span<const ObjectSample> samples) {
  if (samples.empty()) return 0.0;
  double s = 0.0;
  for (const auto& x : samples) s += sample_loss(p, x);
  return s / static_cast<double>(samples.size());
}

struct TrainingTrace {
  double initial_loss = 0.0;
  std::vector<double> epoch_loss;
  double best_loss = 0.0;
};

// Mini-batch gradient descent with momentum over the phase schedule. Gradients
// are summed over each mini-batch, matching the loss. Returns the parameters with the lowest
// mean training loss seen at an epoch boundary.
inline OffsetNetParams train_offsetnet(std::span<const ObjectSample> samples, const PriorSet& priors,
                                       std::size_t input_dim, const OffsetNetConfig& cfg,
                                       TrainingTrace* trace = nullptr) {
  std::map<std::string, std::pair<std::string, int>> classes;
  for (const auto& [name, pm] : priors) classes[name] = {pm.object_class, pm.modes};
  OffsetNetParams p(input_dim, cfg.hidden_dim, classes);
  Rng rng = Rng::split(cfg.seed, 0x696e6974ULL);
  glorot_init(p, rng);

  std::map<std::string, std::size_t> per_class;
  for (const auto& s : samples)
    for (const auto& [name, t] : s.targets) ++per_class[name];
  for (const auto& [name, c] : classes) {
    if (!per_class.contains(name)) warn("offsetnet: part class '" + name + "' has no training objects");
  }

  OffsetNetParams best = p;
  double best_loss = mean_loss(p, samples);
  if (trace) {
    trace->initial_loss = best_loss;
    trace->epoch_loss.clear();
  }
  if (samples.empty()) {
    if (trace) trace->best_loss = best_loss;
    return p;
  }

  OffsetNetParams velocity = p.zeros_like();
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng shuffle = Rng::split(cfg.seed, 0x73687566ULL);

  for (const auto& phase : cfg.phases) {
    for (int epoch = 0; epoch < phase.epochs; ++epoch) {
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        OffsetNetParams g = p.zeros_like();
        for (std::size_t k = start; k < end; ++k) sample_loss(p, samples[order[k]], &g);
        auto pb = p.blocks();
        auto gb = g.blocks();
        auto vb = velocity.blocks();
        for (std::size_t b = 0; b < pb.size(); ++b) {
          for (std::size_t j = 0; j < pb[b].size(); ++j) {
            vb[b][j] = cfg.momentum * vb[b][j] - phase.learning_rate * gb[b][j];
            pb[b][j] += vb[b][j];
          }
        }
      }
      const double l = mean_loss(p, samples);
      if (trace) trace->epoch_loss.push_back(l);
      if (l < best_loss) {
        best_loss = l;
        best = p;
      }
    }
  }
  if (trace) trace->best_loss = best_loss;
  return best;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json to_json(const OffsetNetParams& p) {
  nlohmann::json heads = nlohmann::json::object();
  for (const auto& [name, h] : p.heads) {
    std::vector<bool> active;
    for (std::size_t m = 0; m < p.max_modes; ++m) active.push_back(m < static_cast<std::size_t>(h.modes));
    heads[name] = {{"object_class", h.object_class}, {"modes", h.modes},          {"active", active},
                   {"offset_weights", h.offset_w},   {"offset_bias", h.offset_b}, {"presence_weights", h.presence_w},
                   {"presence_bias", h.presence_b}};
  }
  return {{"input_dim", p.input_dim},
          {"hidden_dim", p.hidden_dim},
          {"max_modes", p.max_modes},
          {"trunk", {{"weights", p.trunk_w}, {"bias", p.trunk_b}}},
          {"heads", heads}};
}

inline OffsetNetParams offsetnet_from_json(const nlohmann::json& j) {
  OffsetNetParams p;
  p.input_dim = j.at("input_dim").get<std::size_t>();
  p.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  p.max_modes = j.at("max_modes").get<std::size_t>();
  p.trunk_w = j.at("trunk").at("weights").get<std::vector<double>>();
  p.trunk_b = j.at("trunk").at("bias").get<std::vector<double>>();
  const std::size_t H = p.hidden_dim, N = p.max_modes;
  if (p.trunk_w.size() != H * p.input_dim || p.trunk_b.size() != H) throw Error("offsetnet: trunk shape mismatch");
  for (const auto& [name, e] : j.at("heads").items()) {
    OffsetHeads h;
    h.object_class = e.at("object_class").get<std::string>();
    h.modes = e.at("modes").get<int>();
    h.offset_w = e.at("offset_weights").get<std::vector<double>>();
    h.offset_b = e.at("offset_bias").get<std::vector<double>>();
    h.presence_w = e.at("presence_weights").get<std::vector<double>>();
    h.presence_b = e.at("presence_bias").get<std::vector<double>>();
    if (h.modes < 1 || static_cast<std::size_t>(h.modes) > N || h.offset_w.size() != N * 4 * H ||
        h.offset_b.size() != N * 4 || h.presence_w.size() != N * H || h.presence_b.size() != N) {
      throw Error("offsetnet: head shape mismatch for '" + name + "'");
    }
    p.heads.emplace(name, std::move(h));
  }
  return p;
}

}  // namespace partctx
