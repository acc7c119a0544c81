#include <chrono>
#include <cmath>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "partctx/offsetnet.hpp"
#include "partctx/pipeline.hpp"
#include "partctx/synth.hpp"

using namespace partctx;

namespace {

OffsetNetParams tiny(std::size_t d = 2, std::size_t h = 3) {
  return OffsetNetParams(d, h, {{"wheel", {"car", 2}}, {"plate", {"car", 1}}});
}

}  // namespace

TEST(OffsetNetParams, ShapesAndActivity) {
  const auto p = tiny(5, 7);
  EXPECT_EQ(p.max_modes, 2u);
  EXPECT_EQ(p.trunk_w.size(), 35u);
  EXPECT_EQ(p.head("plate").offset_w.size(), 2u * 4 * 7);
  EXPECT_TRUE(p.active("wheel", 1));
  EXPECT_FALSE(p.active("plate", 1));
  EXPECT_THROW(p.head("door"), Error);
}

TEST(Forward, ZeroParams) {
  const auto p = tiny();
  const auto out = forward(p, std::vector<double>{0.3, -2.0}, "wheel");
  ASSERT_EQ(out.size(), 2u);
  for (const auto& m : out) {
    EXPECT_EQ(m.presence, 0.5);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(m.offset[k], 0.0);
  }
}

TEST(Forward, HandComputed) {
  // D=2, H=2; trunk rows (1,-1) and (0.5,2), biases (0,-1).
  auto p = tiny(2, 2);
  p.trunk_w = {1, -1, 0.5, 2};
  p.trunk_b = {0, -1};
  auto& h = p.head("plate");
  for (std::size_t k = 0; k < 4; ++k) {
    h.offset_w[k * 2] = 0.1 * (k + 1);
    h.offset_w[k * 2 + 1] = -0.2;
    h.offset_b[k] = 0.05;
  }
  h.presence_w[0] = 0.7;
  h.presence_w[1] = -0.3;
  h.presence_b[0] = 0.2;
  const std::vector<double> f{2.0, 0.5};
  // z = (1.5, 1.0) -> relu (1.5, 1.0)
  const auto out = forward(p, f, "plate");
  ASSERT_EQ(out.size(), 1u);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(out[0].offset[k], 0.1 * (k + 1) * 1.5 - 0.2 + 0.05, 1e-12);
  const double x = 0.7 * 1.5 - 0.3 + 0.2;
  EXPECT_NEAR(out[0].logit, x, 1e-12);
  EXPECT_NEAR(out[0].presence, 1.0 / (1.0 + std::exp(-x)), 1e-12);

  // A negative pre-activation is cut off.
  const auto neg = forward(p, std::vector<double>{-1.0, 1.0}, "plate");  // z = (-2, 0.5)
  EXPECT_NEAR(neg[0].logit, -0.3 * 0.5 + 0.2, 1e-12);
}

TEST(Forward, PresenceStrictlyInsideUnitInterval) {
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    auto g = oracle::random_draw(rng);
    for (const auto& s : g.batch)
      for (const auto& m : forward(g.params, s.feature, g.part_class)) {
        EXPECT_GT(m.presence, 0.0);
        EXPECT_LT(m.presence, 1.0);
      }
  }
}

TEST(Forward, DimensionMismatch) { EXPECT_THROW(forward(tiny(), std::vector<double>{1, 2, 3}, "wheel"), Error); }

TEST(Loss, PerfectOffsetsZeroLogit) {
  const auto p = tiny();
  ModeTarget t{{0.1, 0.2}, {OffsetVector{0, 0, 0, 0}, OffsetVector{0, 0, 0, 0}}};
  EXPECT_NEAR(loss(p, std::span(&t, 1), "wheel"), 2 * std::log(2.0), 1e-15);
  ModeTarget absent{{0.1, 0.2}, {std::nullopt, OffsetVector{0, 0, 0, 0}}};
  EXPECT_NEAR(loss(p, std::span(&absent, 1), "wheel"), 2 * std::log(2.0), 1e-15);
}

TEST(Loss, SmoothL1Pieces) {
  const auto p = tiny();
  ModeTarget half{{0, 0}, {OffsetVector{-0.5, 0, 0, 0}}};
  EXPECT_NEAR(loss(p, std::span(&half, 1), "plate") - std::log(2.0), 0.125, 1e-15);
  ModeTarget two{{0, 0}, {OffsetVector{0, 0, -2.0, 0}}};
  EXPECT_NEAR(loss(p, std::span(&two, 1), "plate") - std::log(2.0), 1.5, 1e-15);
  // Absent modes contribute no offset term, however far off the offsets are.
  auto q = tiny();
  q.head("plate").offset_b = {9, 9, 9, 9, 0, 0, 0, 0};
  ModeTarget none{{0, 0}, {std::nullopt}};
  EXPECT_NEAR(loss(q, std::span(&none, 1), "plate"), std::log(2.0), 1e-15);
}

TEST(Loss, WrongModeCountRejected) {
  ModeTarget t{{0, 0}, {std::nullopt, std::nullopt}};
  EXPECT_THROW(loss(tiny(), std::span(&t, 1), "plate"), Error);
}

TEST(Loss, OrderInvariantUpToRounding) {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    auto g = oracle::random_draw(rng);
    const double a = loss(g.params, g.batch, g.part_class);
    std::reverse(g.batch.begin(), g.batch.end());
    EXPECT_NEAR(loss(g.params, g.batch, g.part_class), a, 1e-12 * std::max(1.0, a));
  }
}

TEST(Grad, StationaryPoint) {
  // Offsets exact, presence logits huge in the right direction.
  auto p = tiny();
  auto& h = p.head("wheel");
  h.offset_b = {0.1, -0.2, 0.3, 0.0, 0, 0, 0, 0};
  h.presence_b = {60.0, -60.0};
  ModeTarget t{{0.4, -0.7}, {OffsetVector{0.1, -0.2, 0.3, 0.0}, std::nullopt}};
  const auto g = grad(p, std::span(&t, 1), "wheel");
  double norm = 0.0;
  for (auto b : g.blocks())
    for (double v : b) norm += v * v;
  EXPECT_LT(std::sqrt(norm), 1e-10);
}

TEST(Grad, MatchesFiniteDifferences) {
  Rng rng(6);
  for (int i = 0; i < 40; ++i) {
    const auto g = oracle::random_draw(rng);
    const auto r = oracle::check_gradient(g);
    EXPECT_LT(r.max_rel_error, 1e-4) << "draw " << i;
    EXPECT_TRUE(r.inactive_heads_zero) << "draw " << i;
  }
}

namespace {

struct Trained {
  SynthOutput synth;
  Dataset data;
  PriorSet priors;
  OffsetNetParams params;
  TrainingTrace trace;
};

const Trained& trained() {
  static const Trained t = [] {
    Trained t;
    t.synth = generate(benchmark_config(21, 200));
    RunConfig cfg;
    PartClassCatalog cat;
    t.data = preprocess(t.synth.dataset, {}, cfg, &cat);
    t.priors = build_priors(t.data, cat);
    t.params = train_offsetnet(t.data, t.priors, cfg, &t.trace);
    return t;
  }();
  return t;
}

}  // namespace

TEST(Train, LossDecreases) {
  const auto& t = trained();
  ASSERT_FALSE(t.trace.epoch_loss.empty());
  EXPECT_LT(t.trace.best_loss, t.trace.initial_loss);
  EXPECT_LE(t.trace.best_loss, *std::min_element(t.trace.epoch_loss.begin(), t.trace.epoch_loss.end()));
}

TEST(Train, LongRunStillBelowInitialLoss) {
  const auto& t = trained();
  OffsetNetConfig cfg;
  cfg.phases = {{200, 1e-3}};
  TrainingTrace trace;
  const auto samples = make_object_samples(t.data, t.priors, cfg);
  train_offsetnet(std::span(samples).first(std::min<std::size_t>(samples.size(), 64)), t.priors, t.data.feature_dim(), cfg, &trace);
  ASSERT_EQ(trace.epoch_loss.size(), 200u);
  EXPECT_LT(trace.epoch_loss.back(), trace.initial_loss);
}

TEST(Train, InactiveHeadsNeverChange) {
  const auto& t = trained();
  OffsetNetParams init = t.params;
  Rng rng = Rng::split(0, 0x696e6974ULL);  // the initializer stream for seed 0
  glorot_init(init, rng);
  for (const auto& [name, hd] : t.params.heads) {
    const auto& h0 = init.heads.at(name);
    const std::size_t H = t.params.hidden_dim;
    for (std::size_t m = static_cast<std::size_t>(hd.modes); m < t.params.max_modes; ++m) {
      for (std::size_t k = 0; k < H; ++k) EXPECT_EQ(hd.presence_w[m * H + k], h0.presence_w[m * H + k]) << name;
      EXPECT_EQ(hd.presence_b[m], 0.0);
    }
  }
}

TEST(Train, Deterministic) {
  const auto& t = trained();
  RunConfig cfg;
  EXPECT_TRUE(train_offsetnet(t.data, t.priors, cfg) == t.params);
}

TEST(Train, FixedLayoutIsLearned) {
  // Noise-free scenes where one part always sits at the same normalized place:
  // the suggested window should land on it.
  SynthConfig c = benchmark_config(3, 150);
  SynthObjectClass box{"crate", 120.0, 200.0, 0.6, 0.9, {}};
  box.parts.push_back({"label", {{0.3, 0.3, 0.7, 0.6}}, {}});
  c.object_classes = {box};
  c.part_jitter = 0.0;
  c.sigma_feat = 0.0;
  c.proposal_jitter = 0.0;
  auto synth = generate(c);
  RunConfig cfg;
  PartClassCatalog cat;
  const auto d = preprocess(synth.dataset, {}, cfg, &cat);
  const auto priors = build_priors(d, cat);
  cfg.offsetnet.phases = {{40, 1e-3}, {4, 1e-4}};
  const auto params = train_offsetnet(d, priors, cfg);
  DatasetIndex index(d);
  std::size_t good = 0, total = 0;
  for (const auto& o : d.objects) {
    if (index.image(o.image_id).split != "test") continue;
    for (const auto& op : d.object_proposals) {
      if (op.image_id != o.image_id || !(op.box == o.box)) continue;
      const auto out = forward(params, d.object_features.at(op.id), "label");
      const Box w = apply_offset(o.box, out[0].offset);
      for (std::size_t g : index.parts_of(o.id)) good += iou(w, d.parts[g].box) > 0.9;
      ++total;
    }
  }
  ASSERT_GT(total, 50u);
  EXPECT_GE(static_cast<double>(good) / total, 0.95);
}

TEST(Train, ClassWithoutObjectsWarns) {
  const auto& t = trained();
  auto priors = t.priors;
  PriorModel ghost = priors.begin()->second;
  ghost.object_class = "ghost";
  priors["ghost-part"] = ghost;
  std::vector<std::string> warnings;
  ScopedWarningSink sink([&](const std::string& m) { warnings.push_back(m); });
  OffsetNetConfig cfg;
  cfg.phases = {{1, 1e-3}};
  const auto samples = make_object_samples(t.data, priors, cfg);
  const auto p = train_offsetnet(samples, priors, t.data.feature_dim(), cfg);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("ghost-part"), std::string::npos);
  OffsetNetParams init = p;
  Rng rng = Rng::split(cfg.seed, 0x696e6974ULL);
  glorot_init(init, rng);
  EXPECT_TRUE(p.heads.at("ghost-part") == init.heads.at("ghost-part"));
}

TEST(OffsetNetJson, RoundTrip) {
  const auto& t = trained();
  EXPECT_TRUE(offsetnet_from_json(nlohmann::json::parse(to_json(t.params).dump())) == t.params);
  auto j = to_json(t.params);
  j["trunk"]["bias"].push_back(0.0);
  EXPECT_THROW(offsetnet_from_json(j), Error);
}
