#include <gtest/gtest.h>

#include "partctx/pipeline.hpp"
#include "partctx/synth.hpp"

using namespace partctx;

TEST(RunConfig, JsonRoundTrip) {
  RunConfig c;
  c.seed = 17;
  c.nms_iou = 0.4;
  c.grid_step = 0.1;
  c.pcp_pop = true;
  c.priors.mode_overrides = {{"car-wheel", 3}};
  c.offsetnet.phases = {{3, 0.01}};
  const auto back = run_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.offsetnet.seed, 17u);
}

TEST(RunConfig, PartialJsonKeepsBase) {
  RunConfig base;
  base.score_floor = 0.2;
  const auto c = run_config_from_json({{"seed", 3}, {"offsetnet", {{"hidden_dim", 8}}}}, base);
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.score_floor, 0.2);
  EXPECT_EQ(c.offsetnet.hidden_dim, 8u);
  EXPECT_EQ(c.offsetnet.phases.size(), RunConfig{}.offsetnet.phases.size());
}

TEST(RunConfig, ValidationRejectsBadThresholds) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  c.nms_iou = 1.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.grid_step = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.score_floor = -0.1;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Pipeline, SmallRunIsDeterministicAndSane) {
  const auto raw = generate(benchmark_config(2, 60)).dataset;
  RunConfig cfg;
  cfg.seed = 2;
  cfg.offsetnet.phases = {{4, 1e-3}};
  cfg.pcp_pop = true;
  const auto a = run_pipeline(raw, cfg);
  const auto b = run_pipeline(raw, cfg);

  EXPECT_EQ(to_json(a.offsetnet).dump(), to_json(b.offsetnet).dump());
  EXPECT_EQ(to_json(a.full).dump(), to_json(b.full).dump());
  EXPECT_EQ(to_json(a.mixing).dump(), to_json(b.mixing).dump());

  ASSERT_TRUE(a.full.map && a.baseline.map);
  EXPECT_GE(*a.full.map, 0.0);
  EXPECT_LE(*a.full.map, 1.0);
  for (const auto& [cls, rep] : a.full.classes) {
    ASSERT_TRUE(rep.pcp_pop.has_value()) << cls;
    EXPECT_GE(rep.pcp_pop->pop, 0.0);
    EXPECT_LE(rep.pcp_pop->pcp, 1.0);
  }
  for (const auto& d : a.detections) EXPECT_EQ(raw.images[d.image_id].split, "test");
  for (const auto& [cls, alpha] : a.mixing.alpha) {
    EXPECT_GE(alpha, 0.0);
    EXPECT_LE(alpha, 1.0);
  }
}

TEST(Pipeline, OccludedOnlyNeedsFlags) {
  auto raw = generate(benchmark_config(2, 20)).dataset;
  raw.has_occlusion_flags = false;
  RunConfig cfg;
  cfg.occluded_only = true;
  cfg.offsetnet.phases = {{1, 1e-3}};
  EXPECT_THROW(run_pipeline(raw, cfg), Error);
}

TEST(Pipeline, MixScoresUsesPerClassAlpha) {
  ScoreTable initial{{"a", "b"}, {{1, {0.8, 0.4}}}};
  ScoreTable rl{{"b", "a"}, {{1, {1.0, 0.2}}}};
  MixingWeights w;
  w.alpha = {{"a", 0.25}, {"b", 0.5}};
  const auto m = mix_scores(initial, rl, w);
  EXPECT_NEAR(m.rows.at(1)[0], 0.65, 1e-15);
  EXPECT_NEAR(m.rows.at(1)[1], 0.7, 1e-15);
}
