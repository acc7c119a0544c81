#include <cmath>
#include <fstream>
#include <iterator>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "partctx/pipeline.hpp"
#include "partctx/scoring.hpp"
#include "partctx/synth.hpp"
#include "support.hpp"

using namespace partctx;

namespace {

OffsetNetParams zero_net() { return OffsetNetParams(3, 4, {{"wheel", {"car", 3}}, {"leg", {"dog", 2}}}); }

ObjectDetection det(const std::string& cls, Box b, double score) { return {0, 1, cls, b, score, {0.1, 0.2, 0.3}}; }

}  // namespace

TEST(SuggestWindows, ZeroOffsetsGiveDetectionBox) {
  const auto s = suggest_windows(zero_net(), det("car", {10, 10, 50, 40}, 0.7), "wheel");
  ASSERT_EQ(s.windows.size(), 3u);
  for (const auto& w : s.windows) EXPECT_EQ(w, Box(10, 10, 50, 40));
  for (double r : s.presence) EXPECT_EQ(r, 0.5);
  EXPECT_EQ(s.object_score, 0.7);
}

TEST(SuggestWindows, HandSetOffsets) {
  auto p = zero_net();
  auto& h = p.head("leg");
  h.offset_b = {0.25, 0.0, std::log(0.5), 0.0, -0.1, 0.2, 0.0, std::log(2.0)};
  const auto d = det("dog", {0, 0, 100, 50}, 1.0);
  const auto s = suggest_windows(p, d, "leg");
  ASSERT_EQ(s.windows.size(), 2u);
  const Box w0 = apply_offset(d.box, {0.25, 0.0, std::log(0.5), 0.0});
  EXPECT_NEAR(s.windows[0].x_min, w0.x_min, 1e-12);
  EXPECT_NEAR(s.windows[0].x_min, 50.0, 1e-12);
  EXPECT_NEAR(s.windows[0].x_max, 100.0, 1e-12);
  EXPECT_NEAR(s.windows[1].y_min, 10.0 - 25.0, 1e-12);
  EXPECT_NEAR(s.windows[1].y_max, 10.0 + 75.0, 1e-12);
}

TEST(RelativeLocation, Examples) {
  const Box p{0, 0, 10, 10};
  const std::vector<SuggestedWindows> one{{1.0, {p}, {1.0}}};
  EXPECT_EQ(relative_location_score(p, one), 1.0);
  EXPECT_EQ(relative_location_score(p, {}), 0.0);

  // IoU 0.6 and 0.7 against p.
  const Box w6{0, 0, 10, 6}, w7{0, 0, 10, 7};
  ASSERT_NEAR(iou(p, w6), 0.6, 1e-15);
  ASSERT_NEAR(iou(p, w7), 0.7, 1e-15);
  const std::vector<SuggestedWindows> two{{0.8, {w6, w7}, {0.9, 0.2}}};
  EXPECT_NEAR(relative_location_score(p, two), 0.432, 1e-12);
}

TEST(RelativeLocation, MatchesTripleLoop) {
  Rng rng(12);
  for (int trial = 0; trial < 500; ++trial) {
    const auto inst = oracle::random_rl_instance(rng);
    const auto sets = oracle::to_windows(inst);
    const auto expect = oracle::relative_location_scores(inst);
    for (std::size_t k = 0; k < inst.parts.size(); ++k) EXPECT_EQ(relative_location_score(inst.parts[k], sets), expect[k]);
  }
}

TEST(RelativeLocation, BoundedMonotoneAndSuperset) {
  Rng rng(13);
  for (int trial = 0; trial < 300; ++trial) {
    auto inst = oracle::random_rl_instance(rng);
    if (inst.objects.empty()) continue;
    auto sets = oracle::to_windows(inst);
    const Box p = inst.parts[0];
    const double base = relative_location_score(p, sets);
    EXPECT_GE(base, 0.0);
    EXPECT_LE(base, 1.0);

    // Raise every presence and object score: the max cannot fall.
    auto raised = sets;
    for (auto& s : raised) {
      s.object_score = std::min(1.0, s.object_score + 0.1);
      for (double& r : s.presence) r = std::min(1.0, r + 0.1);
    }
    EXPECT_GE(relative_location_score(p, raised), base);

    // One more detection.
    auto more = sets;
    more.push_back({rng.uniform(), {partctx::testing::random_box(rng)}, {rng.uniform()}});
    EXPECT_GE(relative_location_score(p, more), base);
  }
}

TEST(ScoreImage, OwnerClassOnlyAndEmpty) {
  auto p = zero_net();
  const std::vector<Box> props{{10, 10, 50, 40}, {200, 200, 220, 230}};
  const auto none = score_image(props, {}, p);
  for (const auto& [cls, col] : none)
    for (double v : col) EXPECT_EQ(v, 0.0);

  const std::vector<ObjectDetection> dets{det("car", {10, 10, 50, 40}, 0.8)};
  const auto s = score_image(props, dets, p);
  EXPECT_NEAR(s.at("wheel")[0], 0.5 * 0.8, 1e-15);
  EXPECT_EQ(s.at("wheel")[0], relative_location_score(props[0], suggest_windows(p, dets, "wheel")));
  EXPECT_EQ(s.at("wheel")[1], 0.0);
  EXPECT_EQ(s.at("leg")[0], 0.0);  // a car detection says nothing about dog legs
}

TEST(DetectObjects, NmsFloorAndClamp) {
  Dataset d;
  d.images.push_back({1, 200, 200, "train"});
  d.object_proposals = {{1, 1, {0, 0, 100, 100}}, {2, 1, {2, 2, 100, 100}}, {3, 1, {120, 120, 180, 180}}, {4, 1, {0, 120, 50, 190}}};
  d.object_scores.classes = {kBackgroundClass, "car"};
  d.object_scores.rows = {{1, {0.1, 0.9}}, {2, {0.1, 1.7}}, {3, {0.1, 0.04}}, {4, {0.1, 0.3}}};
  const auto dets = detect_objects(d);
  ASSERT_EQ(dets.size(), 2u);
  EXPECT_EQ(dets[0].proposal_id, 2);
  EXPECT_EQ(dets[0].score, 1.0);
  EXPECT_EQ(dets[1].proposal_id, 4);
}

TEST(RelativeLocationScores, TableCoversEveryProposal) {
  const auto synth = generate(benchmark_config(2, 20));
  RunConfig cfg;
  PartClassCatalog cat;
  const auto d = preprocess(synth.dataset, {}, cfg, &cat);
  const auto priors = build_priors(d, cat);
  cfg.offsetnet.phases = {{2, 1e-3}};
  const auto params = train_offsetnet(d, priors, cfg);
  const auto dets = object_detections(d, cfg);
  const auto t = relative_location_scores(d, dets, params);
  EXPECT_EQ(t.rows.size(), d.part_proposals.size());
  EXPECT_EQ(t.classes, cat.kept());
  for (const auto& [id, row] : t.rows)
    for (double v : row) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
}

// Object scores are kept clean so that background proposals fall under the
// detection floor; the map then reflects the learned layout alone.
TEST(DenseHeatmap, ConcentratesOnPlantedParts) {
  auto sc = benchmark_config(8, 300);
  sc.sigma_obj = 0.05;
  const auto synth = generate(sc);
  RunConfig cfg;
  PartClassCatalog cat;
  const auto d = preprocess(synth.dataset, {}, cfg, &cat);
  const auto priors = build_priors(d, cat);
  const auto params = train_offsetnet(d, priors, cfg);
  const auto dets = object_detections(d, cfg);
  DatasetIndex index(d);
  constexpr int cols = 96, rows = 72;

  double inside = 0.0, total = 0.0;
  for (const auto& img : d.images) {
    if (img.split != "test") continue;
    std::vector<ObjectDetection> mine;
    for (const auto& o : dets)
      if (o.image_id == img.id) mine.push_back(o);
    for (const auto& cls : cat.kept()) {
      const auto hm = dense_rl_heatmap(mine, params, cls, img.width, img.height, cols, rows);
      // Ground truth of this class, each box grown by half its size on every side.
      std::vector<Box> grown;
      for (std::size_t g : index.parts_in(img.id)) {
        const auto& b = d.parts[g].box;
        if (d.parts[g].part_class == cls)
          grown.push_back({b.x_min - 0.5 * b.width(), b.y_min - 0.5 * b.height(), b.x_max + 0.5 * b.width(), b.y_max + 0.5 * b.height()});
      }
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
          const double v = hm.values[r * cols + c];
          const double x = (c + 0.5) * img.width / cols, y = (r + 0.5) * img.height / rows;
          total += v;
          for (const auto& b : grown)
            if (x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max) {
              inside += v;
              break;
            }
        }
    }
  }
  ASSERT_GT(total, 0.0);
  EXPECT_GE(inside / total, 0.8);
}

TEST(Pgm, WritesBinaryGraymap) {
  DenseHeatmap hm{3, 2, {0.0, 0.5, 1.0, 0.2, 1.7, -1.0}};
  const auto path = partctx::testing::scratch_dir() / "h.pgm";
  write_pgm(path.string(), to_gray(hm));
  std::ifstream in(path, std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 6);
  EXPECT_EQ(bytes.substr(0, header.size()), header);
  const unsigned char expect[] = {0, 128, 255, 51, 255, 0};
  for (int i = 0; i < 6; ++i) EXPECT_EQ(static_cast<unsigned char>(bytes[header.size() + i]), expect[i]) << i;
}
