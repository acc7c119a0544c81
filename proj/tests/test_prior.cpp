#include <array>
#include <cmath>

#include <gtest/gtest.h>

#include "partctx/prior.hpp"
#include "partctx/synth.hpp"
#include "support.hpp"

using namespace partctx;

namespace {

// One object per image, frame (0,0,100,100), parts given in the unit frame.
Dataset layout(const std::string& part_class, const std::vector<Box>& unit_parts) {
  Dataset d;
  int id = 1;
  for (const auto& u : unit_parts) {
    const int img = id, obj = 1000 + id, part = 2000 + id;
    d.images.push_back({img, 300, 300, "train"});
    const Box frame{100, 100, 200, 200};
    d.objects.push_back({obj, img, "car", frame, false});
    d.parts.push_back({part, img, part_class, obj, denormalize_from(frame, u)});
    ++id;
  }
  return d;
}

Box at_x(double cx, double w = 0.1) { return {cx - w / 2, 0.4, cx + w / 2, 0.6}; }

}  // namespace

TEST(Prior, SingleLocationGivesOneMode) {
  const auto d = layout("plate", std::vector<Box>(20, at_x(0.5)));
  const auto pm = build_prior(d, DatasetIndex(d), "plate");
  EXPECT_EQ(pm.modes, 1);
  EXPECT_EQ(pm.object_class, "car");
  EXPECT_EQ(pm.instances, 20u);
  ASSERT_TRUE(pm.mean_boxes[0].has_value());
  EXPECT_NEAR(pm.mean_boxes[0]->x_min, 0.45, 1e-9);
}

TEST(Prior, ThreeWheelPositions) {
  std::vector<Box> parts;
  for (int i = 0; i < 30; ++i)
    for (double cx : {0.15, 0.5, 0.85}) parts.push_back(at_x(cx));
  const auto d = layout("wheel", parts);
  const auto pm = build_prior(d, DatasetIndex(d), "wheel");
  EXPECT_EQ(pm.modes, 3);
  ASSERT_EQ(pm.intervals.size(), 3u);
  EXPECT_DOUBLE_EQ(pm.intervals[1].lo, 1.0 / 3);
}

TEST(Prior, MassEqualsInstanceCount) {
  Rng rng(9);
  std::vector<Box> parts;
  for (int i = 0; i < 57; ++i) {
    // Some boxes protrude past the frame and past the clamping limits.
    const double x = rng.uniform(-1.0, 1.5), y = rng.uniform(-1.0, 1.5);
    parts.push_back({x, y, x + rng.uniform(0.01, 1.2), y + rng.uniform(0.01, 1.2)});
  }
  const auto d = layout("p", parts);
  const auto pm = build_prior(d, DatasetIndex(d), "p");
  EXPECT_NEAR(pm.mass(), 57.0, 1e-6);
  for (double v : pm.heatmap) EXPECT_GE(v, 0.0);
}

TEST(Prior, RasterizeMatchesSupersampling) {
  Rng rng(10);
  constexpr int g = 16, ss = 64;
  const double cell = (kFrameHi - kFrameLo) / g;
  for (int trial = 0; trial < 10; ++trial) {
    const double x = rng.uniform(-0.4, 1.0), y = rng.uniform(-0.4, 1.0);
    const Box b{x, y, x + rng.uniform(0.2, 0.5), y + rng.uniform(0.2, 0.5)};
    std::vector<double> h(g * g, 0.0);
    rasterize(h, g, b);
    for (int r = 0; r < g; ++r) {
      for (int c = 0; c < g; ++c) {
        int inside = 0;
        for (int i = 0; i < ss; ++i)
          for (int j = 0; j < ss; ++j) {
            const double px = kFrameLo + (c + (j + 0.5) / ss) * cell, py = kFrameLo + (r + (i + 0.5) / ss) * cell;
            inside += px >= b.x_min && px < b.x_max && py >= b.y_min && py < b.y_max;
          }
        const double expect = inside * (cell / ss) * (cell / ss) / b.area();
        EXPECT_NEAR(h[r * g + c], expect, 2.0 * cell / ss * cell / b.area()) << r << "," << c;
      }
    }
  }
}

TEST(Prior, ModeOverrideWins) {
  const auto d = layout("plate", std::vector<Box>(12, at_x(0.5)));
  PriorOptions opt;
  opt.mode_overrides["plate"] = 2;
  const auto pm = build_prior(d, DatasetIndex(d), "plate", opt);
  EXPECT_EQ(pm.modes, 2);
  EXPECT_FALSE(pm.mean_boxes[0].has_value());
  EXPECT_TRUE(pm.mean_boxes[1].has_value());
}

TEST(Prior, NoInstancesIsAnError) {
  const auto d = layout("plate", {at_x(0.5)});
  EXPECT_THROW(build_prior(d, DatasetIndex(d), "door"), Error);
}

TEST(Prior, UnitFrameOfOwner) {
  const Box o{10, 20, 50, 80};
  const Box u = normalize_to(o, o);
  EXPECT_DOUBLE_EQ(u.x_min, 0);
  EXPECT_DOUBLE_EQ(u.y_min, 0);
  EXPECT_DOUBLE_EQ(u.x_max, 1);
  EXPECT_DOUBLE_EQ(u.y_max, 1);
}

TEST(ModeCount, Examples) {
  EXPECT_EQ(estimate_mode_count(std::vector<double>{}), 1);
  EXPECT_EQ(estimate_mode_count(std::vector<double>(10, 0.3)), 1);
  std::vector<double> five;
  for (int i = 0; i < 10; ++i)
    for (double x : {0.05, 0.25, 0.5, 0.7, 0.95}) five.push_back(x);
  EXPECT_EQ(estimate_mode_count(five), 4);  // capped
  // A minor bump under 20% of the main peak does not count.
  std::vector<double> bump(50, 0.2);
  bump.push_back(0.8);
  EXPECT_EQ(estimate_mode_count(bump), 1);
}

TEST(AssignModes, Examples) {
  Rng rng(1);
  const Box o{0, 0, 100, 100};
  const std::vector<Box> two{{5, 0, 15, 10}, {85, 0, 95, 10}};
  auto a = assign_modes(o, two, 2, rng);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0], 0u);
  EXPECT_EQ(a[1], 1u);

  const std::vector<Box> mid{{45, 0, 55, 10}};
  a = assign_modes(o, mid, 3, rng);
  EXPECT_FALSE(a[0].has_value());
  EXPECT_EQ(a[1], 0u);
  EXPECT_FALSE(a[2].has_value());

  a = assign_modes(o, {}, 1, rng);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_FALSE(a[0].has_value());
}

TEST(AssignModes, EveryModeAssignedOrAbsent) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const Box o = partctx::testing::random_box(rng);
    std::vector<Box> parts;
    const int n = static_cast<int>(rng.index(6));
    for (int i = 0; i < n; ++i) parts.push_back(partctx::testing::random_box(rng));
    const int m = 1 + static_cast<int>(rng.index(4));
    const auto a = assign_modes(o, parts, m, rng);
    ASSERT_EQ(a.size(), static_cast<std::size_t>(m));
    std::set<std::size_t> used;
    for (const auto& v : a)
      if (v) {
        EXPECT_TRUE(used.insert(*v).second);
      }
  }
}

TEST(AssignModes, TiePickIsDeterministicAndUniform) {
  const Box o{0, 0, 100, 100};
  const std::vector<Box> tied{{10, 0, 20, 10}, {20, 0, 30, 10}, {30, 0, 40, 10}};
  {
    Rng a(5), b(5);
    EXPECT_EQ(assign_modes(o, tied, 1, a), assign_modes(o, tied, 1, b));
  }
  std::array<int, 3> counts{};
  constexpr int trials = 3000;
  for (int s = 0; s < trials; ++s) {
    Rng rng(static_cast<std::uint64_t>(s));
    ++counts[*assign_modes(o, tied, 2, rng)[0]];
  }
  double chi2 = 0.0;
  for (int c : counts) chi2 += (c - trials / 3.0) * (c - trials / 3.0) / (trials / 3.0);
  EXPECT_LT(chi2, 5.991);  // 2 dof, 5%
}

TEST(Prior, JsonRoundTrip) {
  auto d = generate(benchmark_config(0, 20)).dataset;
  PartClassCatalog cat;
  for (const auto& c : d.part_classes()) cat.classes[c] = {c, "", PartClassStatus::kept, "", 1, 0, 0, 0};
  const auto priors = build_priors(d, cat);
  const auto back = priors_from_json(to_json(priors));
  ASSERT_EQ(back.size(), priors.size());
  for (const auto& [name, pm] : priors) {
    EXPECT_EQ(back.at(name).modes, pm.modes);
    EXPECT_EQ(back.at(name).heatmap, pm.heatmap);
    EXPECT_EQ(back.at(name).mean_boxes, pm.mean_boxes);
  }
}
