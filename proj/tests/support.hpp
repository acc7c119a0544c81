#pragma once

#include <filesystem>
#include <string>

#include <gtest/gtest.h>

#include "partctx/geometry.hpp"
#include "partctx/random.hpp"

namespace partctx::testing {

inline Box random_box(Rng& rng, double extent = 100.0, double min_size = 1.0) {
  const double w = rng.uniform(min_size, extent / 2);
  const double h = rng.uniform(min_size, extent / 2);
  const double x = rng.uniform(0.0, extent - w);
  const double y = rng.uniform(0.0, extent - h);
  return {x, y, x + w, y + h};
}

// Fresh empty directory under the system temp dir, named after the running test.
inline std::filesystem::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto dir = std::filesystem::temp_directory_path() / "partctx-tests" /
             (std::string(info->test_suite_name()) + "." + info->name());
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace partctx::testing
