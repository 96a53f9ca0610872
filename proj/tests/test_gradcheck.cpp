#include <gtest/gtest.h>

#include "spattn/gradcheck.hpp"

using namespace spattn;

TEST(GradCheckSuite, PassesAcrossSeeds) {
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    for (const auto& r : run_gradcheck_suite(seed)) {
      EXPECT_TRUE(r.passed()) << "seed " << seed << " " << r.name << " error " << r.max_rel_error;
    }
  }
}

TEST(GradCheckSuite, CoversThresholdsAndSampledWeights) {
  bool theta = false, weights = false;
  for (const auto& r : run_gradcheck_suite(1)) {
    theta = theta || r.name.find("theta") != std::string::npos;
    weights = weights || r.name.find("phase1_loss.decoder") != std::string::npos;
  }
  EXPECT_TRUE(theta);
  EXPECT_TRUE(weights);
}

TEST(GradCheckSuite, BrokenSigmoidBackwardIsCaught) {
  int failures = 0;
  for (const auto& r : run_gradcheck_suite(1, Fault::kSigmoidBackward)) failures += r.passed() ? 0 : 1;
  EXPECT_GT(failures, 0);
}
