#include <gtest/gtest.h>

#include <set>

#include "osuda/rng.hpp"

using namespace osuda;

TEST(Rng, DerivedSeedsAreStableAndNameSensitive) {
  EXPECT_EQ(derive_seed(1, "lambda"), derive_seed(1, "lambda"));
  EXPECT_NE(derive_seed(1, "lambda"), derive_seed(1, "perturbation"));
  EXPECT_NE(derive_seed(1, "lambda"), derive_seed(2, "lambda"));
}

TEST(Rng, StreamsAreIndependentOfEachOthersUse) {
  Rng a = make_stream(5, "a");
  Rng b = make_stream(5, "b");
  const auto first_b = b();
  Rng a2 = make_stream(5, "a");
  for (int i = 0; i < 1000; ++i) a2();
  Rng b2 = make_stream(5, "b");
  EXPECT_EQ(b2(), first_b);
  (void)a;
}

TEST(Rng, ManySubstreamsDoNotCollide) {
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 10000; ++i) seen.insert(derive_seed(3, "run/" + std::to_string(i)));
  EXPECT_EQ(seen.size(), 10000u);
}

TEST(Rng, UniformStaysInUnitInterval) {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = uniform01(r);
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}
