#include <gtest/gtest.h>

#include <set>

#include "pointvector/gradcheck.hpp"

using namespace pointvector;

TEST(Gradcheck, RegistryCoversCoreOps) {
  const auto names = gradcheck::registered();
  const std::set<std::string> have(names.begin(), names.end());
  EXPECT_EQ(have.size(), names.size()) << "duplicate case names";
  for (const char* n : {"linear", "batchnorm.train", "relu", "grouped_projection", "slot_groupconv", "rotate_expand.m3",
                        "interpolate", "ce_label_smoothing", "sa_block", "vpsa_block.sum_groupconv", "feature_propagate"})
    EXPECT_TRUE(have.count(n)) << n;
}

TEST(Gradcheck, ElementaryCasesPass) {
  gradcheck::Options opt;
  opt.instances = 3;
  for (const char* f : {"linear", "batchnorm", "relu", "grouped_projection", "rotate_expand", "ce_"})
    for (const auto& r : gradcheck::run_all(opt, f)) EXPECT_TRUE(r.passed) << r.name << " worst " << r.worst << r.note;
}

TEST(Gradcheck, InjectedFaultIsCaught) {
  gradcheck::Options opt;
  opt.instances = 2;
  opt.inject_fault = "linear";
  auto res = gradcheck::run_all(opt, "linear");
  ASSERT_EQ(res.size(), 1u);
  EXPECT_FALSE(res[0].passed);
  EXPECT_GT(res[0].worst, 1e-3);
}
