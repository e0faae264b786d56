#include <gtest/gtest.h>

#include <sstream>

#include "coordrl/verify/verify.hpp"

using namespace coordrl;

TEST(Verify, RatioSuitePassesAndIsDeterministic) {
  const auto a = suite_ratio_consistency(), b = suite_ratio_consistency();
  EXPECT_TRUE(a.passed) << a.detail;
  EXPECT_EQ(a.worst, b.worst);
  EXPECT_LE(a.worst, 1e-10);
  EXPECT_GE(a.cases, 4u * 10000u);
}

TEST(Verify, RatioSuiteFailsUnderImpossibleTolerance) {
  VerifyOptions opt;
  opt.ratio_tol = 1e-30;
  opt.ratio_cases = 2000;
  const auto r = suite_ratio_consistency(opt);
  EXPECT_FALSE(r.passed);
  EXPECT_FALSE(r.detail.empty());
}

TEST(Verify, KlSuitePasses) {
  const auto r = suite_kl_montecarlo();
  EXPECT_TRUE(r.passed) << r.detail;
  EXPECT_EQ(r.cases, 20u);
  EXPECT_LE(r.worst, 3.0);
}

TEST(Verify, SamplerSuitePasses) {
  const auto r = suite_sampler_distribution();
  EXPECT_TRUE(r.passed) << r.detail;
  EXPECT_GE(r.worst, 1e-3);
}

TEST(Verify, SamplerSuiteFailsAtAbsurdSignificance) {
  VerifyOptions opt;
  opt.ks_alpha = 0.9999;
  EXPECT_FALSE(suite_sampler_distribution(opt).passed);
}

TEST(Verify, GradcheckSuitePassesAndReportsSkips) {
  const auto r = suite_gradcheck_all();
  EXPECT_TRUE(r.passed) << r.detail;
  EXPECT_LE(r.worst, 1e-5);
  EXPECT_NE(r.detail.find("below magnitude floor"), std::string::npos);
}

TEST(Verify, GradcheckSuiteFailsUnderImpossibleTolerance) {
  VerifyOptions opt;
  opt.grad_tol = 1e-30;
  EXPECT_FALSE(suite_gradcheck_all(opt).passed);
}

TEST(Verify, KsPvalueSanity) {
  std::vector<double> xs;
  for (int i = 0; i < 1000; ++i) xs.push_back((i + 0.5) / 1000.0);
  EXPECT_GT(detail::ks_pvalue(xs, [](double x) { return x; }), 0.99);
  EXPECT_LT(detail::ks_pvalue(xs, [](double x) { return x * x; }), 1e-6);
}

TEST(Verify, ReportRecordFormat) {
  SuiteReport r{"demo", true, 3, 0.5, 1.0, "ok"};
  std::ostringstream os;
  write_report(os, r);
  EXPECT_EQ(os.str(), "suite name=demo passed=true cases=3 worst=0.5 threshold=1 detail=\"ok\"\n");
}
