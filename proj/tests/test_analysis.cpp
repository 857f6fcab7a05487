#include "doctest.h"

#include <map>

#include "hbias/analysis.hpp"
#include "hbias/pipeline.hpp"
#include "sim_support.hpp"

using namespace hbias;

namespace {

double slope_of(const std::vector<double>& x, const std::vector<double>& y) {
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= x.size();
  my /= y.size();
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

}  // namespace

TEST_SUITE("analysis") {

TEST_CASE("temperature sweep gives ten per-setting fits and two pooled fits") {
  const auto cfg = testing::gaussian_study(1, 3, 6, SweepSpec::temperature_default(),
                                           [](Race, Gender, double) { return 0.3; });
  const auto run = run_in_memory(cfg);
  CHECK(run.suite.per_setting.size() == 10);
  REQUIRE(run.suite.pooled.size() == 2);
  // Ordered by setting, Race before Gender.
  CHECK(run.suite.per_setting[0].dimension == Dimension::Race);
  CHECK(run.suite.per_setting[1].dimension == Dimension::Gender);
  CHECK(run.suite.per_setting[2].setting == 0.5);
  std::uint64_t total = 0;
  for (const auto& f : run.suite.per_setting)
    if (f.dimension == Dimension::Race) total += f.fit.n_obs;
  CHECK(run.suite.pooled_fit(Dimension::Race).n_obs == total);
  CHECK(total == run.observations.size());
  const auto& pooled = run.suite.pooled_fit(Dimension::Race);
  CHECK(pooled.terms == std::vector<std::string>{"Intercept", "Race", "Knob", "Race:Knob"});
  CHECK(run.suite.pooled_fit(Dimension::Gender).terms ==
        std::vector<std::string>{"Intercept", "Gender", "Knob", "Gender:Knob"});
}

TEST_CASE("pooled n for the full design is 5,617,500") {
  CHECK(5 * pair_count(750, 4) == 5617500);
}

TEST_CASE("missing settings and single-setting pools are errors") {
  const auto cfg = testing::gaussian_study(2, 2, 4, SweepSpec{Knob::TopP, {0.4, 1.0}, 1.0},
                                           [](Race, Gender, double) { return 0.3; });
  const auto run = run_in_memory(cfg, false);
  SuiteAccumulator acc(Knob::TopP, {0.4, 0.6, 1.0});
  for (const auto& o : run.observations) acc.add(o);
  CHECK_THROWS_WITH(acc.fit_per_setting(), doctest::Contains("missing setting stratum top_p=0.6"));

  std::vector<SimilarityObservation> one;
  for (const auto& o : run.observations)
    if (o.setting == 1.0) one.push_back(o);
  CHECK_THROWS_WITH(run_pooled(one, Knob::TopP), doctest::Contains("interaction unidentifiable"));
  SuiteAccumulator wrong(Knob::Temperature, {1.0});
  CHECK_THROWS(wrong.add(one.front()));
}

TEST_CASE("planted Black concentration gives a positive Race coefficient everywhere") {
  const auto cfg = testing::gaussian_study(11, 5, 10, SweepSpec::temperature_default(),
                                           [](Race r, Gender, double) { return r == Race::Black ? 0.20 : 0.25; });
  const auto run = run_in_memory(cfg);
  for (double s : cfg.sweep.values) {
    const auto& f = run.suite.at(s, Dimension::Race);
    CAPTURE(s);
    CHECK(f.beta[1] > 0.0);
    CHECK(f.p_values[1] < 0.001);
  }
}

TEST_CASE("reversing the plant at the top setting flips the sign there") {
  const auto cfg = testing::gaussian_study(12, 5, 10, SweepSpec::temperature_default(), [](Race r, Gender, double s) {
    const bool black_tight = s < 2.0;
    return (r == Race::Black) == black_tight ? 0.20 : 0.25;
  });
  const auto run = run_in_memory(cfg);
  for (double s : {0.0, 0.5, 1.0, 1.5}) CHECK(run.suite.at(s, Dimension::Race).beta[1] > 0.0);
  CHECK(run.suite.at(2.0, Dimension::Race).beta[1] < 0.0);
  CHECK(run.suite.at(2.0, Dimension::Race).p_values[1] < 0.001);
}

TEST_CASE("gender plant") {
  const auto cfg = testing::gaussian_study(13, 5, 10, SweepSpec::top_p_default(),
                                           [](Race, Gender g, double) { return g == Gender::Woman ? 0.18 : 0.25; });
  const auto run = run_in_memory(cfg);
  for (double s : cfg.sweep.values) {
    CHECK(run.suite.at(s, Dimension::Gender).beta[1] > 0.0);
    CHECK(run.suite.at(s, Dimension::Gender).p_values[1] < 0.001);
  }
}

TEST_CASE("shrinking gap yields a negative interaction that agrees with the per-setting trend") {
  int agree = 0;
  const int runs = 20;
  for (int seed = 0; seed < runs; ++seed) {
    const auto cfg = testing::gaussian_study(100 + seed, 4, 8, SweepSpec::temperature_default(),
                                             [](Race r, Gender, double s) {
                                               return r == Race::Black ? 0.25 - 0.025 * (2.0 - s) : 0.25;
                                             });
    const auto run = run_in_memory(cfg);
    const auto& pooled = run.suite.pooled_fit(Dimension::Race);
    if (seed == 0) {
      CHECK(pooled.beta[3] < 0.0);
      CHECK(pooled.p_values[3] < 0.001);
    }
    std::vector<double> coefs;
    for (double s : cfg.sweep.values) coefs.push_back(run.suite.at(s, Dimension::Race).beta[1]);
    if ((slope_of(cfg.sweep.values, coefs) < 0.0) == (pooled.beta[3] < 0.0)) ++agree;
  }
  CHECK(agree >= 19);
}

TEST_CASE("positive Race coefficient iff Black standardized mean exceeds White") {
  for (int k = 0; k < 6; ++k) {
    const double black = 0.20 + 0.02 * k;  // crosses 0.25
    const auto cfg = testing::gaussian_study(300 + k, 4, 8, SweepSpec{Knob::TopP, {1.0}, 1.0},
                                             [&](Race r, Gender, double) { return r == Race::Black ? black : 0.25; });
    const auto run = run_in_memory(cfg, false);
    double mb = 0, mw = 0;
    std::size_t nb = 0, nw = 0;
    for (const auto& o : run.observations) (o.race == Race::Black ? (mb += o.cosine_std, ++nb) : (mw += o.cosine_std, ++nw));
    const double beta = run.suite.at(1.0, Dimension::Race).beta[1];
    CAPTURE(black);
    CHECK((beta > 0.0) == (mb / nb > mw / nw));
  }
}

}  // TEST_SUITE
