#include <doctest.h>

#include <cmath>

#include "saff/stats.hpp"

using namespace saff;

TEST_CASE("mcnemar hand-computed values") {
  const McNemarResult a = mcnemar_counts(10, 20);
  CHECK(a.chi2 == 2.7);  // (|10-20|-1)^2 / 30, exact in binary
  const McNemarResult b = mcnemar_counts(5, 5);
  CHECK(b.chi2 == 0.1);
  CHECK_THROWS_AS(mcnemar_counts(0, 0), usage_error);
}

TEST_CASE("mcnemar is symmetric in the two models") {
  const McNemarResult a = mcnemar_counts(7, 31);
  const McNemarResult b = mcnemar_counts(31, 7);
  CHECK(a.chi2 == b.chi2);
  CHECK(a.p_value == b.p_value);
}

TEST_CASE("mcnemar over bitmaps") {
  PairedPredictions p;
  p.a = {1, 1, 0, 0, 1, 0, 1};
  p.b = {1, 0, 1, 0, 0, 0, 0};
  const McNemarResult r = mcnemar(p);
  CHECK(r.b == 3);  // a correct, b wrong
  CHECK(r.c == 1);
  p.b.pop_back();
  CHECK_THROWS_AS(mcnemar(p), usage_error);
}

TEST_CASE("chi-squared survival function") {
  // 1 dof: sf(x) = erfc(sqrt(x/2)); incomplete-gamma route must agree
  for (double x : {0.1, 0.5, 1.0, 2.02, 2.7, 5.0, 10.0, 36.59, 75.97}) {
    const double expect = std::erfc(std::sqrt(x / 2.0));
    CHECK(chi2_sf(x, 1.0) == doctest::Approx(expect).epsilon(1e-10));
  }
  // consistency with the reported chi2=2.02 -> p~0.16 pairing
  CHECK(std::abs(chi2_sf(2.02, 1.0) - 0.16) < 0.005);
  CHECK(chi2_sf(0.0, 1.0) == 1.0);
}

TEST_CASE("p-value is monotone decreasing in chi2") {
  double prev = 1.0;
  for (double x = 0.01; x < 50.0; x += 0.37) {
    const double p = chi2_sf(x, 1.0);
    CHECK(p < prev);
    CHECK(p > 0.0);
    CHECK(p <= 1.0);
    prev = p;
  }
}

TEST_CASE("aggregate_seeds") {
  const SeedStats one = aggregate_seeds({90.0});
  CHECK(one.median == 90.0);
  CHECK(one.mean == 90.0);
  CHECK(one.stddev == 0.0);

  const SeedStats three = aggregate_seeds({78.2, 78.5, 78.8});
  CHECK(three.median == 78.5);
  CHECK(three.mean == doctest::Approx(78.5).epsilon(1e-12));
  CHECK(three.stddev == doctest::Approx(0.3).epsilon(1e-9));

  // permutation invariance
  const SeedStats perm = aggregate_seeds({78.8, 78.2, 78.5});
  CHECK(perm.median == three.median);
  CHECK(perm.mean == three.mean);
  CHECK(perm.stddev == three.stddev);

  CHECK_THROWS_AS(aggregate_seeds({}), usage_error);
}
