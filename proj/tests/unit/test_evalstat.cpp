#include <doctest.h>

#include <cmath>
#include <vector>

#include "radmae/error.hpp"
#include "radmae/evalstat.hpp"

using namespace radmae;
using namespace radmae::stats;

namespace {

// Shared samples; reference values computed once with scipy 1.15.
const std::vector<double> kA{1.83, 0.50, 1.62, 2.48, 1.68, 1.88, 1.55, 3.06, 1.30};
const std::vector<double> kB{0.878, 0.647, 0.598, 2.05, 1.06, 1.29, 1.06, 3.14, 1.29};

}  // namespace

TEST_CASE("auroc with ties matches the reference") {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8, 0.4, 0.4, 0.9, 0.2};
  const std::vector<int> y{0, 0, 1, 1, 1, 0, 1, 0};
  CHECK(auroc(s, y) == doctest::Approx(0.8125).epsilon(1e-12));
  CHECK_THROWS_AS(auroc(s, std::vector<int>(8, 1)), Error);
}

TEST_CASE("macro one-vs-rest auroc") {
  const std::vector<double> p{.7, .2, .1, .1, .8, .1, .3, .3, .4, .2, .5, .3, .6, .1, .3, .1, .1, .8};
  const std::vector<int> y{0, 1, 2, 1, 2, 2};
  CHECK(auroc_ovr_macro(p, y, 3) == doctest::Approx(0.9814814814814815).epsilon(1e-12));
}

TEST_CASE("classification metrics use macro averages over present classes") {
  const std::vector<int> pred{0, 1, 2, 2, 1, 0, 2, 1}, truth{0, 1, 2, 1, 1, 0, 0, 2};
  const auto m = classification_metrics(pred, truth, 3);
  CHECK(m.balanced_accuracy == doctest::Approx(0.611111111111111));
  CHECK(m.precision == doctest::Approx(0.6666666666666666));
  CHECK(m.recall == doctest::Approx(0.611111111111111));
  CHECK(m.f1 == doctest::Approx(0.6222222222222222));
  const auto cm = confusion_matrix(pred, truth, 3);
  CHECK(cm.total() == 8);
  CHECK(cm.trace() == 5);
  CHECK(cm.at(0, 2) == 1);
}

TEST_CASE("mann-whitney exact and asymptotic p-values") {
  const auto tied = mann_whitney_u(kA, kB);
  CHECK_FALSE(tied.exact);
  CHECK(tied.u == doctest::Approx(58.0));
  CHECK(tied.p_value == doctest::Approx(0.13291945818531892).epsilon(1e-9));

  const std::vector<double> x{0.1, 0.4, 0.35, 0.8, 0.7, 0.2, 0.9}, y{0.05, 0.3, 0.5, 0.6};
  const auto exact = mann_whitney_u(x, y);
  CHECK(exact.exact);
  CHECK(exact.u == doctest::Approx(18.0));
  CHECK(exact.p_value == doctest::Approx(0.5272727272727272).epsilon(1e-12));
}

TEST_CASE("shapiro-wilk and t-test against reference") {
  const auto sa = shapiro_wilk(kA), sb = shapiro_wilk(kB);
  CHECK(sa.w == doctest::Approx(0.9521665877116676).epsilon(1e-6));
  CHECK(sa.p_value == doctest::Approx(0.7138520485184056).epsilon(1e-4));
  CHECK(sb.w == doctest::Approx(0.8199202869349445).epsilon(1e-6));
  CHECK(sb.p_value == doctest::Approx(0.03438669924753226).epsilon(1e-4));
  CHECK_THROWS(shapiro_wilk(std::vector<double>{1.0, 1.0, 1.0}));

  const auto t = independent_t_test(kA, kB);
  CHECK(t.t == doctest::Approx(1.2051727991066508).epsilon(1e-10));
  CHECK(t.df == 16.0);
  CHECK(t.p_value == doctest::Approx(0.2456594393504464).epsilon(1e-9));
}

TEST_CASE("compare_models gates on normality") {
  const auto r = compare_models(kA, kB);
  CHECK(r.test_name == "mann-whitney");  // kB fails Shapiro-Wilk at 0.05
  CHECK(r.p_value == doctest::Approx(0.13291945818531892).epsilon(1e-9));
  const auto normal = compare_models(kA, kA, 0.01);
  CHECK(normal.test_name == "t-test");
}

TEST_CASE("fold interval uses the t quantile") {
  const std::vector<double> v{0.81, 0.84, 0.79, 0.86, 0.83};
  const auto ci = fold_ci(v);
  CHECK(ci.mean == doctest::Approx(0.826));
  CHECK(ci.lower == doctest::Approx(0.7924520861507334).epsilon(1e-9));
  CHECK(ci.upper == doctest::Approx(0.8595479138492665).epsilon(1e-9));
}

TEST_CASE("significance stars") {
  CHECK(significance_stars(5e-5) == "****");
  CHECK(significance_stars(5e-4) == "***");
  CHECK(significance_stars(5e-3) == "**");
  CHECK(significance_stars(0.03) == "*");
  CHECK(significance_stars(0.05) == "ns");
  CHECK(median({3.0, 1.0, 2.0, 10.0}) == 2.5);
}
