#include "radmae/evalstat.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "radmae/error.hpp"

namespace radmae::stats {

namespace {

// Average ranks (1-based) with ties sharing the mean rank. Also returns the
// tie-group sizes.
std::vector<double> average_ranks(std::span<const double> values, std::vector<std::size_t>* tie_sizes = nullptr) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    if (tie_sizes) tie_sizes->push_back(j - i + 1);
    i = j + 1;
  }
  return ranks;
}

double normal_sf(double z) { return boost::math::cdf(boost::math::complement(boost::math::normal(), z)); }

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) fail("auroc: scores and labels differ in length");
  std::size_t pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) fail("auroc: labels must be 0/1");
    pos += (y == 1);
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) fail("AUROC undefined: single-class labels");
  for (double s : scores)
    if (std::isnan(s)) throw Error(ErrorCode::kNumeric, "auroc: NaN score");
  const auto ranks = average_ranks(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == 1) rank_sum += ranks[i];
  const double p = static_cast<double>(pos);
  const double u = rank_sum - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(neg));
}

double auroc_ovr_macro(std::span<const double> probs, std::span<const int> labels, int k, std::vector<int>* skipped) {
  const std::size_t n = labels.size();
  if (probs.size() != n * static_cast<std::size_t>(k)) fail("auroc_ovr_macro: probability matrix has wrong size");
  if (k == 2) {
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = probs[i * 2 + 1];
    return auroc(s, labels);
  }
  double total = 0.0;
  int used = 0;
  std::vector<double> s(n);
  std::vector<int> y(n);
  for (int c = 0; c < k; ++c) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = probs[i * k + c];
      y[i] = labels[i] == c ? 1 : 0;
      pos += y[i];
    }
    if (pos == 0 || pos == n) {
      if (skipped) skipped->push_back(c);
      continue;
    }
    total += auroc(s, y);
    ++used;
  }
  if (used == 0) fail("AUROC undefined: fewer than two classes present");
  return total / used;
}

ClassificationMetrics classification_metrics(std::span<const int> predictions, std::span<const int> labels, int k) {
  if (labels.empty()) fail("classification_metrics: empty labels");
  if (predictions.size() != labels.size()) fail("classification_metrics: length mismatch");
  const auto cm = confusion_matrix(predictions, labels, k);
  ClassificationMetrics out;
  auto recall_of = [&](int c) {
    long row = 0;
    for (int p = 0; p < k; ++p) row += cm.at(c, p);
    return row == 0 ? std::optional<double>{} : std::optional<double>{static_cast<double>(cm.at(c, c)) / row};
  };
  auto precision_of = [&](int c) {
    long col = 0;
    for (int t = 0; t < k; ++t) col += cm.at(t, c);
    return col == 0 ? 0.0 : static_cast<double>(cm.at(c, c)) / col;
  };
  auto f1_of = [](double p, double r) { return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r); };

  double recall_sum = 0.0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    if (auto r = recall_of(c)) {
      recall_sum += *r;
      ++present;
    } else if (k > 2) {
      out.warnings.push_back("class " + std::to_string(c) + " absent from labels; excluded from macro average");
    }
  }
  out.balanced_accuracy = recall_sum / present;

  if (k == 2) {
    out.precision = precision_of(1);
    out.recall = recall_of(1).value_or(0.0);
    out.f1 = f1_of(out.precision, out.recall);
    return out;
  }
  double p_sum = 0.0, r_sum = 0.0, f_sum = 0.0;
  for (int c = 0; c < k; ++c) {
    auto r = recall_of(c);
    if (!r) continue;
    const double p = precision_of(c);
    p_sum += p;
    r_sum += *r;
    f_sum += f1_of(p, *r);
  }
  out.precision = p_sum / present;
  out.recall = r_sum / present;
  out.f1 = f_sum / present;
  return out;
}

RegressionMetrics regression_metrics(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.empty()) fail("regression_metrics: empty input");
  if (predictions.size() != targets.size()) fail("regression_metrics: length mismatch");
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double d = predictions[i] - targets[i];
    abs_sum += std::abs(d);
    sq_sum += d * d;
  }
  const double n = static_cast<double>(predictions.size());
  return {abs_sum / n, std::sqrt(sq_sum / n)};
}

long ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), 0L); }

long ConfusionMatrix::trace() const {
  long t = 0;
  for (int i = 0; i < k; ++i) t += at(i, i);
  return t;
}

ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> labels, int k) {
  if (predictions.size() != labels.size()) fail("confusion_matrix: length mismatch");
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k || predictions[i] < 0 || predictions[i] >= k)
      fail("confusion_matrix: class index out of range");
    cm.at(labels[i], predictions[i]) += 1;
  }
  return cm;
}

std::map<std::string, ConfusionMatrix> grouped_confusion(std::span<const int> predictions,
                                                         std::span<const LabeledTarget> labels,
                                                         std::span<const std::optional<std::string>> groups, int k,
                                                         const std::set<std::string>& known_groups) {
  if (predictions.size() != labels.size() || groups.size() != labels.size())
    fail("grouped_confusion: length mismatch");
  std::map<std::string, ConfusionMatrix> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].masked) continue;
    std::string g = "other";
    if (groups[i] && (known_groups.empty() || known_groups.count(*groups[i]))) g = *groups[i];
    auto it = out.try_emplace(g, k).first;
    const int t = labels[i].class_index();
    if (t < 0 || t >= k || predictions[i] < 0 || predictions[i] >= k) fail("grouped_confusion: class out of range");
    it->second.at(t, predictions[i]) += 1;
  }
  return out;
}

FoldInterval fold_ci(std::span<const double> values, double level) {
  const std::size_t n = values.size();
  if (n < 2) fail("fold_ci needs at least 2 values");
  if (!(level > 0.0 && level < 1.0)) fail("fold_ci: level must be in (0, 1)");
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1));
  const boost::math::students_t dist(static_cast<double>(n - 1));
  const double t = boost::math::quantile(dist, 0.5 + level / 2.0);
  const double half = t * sd / std::sqrt(static_cast<double>(n));
  return {mean, mean - half, mean + half};
}

MetricReport make_metric_report(std::string metric, std::vector<double> per_fold, double level) {
  MetricReport r;
  r.metric = std::move(metric);
  r.n = per_fold.size();
  if (per_fold.size() >= 2) {
    const auto ci = fold_ci(per_fold, level);
    r.mean = ci.mean;
    r.lower = ci.lower;
    r.upper = ci.upper;
  } else if (per_fold.size() == 1) {
    r.mean = r.lower = r.upper = per_fold[0];
  }
  r.per_fold = std::move(per_fold);
  return r;
}

namespace {

// Number of arrangements of n1 x-values and n2 y-values giving each U in
// [0, n1*n2], via the standard recurrence on the largest observation.
std::vector<double> u_distribution_counts(int n1, int n2) {
  // table[i][j] holds the count vector for sizes (i, j).
  std::vector<std::vector<std::vector<double>>> table(n1 + 1, std::vector<std::vector<double>>(n2 + 1));
  for (int i = 0; i <= n1; ++i) {
    for (int j = 0; j <= n2; ++j) {
      auto& cur = table[i][j];
      cur.assign(static_cast<std::size_t>(i) * j + 1, 0.0);
      if (i == 0 || j == 0) {
        cur[0] = 1.0;
        continue;
      }
      // Largest value belongs to x: it beats all j y-values.
      const auto& a = table[i - 1][j];
      for (std::size_t u = 0; u < a.size(); ++u) cur[u + j] += a[u];
      const auto& b = table[i][j - 1];
      for (std::size_t u = 0; u < b.size(); ++u) cur[u] += b[u];
    }
  }
  return table[n1][n2];
}

}  // namespace

MannWhitneyResult mann_whitney_u(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) fail("mann_whitney_u: both groups must be nonempty");
  const std::size_t n1 = a.size(), n2 = b.size(), n = n1 + n2;
  std::vector<double> all(a.begin(), a.end());
  all.insert(all.end(), b.begin(), b.end());
  std::vector<std::size_t> ties;
  const auto ranks = average_ranks(all, &ties);
  double r1 = 0.0;
  for (std::size_t i = 0; i < n1; ++i) r1 += ranks[i];
  MannWhitneyResult out;
  out.u = r1 - static_cast<double>(n1) * (n1 + 1) / 2.0;
  const bool has_ties = std::any_of(ties.begin(), ties.end(), [](auto t) { return t > 1; });
  const double nn = static_cast<double>(n1) * n2;

  if (!has_ties && n <= 25) {
    const auto counts = u_distribution_counts(static_cast<int>(n1), static_cast<int>(n2));
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    const auto u = static_cast<std::size_t>(std::llround(out.u));
    double lower = 0.0, upper = 0.0;
    for (std::size_t v = 0; v < counts.size(); ++v) {
      if (v <= u) lower += counts[v];
      if (v >= u) upper += counts[v];
    }
    out.p_value = std::min(1.0, 2.0 * std::min(lower, upper) / total);
    out.exact = true;
    return out;
  }

  double tie_term = 0.0;
  for (auto t : ties) tie_term += static_cast<double>(t) * t * t - static_cast<double>(t);
  const double dn = static_cast<double>(n);
  const double var = nn / 12.0 * ((dn + 1.0) - tie_term / (dn * (dn - 1.0)));
  if (var <= 0.0) {
    out.p_value = 1.0;
    return out;
  }
  const double z = (std::abs(out.u - nn / 2.0) - 0.5) / std::sqrt(var);
  out.p_value = std::clamp(2.0 * normal_sf(std::max(z, 0.0)), 0.0, 1.0);
  return out;
}

namespace {

double poly(const double* c, int n, double x) {
  double r = 0.0;
  for (int i = n - 1; i >= 0; --i) r = r * x + c[i];
  return r;
}

}  // namespace

ShapiroWilkResult shapiro_wilk(std::span<const double> sample) {
  const std::size_t n = sample.size();
  if (n < 3) fail("shapiro_wilk needs at least 3 values");
  if (n > 5000) fail("shapiro_wilk supports at most 5000 values");
  std::vector<double> x(sample.begin(), sample.end());
  std::sort(x.begin(), x.end());
  const double range = x.back() - x.front();
  if (range < 1e-19) fail("normality test undefined for a constant sample");

  static constexpr double c1[] = {0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056};
  static constexpr double c2[] = {0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633};
  static constexpr double c3[] = {0.544, -0.39978, 0.025054, -6.714e-4};
  static constexpr double c4[] = {1.3822, -0.77857, 0.062767, -0.0020322};
  static constexpr double c5[] = {-1.5861, -0.31082, -0.083751, 0.0038915};
  static constexpr double c6[] = {-0.4803, -0.082676, 0.0030302};
  static constexpr double g[] = {-2.273, 0.459};

  const std::size_t half = n / 2;
  const double an = static_cast<double>(n);
  std::vector<double> a(half);
  if (n == 3) {
    a[0] = std::sqrt(0.5);
  } else {
    const boost::math::normal norm;
    std::vector<double> m(half);
    double summ2 = 0.0;
    for (std::size_t i = 0; i < half; ++i) {
      m[i] = boost::math::quantile(norm, (static_cast<double>(i + 1) - 0.375) / (an + 0.25));
      summ2 += m[i] * m[i];
    }
    summ2 *= 2.0;
    const double ssumm2 = std::sqrt(summ2);
    const double rsn = 1.0 / std::sqrt(an);
    const double a1 = poly(c1, 6, rsn) - m[0] / ssumm2;
    std::size_t first;
    double fac;
    if (n > 5) {
      first = 2;
      const double a2 = -m[1] / ssumm2 + poly(c2, 6, rsn);
      fac = std::sqrt((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2));
      a[1] = a2;
    } else {
      first = 1;
      fac = std::sqrt((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1));
    }
    a[0] = a1;
    for (std::size_t i = first; i < half; ++i) a[i] = -m[i] / fac;
  }

  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / an;
  double ssq = 0.0;
  for (double v : x) ssq += (v - mean) * (v - mean);
  double num = 0.0;
  for (std::size_t i = 0; i < half; ++i) num += a[i] * (x[n - 1 - i] - x[i]);
  ShapiroWilkResult out;
  out.w = std::min(1.0, num * num / ssq);

  if (n == 3) {
    constexpr double pi6 = 1.90985931710274;  // 6 / pi
    constexpr double stqr = 1.04719755119660;  // pi / 3
    out.p_value = std::max(0.0, pi6 * (std::asin(std::sqrt(out.w)) - stqr));
    return out;
  }
  const double w1 = std::log(1.0 - out.w);
  double y = w1, mu, sigma;
  if (n <= 11) {
    const double gamma = poly(g, 2, an);
    if (y >= gamma) {
      out.p_value = 1e-99;
      return out;
    }
    y = -std::log(gamma - y);
    mu = poly(c3, 4, an);
    sigma = std::exp(poly(c4, 4, an));
  } else {
    const double xx = std::log(an);
    mu = poly(c5, 4, xx);
    sigma = std::exp(poly(c6, 3, xx));
  }
  out.p_value = normal_sf((y - mu) / sigma);
  return out;
}

TTestResult independent_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) fail("t-test needs at least 2 values per group");
  auto mean_var = [](std::span<const double> v) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::pair{m, ss};
  };
  const auto [ma, ssa] = mean_var(a);
  const auto [mb, ssb] = mean_var(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  TTestResult out;
  out.df = na + nb - 2.0;
  const double pooled = (ssa + ssb) / out.df;
  const double se = std::sqrt(pooled * (1.0 / na + 1.0 / nb));
  if (se == 0.0) {
    out.t = ma == mb ? 0.0 : std::copysign(INFINITY, ma - mb);
    out.p_value = ma == mb ? 1.0 : 0.0;
    return out;
  }
  out.t = (ma - mb) / se;
  const boost::math::students_t dist(out.df);
  out.p_value = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(out.t))));
  return out;
}

TestResult compare_models(std::span<const double> a, std::span<const double> b, double alpha) {
  if (a.size() < 3 || b.size() < 3) fail("compare_models needs at least 3 values per sample");
  TestResult out;
  bool normal = true;
  try {
    out.normality_p_a = shapiro_wilk(a).p_value;
    out.normality_p_b = shapiro_wilk(b).p_value;
    normal = *out.normality_p_a >= alpha && *out.normality_p_b >= alpha;
  } catch (const Error&) {
    normal = false;
    out.flags.push_back("constant sample: normality test undefined, using Mann-Whitney");
  }
  if (normal) {
    const auto t = independent_t_test(a, b);
    out.test_name = "t-test";
    out.statistic = t.t;
    out.p_value = t.p_value;
  } else {
    const auto mw = mann_whitney_u(a, b);
    out.test_name = "mann-whitney";
    out.statistic = mw.u;
    out.p_value = mw.p_value;
  }
  return out;
}

std::string significance_stars(double p) {
  if (p < 1e-4) return "****";
  if (p < 1e-3) return "***";
  if (p < 1e-2) return "**";
  if (p < 0.05) return "*";
  return "ns";
}

double median(std::vector<double> values) {
  if (values.empty()) fail("median of empty sample");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

nlohmann::json to_json(const MetricReport& r) {
  return {{"metric", r.metric}, {"per_fold", r.per_fold}, {"mean", r.mean},
          {"ci95", {r.lower, r.upper}}, {"n", r.n}};
}

nlohmann::json to_json(const TestResult& r) {
  nlohmann::json j{{"test", r.test_name}, {"statistic", r.statistic}, {"p", r.p_value},
                   {"stars", significance_stars(r.p_value)}, {"flags", r.flags}};
  j["normality_p"] = {r.normality_p_a ? nlohmann::json(*r.normality_p_a) : nlohmann::json(nullptr),
                      r.normality_p_b ? nlohmann::json(*r.normality_p_b) : nlohmann::json(nullptr)};
  return j;
}

nlohmann::json to_json(const ConfusionMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int t = 0; t < m.k; ++t) {
    std::vector<long> row(m.k);
    for (int p = 0; p < m.k; ++p) row[p] = m.at(t, p);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace radmae::stats
