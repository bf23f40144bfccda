#include "dilnas/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "dilnas/errors.hpp"

namespace dilnas {

namespace {

constexpr double kHoldTol = 1e-12;
constexpr double kExpGuard = 700.0;  // exp overflows past ~709 in double

double guarded_exp(double x) {
  if (std::fabs(x) > kExpGuard) {
    throw NumericError("bounds: exponent magnitude " + std::to_string(x) + " exceeds the double range");
  }
  return std::exp(x);
}

void tally(TrialSummary& summary, const BoundCheck& check, bool first) {
  ++summary.trials;
  if (!check.holds) ++summary.violations;
  if (first || check.margin < summary.min_margin) summary.min_margin = check.margin;
  if (!check.holds && (summary.worst_margin == 0.0 || check.margin < summary.worst_margin)) {
    summary.worst_margin = check.margin;
  }
}

BoundCheck make_check(double lhs, double rhs) {
  BoundCheck c;
  c.lhs = lhs;
  c.rhs = rhs;
  c.margin = rhs - lhs;
  c.holds = lhs <= rhs + kHoldTol;
  return c;
}

}  // namespace

FiniteHypothesis operator+(const FiniteHypothesis& a, const FiniteHypothesis& b) {
  if (a.size() != b.size()) throw ValueError("hypothesis sum: size mismatch");
  FiniteHypothesis out;
  out.values.resize(a.size());
  for (size_t i = 0; i < a.size(); ++i) out.values[i] = a.values[i] + b.values[i];
  return out;
}

void LabeledDomain::validate() const {
  if (labels.empty()) throw ValueError("domain: empty");
  if (weights.size() != labels.size() || neighbors.size() != labels.size()) {
    throw ValueError("domain: inconsistent field sizes");
  }
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw ValueError("domain: negative weight");
    total += w;
  }
  if (std::fabs(total - 1.0) > 1e-12) throw ValueError("domain: weights sum to " + std::to_string(total));
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 1 && labels[i] != -1) throw ValueError("domain: labels must be +-1");
    bool self = false;
    for (size_t j : neighbors[i]) {
      if (j >= labels.size()) throw ValueError("domain: neighbor index out of range");
      if (j == i) self = true;
    }
    if (!self) throw ValueError("domain: neighborhood must contain its own point");
  }
}

LabeledDomain LabeledDomain::index_ball(std::vector<int> labels, std::vector<double> weights,
                                        int64_t radius) {
  LabeledDomain dom;
  const size_t n = labels.size();
  dom.labels = std::move(labels);
  dom.weights = std::move(weights);
  dom.neighbors.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const size_t lo = i >= static_cast<size_t>(radius) ? i - static_cast<size_t>(radius) : 0;
    const size_t hi = std::min(n - 1, i + static_cast<size_t>(radius));
    for (size_t j = lo; j <= hi; ++j) dom.neighbors[i].push_back(j);
  }
  dom.validate();
  return dom;
}

LabeledDomain LabeledDomain::isolated(std::vector<int> labels) {
  const size_t n = labels.size();
  LabeledDomain dom;
  dom.labels = std::move(labels);
  dom.weights.assign(n, 1.0 / static_cast<double>(n));
  dom.neighbors.resize(n);
  for (size_t i = 0; i < n; ++i) dom.neighbors[i] = {i};
  dom.validate();
  return dom;
}

double std_error(const FiniteHypothesis& h, const LabeledDomain& dom) {
  if (h.size() != dom.size()) throw ValueError("std_error: hypothesis does not cover the domain");
  double total = 0.0;
  for (size_t i = 0; i < dom.size(); ++i) {
    if (static_cast<double>(dom.labels[i]) * h(i) <= 0.0) total += dom.weights[i];
  }
  return total;
}

double adv_error(const FiniteHypothesis& h, const LabeledDomain& dom) {
  if (h.size() != dom.size()) throw ValueError("adv_error: hypothesis does not cover the domain");
  double total = 0.0;
  for (size_t i = 0; i < dom.size(); ++i) {
    for (size_t j : dom.neighbors[i]) {
      if (static_cast<double>(dom.labels[i]) * h(j) <= 0.0) {
        total += dom.weights[i];
        break;
      }
    }
  }
  return total;
}

double exp_surrogate(const FiniteHypothesis& h, const LabeledDomain& dom) {
  if (h.size() != dom.size()) throw ValueError("exp_surrogate: hypothesis does not cover the domain");
  double total = 0.0;
  for (size_t i = 0; i < dom.size(); ++i) {
    total += dom.weights[i] * guarded_exp(-static_cast<double>(dom.labels[i]) * h(i));
  }
  return total;
}

double adv_surrogate(const FiniteHypothesis& h, const LabeledDomain& dom) {
  if (h.size() != dom.size()) throw ValueError("adv_surrogate: hypothesis does not cover the domain");
  double total = 0.0;
  for (size_t i = 0; i < dom.size(); ++i) {
    double worst = -std::numeric_limits<double>::infinity();
    for (size_t j : dom.neighbors[i]) {
      worst = std::max(worst, guarded_exp(-static_cast<double>(dom.labels[i]) * h(j)));
    }
    total += dom.weights[i] * worst;
  }
  return total;
}

BoundCheck check_std_error_bound(const FiniteHypothesis& h_b, const FiniteHypothesis& h_d,
                                 const LabeledDomain& dom) {
  const double lhs = std_error(h_b + h_d, dom);
  double correction = 0.0;
  for (size_t i = 0; i < dom.size(); ++i) {
    correction += dom.weights[i] * guarded_exp(-h_b(i) * h_d(i));
  }
  return make_check(lhs, std_error(h_b, dom) + correction);
}

BoundCheck check_adv_surrogate_factorization(const FiniteHypothesis& h, const LabeledDomain& dom) {
  const double lhs = adv_surrogate(h, dom);
  double rhs = 0.0;
  for (size_t i = 0; i < dom.size(); ++i) {
    const double own = guarded_exp(-static_cast<double>(dom.labels[i]) * h(i));
    double worst = -std::numeric_limits<double>::infinity();
    for (size_t j : dom.neighbors[i]) {
      worst = std::max(worst, own * guarded_exp(-h(i) * h(j)));
    }
    rhs += dom.weights[i] * worst;
  }
  return make_check(lhs, rhs);
}

BoundCheck check_adv_error_bound(const FiniteHypothesis& h_b, const FiniteHypothesis& h_d,
                                 const LabeledDomain& dom) {
  const double lhs = adv_error(h_b + h_d, dom);
  double correction = 0.0;
  for (size_t i = 0; i < dom.size(); ++i) {
    const double y = static_cast<double>(dom.labels[i]);
    const double own = guarded_exp(-y * h_b(i));
    double worst = -std::numeric_limits<double>::infinity();
    for (size_t j : dom.neighbors[i]) {
      const double term = own * (guarded_exp(-h_b(i) * h_b(j)) * guarded_exp(-y * h_d(j)) - 1.0);
      worst = std::max(worst, term);
    }
    correction += dom.weights[i] * worst;
  }
  return make_check(lhs, std_error(h_b, dom) + correction);
}

FiniteHypothesis hypothesis_from_logits(
    const std::function<std::vector<double>(size_t)>& logits_at, size_t count, int64_t class_a,
    int64_t class_b) {
  FiniteHypothesis h;
  h.values.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    const std::vector<double> logits = logits_at(i);
    if (class_a < 0 || class_b < 0 || class_a >= static_cast<int64_t>(logits.size()) ||
        class_b >= static_cast<int64_t>(logits.size())) {
      throw ValueError("hypothesis_from_logits: class pair outside the logit range");
    }
    h.values.push_back(logits[static_cast<size_t>(class_a)] - logits[static_cast<size_t>(class_b)]);
  }
  return h;
}

bool BoundsLabReport::all_hold() const {
  return std_surrogate.violations == 0 && adv_surrogate.violations == 0 &&
         std_bound.violations == 0 && factorization.violations == 0 && adv_bound.violations == 0;
}

std::string BoundsLabReport::table() const {
  std::ostringstream os;
  const auto row = [&](const char* name, const TrialSummary& s) {
    os << name << "," << s.trials << "," << s.violations << ","
       << (s.violations == 0 ? "pass" : "FAIL") << "," << s.min_margin << "\n";
  };
  os << "bound,trials,violations,status,min_margin\n";
  row("std_surrogate", std_surrogate);
  row("adv_surrogate", adv_surrogate);
  row("std_error_bound", std_bound);
  row("surrogate_factorization", factorization);
  row("adv_error_bound", adv_bound);
  return os.str();
}

BoundsLabReport run_bounds_trials(int64_t trials, int64_t domain_size, int64_t ball_radius,
                                  uint64_t seed) {
  if (trials < 1 || domain_size < 1 || ball_radius < 0) {
    throw ValueError("bounds trials: invalid trial configuration");
  }
  Rng rng(seed);
  BoundsLabReport report;
  for (int64_t t = 0; t < trials; ++t) {
    std::vector<int> labels(static_cast<size_t>(domain_size));
    for (int& y : labels) y = rng.uniform() < 0.5 ? -1 : 1;
    std::vector<double> weights(static_cast<size_t>(domain_size),
                                1.0 / static_cast<double>(domain_size));
    LabeledDomain dom = LabeledDomain::index_ball(std::move(labels), std::move(weights), ball_radius);
    FiniteHypothesis h_b, h_d;
    h_b.values.resize(static_cast<size_t>(domain_size));
    h_d.values.resize(static_cast<size_t>(domain_size));
    for (double& v : h_b.values) v = rng.uniform(-3.0, 3.0);
    for (double& v : h_d.values) v = rng.uniform(-3.0, 3.0);

    const bool first = (t == 0);
    tally(report.std_surrogate, make_check(std_error(h_b, dom), exp_surrogate(h_b, dom)), first);
    tally(report.adv_surrogate, make_check(adv_error(h_b, dom), adv_surrogate(h_b, dom)), first);
    tally(report.std_bound, check_std_error_bound(h_b, h_d, dom), first);
    tally(report.factorization, check_adv_surrogate_factorization(h_b, dom), first);
    tally(report.adv_bound, check_adv_error_bound(h_b, h_d, dom), first);
  }
  return report;
}

}  // namespace dilnas
