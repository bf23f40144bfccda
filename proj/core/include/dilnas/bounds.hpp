#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dilnas/rng.hpp"

namespace dilnas {

// A hypothesis on an explicit finite domain: one real score per point.
struct FiniteHypothesis {
  std::vector<double> values;

  double operator()(size_t i) const { return values[i]; }
  size_t size() const { return values.size(); }
};

FiniteHypothesis operator+(const FiniteHypothesis& a, const FiniteHypothesis& b);

// Finite weighted domain with +-1 labels and explicit perturbation
// neighborhoods; every neighborhood contains its own point.
struct LabeledDomain {
  std::vector<int> labels;                     // +1 / -1
  std::vector<double> weights;                 // sum to 1
  std::vector<std::vector<size_t>> neighbors;  // indices into the domain

  size_t size() const { return labels.size(); }
  void validate() const;

  // Neighborhoods are |i-j| <= radius in index distance.
  static LabeledDomain index_ball(std::vector<int> labels, std::vector<double> weights,
                                  int64_t radius);
  // Uniform weights, point-only neighborhoods.
  static LabeledDomain isolated(std::vector<int> labels);
};

// Misclassification mass; a zero score counts as an error.
double std_error(const FiniteHypothesis& h, const LabeledDomain& dom);

// Error mass under the worst neighbor, by exhaustive scan.
double adv_error(const FiniteHypothesis& h, const LabeledDomain& dom);

// E[exp(-y h(x))], the exponential upper bound on the standard error.
double exp_surrogate(const FiniteHypothesis& h, const LabeledDomain& dom);

// E[max_{x' in B} exp(-y h(x'))], the counterpart for the adversarial error.
double adv_surrogate(const FiniteHypothesis& h, const LabeledDomain& dom);

struct BoundCheck {
  double lhs = 0.0;
  double rhs = 0.0;
  double margin = 0.0;  // rhs - lhs; negative when violated
  bool holds = false;
};

// Standard error of the summed hypothesis against the backbone error plus the
// sign-agreement surrogate E[exp(-h_b h_d)].
BoundCheck check_std_error_bound(const FiniteHypothesis& h_b, const FiniteHypothesis& h_d,
                                 const LabeledDomain& dom);

// Factorized adversarial surrogate of a single hypothesis:
// E[max exp(-y h(x'))] against E[max exp(-y h(x)) exp(-h(x) h(x'))].
BoundCheck check_adv_surrogate_factorization(const FiniteHypothesis& h, const LabeledDomain& dom);

// Adversarial error of the summed hypothesis against the backbone standard
// error plus the neighborhood correction term.
BoundCheck check_adv_error_bound(const FiniteHypothesis& h_b, const FiniteHypothesis& h_d,
                                 const LabeledDomain& dom);

// Scores a trained classifier as a binary hypothesis on explicit inputs:
// h(x) = logit[class_a](x) - logit[class_b](x).
FiniteHypothesis hypothesis_from_logits(
    const std::function<std::vector<double>(size_t)>& logits_at, size_t count, int64_t class_a,
    int64_t class_b);

struct TrialSummary {
  int64_t trials = 0;
  int64_t violations = 0;
  double worst_margin = 0.0;  // most negative rhs - lhs observed ( <= 0 when violated)
  double min_margin = 0.0;    // smallest rhs - lhs observed
};

struct BoundsLabReport {
  TrialSummary std_surrogate;  // std_error <= exp_surrogate
  TrialSummary adv_surrogate;  // adv_error <= adv surrogate
  TrialSummary std_bound;
  TrialSummary factorization;
  TrialSummary adv_bound;

  bool all_hold() const;
  std::string table() const;
};

// Randomized trial battery: domains of `domain_size` points, hypothesis
// values uniform in [-3,3], labels uniform +-1, index-ball neighborhoods.
BoundsLabReport run_bounds_trials(int64_t trials, int64_t domain_size, int64_t ball_radius,
                                  uint64_t seed);

}  // namespace dilnas
