#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dilnas/attack.hpp"
#include "dilnas/flops.hpp"
#include "dilnas/net.hpp"
#include "dilnas/supernet.hpp"

namespace dilnas {

struct AdmmState {
  double lambda1 = 0.0;  // architecture constraint multiplier
  double lambda2 = 0.0;  // weight constraint multiplier
  double rho = 1.0;
  double eta1 = 3e-4;
  double eta2 = 0.025;
  std::vector<double> c1_history;
  std::vector<double> c2_history;

  std::string dump() const;
};

// max(0, lambda + rho * c): the raw multiplier ascent clamped at zero so a
// satisfied constraint cannot earn credit through a negative multiplier.
double multiplier_update(double lambda, double rho, double c);

// objective + lambda * c + (rho/2) * max(0, c)^2
Tensor augmented_lagrangian(const Tensor& objective, const Tensor& c, double lambda, double rho);
double augmented_lagrangian_value(double objective, double c, double lambda, double rho);

// Standard-loss gap between hybrid and backbone on the same clean batch.
// Differentiable through whatever tensors in `dilation` are watched.
Tensor constraint_value(const Backbone& backbone, const DilationNet& dilation, const Batch& clean);

struct SgdMomentum {
  double momentum = 0.9;
  std::vector<Tensor> velocity;

  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr);
};

struct SearchOptions {
  int64_t epochs = 8;
  int64_t batch_size = 8;
  double eta1 = 3e-4;
  double eta2 = 0.025;
  double eta2_min = 0.0;  // cosine decay floor
  double momentum = 0.9;
  double rho = 1.0;
  bool flops_scaling = true;
  double gamma = 0.0;  // <= 0 requests calibration at the starting cost
  double tau = 1.0;
  TauMode tau_mode = TauMode::PowLog;
  int64_t freeat_replay = 4;
  AttackBudget budget;
  uint64_t seed = 0;
  bool cotrain_backbone = false;
  bool resample_masks = true;
};

struct StepStats {
  double adv_loss = 0.0;
  double std_hyb = 0.0;
  double std_bck = 0.0;
  double constraint = 0.0;
  double objective = 0.0;
  double expected_flops = 0.0;
};

// One architecture update (alpha, beta share the gradient step) followed by
// the multiplier ascent on c1.
StepStats arch_step(const Backbone& backbone, DilationNet& net, AdmmState& st, const Tensor& x_adv,
                    const Batch& clean, const SearchOptions& opt, double gamma);

// One dilation-weight update followed by the multiplier ascent on c2. The
// backbone stays frozen unless `cotrain` passes a mutable reference.
StepStats weight_step(const Backbone& backbone, DilationNet& net, AdmmState& st,
                      SgdMomentum& momentum, const Tensor& x_adv, const Batch& clean,
                      const SearchOptions& opt, double lr, Backbone* cotrain = nullptr);

struct SearchMetricsRow {
  int64_t epoch = 0;
  double std_train_loss = 0.0;
  double adv_train_loss = 0.0;
  double std_valid_loss = 0.0;
  double adv_valid_loss = 0.0;
  double c1 = 0.0;
  double c2 = 0.0;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double expected_flops = 0.0;
};

struct SearchResult {
  Genotype genotype;
  std::vector<SearchMetricsRow> history;
  AdmmState admm;
  double gamma_used = 1.0;
};

// Alternating search: per epoch one gradient-recycling pass over the weight
// half updating theta_d/lambda2, then one over the arch half updating
// alpha/beta/lambda1.
SearchResult search(Backbone& backbone, DilationNet& dilation,
                    const std::vector<Batch>& weight_half, const std::vector<Batch>& arch_half,
                    const SearchOptions& opt);

// Scalar constrained minimisation with the same update rules; exercised by
// the convergence oracle.
struct ScalarConstrainedProblem {
  std::function<Tensor(const Tensor&)> objective;
  std::function<Tensor(const Tensor&)> constraint;  // feasible iff c(u) <= 0
};

struct ScalarConstrainedResult {
  double u = 0.0;
  double lambda = 0.0;
  int64_t iterations = 0;
  double min_lambda = 0.0;
  bool lambda_monotone_while_violated = true;
};

ScalarConstrainedResult minimize_constrained_scalar(const ScalarConstrainedProblem& problem,
                                                    double u0, double eta, double rho,
                                                    int64_t max_iters);

}  // namespace dilnas
