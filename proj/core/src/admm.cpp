#include "dilnas/admm.hpp"

#include <cmath>
#include <sstream>

namespace dilnas {

namespace {

using Binding = std::pair<Tensor*, int64_t>;

std::vector<Binding> watch_params(Tape& tape, DilationNet& original, DilationNet& copy,
                                  bool arch_instead_of_weights) {
  std::vector<Tensor*> targets;
  auto collect = [&](const std::string&, Tensor& t) { targets.push_back(&t); };
  std::vector<Binding> binds;
  size_t i = 0;
  auto watch = [&](const std::string&, Tensor& t) {
    t = tape.watch(t);
    binds.emplace_back(targets[i++], t.node);
  };
  if (arch_instead_of_weights) {
    original.visit_arch(collect);
    copy.visit_arch(watch);
  } else {
    original.visit_params(collect);
    copy.visit_params(watch);
  }
  return binds;
}

std::vector<Binding> watch_backbone(Tape& tape, Backbone& original, Backbone& copy) {
  std::vector<Tensor*> targets;
  original.visit_params([&](const std::string&, Tensor& t) { targets.push_back(&t); });
  std::vector<Binding> binds;
  size_t i = 0;
  copy.visit_params([&](const std::string&, Tensor& t) {
    t = tape.watch(t);
    binds.emplace_back(targets[i++], t.node);
  });
  return binds;
}

void check_grad_finite(const Tensor& g, const char* what) {
  for (double v : g.data) {
    if (!std::isfinite(v)) {
      throw DivergenceError(std::string(what) + ": non-finite gradient, step aborted");
    }
  }
}

std::vector<Tensor> collect_grads(const std::unordered_map<int64_t, Tensor>& grads,
                                  const std::vector<Binding>& binds, const char* what) {
  std::vector<Tensor> out;
  out.reserve(binds.size());
  for (const Binding& b : binds) {
    auto it = grads.find(b.second);
    if (it == grads.end()) {
      out.push_back(Tensor::zeros(b.first->shape));
    } else {
      check_grad_finite(it->second, what);
      out.push_back(it->second.detached());
    }
  }
  return out;
}

void apply_plain_step(const std::vector<Binding>& binds, const std::vector<Tensor>& grads,
                      double eta) {
  for (size_t i = 0; i < binds.size(); ++i) {
    Tensor& p = *binds[i].first;
    for (size_t k = 0; k < p.data.size(); ++k) p.data[k] -= eta * grads[i].data[k];
  }
}

struct ArchObjective {
  Tensor objective;
  StepStats stats;
};

ArchObjective build_arch_objective(const Backbone& backbone, const DilationNet& watched,
                                   const Tensor& x_adv, const std::vector<int64_t>& labels,
                                   const Batch& clean, const AdmmState& st, const SearchOptions& opt,
                                   double gamma) {
  ArchObjective out;
  Tensor adv_loss = standard_loss(hybrid_forward(backbone, watched, x_adv).logits, labels);
  Tensor scaled = adv_loss;
  out.stats.expected_flops = expected_dilation_flops_value(watched);
  if (opt.flops_scaling) {
    Tensor flops = expected_dilation_flops(watched);
    scaled = flops_scaled_loss(flops, adv_loss, gamma, opt.tau, opt.tau_mode);
  }
  Tensor c1 = constraint_value(backbone, watched, clean);
  out.objective = augmented_lagrangian(scaled, c1, st.lambda1, st.rho);
  out.stats.adv_loss = adv_loss.item();
  out.stats.constraint = c1.item();
  out.stats.objective = out.objective.item();
  return out;
}

struct WeightObjective {
  Tensor objective;
  StepStats stats;
};

WeightObjective build_weight_objective(const Backbone& backbone, const DilationNet& watched,
                                       const Tensor& x_adv, const std::vector<int64_t>& labels,
                                       const Batch& clean, const AdmmState& st) {
  WeightObjective out;
  Tensor adv_loss = standard_loss(hybrid_forward(backbone, watched, x_adv).logits, labels);
  Tensor c2 = constraint_value(backbone, watched, clean);
  out.objective = augmented_lagrangian(adv_loss, c2, st.lambda2, st.rho);
  out.stats.adv_loss = adv_loss.item();
  out.stats.constraint = c2.item();
  out.stats.objective = out.objective.item();
  return out;
}

double cosine_lr(double lr0, double lr_min, int64_t epoch, int64_t total_epochs) {
  if (total_epochs <= 1) return lr0;
  const double t = static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(3.14159265358979323846 * t));
}

}  // namespace

std::string AdmmState::dump() const {
  std::ostringstream os;
  os << "lambda1=" << lambda1 << " lambda2=" << lambda2 << " rho=" << rho << " eta1=" << eta1
     << " eta2=" << eta2 << " steps_c1=" << c1_history.size() << " steps_c2=" << c2_history.size();
  if (!c1_history.empty()) os << " last_c1=" << c1_history.back();
  if (!c2_history.empty()) os << " last_c2=" << c2_history.back();
  return os.str();
}

double multiplier_update(double lambda, double rho, double c) {
  return std::max(0.0, lambda + rho * c);
}

Tensor augmented_lagrangian(const Tensor& objective, const Tensor& c, double lambda, double rho) {
  if (rho <= 0.0) throw ValueError("augmented_lagrangian: rho must be positive");
  if (objective.numel() != 1 || c.numel() != 1) {
    throw ShapeError("augmented_lagrangian: objective and constraint must be scalars");
  }
  Tensor relu_c = ops::relu(c);
  Tensor penalty = ops::scale(ops::mul(relu_c, relu_c), 0.5 * rho);
  return ops::add(ops::add(objective, ops::scale(c, lambda)), penalty);
}

double augmented_lagrangian_value(double objective, double c, double lambda, double rho) {
  const double hinge = std::max(0.0, c);
  return objective + lambda * c + 0.5 * rho * hinge * hinge;
}

Tensor constraint_value(const Backbone& backbone, const DilationNet& dilation, const Batch& clean) {
  Tensor hyb_loss = standard_loss(hybrid_forward(backbone, dilation, clean.images).logits, clean.labels);
  Tensor bck_loss = standard_loss(backbone_forward(backbone, clean.images).logits, clean.labels);
  return ops::sub(hyb_loss, bck_loss.detached());
}

void SgdMomentum::step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                       double lr) {
  if (velocity.empty()) {
    for (const Tensor* p : params) velocity.push_back(Tensor::zeros(p->shape));
  }
  if (velocity.size() != params.size()) throw ValueError("sgd: parameter set changed mid-run");
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& v = velocity[i];
    Tensor& p = *params[i];
    for (size_t k = 0; k < p.data.size(); ++k) {
      v.data[k] = momentum * v.data[k] + grads[i].data[k];
      p.data[k] -= lr * v.data[k];
    }
  }
}

StepStats arch_step(const Backbone& backbone, DilationNet& net, AdmmState& st, const Tensor& x_adv,
                    const Batch& clean, const SearchOptions& opt, double gamma) {
  Tape tape;
  DilationNet watched = net;
  std::vector<Binding> binds = watch_params(tape, net, watched, /*arch=*/true);
  ArchObjective obj = build_arch_objective(backbone, watched, x_adv, clean.labels, clean, st, opt, gamma);
  auto grads = tape.backward(obj.objective);
  apply_plain_step(binds, collect_grads(grads, binds, "arch_step"), opt.eta1);
  st.lambda1 = multiplier_update(st.lambda1, st.rho, obj.stats.constraint);
  st.c1_history.push_back(obj.stats.constraint);
  return obj.stats;
}

StepStats weight_step(const Backbone& backbone, DilationNet& net, AdmmState& st,
                      SgdMomentum& momentum, const Tensor& x_adv, const Batch& clean,
                      const SearchOptions& opt, double lr, Backbone* cotrain) {
  Tape tape;
  DilationNet watched = net;
  std::vector<Binding> binds = watch_params(tape, net, watched, /*arch=*/false);
  Backbone watched_backbone;
  const Backbone* fwd_backbone = &backbone;
  if (cotrain != nullptr) {
    watched_backbone = *cotrain;
    auto extra = watch_backbone(tape, *cotrain, watched_backbone);
    binds.insert(binds.end(), extra.begin(), extra.end());
    fwd_backbone = &watched_backbone;
  }
  WeightObjective obj = build_weight_objective(*fwd_backbone, watched, x_adv, clean.labels, clean, st);
  auto grads = tape.backward(obj.objective);
  std::vector<Tensor*> targets;
  for (const Binding& b : binds) targets.push_back(b.first);
  momentum.step(targets, collect_grads(grads, binds, "weight_step"), lr);
  st.lambda2 = multiplier_update(st.lambda2, st.rho, obj.stats.constraint);
  st.c2_history.push_back(obj.stats.constraint);
  return obj.stats;
}

SearchResult search(Backbone& backbone, DilationNet& dilation,
                    const std::vector<Batch>& weight_half, const std::vector<Batch>& arch_half,
                    const SearchOptions& opt) {
  if (opt.epochs < 0) throw ValueError("search: negative epoch count");
  SearchResult result;
  AdmmState st;
  st.rho = opt.rho;
  st.eta1 = opt.eta1;
  st.eta2 = opt.eta2;
  SgdMomentum momentum;
  momentum.momentum = opt.momentum;
  Rng mask_rng = Rng(opt.seed).fork(0x6d61736bULL);
  Tensor delta_w, delta_a;  // persistent perturbations, one per split
  double gamma = opt.gamma;
  bool gamma_ready = opt.gamma > 0.0 || !opt.flops_scaling;

  try {
    for (int64_t epoch = 0; epoch < opt.epochs; ++epoch) {
      if (opt.resample_masks) sample_channel_masks(dilation, mask_rng.next_u64());
      if (!gamma_ready) {
        gamma = calibrate_gamma(expected_dilation_flops_value(dilation), opt.tau, opt.tau_mode);
        gamma_ready = true;
      }
      const double lr = cosine_lr(opt.eta2, opt.eta2_min, epoch, opt.epochs);

      SearchMetricsRow row;
      row.epoch = epoch;
      int64_t w_steps = 0, a_steps = 0;

      // weight pass over the training half
      FreeAtStep wstep;
      StepStats wstats;
      std::vector<Binding> wbinds;
      wstep.loss = [&](Tape& tape, const Tensor& x_adv, const std::vector<int64_t>& y,
                       int64_t batch_index, Tensor& x_watched) {
        DilationNet watched = dilation;
        wbinds = watch_params(tape, dilation, watched, /*arch=*/false);
        std::vector<Binding> extra;
        Backbone watched_backbone;
        const Backbone* fwd = &backbone;
        if (opt.cotrain_backbone) {
          watched_backbone = backbone;
          extra = watch_backbone(tape, backbone, watched_backbone);
          wbinds.insert(wbinds.end(), extra.begin(), extra.end());
          fwd = &watched_backbone;
        }
        x_watched = tape.watch(x_adv);
        const Batch& clean = weight_half[static_cast<size_t>(batch_index)];
        WeightObjective obj = build_weight_objective(*fwd, watched, x_watched, y, clean, st);
        wstats = obj.stats;
        // the clean std loss of the hybrid is the bck loss plus the gap
        Tensor bck_logits = backbone_forward(*fwd, clean.images).logits;
        wstats.std_bck = standard_loss(bck_logits.detached(), clean.labels).item();
        wstats.std_hyb = wstats.std_bck + wstats.constraint;
        return obj.objective;
      };
      wstep.update = [&](const std::unordered_map<int64_t, Tensor>& grads) {
        std::vector<Tensor*> targets;
        for (const Binding& b : wbinds) targets.push_back(b.first);
        momentum.step(targets, collect_grads(grads, wbinds, "weight_step"), lr);
        st.lambda2 = multiplier_update(st.lambda2, st.rho, wstats.constraint);
        st.c2_history.push_back(wstats.constraint);
        row.std_train_loss += wstats.std_hyb;
        row.adv_train_loss += wstats.adv_loss;
        row.c2 += wstats.constraint;
        ++w_steps;
      };
      free_at_epoch(weight_half, opt.freeat_replay, opt.budget, wstep, delta_w);

      // architecture pass over the validation half
      FreeAtStep astep;
      StepStats astats;
      std::vector<Binding> abinds;
      astep.loss = [&](Tape& tape, const Tensor& x_adv, const std::vector<int64_t>& y,
                       int64_t batch_index, Tensor& x_watched) {
        DilationNet watched = dilation;
        abinds = watch_params(tape, dilation, watched, /*arch=*/true);
        x_watched = tape.watch(x_adv);
        const Batch& clean = arch_half[static_cast<size_t>(batch_index)];
        ArchObjective obj =
            build_arch_objective(backbone, watched, x_watched, y, clean, st, opt, gamma);
        astats = obj.stats;
        Tensor bck_logits = backbone_forward(backbone, clean.images).logits;
        astats.std_bck = standard_loss(bck_logits.detached(), clean.labels).item();
        astats.std_hyb = astats.std_bck + astats.constraint;
        return obj.objective;
      };
      astep.update = [&](const std::unordered_map<int64_t, Tensor>& grads) {
        apply_plain_step(abinds, collect_grads(grads, abinds, "arch_step"), opt.eta1);
        st.lambda1 = multiplier_update(st.lambda1, st.rho, astats.constraint);
        st.c1_history.push_back(astats.constraint);
        row.std_valid_loss += astats.std_hyb;
        row.adv_valid_loss += astats.adv_loss;
        row.c1 += astats.constraint;
        ++a_steps;
      };
      free_at_epoch(arch_half, opt.freeat_replay, opt.budget, astep, delta_a);

      if (w_steps > 0) {
        row.std_train_loss /= static_cast<double>(w_steps);
        row.adv_train_loss /= static_cast<double>(w_steps);
        row.c2 /= static_cast<double>(w_steps);
      }
      if (a_steps > 0) {
        row.std_valid_loss /= static_cast<double>(a_steps);
        row.adv_valid_loss /= static_cast<double>(a_steps);
        row.c1 /= static_cast<double>(a_steps);
      }
      row.lambda1 = st.lambda1;
      row.lambda2 = st.lambda2;
      row.expected_flops = expected_dilation_flops_value(dilation);
      result.history.push_back(row);
    }
  } catch (const NumericError& e) {
    throw DivergenceError(std::string("search diverged: ") + e.what(), st.dump());
  } catch (const DivergenceError& e) {
    throw DivergenceError(e.what(), e.state.empty() ? st.dump() : e.state);
  }

  if (dilation.split_arch) {
    // per-block states vote through their mean logits; one shared genotype
    // keeps the discrete network format uniform
    CellArch consensus = CellArch::make(dilation.arch.spec);
    const double inv = 1.0 / static_cast<double>(dilation.block_arch.size());
    for (const CellArch& block : dilation.block_arch) {
      for (size_t i = 0; i < consensus.alpha.data.size(); ++i) {
        consensus.alpha.data[i] += inv * block.alpha.data[i];
      }
      for (size_t i = 0; i < consensus.beta.data.size(); ++i) {
        consensus.beta.data[i] += inv * block.beta.data[i];
      }
    }
    result.genotype = discretize(consensus);
  } else {
    result.genotype = discretize(dilation.arch);
  }
  result.genotype.cells_per_block = dilation.cells_per_block;
  result.genotype.reduction_roles.assign(static_cast<size_t>(dilation.cells_per_block), false);
  if (!result.genotype.reduction_roles.empty()) result.genotype.reduction_roles[0] = true;
  result.admm = st;
  result.gamma_used = gamma_ready && opt.flops_scaling ? gamma : 1.0;
  return result;
}

ScalarConstrainedResult minimize_constrained_scalar(const ScalarConstrainedProblem& problem,
                                                    double u0, double eta, double rho,
                                                    int64_t max_iters) {
  ScalarConstrainedResult res;
  double u = u0;
  double lambda = 0.0;
  res.min_lambda = 0.0;
  for (int64_t it = 0; it < max_iters; ++it) {
    Tape tape;
    Tensor ut = tape.watch(Tensor::scalar(u));
    Tensor c = problem.constraint(ut);
    Tensor lag = augmented_lagrangian(problem.objective(ut), c, lambda, rho);
    auto grads = tape.backward(lag);
    const double g = grads.at(ut.node).item();
    const double c_val = c.item();
    u -= eta * g;
    const double next_lambda = multiplier_update(lambda, rho, c_val);
    if (c_val > 0.0 && next_lambda < lambda) res.lambda_monotone_while_violated = false;
    lambda = next_lambda;
    res.min_lambda = std::min(res.min_lambda, lambda);
    res.iterations = it + 1;
  }
  res.u = u;
  res.lambda = lambda;
  return res;
}

}  // namespace dilnas
