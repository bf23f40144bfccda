#include "dilnas/attack.hpp"

#include <cmath>

#include "dilnas/rng.hpp"

namespace dilnas {

namespace {

double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Ascent step in data space; no tape involvement.
Tensor ascent_step(const Tensor& x_adv, const Tensor& grad, double step, NormOrder norm) {
  Tensor out = x_adv.detached();
  if (norm == NormOrder::LInf) {
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += step * sign0(grad.data[i]);
    return out;
  }
  double nrm = 0.0;
  for (double g : grad.data) nrm += g * g;
  nrm = std::sqrt(nrm);
  if (nrm == 0.0) return out;
  const double s = step / nrm;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += s * grad.data[i];
  return out;
}

Tensor input_gradient(const AttackLoss& loss, const Tensor& x_adv, const std::vector<int64_t>& y) {
  Tape tape;
  Tensor xw = tape.watch(x_adv);
  Tensor l = loss(xw, y);
  auto grads = tape.backward(l);
  auto it = grads.find(xw.node);
  if (it == grads.end()) return Tensor::zeros(x_adv.shape);
  return it->second.detached();
}

Tensor attack_iterations(const AttackLoss& loss, const Tensor& x, const std::vector<int64_t>& y,
                         const AttackBudget& budget, int64_t steps, double step_size) {
  budget.validate();
  Tensor x_adv = x.detached();
  if (budget.random_start && budget.epsilon > 0.0) {
    Rng rng(budget.seed);
    for (double& v : x_adv.data) v += rng.uniform(-budget.epsilon, budget.epsilon);
    x_adv = project_ball(x_adv, x, budget);
  }
  for (int64_t k = 0; k < steps; ++k) {
    const Tensor g = input_gradient(loss, x_adv, y);
    x_adv = project_ball(ascent_step(x_adv, g, step_size, budget.norm), x, budget);
  }
  return x_adv;
}

}  // namespace

void AttackBudget::validate() const {
  if (epsilon < 0.0) throw ValueError("attack budget: epsilon must be >= 0");
  if (step_size <= 0.0) throw ValueError("attack budget: step size must be > 0");
  if (steps < 1) throw ValueError("attack budget: steps must be >= 1");
  if (!(clamp_lo <= clamp_hi)) throw ValueError("attack budget: empty clamp range");
}

Tensor project_ball(const Tensor& x_adv, const Tensor& x, const AttackBudget& budget) {
  if (x_adv.shape != x.shape) {
    throw ShapeError("project_ball: shape mismatch " + shape_str(x_adv.shape) + " vs " + shape_str(x.shape));
  }
  Tensor out = x_adv.detached();
  if (budget.norm == NormOrder::LInf) {
    for (size_t i = 0; i < out.data.size(); ++i) {
      const double lo = x.data[i] - budget.epsilon;
      const double hi = x.data[i] + budget.epsilon;
      double v = std::min(std::max(out.data[i], lo), hi);
      // x +- eps rounds outward by up to an ulp; the invariant is exact
      while (std::fabs(v - x.data[i]) > budget.epsilon) v = std::nextafter(v, x.data[i]);
      out.data[i] = v;
    }
  } else {
    const auto l2_dist = [&]() {
      double nrm = 0.0;
      for (size_t i = 0; i < out.data.size(); ++i) {
        const double d = out.data[i] - x.data[i];
        nrm += d * d;
      }
      return std::sqrt(nrm);
    };
    double nrm = l2_dist();
    double shrink = budget.epsilon / nrm;
    while (nrm > budget.epsilon && nrm > 0.0) {
      for (size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = x.data[i] + (out.data[i] - x.data[i]) * shrink;
      }
      nrm = l2_dist();
      shrink = 1.0 - 1e-15;  // trim rounding overshoot
    }
  }
  // pixel clamp never grows the distance to x when x is itself in range
  for (double& v : out.data) v = std::min(std::max(v, budget.clamp_lo), budget.clamp_hi);
  return out;
}

Tensor fgsm(const AttackLoss& loss, const Tensor& x, const std::vector<int64_t>& y,
            const AttackBudget& budget) {
  AttackBudget single = budget;
  single.random_start = false;
  single.steps = 1;
  return attack_iterations(loss, x, y, single, 1, budget.epsilon);
}

Tensor pgd(const AttackLoss& loss, const Tensor& x, const std::vector<int64_t>& y,
           const AttackBudget& budget) {
  return attack_iterations(loss, x, y, budget, budget.steps, budget.step_size);
}

void free_at_epoch(const std::vector<Batch>& batches, int64_t replay_k, const AttackBudget& budget,
                   const FreeAtStep& step, Tensor& delta) {
  budget.validate();
  if (replay_k < 1) throw ValueError("free_at_epoch: replay count must be >= 1");
  if (batches.empty()) return;
  if (delta.shape.empty()) delta = Tensor::zeros(batches[0].images.shape);
  const Tensor zero_center = Tensor::zeros(delta.shape);
  for (size_t bi = 0; bi < batches.size(); ++bi) {
    const Batch& batch = batches[bi];
    if (batch.images.shape != delta.shape) {
      throw ShapeError("free_at_epoch: batch shape " + shape_str(batch.images.shape) +
                       " drifted from perturbation shape " + shape_str(delta.shape));
    }
    for (int64_t r = 0; r < replay_k; ++r) {
      Tensor x_adv = project_ball(ops::add(batch.images, delta), batch.images, budget);

      Tape tape;
      Tensor x_watched;
      Tensor loss = step.loss(tape, x_adv, batch.labels, static_cast<int64_t>(bi), x_watched);
      auto grads = tape.backward(loss);
      step.update(grads);
      auto it = grads.find(x_watched.node);
      if (it != grads.end()) {
        // FGSM-style perturbation refresh from the recycled input gradient
        delta = ascent_step(delta, it->second, budget.epsilon, budget.norm);
        AttackBudget ball = budget;
        ball.clamp_lo = -budget.epsilon;
        ball.clamp_hi = budget.epsilon;
        delta = project_ball(delta, zero_center, ball);
      }
    }
  }
}

}  // namespace dilnas
