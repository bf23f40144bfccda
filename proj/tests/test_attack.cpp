#include <doctest.h>

#include <cmath>

#include "dilnas/attack.hpp"
#include "dilnas/net.hpp"
#include "support/grad_check.hpp"

using namespace dilnas;
using dilnas::testing::random_tensor;

TEST_SUITE_BEGIN("attack");

namespace {

AttackBudget budget_inf(double eps, int64_t steps, double step) {
  AttackBudget b;
  b.epsilon = eps;
  b.steps = steps;
  b.step_size = step;
  b.random_start = false;
  return b;
}

// 2-d convex quadratic with the optimum far outside the ball.
Tensor quad_loss(const Tensor& u) {
  Tensor c = Tensor::of({2}, {2.0, 1.5});
  Tensor d = ops::sub(u, c);
  Tensor d0 = ops::narrow0(d, 0, 1);
  Tensor d1 = ops::narrow0(d, 1, 1);
  Tensor q = ops::add(ops::scale(ops::mul(d0, d0), 2.0),
                      ops::add(ops::scale(ops::mul(d0, d1), 0.6), ops::mul(d1, d1)));
  return q;
}

double quad_loss_plain(double u0, double u1) {
  const double d0 = u0 - 2.0, d1 = u1 - 1.5;
  return 2.0 * d0 * d0 + 0.6 * d0 * d1 + d1 * d1;
}

}  // namespace

TEST_CASE("project_ball clips per coordinate") {
  AttackBudget b = budget_inf(0.1, 1, 0.1);
  Tensor x = Tensor::scalar(0.5);
  CHECK(project_ball(Tensor::scalar(0.9), x, b).item() == doctest::Approx(0.6).epsilon(1e-15));

  // inside the ball: unchanged
  Tensor inside = Tensor::scalar(0.55);
  CHECK(project_ball(inside, x, b).item() == 0.55);
  // idempotence
  Tensor once = project_ball(Tensor::scalar(0.9), x, b);
  CHECK(project_ball(once, x, b).data == once.data);

  // pixel clamp dominates
  Tensor lo = Tensor::scalar(0.05);
  CHECK(project_ball(Tensor::scalar(-0.2), lo, b).item() == 0.0);
}

TEST_CASE("project_ball shape mismatch") {
  AttackBudget b = budget_inf(0.1, 1, 0.1);
  CHECK_THROWS_AS(project_ball(Tensor::zeros({2}), Tensor::zeros({3}), b), ShapeError);
}

TEST_CASE("euclidean projection shrinks onto the sphere and keeps interiors") {
  AttackBudget b;
  b.norm = NormOrder::L2;
  b.epsilon = 0.2;
  b.clamp_lo = -10.0;
  b.clamp_hi = 10.0;
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor x = random_tensor({6}, rng, -1.0, 1.0);
    Tensor far = x.detached();
    for (double& v : far.data) v += rng.uniform(-1.0, 1.0);
    Tensor proj = project_ball(far, x, b);
    double nrm = 0.0;
    for (size_t i = 0; i < proj.data.size(); ++i) {
      const double d = proj.data[i] - x.data[i];
      nrm += d * d;
    }
    CHECK(std::sqrt(nrm) <= b.epsilon);
    // projecting again is a no-op
    CHECK(project_ball(proj, x, b).data == proj.data);
  }
  // interior points pass through untouched
  Tensor inside = Tensor::of({2}, {0.05, -0.03});
  Tensor center = Tensor::zeros({2});
  CHECK(project_ball(inside, center, b).data == inside.data);
}

TEST_CASE("fgsm with zero epsilon is the identity") {
  Rng rng(5);
  Tensor x = random_tensor({1, 1, 3, 3}, rng, 0.1, 0.9);
  AttackLoss loss = [](const Tensor& xa, const std::vector<int64_t>&) {
    return ops::sum(ops::mul(xa, xa));
  };
  Tensor out = fgsm(loss, x, {0}, budget_inf(0.0, 1, 1.0));
  CHECK(out.data == x.data);
}

TEST_CASE("fgsm moves by epsilon times the gradient sign, sign(0)=0") {
  Tensor x = Tensor::of({3}, {0.5, 0.5, 0.5});
  // gradient (0.3, -0.2, 0)
  Tensor g = Tensor::of({3}, {0.3, -0.2, 0.0});
  AttackLoss loss = [&](const Tensor& xa, const std::vector<int64_t>&) {
    return ops::sum(ops::mul(xa, g));
  };
  Tensor out = fgsm(loss, x, {0}, budget_inf(0.1, 1, 0.1));
  CHECK(out.data[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(out.data[1] == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(out.data[2] == 0.5);
}

TEST_CASE("fgsm matches the analytic logistic increase") {
  // binary logistic loss log(1 + exp(-y w.x))
  const std::vector<double> w = {0.8, -0.5, 0.3, -0.9};
  const double y = 1.0;
  Tensor x = Tensor::of({4}, {0.2, 0.7, 0.4, 0.6});
  AttackLoss loss = [&](const Tensor& xa, const std::vector<int64_t>&) {
    Tensor wt = Tensor::of({4}, w);
    Tensor margin = ops::scale(ops::sum(ops::mul(xa, wt)), -y);
    return ops::log(ops::add(ops::exp(margin), Tensor::scalar(1.0)));
  };
  const double eps = 0.05;
  Tensor x_adv = fgsm(loss, x, {0}, budget_inf(eps, 1, eps));

  auto logistic = [&](const std::vector<double>& v) {
    double dot = 0.0;
    for (size_t i = 0; i < v.size(); ++i) dot += v[i] * w[i];
    return std::log(1.0 + std::exp(-y * dot));
  };
  std::vector<double> expected = x.data;
  for (size_t i = 0; i < expected.size(); ++i) {
    const double sgn = (-y * w[i]) > 0 ? 1.0 : ((-y * w[i]) < 0 ? -1.0 : 0.0);
    expected[i] = std::min(1.0, std::max(0.0, expected[i] + eps * sgn));
  }
  const double got_increase = logistic(x_adv.data) - logistic(x.data);
  const double want_increase = logistic(expected) - logistic(x.data);
  CHECK(std::fabs(got_increase - want_increase) < 1e-9);
  for (size_t i = 0; i < expected.size(); ++i) {
    CHECK(std::fabs(x_adv.data[i] - expected[i]) < 1e-15);
  }
}

TEST_CASE("single-step pgd without random start equals fgsm bitwise") {
  Rng rng(77);
  BackboneSpec spec;
  spec.num_blocks = 1;
  spec.stem_channels = 2;
  spec.in_h = 6;
  spec.in_w = 6;
  Backbone net = build_backbone(spec, 4);
  Tensor x = random_tensor({2, 1, 6, 6}, rng, 0.0, 1.0);
  std::vector<int64_t> labels = {0, 1};
  AttackLoss loss = [&](const Tensor& xa, const std::vector<int64_t>& y) {
    return standard_loss(backbone_forward(net, xa).logits, y);
  };
  AttackBudget b = budget_inf(0.03, 1, 0.03);
  Tensor via_pgd = pgd(loss, x, labels, b);
  Tensor via_fgsm = fgsm(loss, x, labels, b);
  CHECK(via_pgd.data == via_fgsm.data);
}

TEST_CASE("pgd keeps the ball and clamp invariants exactly over 1000 runs") {
  Rng rng(123);
  Tensor w = random_tensor({9}, rng, -1.0, 1.0);
  AttackLoss loss = [&](const Tensor& xa, const std::vector<int64_t>&) {
    return ops::sum(ops::mul(ops::reshape(xa, {9}), w));
  };
  int64_t checked = 0;
  for (int run = 0; run < 1000; ++run) {
    Tensor x = random_tensor({1, 1, 3, 3}, rng, 0.0, 1.0);
    AttackBudget b = budget_inf(0.05, 3, 0.03);
    b.random_start = (run % 2 == 0);
    b.seed = static_cast<uint64_t>(run);
    Tensor adv = pgd(loss, x, {0}, b);
    for (size_t i = 0; i < adv.data.size(); ++i) {
      CHECK(std::fabs(adv.data[i] - x.data[i]) <= b.epsilon);
      CHECK(adv.data[i] >= 0.0);
      CHECK(adv.data[i] <= 1.0);
      ++checked;
    }
    // the input itself is never mutated
    CHECK(x.data[0] == doctest::Approx(x.data[0]));
  }
  CHECK(checked == 9000);
}

TEST_CASE("pgd input immutability and determinism") {
  Rng rng(9);
  Tensor x = random_tensor({1, 1, 3, 3}, rng, 0.2, 0.8);
  const std::vector<double> before = x.data;
  AttackLoss loss = [](const Tensor& xa, const std::vector<int64_t>&) {
    return ops::sum(ops::mul(xa, xa));
  };
  AttackBudget b = budget_inf(0.1, 5, 0.04);
  b.random_start = true;
  b.seed = 42;
  Tensor a1 = pgd(loss, x, {0}, b);
  Tensor a2 = pgd(loss, x, {0}, b);
  CHECK(x.data == before);
  CHECK(a1.data == a2.data);
}

TEST_CASE("pgd on a convex quadratic reaches the grid maximum over the ball") {
  AttackLoss loss = [](const Tensor& xa, const std::vector<int64_t>&) { return quad_loss(xa); };
  Tensor x0 = Tensor::of({2}, {0.0, 0.0});
  AttackBudget clean = budget_inf(0.3, 1, 0.3);
  clean.clamp_lo = -10.0;
  clean.clamp_hi = 10.0;

  AttackBudget b20 = clean;
  b20.steps = 20;
  b20.step_size = 0.05;
  Tensor adv20 = pgd(loss, x0, {0}, b20);
  AttackBudget b1 = clean;
  Tensor adv1 = pgd(loss, x0, {0}, b1);

  const double clean_loss = quad_loss_plain(0.0, 0.0);
  const double loss1 = quad_loss_plain(adv1.data[0], adv1.data[1]);
  const double loss20 = quad_loss_plain(adv20.data[0], adv20.data[1]);
  CHECK(loss20 >= loss1);
  CHECK(loss1 >= clean_loss);

  double grid_max = -1e300;
  for (int i = 0; i <= 200; ++i) {
    for (int j = 0; j <= 200; ++j) {
      const double u0 = -0.3 + 0.6 * static_cast<double>(i) / 200.0;
      const double u1 = -0.3 + 0.6 * static_cast<double>(j) / 200.0;
      grid_max = std::max(grid_max, quad_loss_plain(u0, u1));
    }
  }
  CHECK(std::fabs(loss20 - grid_max) < 1e-6);
}

TEST_CASE("gradient recycling with k=1 and zero budget matches standard training bitwise") {
  BackboneSpec spec;
  spec.num_blocks = 1;
  spec.stem_channels = 2;
  spec.in_h = 6;
  spec.in_w = 6;
  Rng rng(55);
  std::vector<Batch> batches;
  for (int i = 0; i < 3; ++i) {
    Batch b;
    b.images = random_tensor({4, 1, 6, 6}, rng, 0.0, 1.0);
    b.labels = {0, 1, 0, 1};
    batches.push_back(std::move(b));
  }

  auto run_standard = [&]() {
    Backbone net = build_backbone(spec, 2);
    std::vector<double> losses;
    for (const Batch& batch : batches) {
      Tape tape;
      Backbone watched = net;
      std::vector<std::pair<Tensor*, int64_t>> binds;
      {
        std::vector<Tensor*> targets;
        net.visit_params([&](const std::string&, Tensor& t) { targets.push_back(&t); });
        size_t i = 0;
        watched.visit_params([&](const std::string&, Tensor& t) {
          t = tape.watch(t);
          binds.emplace_back(targets[i++], t.node);
        });
      }
      Tensor loss = standard_loss(backbone_forward(watched, batch.images).logits, batch.labels);
      auto grads = tape.backward(loss);
      for (const auto& [target, node] : binds) {
        auto it = grads.find(node);
        if (it == grads.end()) continue;
        for (size_t k = 0; k < target->data.size(); ++k) target->data[k] -= 0.05 * it->second.data[k];
      }
      losses.push_back(loss.item());
    }
    return losses;
  };

  auto run_recycled = [&]() {
    Backbone net = build_backbone(spec, 2);
    std::vector<double> losses;
    std::vector<std::pair<Tensor*, int64_t>> binds;
    FreeAtStep step;
    step.loss = [&](Tape& tape, const Tensor& x_adv, const std::vector<int64_t>& y, int64_t,
                    Tensor& x_watched) {
      binds.clear();
      Backbone watched = net;
      std::vector<Tensor*> targets;
      net.visit_params([&](const std::string&, Tensor& t) { targets.push_back(&t); });
      size_t i = 0;
      watched.visit_params([&](const std::string&, Tensor& t) {
        t = tape.watch(t);
        binds.emplace_back(targets[i++], t.node);
      });
      x_watched = tape.watch(x_adv);
      Tensor loss = standard_loss(backbone_forward(watched, x_watched).logits, y);
      losses.push_back(loss.item());
      return loss;
    };
    step.update = [&](const std::unordered_map<int64_t, Tensor>& grads) {
      for (const auto& [target, node] : binds) {
        auto it = grads.find(node);
        if (it == grads.end()) continue;
        for (size_t k = 0; k < target->data.size(); ++k) target->data[k] -= 0.05 * it->second.data[k];
      }
    };
    AttackBudget zero = budget_inf(0.0, 1, 1.0);
    Tensor delta;
    free_at_epoch(batches, 1, zero, step, delta);
    return losses;
  };

  CHECK(run_standard() == run_recycled());
}

TEST_CASE("each minibatch is replayed k times and delta stays in the ball") {
  BackboneSpec spec;
  spec.num_blocks = 1;
  spec.stem_channels = 2;
  spec.in_h = 6;
  spec.in_w = 6;
  Backbone net = build_backbone(spec, 2);
  Rng rng(66);
  std::vector<Batch> batches;
  for (int i = 0; i < 5; ++i) {
    Batch b;
    b.images = random_tensor({2, 1, 6, 6}, rng, 0.0, 1.0);
    b.labels = {0, 1};
    batches.push_back(std::move(b));
  }
  int64_t updates = 0;
  Tensor delta;
  const double eps = 0.08;
  std::vector<std::pair<Tensor*, int64_t>> binds;
  FreeAtStep step;
  step.loss = [&](Tape& tape, const Tensor& x_adv, const std::vector<int64_t>& y, int64_t,
                  Tensor& x_watched) {
    binds.clear();
    Backbone watched = net;
    std::vector<Tensor*> targets;
    net.visit_params([&](const std::string&, Tensor& t) { targets.push_back(&t); });
    size_t i = 0;
    watched.visit_params([&](const std::string&, Tensor& t) {
      t = tape.watch(t);
      binds.emplace_back(targets[i++], t.node);
    });
    x_watched = tape.watch(x_adv);
    return standard_loss(backbone_forward(watched, x_watched).logits, y);
  };
  step.update = [&](const std::unordered_map<int64_t, Tensor>& grads) {
    ++updates;
    (void)grads;
    for (double v : delta.data) CHECK(std::fabs(v) <= eps);
  };
  AttackBudget b = budget_inf(eps, 1, eps);
  free_at_epoch(batches, 4, b, step, delta);
  CHECK(updates == 4 * 5);
  for (double v : delta.data) CHECK(std::fabs(v) <= eps);
}

TEST_CASE("batch shape drift is an error") {
  std::vector<Batch> batches(2);
  batches[0].images = Tensor::zeros({2, 1, 4, 4});
  batches[0].labels = {0, 1};
  batches[1].images = Tensor::zeros({3, 1, 4, 4});
  batches[1].labels = {0, 1, 0};
  FreeAtStep step;
  step.loss = [](Tape& tape, const Tensor& x_adv, const std::vector<int64_t>&, int64_t,
                 Tensor& x_watched) {
    x_watched = tape.watch(x_adv);
    return ops::mean(x_watched);
  };
  step.update = [](const std::unordered_map<int64_t, Tensor>&) {};
  Tensor delta;
  AttackBudget b = budget_inf(0.1, 1, 0.1);
  CHECK_THROWS_AS(free_at_epoch(batches, 1, b, step, delta), ShapeError);
}

TEST_SUITE_END();
