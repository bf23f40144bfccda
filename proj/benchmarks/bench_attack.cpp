#include <benchmark/benchmark.h>

#include "dilnas/attack.hpp"
#include "dilnas/bounds.hpp"
#include "dilnas/net.hpp"

using namespace dilnas;

namespace {

void BM_PgdAttack(benchmark::State& state) {
  BackboneSpec spec;
  spec.num_blocks = 2;
  spec.layers_per_block = 1;
  spec.stem_channels = 4;
  spec.in_h = 8;
  spec.in_w = 8;
  Backbone net = build_backbone(spec, 1);
  Rng rng(2);
  Tensor x = Tensor::zeros({8, 1, 8, 8});
  for (double& v : x.data) v = rng.uniform(0.0, 1.0);
  std::vector<int64_t> labels(8, 1);
  AttackLoss loss = [&](const Tensor& xa, const std::vector<int64_t>& y) {
    return standard_loss(backbone_forward(net, xa).logits, y);
  };
  AttackBudget budget;
  budget.epsilon = 0.08;
  budget.step_size = 0.028;
  budget.steps = state.range(0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(pgd(loss, x, labels, budget));
  }
}
BENCHMARK(BM_PgdAttack)->Arg(1)->Arg(7)->Arg(20);

void BM_BoundsTrialBatch(benchmark::State& state) {
  for (auto _ : state) {
    benchmark::DoNotOptimize(run_bounds_trials(100, 64, 2, 42));
  }
  state.SetItemsProcessed(state.iterations() * 100);
}
BENCHMARK(BM_BoundsTrialBatch);

}  // namespace
