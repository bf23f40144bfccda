#include <benchmark/benchmark.h>

#include "dilnas/flops.hpp"
#include "dilnas/supernet.hpp"

using namespace dilnas;

namespace {

BackboneSpec bench_spec() {
  BackboneSpec spec;
  spec.num_blocks = 2;
  spec.layers_per_block = 2;
  spec.stem_channels = 4;
  spec.in_h = 8;
  spec.in_w = 8;
  return spec;
}

Tensor bench_images(int64_t n) {
  Rng rng(10);
  Tensor x = Tensor::zeros({n, 1, 8, 8});
  for (double& v : x.data) v = rng.uniform(0.0, 1.0);
  return x;
}

void BM_HybridForward(benchmark::State& state) {
  const BackboneSpec spec = bench_spec();
  Backbone backbone = build_backbone(spec, 1);
  CellArchSpec arch;  // full 8-op, 4-node cell
  DilationNet net = build_dilation(spec, arch, state.range(0), false, 2);
  Tensor x = bench_images(8);
  for (auto _ : state) {
    benchmark::DoNotOptimize(hybrid_forward(backbone, net, x));
  }
}
BENCHMARK(BM_HybridForward)->Arg(1)->Arg(2);

void BM_HybridForwardBackward(benchmark::State& state) {
  const BackboneSpec spec = bench_spec();
  Backbone backbone = build_backbone(spec, 3);
  CellArchSpec arch;
  DilationNet net = build_dilation(spec, arch, 1, false, 4);
  Tensor x = bench_images(8);
  std::vector<int64_t> labels(8, 0);
  for (auto _ : state) {
    Tape tape;
    DilationNet watched = net;
    watched.arch.alpha = tape.watch(watched.arch.alpha);
    watched.arch.beta = tape.watch(watched.arch.beta);
    Tensor loss = standard_loss(hybrid_forward(backbone, watched, x).logits, labels);
    benchmark::DoNotOptimize(tape.backward(loss));
  }
}
BENCHMARK(BM_HybridForwardBackward);

void BM_DiscreteHybridForward(benchmark::State& state) {
  const BackboneSpec spec = bench_spec();
  Backbone backbone = build_backbone(spec, 5);
  CellArchSpec arch;
  Genotype geno = discretize(CellArch::make(arch));
  DiscreteDilationNet net = build_discrete_dilation(spec, geno, 2, 6);
  Tensor x = bench_images(8);
  for (auto _ : state) {
    benchmark::DoNotOptimize(hybrid_forward_discrete(backbone, net, x));
  }
}
BENCHMARK(BM_DiscreteHybridForward);

void BM_ExpectedFlops(benchmark::State& state) {
  const BackboneSpec spec = bench_spec();
  CellArchSpec arch;
  DilationNet net = build_dilation(spec, arch, 3, false, 7);
  for (auto _ : state) {
    benchmark::DoNotOptimize(expected_dilation_flops_value(net));
  }
}
BENCHMARK(BM_ExpectedFlops);

void BM_Discretize(benchmark::State& state) {
  CellArchSpec spec;
  CellArch arch = CellArch::make(spec);
  Rng rng(8);
  for (double& v : arch.alpha.data) v = rng.uniform(-2.0, 2.0);
  for (double& v : arch.beta.data) v = rng.uniform(-2.0, 2.0);
  for (auto _ : state) {
    benchmark::DoNotOptimize(discretize(arch));
  }
}
BENCHMARK(BM_Discretize);

}  // namespace
