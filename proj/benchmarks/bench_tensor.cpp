#include <benchmark/benchmark.h>

#include "dilnas/rng.hpp"
#include "dilnas/tensor.hpp"

using namespace dilnas;

namespace {

Tensor random_tensor(Shape shape, uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

void BM_Conv2dForward(benchmark::State& state) {
  const int64_t c = state.range(0);
  Tensor x = random_tensor({8, c, 8, 8}, 1);
  Tensor w = random_tensor({c, c, 3, 3}, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ops::conv2d(x, w, 1, 1));
  }
  state.SetItemsProcessed(state.iterations() * 8 * c * c * 8 * 8 * 9);
}
BENCHMARK(BM_Conv2dForward)->Arg(4)->Arg(8)->Arg(16);

void BM_Conv2dBackward(benchmark::State& state) {
  const int64_t c = state.range(0);
  Tensor x = random_tensor({8, c, 8, 8}, 3);
  Tensor w = random_tensor({c, c, 3, 3}, 4);
  for (auto _ : state) {
    Tape tape;
    Tensor ww = tape.watch(w);
    Tensor loss = ops::mean(ops::conv2d(x, ww, 1, 1));
    benchmark::DoNotOptimize(tape.backward(loss));
  }
}
BENCHMARK(BM_Conv2dBackward)->Arg(4)->Arg(8);

void BM_DepthwiseConv(benchmark::State& state) {
  const int64_t c = state.range(0);
  Tensor x = random_tensor({8, c, 8, 8}, 5);
  Tensor w = random_tensor({c, 1, 3, 3}, 6);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ops::conv2d(x, w, 1, 1, 1, c));
  }
}
BENCHMARK(BM_DepthwiseConv)->Arg(8)->Arg(16);

void BM_Softmax(benchmark::State& state) {
  Tensor x = random_tensor({64, 8}, 7);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ops::softmax(x));
  }
}
BENCHMARK(BM_Softmax);

}  // namespace

BENCHMARK_MAIN();
