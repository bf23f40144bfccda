#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "dilnas/net.hpp"
#include "dilnas/tensor.hpp"

namespace dilnas {

enum class NormOrder { LInf, L2 };

struct AttackBudget {
  NormOrder norm = NormOrder::LInf;
  double epsilon = 8.0 / 255.0;
  int64_t steps = 1;
  double step_size = 2.0 / 255.0;
  double clamp_lo = 0.0;
  double clamp_hi = 1.0;
  bool random_start = false;
  uint64_t seed = 0;

  void validate() const;
};

// Builds the scalar classification loss for (possibly tracked) inputs; the
// callback decides which model evaluates them.
using AttackLoss = std::function<Tensor(const Tensor& x, const std::vector<int64_t>& y)>;

// Projects x_adv into the epsilon ball around x, then into the pixel range.
Tensor project_ball(const Tensor& x_adv, const Tensor& x, const AttackBudget& budget);

Tensor fgsm(const AttackLoss& loss, const Tensor& x, const std::vector<int64_t>& y,
            const AttackBudget& budget);

Tensor pgd(const AttackLoss& loss, const Tensor& x, const std::vector<int64_t>& y,
           const AttackBudget& budget);

// One gradient-recycling training pass over `batches`: each minibatch is
// replayed `replay_k` times; every replay produces both the weight gradients
// (consumed through `step`) and the input gradient that advances `delta`.
// `delta` persists across minibatches and epochs and must match the batch
// image shape throughout.
struct FreeAtStep {
  // Builds the loss with whatever parameters it trains watched on the tape;
  // fills `x_watched` with the watched adversarial input so its gradient can
  // be recycled. `batch_index` identifies the minibatch being replayed.
  std::function<Tensor(Tape&, const Tensor& x_adv, const std::vector<int64_t>& y,
                       int64_t batch_index, Tensor& x_watched)>
      loss;
  // Consumes the tape gradients after backward.
  std::function<void(const std::unordered_map<int64_t, Tensor>&)> update;
};

void free_at_epoch(const std::vector<Batch>& batches, int64_t replay_k, const AttackBudget& budget,
                   const FreeAtStep& step, Tensor& delta);

}  // namespace dilnas
