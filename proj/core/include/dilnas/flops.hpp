#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dilnas/supernet.hpp"
#include "dilnas/tensor.hpp"

namespace dilnas {

// How tau enters the scale factor: PowLog evaluates (log F)^tau, MulLog
// evaluates tau * log F. Identical at tau = 1.
enum class TauMode { PowLog, MulLog };

struct FlopsReport {
  // expected multi-adds per node position for each block, cells collapsed
  std::vector<std::vector<double>> node_expected;  // [block][node]
  std::vector<double> cell_expected;               // per block, one cell
  double dilation_total = 0.0;                     // all cells + fixed projections
  double fixed_overhead = 0.0;                     // pre/proj convs
  double backbone_total = 0.0;
  double gamma = 1.0;
  double tau = 1.0;

  std::string to_csv() const;
};

// Multi-add count of one candidate op on a (c_sel, h, w) feature map. Conv
// candidates count both separable stages; pooling/identity/zero cost nothing.
int64_t op_flops(CellOp op, int64_t c_sel, int64_t h, int64_t w);

// Multi-adds of a plain convolution producing (c_out, h_out, w_out).
int64_t conv_flops(int64_t c_in, int64_t c_out, int64_t kernel, int64_t h_out, int64_t w_out,
                   int64_t groups = 1);

// Softmax-weighted cost of one node given per-edge per-op costs; stays on the
// tape so the search objective can differentiate through it.
Tensor expected_node_flops(const CellArch& arch, int64_t node,
                           const std::vector<std::vector<double>>& edge_op_cost);

// Total expected dilation cost: node expectations of every cell plus the
// fixed preprocessing/projection convs.
Tensor expected_dilation_flops(const DilationNet& net);
double expected_dilation_flops_value(const DilationNet& net);

double backbone_flops(const Backbone& net);

// Discrete counterpart used after discretisation.
double genotype_flops(const BackboneSpec& backbone, const Genotype& genotype,
                      int64_t cells_per_block);

// gamma * (log F)^tau (or gamma * tau * log F), as a tracked scalar.
Tensor flops_scale_factor(const Tensor& total_flops, double gamma, double tau, TauMode mode);

// Eq-level objective: scale factor times the adversarial validation loss.
Tensor flops_scaled_loss(const Tensor& total_flops, const Tensor& adv_loss, double gamma, double tau,
                         TauMode mode = TauMode::PowLog);

// gamma such that the scale factor is exactly 1 at the reference cost.
double calibrate_gamma(double reference_flops, double tau, TauMode mode);

FlopsReport flops_report(const Backbone& backbone, const DilationNet& net, double gamma, double tau);

}  // namespace dilnas
