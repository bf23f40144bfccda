#include "dilnas/flops.hpp"

#include <cmath>
#include <sstream>

namespace dilnas {

namespace {

std::vector<double> plain_softmax(const double* v, int64_t n) {
  double m = v[0];
  for (int64_t i = 1; i < n; ++i) m = std::max(m, v[i]);
  std::vector<double> out(static_cast<size_t>(n));
  double z = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    out[static_cast<size_t>(i)] = std::exp(v[i] - m);
    z += out[static_cast<size_t>(i)];
  }
  for (double& x : out) x /= z;
  return out;
}

double conv_layer_flops(const ConvLayer& layer, int64_t h_out, int64_t w_out) {
  const int64_t c_out = layer.w.shape[0];
  const int64_t c_in_per_group = layer.w.shape[1];
  const int64_t k = layer.w.shape[2];
  return static_cast<double>(conv_flops(c_in_per_group * layer.groups, c_out, k, h_out, w_out,
                                        layer.groups));
}

// Per-edge cost table for one block of the relaxed net.
std::vector<std::vector<double>> edge_cost_table(const BlockCells& block, const CellArchSpec& spec) {
  std::vector<std::vector<double>> table(static_cast<size_t>(spec.num_edges()));
  for (int64_t e = 0; e < spec.num_edges(); ++e) {
    const int64_t c_sel = static_cast<int64_t>(block.masks[static_cast<size_t>(e)].size());
    std::vector<double> row(static_cast<size_t>(spec.num_ops()));
    for (int64_t o = 0; o < spec.num_ops(); ++o) {
      row[static_cast<size_t>(o)] =
          static_cast<double>(op_flops(spec.op_set[static_cast<size_t>(o)], c_sel, block.h, block.w));
    }
    table[static_cast<size_t>(e)] = std::move(row);
  }
  return table;
}

double fixed_cell_overhead(const BlockCells& block) {
  double total = 0.0;
  for (const CellParams& cell : block.cells) {
    total += conv_layer_flops(cell.pre0, block.h, block.w);
    total += conv_layer_flops(cell.pre1, block.h, block.w);
    total += conv_layer_flops(cell.proj, block.h, block.w);
  }
  return total;
}

double plain_expected_node(const CellArch& arch, int64_t node,
                           const std::vector<std::vector<double>>& edge_op_cost) {
  const CellArchSpec& spec = arch.spec;
  const int64_t off = spec.edge_offset(node);
  const int64_t fan_in = spec.edges_into(node);
  const std::vector<double> beta_w = plain_softmax(arch.beta.data.data() + off, fan_in);
  double total = 0.0;
  for (int64_t i = 0; i < fan_in; ++i) {
    const std::vector<double> alpha_w =
        plain_softmax(arch.alpha.data.data() + (off + i) * spec.num_ops(), spec.num_ops());
    double edge = 0.0;
    for (int64_t o = 0; o < spec.num_ops(); ++o) {
      edge += alpha_w[static_cast<size_t>(o)] * edge_op_cost[static_cast<size_t>(off + i)][static_cast<size_t>(o)];
    }
    total += beta_w[static_cast<size_t>(i)] * edge;
  }
  return total;
}

}  // namespace

int64_t conv_flops(int64_t c_in, int64_t c_out, int64_t kernel, int64_t h_out, int64_t w_out,
                   int64_t groups) {
  return h_out * w_out * c_out * (c_in / groups) * kernel * kernel;
}

int64_t op_flops(CellOp op, int64_t c_sel, int64_t h, int64_t w) {
  if (c_sel < 0 || h < 1 || w < 1) throw ValueError("op_flops: invalid feature map extents");
  switch (op) {
    case CellOp::SepConv3:
    case CellOp::DilConv3:
      // depthwise stage + pointwise stage
      return conv_flops(c_sel, c_sel, 3, h, w, c_sel) + conv_flops(c_sel, c_sel, 1, h, w);
    case CellOp::SepConv5:
    case CellOp::DilConv5:
      return conv_flops(c_sel, c_sel, 5, h, w, c_sel) + conv_flops(c_sel, c_sel, 1, h, w);
    case CellOp::AvgPool3:
    case CellOp::MaxPool3:
    case CellOp::Identity:
    case CellOp::Zero:
      // only multiply-adds are counted
      return 0;
  }
  throw ValueError("op_flops: unknown op kind");
}

Tensor expected_node_flops(const CellArch& arch, int64_t node,
                           const std::vector<std::vector<double>>& edge_op_cost) {
  const CellArchSpec& spec = arch.spec;
  if (node < 0 || node >= spec.num_nodes) throw ValueError("expected_node_flops: node out of range");
  const int64_t off = spec.edge_offset(node);
  const int64_t fan_in = spec.edges_into(node);
  Tensor beta_w = ops::softmax(ops::narrow0(arch.beta, off, fan_in));
  Tensor total;
  for (int64_t i = 0; i < fan_in; ++i) {
    const int64_t e = off + i;
    Tensor alpha_row = ops::reshape(ops::narrow0(arch.alpha, e, 1), {spec.num_ops()});
    Tensor cost = Tensor::of({spec.num_ops()}, edge_op_cost[static_cast<size_t>(e)]);
    Tensor edge = ops::sum(ops::mul(ops::softmax(alpha_row), cost));
    Tensor weighted = ops::mul_scalar(edge, ops::narrow0(beta_w, i, 1));
    total = (i == 0) ? std::move(weighted) : ops::add(total, weighted);
  }
  return total;
}

Tensor expected_dilation_flops(const DilationNet& net) {
  Tensor total = Tensor::scalar(0.0);
  double fixed = 0.0;
  for (size_t b = 0; b < net.blocks.size(); ++b) {
    const BlockCells& block = net.blocks[b];
    const CellArch& arch = net.arch_for_block(static_cast<int64_t>(b));
    const auto table = edge_cost_table(block, arch.spec);
    Tensor cell_total;
    for (int64_t j = 0; j < arch.spec.num_nodes; ++j) {
      Tensor node = expected_node_flops(arch, j, table);
      cell_total = (j == 0) ? std::move(node) : ops::add(cell_total, node);
    }
    total = ops::add(total, ops::scale(cell_total, static_cast<double>(block.cells.size())));
    fixed += fixed_cell_overhead(block);
  }
  return ops::add(total, Tensor::scalar(fixed));
}

double expected_dilation_flops_value(const DilationNet& net) {
  double total = 0.0;
  for (size_t b = 0; b < net.blocks.size(); ++b) {
    const BlockCells& block = net.blocks[b];
    const CellArch& arch = net.arch_for_block(static_cast<int64_t>(b));
    const auto table = edge_cost_table(block, arch.spec);
    double cell_total = 0.0;
    for (int64_t j = 0; j < arch.spec.num_nodes; ++j) cell_total += plain_expected_node(arch, j, table);
    total += cell_total * static_cast<double>(block.cells.size()) + fixed_cell_overhead(block);
  }
  return total;
}

double backbone_flops(const Backbone& net) {
  const BackboneSpec& spec = net.spec;
  double total = conv_layer_flops(net.stem, spec.in_h, spec.in_w);
  for (size_t b = 0; b < net.blocks.size(); ++b) {
    const int64_t h = spec.block_h(static_cast<int64_t>(b));
    const int64_t w = spec.block_w(static_cast<int64_t>(b));
    for (const ConvLayer& layer : net.blocks[b]) total += conv_layer_flops(layer, h, w);
  }
  total += static_cast<double>(net.head_w.shape[0] * net.head_w.shape[1]);
  return total;
}

double genotype_flops(const BackboneSpec& backbone, const Genotype& genotype,
                      int64_t cells_per_block) {
  DiscreteDilationNet net = build_discrete_dilation(backbone, genotype, cells_per_block, 0);
  double total = 0.0;
  for (const DiscreteBlock& block : net.blocks) {
    for (const DiscreteCellParams& cell : block.cells) {
      total += conv_layer_flops(cell.pre0, block.h, block.w);
      total += conv_layer_flops(cell.pre1, block.h, block.w);
      total += conv_layer_flops(cell.proj, block.h, block.w);
      for (const auto& node : cell.nodes) {
        for (const DiscreteEdge& edge : node) {
          total += static_cast<double>(op_flops(edge.pick.op, block.channels, block.h, block.w));
        }
      }
    }
  }
  return total;
}

Tensor flops_scale_factor(const Tensor& total_flops, double gamma, double tau, TauMode mode) {
  if (total_flops.numel() != 1) throw ShapeError("flops scale: cost must be scalar");
  if (!(total_flops.data[0] > 1.0)) {
    throw ValueError("flops scale: total cost must exceed 1 for a positive logarithm");
  }
  Tensor log_f = ops::log(total_flops);
  if (mode == TauMode::MulLog) return ops::scale(log_f, gamma * tau);
  if (tau == 1.0) return ops::scale(log_f, gamma);
  // (log F)^tau via exp(tau * log log F); log F > 0 holds by the guard above
  return ops::scale(ops::exp(ops::scale(ops::log(log_f), tau)), gamma);
}

Tensor flops_scaled_loss(const Tensor& total_flops, const Tensor& adv_loss, double gamma, double tau,
                         TauMode mode) {
  if (adv_loss.numel() != 1) throw ShapeError("flops scale: loss must be scalar");
  return ops::mul(flops_scale_factor(total_flops, gamma, tau, mode), adv_loss);
}

double calibrate_gamma(double reference_flops, double tau, TauMode mode) {
  if (!(reference_flops > 1.0)) throw ValueError("calibrate_gamma: reference cost must exceed 1");
  const double log_f = std::log(reference_flops);
  const double denom = (mode == TauMode::MulLog) ? tau * log_f : std::pow(log_f, tau);
  if (!(denom > 0.0)) throw ValueError("calibrate_gamma: degenerate scale at the reference cost");
  return 1.0 / denom;
}

FlopsReport flops_report(const Backbone& backbone, const DilationNet& net, double gamma, double tau) {
  FlopsReport report;
  report.gamma = gamma;
  report.tau = tau;
  for (size_t b = 0; b < net.blocks.size(); ++b) {
    const BlockCells& block = net.blocks[b];
    const CellArch& arch = net.arch_for_block(static_cast<int64_t>(b));
    const auto table = edge_cost_table(block, arch.spec);
    std::vector<double> nodes;
    double cell_total = 0.0;
    for (int64_t j = 0; j < arch.spec.num_nodes; ++j) {
      const double v = plain_expected_node(arch, j, table);
      nodes.push_back(v);
      cell_total += v;
    }
    report.node_expected.push_back(std::move(nodes));
    report.cell_expected.push_back(cell_total);
    report.fixed_overhead += fixed_cell_overhead(block);
  }
  report.dilation_total = expected_dilation_flops_value(net);
  report.backbone_total = backbone_flops(backbone);
  return report;
}

std::string FlopsReport::to_csv() const {
  std::ostringstream os;
  os << "item,block,node,multi_adds\n";
  char buf[64];
  const auto fmt = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  for (size_t b = 0; b < node_expected.size(); ++b) {
    for (size_t j = 0; j < node_expected[b].size(); ++j) {
      os << "node," << b << "," << j << "," << fmt(node_expected[b][j]) << "\n";
    }
    os << "cell," << b << ",," << fmt(cell_expected[b]) << "\n";
  }
  os << "fixed,,," << fmt(fixed_overhead) << "\n";
  os << "dilation_total,,," << fmt(dilation_total) << "\n";
  os << "backbone_total,,," << fmt(backbone_total) << "\n";
  os << "gamma,,," << fmt(gamma) << "\n";
  os << "tau,,," << fmt(tau) << "\n";
  return os.str();
}

}  // namespace dilnas
