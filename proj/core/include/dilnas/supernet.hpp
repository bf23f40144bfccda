#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dilnas/net.hpp"
#include "dilnas/tensor.hpp"

namespace dilnas {

enum class CellOp {
  SepConv3,
  SepConv5,
  DilConv3,
  DilConv5,
  AvgPool3,
  MaxPool3,
  Identity,
  Zero,
};

const char* cell_op_name(CellOp op);
CellOp cell_op_from_name(const std::string& name);
bool cell_op_has_weights(CellOp op);
const std::vector<CellOp>& default_op_set();

struct CellArchSpec {
  int64_t num_nodes = 4;
  std::vector<CellOp> op_set = default_op_set();
  double channel_ratio = 0.5;

  // Node j receives edges from both cell inputs and all earlier nodes:
  // inputs 0,1 then nodes 2..j+1 in edge order.
  int64_t edges_into(int64_t node) const { return 2 + node; }
  int64_t edge_offset(int64_t node) const;
  int64_t num_edges() const { return edge_offset(num_nodes); }
  int64_t num_ops() const { return static_cast<int64_t>(op_set.size()); }
  void validate() const;
};

// Relaxed architecture state: per-edge operation logits and per-edge
// normalisation logits, both zero-initialised (uniform softmax).
struct CellArch {
  CellArchSpec spec;
  Tensor alpha;  // (num_edges, num_ops)
  Tensor beta;   // (num_edges,)

  static CellArch make(CellArchSpec spec);
};

struct GenotypeEdge {
  int64_t input = 0;  // 0,1 = cell inputs; node m = m+2
  CellOp op = CellOp::Identity;
};

struct Genotype {
  std::vector<std::array<GenotypeEdge, 2>> nodes;
  int64_t cells_per_block = 0;
  std::vector<bool> reduction_roles;  // one flag per cell position in a block

  std::string to_text() const;
  std::string to_dot() const;
  static Genotype from_text(const std::string& text);
};

// Depthwise + pointwise conv pair used by the separable/dilated candidates.
struct SepConvParams {
  Tensor dw;  // (C,1,k,k)
  Tensor pw;  // (C,C,1,1)
  int64_t dilation = 1;
  int64_t pad = 1;
};

struct CellParams {
  ConvLayer pre0;  // projects the older input
  ConvLayer pre1;  // projects the newer input
  std::vector<std::vector<std::optional<SepConvParams>>> edge_ops;  // [edge][op]
  ConvLayer proj;  // zero-initialised output projection
};

struct BlockCells {
  int64_t channels = 0;  // working channel count == block channels
  int64_t h = 0, w = 0;
  std::vector<CellParams> cells;
  std::vector<std::vector<int64_t>> masks;  // per edge: selected channel indices
};

// The relaxed dilation network: per-block stacks of cells sharing one
// CellArch (optionally one per block).
struct DilationNet {
  CellArch arch;
  std::vector<CellArch> block_arch;  // used when split_arch
  bool split_arch = false;
  std::vector<BlockCells> blocks;
  int64_t cells_per_block = 0;

  const CellArch& arch_for_block(int64_t block) const {
    return split_arch ? block_arch[static_cast<size_t>(block)] : arch;
  }
  CellArch& arch_for_block_mut(int64_t block) {
    return split_arch ? block_arch[static_cast<size_t>(block)] : arch;
  }
  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);
  void visit_arch(const std::function<void(const std::string&, Tensor&)>& fn);
};

DilationNet build_dilation(const BackboneSpec& backbone, const CellArchSpec& arch_spec,
                           int64_t cells_per_block, bool split_arch, uint64_t seed);

// Fresh channel masks for every block edge: exactly round(ratio*C) selected
// channels, uniform without replacement. ratio 1 selects everything.
void sample_channel_masks(DilationNet& net, uint64_t seed);
std::vector<int64_t> sample_mask(int64_t channels, double ratio, Rng& rng);

// Eq-level building blocks, exposed for tests on micro configurations.
Tensor mixed_op_forward(const Tensor& x, const Tensor& alpha_row, const std::vector<int64_t>& mask,
                        const std::vector<std::optional<SepConvParams>>& op_params,
                        const CellArchSpec& spec);
Tensor node_forward(const std::vector<Tensor>& edge_outputs, const Tensor& beta_segment);

Tensor cell_forward(const Tensor& z_prev, const Tensor& z_prevprev, const CellArch& arch,
                    const CellParams& params, const std::vector<std::vector<int64_t>>& masks);

struct HybridTrace {
  Tensor stem_out;
  std::vector<Tensor> block_out;  // z_hyb^(1..L)
  Tensor logits;
};

// Eq-2 aggregation: per block, backbone output plus dilation output,
// element-wise. The first block reuses the stem output for both virtual
// dilation inputs.
HybridTrace hybrid_forward(const Backbone& backbone, const DilationNet& dilation,
                           const Tensor& images);

Genotype discretize(const CellArch& arch);

// ---- discrete (retrain-time) network ----

struct DiscreteEdge {
  GenotypeEdge pick;
  std::optional<SepConvParams> conv;
};

struct DiscreteCellParams {
  ConvLayer pre0, pre1;
  std::vector<std::array<DiscreteEdge, 2>> nodes;
  ConvLayer proj;
};

struct DiscreteBlock {
  int64_t channels = 0;
  int64_t h = 0, w = 0;
  std::vector<DiscreteCellParams> cells;
};

struct DiscreteDilationNet {
  Genotype genotype;
  std::vector<DiscreteBlock> blocks;
  int64_t cells_per_block = 0;

  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);
};

DiscreteDilationNet build_discrete_dilation(const BackboneSpec& backbone, const Genotype& genotype,
                                            int64_t cells_per_block, uint64_t seed);

HybridTrace hybrid_forward_discrete(const Backbone& backbone, const DiscreteDilationNet& dilation,
                                    const Tensor& images);

}  // namespace dilnas
