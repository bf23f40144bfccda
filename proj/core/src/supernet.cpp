#include "dilnas/supernet.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dilnas {

namespace {

constexpr const char* kOpNames[] = {
    "sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5",
    "avg_pool_3x3", "max_pool_3x3", "identity",     "zero",
};

struct OpGeom {
  int64_t kernel;
  int64_t pad;
  int64_t dilation;
};

OpGeom conv_op_geom(CellOp op) {
  switch (op) {
    case CellOp::SepConv3:
      return {3, 1, 1};
    case CellOp::SepConv5:
      return {5, 2, 1};
    case CellOp::DilConv3:
      return {3, 2, 2};
    case CellOp::DilConv5:
      return {5, 4, 2};
    default:
      throw ValueError("conv_op_geom: not a convolution op");
  }
}

}  // namespace

const char* cell_op_name(CellOp op) { return kOpNames[static_cast<int>(op)]; }

CellOp cell_op_from_name(const std::string& name) {
  for (int i = 0; i < 8; ++i) {
    if (name == kOpNames[i]) return static_cast<CellOp>(i);
  }
  throw ValueError("unknown cell op '" + name + "'");
}

bool cell_op_has_weights(CellOp op) {
  return op == CellOp::SepConv3 || op == CellOp::SepConv5 || op == CellOp::DilConv3 ||
         op == CellOp::DilConv5;
}

const std::vector<CellOp>& default_op_set() {
  static const std::vector<CellOp> kSet = {
      CellOp::SepConv3, CellOp::SepConv5, CellOp::DilConv3, CellOp::DilConv5,
      CellOp::AvgPool3, CellOp::MaxPool3, CellOp::Identity, CellOp::Zero,
  };
  return kSet;
}

int64_t CellArchSpec::edge_offset(int64_t node) const {
  // sum of (2 + j) for j < node
  return 2 * node + node * (node - 1) / 2;
}

void CellArchSpec::validate() const {
  if (num_nodes < 1) throw ValueError("cell spec: need at least one node");
  if (op_set.empty()) throw ValueError("cell spec: empty op set");
  if (!(channel_ratio > 0.0 && channel_ratio <= 1.0)) {
    throw ValueError("cell spec: channel ratio must be in (0,1]");
  }
}

CellArch CellArch::make(CellArchSpec spec) {
  spec.validate();
  CellArch arch;
  arch.alpha = Tensor::zeros({spec.num_edges(), spec.num_ops()});
  arch.beta = Tensor::zeros({spec.num_edges()});
  arch.spec = std::move(spec);
  return arch;
}

std::vector<int64_t> sample_mask(int64_t channels, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ValueError("sample_mask: ratio must be in (0,1]");
  const int64_t k = std::llround(ratio * static_cast<double>(channels));
  if (k == 0) throw ValueError("sample_mask: ratio " + std::to_string(ratio) + " selects no channels of " +
                               std::to_string(channels));
  if (k >= channels) {
    std::vector<int64_t> all(static_cast<size_t>(channels));
    for (int64_t i = 0; i < channels; ++i) all[static_cast<size_t>(i)] = i;
    return all;
  }
  return rng.sample_indices(channels, k);
}

void sample_channel_masks(DilationNet& net, uint64_t seed) {
  Rng rng(seed);
  for (auto& block : net.blocks) {
    const CellArchSpec& spec = net.arch.spec;
    block.masks.resize(static_cast<size_t>(spec.num_edges()));
    for (auto& mask : block.masks) mask = sample_mask(block.channels, spec.channel_ratio, rng);
  }
}

namespace {

SepConvParams make_sep_conv(CellOp op, int64_t channels, Rng& rng) {
  const OpGeom g = conv_op_geom(op);
  SepConvParams p;
  p.dw = he_normal({channels, 1, g.kernel, g.kernel}, g.kernel * g.kernel, rng);
  p.pw = he_normal({channels, channels, 1, 1}, channels, rng);
  p.dilation = g.dilation;
  p.pad = g.pad;
  return p;
}

ConvLayer make_pre_conv(int64_t c_in, int64_t c_out, int64_t h_in, int64_t h_out, int64_t w_in,
                        int64_t w_out, Rng& rng) {
  const auto stride_for = [](int64_t in, int64_t out) {
    if (out < 1) throw ShapeError("cell preprocessing: empty target resolution");
    const int64_t s = (in + out - 1) / out;
    if ((in - 1) / s + 1 != out) {
      throw ShapeError("cell preprocessing: cannot map resolution " + std::to_string(in) + " to " +
                       std::to_string(out) + " with a strided 1x1 conv");
    }
    return s;
  };
  const int64_t sh = stride_for(h_in, h_out);
  const int64_t sw = stride_for(w_in, w_out);
  if (sh != sw) throw ShapeError("cell preprocessing: anisotropic stride unsupported");
  ConvLayer layer;
  layer.w = he_normal({c_out, c_in, 1, 1}, c_in, rng);
  layer.b = Tensor::zeros({c_out});
  layer.stride = sh;
  layer.pad = 0;
  return layer;
}

struct SourceShape {
  int64_t c, h, w;
};

struct CellGeom {
  SourceShape in0;  // older input
  SourceShape in1;  // newer input
  SourceShape out;
};

CellGeom cell_geometry(const BackboneSpec& bb, int64_t block, int64_t cell_idx) {
  const SourceShape stem{bb.stem_channels, bb.in_h, bb.in_w};
  const auto block_shape = [&](int64_t b) -> SourceShape {
    if (b < 0) return stem;
    return {bb.block_channels(b), bb.block_h(b), bb.block_w(b)};
  };
  CellGeom g;
  g.out = block_shape(block);
  const SourceShape prev = block_shape(block - 1);      // z^(l-1); stem when block==0
  const SourceShape prevprev = block_shape(block - 2);  // z^(l-2); stem when block<=1
  if (cell_idx == 0) {
    g.in1 = prev;
    g.in0 = prevprev;
  } else if (cell_idx == 1) {
    g.in1 = g.out;
    g.in0 = prev;
  } else {
    g.in1 = g.out;
    g.in0 = g.out;
  }
  return g;
}

CellParams make_cell(const BackboneSpec& bb, const CellArchSpec& spec, int64_t block,
                     int64_t cell_idx, int64_t c_sel, Rng& rng) {
  const CellGeom geom = cell_geometry(bb, block, cell_idx);
  CellParams cell;
  cell.pre0 = make_pre_conv(geom.in0.c, geom.out.c, geom.in0.h, geom.out.h, geom.in0.w, geom.out.w, rng);
  cell.pre1 = make_pre_conv(geom.in1.c, geom.out.c, geom.in1.h, geom.out.h, geom.in1.w, geom.out.w, rng);
  cell.edge_ops.resize(static_cast<size_t>(spec.num_edges()));
  for (auto& per_edge : cell.edge_ops) {
    per_edge.resize(spec.op_set.size());
    for (size_t o = 0; o < spec.op_set.size(); ++o) {
      if (cell_op_has_weights(spec.op_set[o])) {
        per_edge[o] = make_sep_conv(spec.op_set[o], c_sel, rng);
      }
    }
  }
  // output projection starts at zero so a fresh dilation is an exact no-op
  cell.proj.w = Tensor::zeros({geom.out.c, spec.num_nodes * geom.out.c, 1, 1});
  cell.proj.b = Tensor::zeros({geom.out.c});
  cell.proj.stride = 1;
  cell.proj.pad = 0;
  return cell;
}

}  // namespace

DilationNet build_dilation(const BackboneSpec& backbone, const CellArchSpec& arch_spec,
                           int64_t cells_per_block, bool split_arch, uint64_t seed) {
  backbone.validate();
  arch_spec.validate();
  if (cells_per_block < 1) throw ValueError("build_dilation: need at least one cell per block");
  DilationNet net;
  net.arch = CellArch::make(arch_spec);
  net.split_arch = split_arch;
  net.cells_per_block = cells_per_block;
  if (split_arch) {
    for (int64_t b = 0; b < backbone.num_blocks; ++b) net.block_arch.push_back(CellArch::make(arch_spec));
  }
  Rng rng(seed);
  for (int64_t b = 0; b < backbone.num_blocks; ++b) {
    BlockCells block;
    block.channels = backbone.block_channels(b);
    block.h = backbone.block_h(b);
    block.w = backbone.block_w(b);
    const int64_t c_sel = std::llround(arch_spec.channel_ratio * static_cast<double>(block.channels));
    if (c_sel == 0) throw ValueError("build_dilation: channel ratio selects no channels");
    for (int64_t k = 0; k < cells_per_block; ++k) {
      block.cells.push_back(make_cell(backbone, arch_spec, b, k, std::min(c_sel, block.channels), rng));
    }
    net.blocks.push_back(std::move(block));
  }
  sample_channel_masks(net, rng.next_u64());
  return net;
}

void DilationNet::visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
  for (size_t b = 0; b < blocks.size(); ++b) {
    for (size_t k = 0; k < blocks[b].cells.size(); ++k) {
      CellParams& cell = blocks[b].cells[k];
      const std::string base = "dilation.b" + std::to_string(b) + ".c" + std::to_string(k);
      fn(base + ".pre0.w", cell.pre0.w);
      fn(base + ".pre0.b", cell.pre0.b);
      fn(base + ".pre1.w", cell.pre1.w);
      fn(base + ".pre1.b", cell.pre1.b);
      for (size_t e = 0; e < cell.edge_ops.size(); ++e) {
        for (size_t o = 0; o < cell.edge_ops[e].size(); ++o) {
          if (!cell.edge_ops[e][o]) continue;
          const std::string ob = base + ".e" + std::to_string(e) + ".o" + std::to_string(o);
          fn(ob + ".dw", cell.edge_ops[e][o]->dw);
          fn(ob + ".pw", cell.edge_ops[e][o]->pw);
        }
      }
      fn(base + ".proj.w", cell.proj.w);
      fn(base + ".proj.b", cell.proj.b);
    }
  }
}

void DilationNet::visit_arch(const std::function<void(const std::string&, Tensor&)>& fn) {
  if (split_arch) {
    for (size_t b = 0; b < block_arch.size(); ++b) {
      fn("arch.b" + std::to_string(b) + ".alpha", block_arch[b].alpha);
      fn("arch.b" + std::to_string(b) + ".beta", block_arch[b].beta);
    }
  } else {
    fn("arch.alpha", arch.alpha);
    fn("arch.beta", arch.beta);
  }
}

namespace {

Tensor apply_cell_op(CellOp op, const Tensor& x, const std::optional<SepConvParams>& params) {
  switch (op) {
    case CellOp::SepConv3:
    case CellOp::SepConv5:
    case CellOp::DilConv3:
    case CellOp::DilConv5: {
      if (!params) throw ValueError("mixed op: missing conv parameters");
      const int64_t c = x.shape[1];
      Tensor y = ops::relu(x);
      y = ops::conv2d(y, params->dw, 1, params->pad, params->dilation, c);
      return ops::conv2d(y, params->pw, 1, 0, 1, 1);
    }
    case CellOp::AvgPool3:
      return ops::avg_pool(x, 3, 1, 1);
    case CellOp::MaxPool3:
      return ops::max_pool(x, 3, 1, 1);
    case CellOp::Identity:
      return x;
    case CellOp::Zero:
      return Tensor::zeros(x.shape);
  }
  throw ValueError("mixed op: unknown op");
}

}  // namespace

Tensor mixed_op_forward(const Tensor& x, const Tensor& alpha_row, const std::vector<int64_t>& mask,
                        const std::vector<std::optional<SepConvParams>>& op_params,
                        const CellArchSpec& spec) {
  if (x.shape.size() != 4) throw ShapeError("mixed op: input must be (N,C,H,W)");
  const int64_t c = x.shape[1];
  if (alpha_row.numel() != spec.num_ops()) {
    throw ShapeError("mixed op: alpha row " + shape_str(alpha_row.shape) + " vs " +
                     std::to_string(spec.num_ops()) + " ops");
  }
  for (size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] < 0 || mask[i] >= c) {
      throw ShapeError("mixed op: mask index " + std::to_string(mask[i]) + " outside " +
                       std::to_string(c) + " channels");
    }
    if (i > 0 && mask[i] <= mask[i - 1]) throw ValueError("mixed op: mask must be strictly ascending");
  }
  const int64_t c_sel = static_cast<int64_t>(mask.size());
  if (c_sel == 0) return x;  // bypass everything
  const bool full = (c_sel == c);
  Tensor weights = ops::softmax(alpha_row);
  Tensor x_sel = full ? x : ops::channel_gather(x, mask);
  Tensor acc;
  bool have = false;
  for (int64_t o = 0; o < spec.num_ops(); ++o) {
    const CellOp op = spec.op_set[static_cast<size_t>(o)];
    if (op == CellOp::Zero) continue;  // contributes exactly zero
    Tensor y = apply_cell_op(op, x_sel, op_params[static_cast<size_t>(o)]);
    Tensor weighted = ops::mul_scalar(y, ops::narrow0(weights, o, 1));
    acc = have ? ops::add(acc, weighted) : std::move(weighted);
    have = true;
  }
  if (!have) acc = Tensor::zeros(x_sel.shape);
  if (full) return acc;
  Tensor out = ops::channel_scatter(acc, mask, c);
  std::vector<int64_t> complement;
  complement.reserve(static_cast<size_t>(c - c_sel));
  size_t m = 0;
  for (int64_t ch = 0; ch < c; ++ch) {
    if (m < mask.size() && mask[m] == ch) {
      ++m;
    } else {
      complement.push_back(ch);
    }
  }
  Tensor bypass = ops::channel_scatter(ops::channel_gather(x, complement), complement, c);
  return ops::add(out, bypass);
}

Tensor node_forward(const std::vector<Tensor>& edge_outputs, const Tensor& beta_segment) {
  if (edge_outputs.empty()) throw ShapeError("node: needs at least one incoming edge");
  if (beta_segment.numel() != static_cast<int64_t>(edge_outputs.size())) {
    throw ShapeError("node: beta segment " + shape_str(beta_segment.shape) + " vs " +
                     std::to_string(edge_outputs.size()) + " edges");
  }
  Tensor weights = ops::softmax(beta_segment);
  Tensor acc;
  for (size_t i = 0; i < edge_outputs.size(); ++i) {
    Tensor weighted = ops::mul_scalar(edge_outputs[i], ops::narrow0(weights, static_cast<int64_t>(i), 1));
    acc = (i == 0) ? std::move(weighted) : ops::add(acc, weighted);
  }
  return acc;
}

Tensor cell_forward(const Tensor& z_prev, const Tensor& z_prevprev, const CellArch& arch,
                    const CellParams& params, const std::vector<std::vector<int64_t>>& masks) {
  const CellArchSpec& spec = arch.spec;
  Tensor s1 = conv_forward(params.pre1, z_prev);
  Tensor s0 = conv_forward(params.pre0, z_prevprev);
  if (s0.shape != s1.shape) {
    throw ShapeError("cell: preprocessed inputs disagree, " + shape_str(s0.shape) + " vs " +
                     shape_str(s1.shape));
  }
  std::vector<Tensor> states = {std::move(s0), std::move(s1)};
  for (int64_t j = 0; j < spec.num_nodes; ++j) {
    const int64_t off = spec.edge_offset(j);
    const int64_t fan_in = spec.edges_into(j);
    std::vector<Tensor> edge_outs;
    edge_outs.reserve(static_cast<size_t>(fan_in));
    for (int64_t i = 0; i < fan_in; ++i) {
      const int64_t e = off + i;
      Tensor alpha_row = ops::reshape(ops::narrow0(arch.alpha, e, 1), {spec.num_ops()});
      edge_outs.push_back(mixed_op_forward(states[static_cast<size_t>(i)], alpha_row,
                                           masks[static_cast<size_t>(e)],
                                           params.edge_ops[static_cast<size_t>(e)], spec));
    }
    states.push_back(node_forward(edge_outs, ops::narrow0(arch.beta, off, fan_in)));
  }
  std::vector<Tensor> node_outs(states.begin() + 2, states.end());
  Tensor cat = ops::concat_channels(node_outs);
  return conv_forward(params.proj, cat);
}

namespace {

template <typename CellFn>
Tensor run_block_cells(const Tensor& z_prev, const Tensor& z_prevprev, int64_t num_cells,
                       CellFn&& cell_fn) {
  Tensor s1 = z_prev;
  Tensor s0 = z_prevprev;
  for (int64_t k = 0; k < num_cells; ++k) {
    Tensor out = cell_fn(k, s1, s0);
    s0 = std::move(s1);
    s1 = std::move(out);
  }
  return s1;
}

}  // namespace

HybridTrace hybrid_forward(const Backbone& backbone, const DilationNet& dilation,
                           const Tensor& images) {
  if (dilation.blocks.size() != backbone.blocks.size()) {
    throw ShapeError("hybrid: dilation has " + std::to_string(dilation.blocks.size()) +
                     " block groups for " + std::to_string(backbone.blocks.size()) + " backbone blocks");
  }
  HybridTrace trace;
  trace.stem_out = ops::relu(conv_forward(backbone.stem, images));
  Tensor z_prev = trace.stem_out;      // z^(l-1)
  Tensor z_prevprev = trace.stem_out;  // z^(l-2); virtual inputs at the first block
  for (size_t b = 0; b < backbone.blocks.size(); ++b) {
    Tensor zb = z_prev;
    for (const ConvLayer& layer : backbone.blocks[b]) zb = ops::relu(conv_forward(layer, zb));
    const BlockCells& group = dilation.blocks[b];
    const CellArch& arch = dilation.arch_for_block(static_cast<int64_t>(b));
    Tensor zd = run_block_cells(z_prev, z_prevprev, static_cast<int64_t>(group.cells.size()),
                                [&](int64_t k, const Tensor& s1, const Tensor& s0) {
                                  return cell_forward(s1, s0, arch,
                                                      group.cells[static_cast<size_t>(k)], group.masks);
                                });
    if (zb.shape != zd.shape) {
      throw ShapeError("hybrid: block " + std::to_string(b) + " sum mismatch " + shape_str(zb.shape) +
                       " vs " + shape_str(zd.shape));
    }
    Tensor z = ops::add(zb, zd);
    z_prevprev = std::move(z_prev);
    z_prev = z;
    trace.block_out.push_back(std::move(z));
  }
  trace.logits = head_forward(backbone, z_prev);
  return trace;
}

namespace {

// Softmax on a plain slice; discretisation never touches the tape.
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

}  // namespace

Genotype discretize(const CellArch& arch) {
  const CellArchSpec& spec = arch.spec;
  const int64_t num_ops = spec.num_ops();
  Genotype geno;
  for (int64_t j = 0; j < spec.num_nodes; ++j) {
    const int64_t off = spec.edge_offset(j);
    const int64_t fan_in = spec.edges_into(j);
    const std::vector<double> beta_w = plain_softmax(arch.beta.data.data() + off, fan_in);
    std::vector<double> scores(static_cast<size_t>(fan_in));
    std::vector<int64_t> best_op(static_cast<size_t>(fan_in), -1);
    for (int64_t i = 0; i < fan_in; ++i) {
      const double* row = arch.alpha.data.data() + (off + i) * num_ops;
      const std::vector<double> alpha_w = plain_softmax(row, num_ops);
      // strongest non-zero candidate; canonical op order wins ties
      int64_t arg = -1;
      for (int64_t o = 0; o < num_ops; ++o) {
        if (spec.op_set[static_cast<size_t>(o)] == CellOp::Zero) continue;
        if (arg < 0 || alpha_w[static_cast<size_t>(o)] > alpha_w[static_cast<size_t>(arg)]) arg = o;
      }
      if (arg < 0) throw ValueError("discretize: op set contains only the zero op");
      best_op[static_cast<size_t>(i)] = arg;
      scores[static_cast<size_t>(i)] = beta_w[static_cast<size_t>(i)] * alpha_w[static_cast<size_t>(arg)];
    }
    // top-2 edges; lower input index wins ties
    int64_t first = 0;
    for (int64_t i = 1; i < fan_in; ++i) {
      if (scores[static_cast<size_t>(i)] > scores[static_cast<size_t>(first)]) first = i;
    }
    int64_t second = -1;
    for (int64_t i = 0; i < fan_in; ++i) {
      if (i == first) continue;
      if (second < 0 || scores[static_cast<size_t>(i)] > scores[static_cast<size_t>(second)]) second = i;
    }
    if (second < 0) throw ValueError("discretize: node with fewer than two incoming edges");
    std::array<GenotypeEdge, 2> picks{};
    const int64_t lo = std::min(first, second), hi = std::max(first, second);
    picks[0] = {lo, spec.op_set[static_cast<size_t>(best_op[static_cast<size_t>(lo)])]};
    picks[1] = {hi, spec.op_set[static_cast<size_t>(best_op[static_cast<size_t>(hi)])]};
    geno.nodes.push_back(picks);
  }
  return geno;
}

std::string Genotype::to_text() const {
  std::ostringstream os;
  for (size_t j = 0; j < nodes.size(); ++j) {
    os << "node_" << j << ": (" << nodes[j][0].input << ", " << cell_op_name(nodes[j][0].op)
       << "), (" << nodes[j][1].input << ", " << cell_op_name(nodes[j][1].op) << ")\n";
  }
  return os.str();
}

Genotype Genotype::from_text(const std::string& text) {
  Genotype geno;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    size_t pos = line.find(':');
    if (pos == std::string::npos || line.rfind("node_", 0) != 0) {
      throw DataError("genotype: unparseable line '" + line + "'");
    }
    std::array<GenotypeEdge, 2> picks{};
    size_t cursor = pos + 1;
    for (int slot = 0; slot < 2; ++slot) {
      const size_t open = line.find('(', cursor);
      const size_t comma = line.find(',', open);
      const size_t close = line.find(')', comma);
      if (open == std::string::npos || comma == std::string::npos || close == std::string::npos) {
        throw DataError("genotype: unparseable line '" + line + "'");
      }
      const std::string idx = line.substr(open + 1, comma - open - 1);
      std::string op = line.substr(comma + 1, close - comma - 1);
      op.erase(0, op.find_first_not_of(' '));
      op.erase(op.find_last_not_of(' ') + 1);
      picks[static_cast<size_t>(slot)] = {std::stoll(idx), cell_op_from_name(op)};
      cursor = close + 1;
    }
    geno.nodes.push_back(picks);
  }
  if (geno.nodes.empty()) throw DataError("genotype: no nodes found");
  for (size_t j = 0; j < geno.nodes.size(); ++j) {
    for (const GenotypeEdge& e : geno.nodes[j]) {
      if (e.op == CellOp::Zero) throw DataError("genotype: zero op is not a valid selection");
      if (e.input < 0 || e.input >= static_cast<int64_t>(j) + 2) {
        throw DataError("genotype: node " + std::to_string(j) + " input " + std::to_string(e.input) +
                        " is not an earlier state");
      }
    }
  }
  return geno;
}

std::string Genotype::to_dot() const {
  std::ostringstream os;
  os << "digraph cell {\n  rankdir=LR;\n";
  os << "  in0 [shape=box,label=\"input k-2\"];\n  in1 [shape=box,label=\"input k-1\"];\n";
  for (size_t j = 0; j < nodes.size(); ++j) {
    os << "  n" << j << " [label=\"node " << j << "\"];\n";
  }
  os << "  out [shape=box,label=\"concat\"];\n";
  auto state_name = [](int64_t idx) {
    if (idx == 0) return std::string("in0");
    if (idx == 1) return std::string("in1");
    return "n" + std::to_string(idx - 2);
  };
  for (size_t j = 0; j < nodes.size(); ++j) {
    for (const GenotypeEdge& e : nodes[j]) {
      os << "  " << state_name(e.input) << " -> n" << j << " [label=\"" << cell_op_name(e.op)
         << "\"];\n";
    }
    os << "  n" << j << " -> out;\n";
  }
  os << "}\n";
  return os.str();
}

DiscreteDilationNet build_discrete_dilation(const BackboneSpec& backbone, const Genotype& genotype,
                                            int64_t cells_per_block, uint64_t seed) {
  backbone.validate();
  if (cells_per_block < 1) throw ValueError("build_discrete_dilation: need at least one cell per block");
  if (genotype.nodes.empty()) throw ValueError("build_discrete_dilation: empty genotype");
  DiscreteDilationNet net;
  net.genotype = genotype;
  net.genotype.cells_per_block = cells_per_block;
  net.cells_per_block = cells_per_block;
  Rng rng(seed);
  const int64_t num_nodes = static_cast<int64_t>(genotype.nodes.size());
  for (int64_t b = 0; b < backbone.num_blocks; ++b) {
    DiscreteBlock block;
    block.channels = backbone.block_channels(b);
    block.h = backbone.block_h(b);
    block.w = backbone.block_w(b);
    for (int64_t k = 0; k < cells_per_block; ++k) {
      const CellGeom geom = cell_geometry(backbone, b, k);
      DiscreteCellParams cell;
      cell.pre0 =
          make_pre_conv(geom.in0.c, geom.out.c, geom.in0.h, geom.out.h, geom.in0.w, geom.out.w, rng);
      cell.pre1 =
          make_pre_conv(geom.in1.c, geom.out.c, geom.in1.h, geom.out.h, geom.in1.w, geom.out.w, rng);
      for (int64_t j = 0; j < num_nodes; ++j) {
        std::array<DiscreteEdge, 2> picks{};
        for (int slot = 0; slot < 2; ++slot) {
          const GenotypeEdge& ge = genotype.nodes[static_cast<size_t>(j)][static_cast<size_t>(slot)];
          DiscreteEdge de;
          de.pick = ge;
          if (cell_op_has_weights(ge.op)) de.conv = make_sep_conv(ge.op, geom.out.c, rng);
          picks[static_cast<size_t>(slot)] = std::move(de);
        }
        cell.nodes.push_back(std::move(picks));
      }
      cell.proj.w = Tensor::zeros({geom.out.c, num_nodes * geom.out.c, 1, 1});
      cell.proj.b = Tensor::zeros({geom.out.c});
      cell.proj.stride = 1;
      cell.proj.pad = 0;
      block.cells.push_back(std::move(cell));
    }
    net.blocks.push_back(std::move(block));
  }
  return net;
}

void DiscreteDilationNet::visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
  for (size_t b = 0; b < blocks.size(); ++b) {
    for (size_t k = 0; k < blocks[b].cells.size(); ++k) {
      DiscreteCellParams& cell = blocks[b].cells[k];
      const std::string base = "discrete.b" + std::to_string(b) + ".c" + std::to_string(k);
      fn(base + ".pre0.w", cell.pre0.w);
      fn(base + ".pre0.b", cell.pre0.b);
      fn(base + ".pre1.w", cell.pre1.w);
      fn(base + ".pre1.b", cell.pre1.b);
      for (size_t j = 0; j < cell.nodes.size(); ++j) {
        for (size_t s = 0; s < 2; ++s) {
          if (!cell.nodes[j][s].conv) continue;
          const std::string nb = base + ".n" + std::to_string(j) + ".s" + std::to_string(s);
          fn(nb + ".dw", cell.nodes[j][s].conv->dw);
          fn(nb + ".pw", cell.nodes[j][s].conv->pw);
        }
      }
      fn(base + ".proj.w", cell.proj.w);
      fn(base + ".proj.b", cell.proj.b);
    }
  }
}

namespace {

Tensor discrete_cell_forward(const Tensor& z_prev, const Tensor& z_prevprev,
                             const DiscreteCellParams& cell) {
  Tensor s1 = conv_forward(cell.pre1, z_prev);
  Tensor s0 = conv_forward(cell.pre0, z_prevprev);
  std::vector<Tensor> states = {std::move(s0), std::move(s1)};
  for (const auto& node : cell.nodes) {
    Tensor acc;
    for (size_t s = 0; s < 2; ++s) {
      const DiscreteEdge& edge = node[s];
      Tensor y = apply_cell_op(edge.pick.op, states[static_cast<size_t>(edge.pick.input)], edge.conv);
      acc = (s == 0) ? std::move(y) : ops::add(acc, y);
    }
    states.push_back(std::move(acc));
  }
  std::vector<Tensor> node_outs(states.begin() + 2, states.end());
  return conv_forward(cell.proj, ops::concat_channels(node_outs));
}

}  // namespace

HybridTrace hybrid_forward_discrete(const Backbone& backbone, const DiscreteDilationNet& dilation,
                                    const Tensor& images) {
  if (dilation.blocks.size() != backbone.blocks.size()) {
    throw ShapeError("hybrid: discrete dilation block count mismatch");
  }
  HybridTrace trace;
  trace.stem_out = ops::relu(conv_forward(backbone.stem, images));
  Tensor z_prev = trace.stem_out;
  Tensor z_prevprev = trace.stem_out;
  for (size_t b = 0; b < backbone.blocks.size(); ++b) {
    Tensor zb = z_prev;
    for (const ConvLayer& layer : backbone.blocks[b]) zb = ops::relu(conv_forward(layer, zb));
    const DiscreteBlock& group = dilation.blocks[b];
    Tensor zd = run_block_cells(z_prev, z_prevprev, static_cast<int64_t>(group.cells.size()),
                                [&](int64_t k, const Tensor& s1, const Tensor& s0) {
                                  return discrete_cell_forward(s1, s0, group.cells[static_cast<size_t>(k)]);
                                });
    if (zb.shape != zd.shape) {
      throw ShapeError("hybrid: block " + std::to_string(b) + " sum mismatch " + shape_str(zb.shape) +
                       " vs " + shape_str(zd.shape));
    }
    Tensor z = ops::add(zb, zd);
    z_prevprev = std::move(z_prev);
    z_prev = z;
    trace.block_out.push_back(std::move(z));
  }
  trace.logits = head_forward(backbone, z_prev);
  return trace;
}

}  // namespace dilnas
