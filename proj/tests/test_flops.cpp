#include <doctest.h>

#include <cmath>

#include "dilnas/flops.hpp"
#include "support/grad_check.hpp"

using namespace dilnas;
using dilnas::testing::grad_check;
using dilnas::testing::rel_err;

TEST_SUITE_BEGIN("flops");

namespace {

BackboneSpec desk_spec() {
  BackboneSpec spec;
  spec.num_blocks = 2;
  spec.layers_per_block = 1;
  spec.stem_channels = 4;
  spec.channel_multiplier = 2;
  spec.in_channels = 1;
  spec.in_h = 8;
  spec.in_w = 8;
  spec.num_classes = 2;
  return spec;
}

CellArchSpec micro_spec() {
  CellArchSpec spec;
  spec.num_nodes = 2;
  spec.op_set = {CellOp::Identity, CellOp::Zero, CellOp::SepConv3};
  spec.channel_ratio = 1.0;
  return spec;
}

}  // namespace

TEST_CASE("free ops cost nothing; plain conv counts multiply-adds") {
  CHECK(op_flops(CellOp::Zero, 16, 8, 8) == 0);
  CHECK(op_flops(CellOp::Identity, 16, 8, 8) == 0);
  CHECK(op_flops(CellOp::AvgPool3, 16, 8, 8) == 0);
  CHECK(op_flops(CellOp::MaxPool3, 16, 8, 8) == 0);
  // 4*4*2*(9*2) hand count
  CHECK(conv_flops(2, 2, 3, 4, 4) == 576);
  // separable = depthwise + pointwise
  CHECK(op_flops(CellOp::SepConv3, 2, 4, 4) == 4 * 4 * 2 * 9 + 4 * 4 * 2 * 2);
  CHECK(op_flops(CellOp::DilConv3, 2, 4, 4) == op_flops(CellOp::SepConv3, 2, 4, 4));
  CHECK(op_flops(CellOp::SepConv5, 2, 4, 4) == 4 * 4 * 2 * 25 + 4 * 4 * 2 * 2);
}

TEST_CASE("uniform mixture of costs {100, 0} expects 50") {
  CellArchSpec spec;
  spec.num_nodes = 1;
  spec.op_set = {CellOp::Identity, CellOp::Zero};
  CellArch arch = CellArch::make(spec);
  // both edges carry the same cost table so any beta keeps the value
  std::vector<std::vector<double>> table = {{100.0, 0.0}, {100.0, 0.0}};
  Tensor node = expected_node_flops(arch, 0, table);
  CHECK(node.item() == doctest::Approx(50.0).epsilon(1e-12));
}

TEST_CASE("identical per-op costs make the expectation constant") {
  Rng rng(5);
  CellArchSpec spec = micro_spec();
  CellArch arch = CellArch::make(spec);
  for (double& v : arch.alpha.data) v = rng.uniform(-2.0, 2.0);
  for (double& v : arch.beta.data) v = rng.uniform(-2.0, 2.0);
  std::vector<std::vector<double>> table(static_cast<size_t>(spec.num_edges()),
                                         std::vector<double>(3, 7.5));
  for (int64_t j = 0; j < spec.num_nodes; ++j) {
    CHECK(rel_err(expected_node_flops(arch, j, table).item(), 7.5) < 1e-12);
  }
}

TEST_CASE("expectation equals the brute-force architecture enumeration") {
  Rng rng(6);
  const CellArchSpec spec = micro_spec();
  const BackboneSpec bb = desk_spec();
  DilationNet net = build_dilation(bb, spec, 1, false, 3);
  const BlockCells& block = net.blocks[0];

  std::vector<std::vector<double>> table(static_cast<size_t>(spec.num_edges()));
  for (int64_t e = 0; e < spec.num_edges(); ++e) {
    table[static_cast<size_t>(e)].resize(3);
    for (int64_t o = 0; o < 3; ++o) {
      table[static_cast<size_t>(e)][static_cast<size_t>(o)] = static_cast<double>(
          op_flops(spec.op_set[static_cast<size_t>(o)],
                   static_cast<int64_t>(block.masks[static_cast<size_t>(e)].size()), block.h,
                   block.w));
    }
  }

  for (int trial = 0; trial < 100; ++trial) {
    CellArch arch = CellArch::make(spec);
    for (double& v : arch.alpha.data) v = rng.uniform(-2.0, 2.0);
    for (double& v : arch.beta.data) v = rng.uniform(-2.0, 2.0);

    double node_sum = 0.0;
    for (int64_t j = 0; j < spec.num_nodes; ++j) {
      node_sum += expected_node_flops(arch, j, table).item();
    }

    // enumerate every discrete choice: each node picks one edge and one op
    auto softmax_at = [&](const double* base, int64_t n, int64_t i) {
      double z = 0.0;
      double m = base[0];
      for (int64_t k = 1; k < n; ++k) m = std::max(m, base[k]);
      for (int64_t k = 0; k < n; ++k) z += std::exp(base[k] - m);
      return std::exp(base[i] - m) / z;
    };
    double expectation = 0.0;
    const int64_t e0 = spec.edge_offset(0), f0 = spec.edges_into(0);
    const int64_t e1 = spec.edge_offset(1), f1 = spec.edges_into(1);
    for (int64_t i0 = 0; i0 < f0; ++i0) {
      for (int64_t o0 = 0; o0 < 3; ++o0) {
        const double p0 = softmax_at(arch.beta.data.data() + e0, f0, i0) *
                          softmax_at(arch.alpha.data.data() + (e0 + i0) * 3, 3, o0);
        for (int64_t i1 = 0; i1 < f1; ++i1) {
          for (int64_t o1 = 0; o1 < 3; ++o1) {
            const double p1 = softmax_at(arch.beta.data.data() + e1, f1, i1) *
                              softmax_at(arch.alpha.data.data() + (e1 + i1) * 3, 3, o1);
            const double cost = table[static_cast<size_t>(e0 + i0)][static_cast<size_t>(o0)] +
                                table[static_cast<size_t>(e1 + i1)][static_cast<size_t>(o1)];
            expectation += p0 * p1 * cost;
          }
        }
      }
    }
    CHECK(std::fabs(node_sum - expectation) < 1e-9);
  }
}

TEST_CASE("zero-cost op sets leave only the fixed projection overhead") {
  BackboneSpec bb = desk_spec();
  CellArchSpec spec;
  spec.num_nodes = 2;
  spec.op_set = {CellOp::Identity, CellOp::Zero, CellOp::AvgPool3};
  spec.channel_ratio = 1.0;
  DilationNet net = build_dilation(bb, spec, 2, false, 4);
  FlopsReport report = flops_report(build_backbone(bb, 4), net, 1.0, 1.0);
  CHECK(report.dilation_total == doctest::Approx(report.fixed_overhead).epsilon(1e-12));
  for (double v : report.cell_expected) CHECK(v == 0.0);
}

TEST_CASE("doubling the cells doubles the expected cell term") {
  BackboneSpec bb = desk_spec();
  const CellArchSpec spec = micro_spec();
  DilationNet one = build_dilation(bb, spec, 1, false, 5);
  DilationNet two = build_dilation(bb, spec, 2, false, 5);
  // align the relaxed state and masks
  two.arch = one.arch;
  for (size_t b = 0; b < one.blocks.size(); ++b) two.blocks[b].masks = one.blocks[b].masks;
  FlopsReport r1 = flops_report(build_backbone(bb, 5), one, 1.0, 1.0);
  FlopsReport r2 = flops_report(build_backbone(bb, 5), two, 1.0, 1.0);
  const double cells1 = r1.dilation_total - r1.fixed_overhead;
  const double cells2 = r2.dilation_total - r2.fixed_overhead;
  CHECK(rel_err(cells2, 2.0 * cells1) < 1e-12);
}

TEST_CASE("scale factor calibration and closed forms") {
  // gamma calibrated at the reference cost gives factor exactly 1
  const double f0 = 12345.0;
  const double gamma = calibrate_gamma(f0, 1.0, TauMode::PowLog);
  Tensor factor = flops_scale_factor(Tensor::scalar(f0), gamma, 1.0, TauMode::PowLog);
  CHECK(std::fabs(factor.item() - 1.0) < 1e-12);

  // adv loss passes through unchanged at the calibration point
  Tensor scaled = flops_scaled_loss(Tensor::scalar(f0), Tensor::scalar(0.37), gamma, 1.0);
  CHECK(std::fabs(scaled.item() - 0.37) < 1e-9);

  // tau = 0 collapses the exponent
  Tensor t0 = flops_scaled_loss(Tensor::scalar(55.0), Tensor::scalar(0.5), 2.0, 0.0);
  CHECK(std::fabs(t0.item() - 1.0) < 1e-12);

  // gamma=1, tau=1, F=e^2, loss=0.5 -> 1.0
  Tensor unit = flops_scaled_loss(Tensor::scalar(std::exp(2.0)), Tensor::scalar(0.5), 1.0, 1.0);
  CHECK(std::fabs(unit.item() - 1.0) < 1e-12);

  // the two tau readings agree at tau = 1
  Tensor a = flops_scale_factor(Tensor::scalar(90.0), 0.3, 1.0, TauMode::PowLog);
  Tensor b = flops_scale_factor(Tensor::scalar(90.0), 0.3, 1.0, TauMode::MulLog);
  CHECK(std::fabs(a.item() - b.item()) < 1e-15);

  CHECK_THROWS_AS(flops_scale_factor(Tensor::scalar(1.0), 1.0, 1.0, TauMode::PowLog), ValueError);
  CHECK_THROWS_AS(flops_scale_factor(Tensor::scalar(0.5), 1.0, 1.0, TauMode::PowLog), ValueError);
}

TEST_CASE("raising the priciest op's logit never lowers the expectation") {
  Rng rng(9);
  const CellArchSpec spec = micro_spec();  // sep_conv at index 2 is the expensive op
  std::vector<std::vector<double>> table(static_cast<size_t>(spec.num_edges()),
                                         {0.0, 0.0, 981.0});
  for (int trial = 0; trial < 200; ++trial) {
    CellArch arch = CellArch::make(spec);
    for (double& v : arch.alpha.data) v = rng.uniform(-2.0, 2.0);
    for (double& v : arch.beta.data) v = rng.uniform(-2.0, 2.0);
    double before = 0.0, after = 0.0;
    for (int64_t j = 0; j < spec.num_nodes; ++j) before += expected_node_flops(arch, j, table).item();
    const int64_t edge = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(spec.num_edges())));
    arch.alpha.data[static_cast<size_t>(edge * 3 + 2)] += rng.uniform(0.0, 2.0);
    for (int64_t j = 0; j < spec.num_nodes; ++j) after += expected_node_flops(arch, j, table).item();
    CHECK(after >= before - 1e-12);
  }
}

TEST_CASE("the scaled objective differentiates through the cost softmaxes") {
  const BackboneSpec bb = desk_spec();
  DilationNet net = build_dilation(bb, micro_spec(), 1, false, 11);
  Rng rng(12);
  for (double& v : net.arch.alpha.data) v = rng.uniform(-1.0, 1.0);
  for (double& v : net.arch.beta.data) v = rng.uniform(-1.0, 1.0);
  const double gamma = calibrate_gamma(expected_dilation_flops_value(net), 1.3, TauMode::PowLog);

  auto res = grad_check(
      [&](const std::vector<Tensor>& in) {
        DilationNet probe = net;
        probe.arch.alpha = in[0];
        probe.arch.beta = in[1];
        return flops_scaled_loss(expected_dilation_flops(probe), Tensor::scalar(0.8), gamma, 1.3,
                                 TauMode::PowLog);
      },
      {net.arch.alpha, net.arch.beta}, 1e-5);
  CHECK(res.coords > 0);
  CHECK(res.max_rel < 1e-5);
}

TEST_CASE("tracked and plain cost evaluations agree") {
  const BackboneSpec bb = desk_spec();
  DilationNet net = build_dilation(bb, CellArchSpec{}, 2, false, 13);
  Rng rng(14);
  for (double& v : net.arch.alpha.data) v = rng.uniform(-1.5, 1.5);
  for (double& v : net.arch.beta.data) v = rng.uniform(-1.5, 1.5);
  CHECK(rel_err(expected_dilation_flops(net).item(), expected_dilation_flops_value(net)) < 1e-12);
}

TEST_CASE("genotype cost counts only the selected ops plus fixed convs") {
  const BackboneSpec bb = desk_spec();
  CellArchSpec spec;
  CellArch all_identity = CellArch::make(spec);
  for (int64_t e = 0; e < spec.num_edges(); ++e) {
    all_identity.alpha.data[static_cast<size_t>(e * spec.num_ops() + 6)] = 9.0;  // identity
  }
  Genotype cheap = discretize(all_identity);
  CellArch all_conv = CellArch::make(spec);
  for (int64_t e = 0; e < spec.num_edges(); ++e) {
    all_conv.alpha.data[static_cast<size_t>(e * spec.num_ops() + 1)] = 9.0;  // sep_conv_5x5
  }
  Genotype pricey = discretize(all_conv);
  CHECK(genotype_flops(bb, cheap, 2) < genotype_flops(bb, pricey, 2));
}

TEST_CASE("report serialisation carries totals") {
  const BackboneSpec bb = desk_spec();
  DilationNet net = build_dilation(bb, micro_spec(), 1, false, 15);
  FlopsReport report = flops_report(build_backbone(bb, 15), net, 0.5, 1.0);
  const std::string csv = report.to_csv();
  CHECK(csv.find("dilation_total") != std::string::npos);
  CHECK(csv.find("backbone_total") != std::string::npos);
  CHECK(report.backbone_total > 0.0);
}

TEST_SUITE_END();
