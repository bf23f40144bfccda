#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "dilnas/pipeline.hpp"
#include "support/grad_check.hpp"

using namespace dilnas;

TEST_SUITE_BEGIN("harness");

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("dilnas_test_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_be32(std::ofstream& out, uint32_t v) {
  const unsigned char buf[4] = {static_cast<unsigned char>(v >> 24),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(buf), 4);
}

void write_idx_pair(const std::string& images, const std::string& labels, uint32_t count,
                    uint32_t side, uint32_t image_magic = 0x803, bool truncate_pixels = false,
                    uint32_t label_count_override = 0) {
  std::ofstream img(images, std::ios::binary);
  write_be32(img, image_magic);
  write_be32(img, count);
  write_be32(img, side);
  write_be32(img, side);
  const size_t n = static_cast<size_t>(count) * side * side - (truncate_pixels ? 5 : 0);
  for (size_t i = 0; i < n; ++i) {
    const unsigned char b = static_cast<unsigned char>((i * 37) % 256);
    img.write(reinterpret_cast<const char*>(&b), 1);
  }
  img.close();
  std::ofstream lbl(labels, std::ios::binary);
  write_be32(lbl, 0x801);
  write_be32(lbl, label_count_override ? label_count_override : count);
  for (uint32_t i = 0; i < (label_count_override ? label_count_override : count); ++i) {
    const unsigned char b = static_cast<unsigned char>(i % 2);
    lbl.write(reinterpret_cast<const char*>(&b), 1);
  }
}

}  // namespace

TEST_CASE("idx loader reads well-formed files and scales pixels") {
  TempDir dir;
  write_idx_pair(dir.file("img"), dir.file("lbl"), 10, 4);
  Dataset data = load_idx(dir.file("img"), dir.file("lbl"));
  CHECK(data.count() == 10);
  CHECK(data.height == 4);
  CHECK(data.width == 4);
  CHECK(data.labels[3] == 1);
  // byte value 255 maps to exactly 1.0; byte (1*37*?)... check a known byte
  bool saw_unit = false;
  for (size_t i = 0; i < data.pixels.size(); ++i) {
    const unsigned char raw = static_cast<unsigned char>((i * 37) % 256);
    CHECK(data.pixels[i] == static_cast<double>(raw) / 255.0);
    if (raw == 255) {
      CHECK(data.pixels[i] == 1.0);
      saw_unit = true;
    }
  }
  CHECK(saw_unit);
}

TEST_CASE("idx loader errors are distinct and descriptive") {
  TempDir dir;
  write_idx_pair(dir.file("bad_magic_img"), dir.file("bad_magic_lbl"), 4, 4, 0x1234);
  CHECK_THROWS_WITH_AS(load_idx(dir.file("bad_magic_img"), dir.file("bad_magic_lbl")),
                       doctest::Contains("0x00001234"), DataError);

  write_idx_pair(dir.file("trunc_img"), dir.file("trunc_lbl"), 4, 4, 0x803, true);
  CHECK_THROWS_WITH_AS(load_idx(dir.file("trunc_img"), dir.file("trunc_lbl")),
                       doctest::Contains("truncated"), DataError);

  write_idx_pair(dir.file("cnt_img"), dir.file("cnt_lbl"), 4, 4, 0x803, false, 7);
  CHECK_THROWS_WITH_AS(load_idx(dir.file("cnt_img"), dir.file("cnt_lbl")),
                       doctest::Contains("count"), DataError);

  CHECK_THROWS_AS(load_idx(dir.file("missing"), dir.file("missing2")), DataError);
}

TEST_CASE("synthetic data is deterministic, balanced and in range") {
  SynthSpec spec;
  spec.count = 1000;
  Dataset a = synth_dataset(spec, 5);
  Dataset b = synth_dataset(spec, 5);
  CHECK(a.pixels == b.pixels);
  CHECK(a.labels == b.labels);
  int64_t zeros = 0;
  for (int64_t y : a.labels) zeros += (y == 0);
  CHECK(zeros == 500);
  for (double v : a.pixels) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  Dataset c = synth_dataset(spec, 6);
  CHECK(a.pixels != c.pixels);
}

TEST_CASE("zero margin makes classes indistinguishable for a linear probe") {
  SynthSpec spec;
  spec.count = 400;
  spec.margin = 0.0;
  Dataset train = synth_dataset(spec, 7);
  Dataset test = synth_dataset(spec, 8);

  // logistic probe on raw pixels
  const int64_t dim = spec.height * spec.width;
  Tensor w = Tensor::zeros({dim, 1});
  double bias = 0.0;
  for (int epoch = 0; epoch < 40; ++epoch) {
    for (int64_t i = 0; i < train.count(); ++i) {
      double dot = bias;
      for (int64_t t = 0; t < dim; ++t) {
        dot += w.data[static_cast<size_t>(t)] * train.pixels[static_cast<size_t>(i * dim + t)];
      }
      const double y = train.labels[static_cast<size_t>(i)] == 1 ? 1.0 : -1.0;
      const double g = -y / (1.0 + std::exp(y * dot));
      for (int64_t t = 0; t < dim; ++t) {
        w.data[static_cast<size_t>(t)] -= 0.1 * g * train.pixels[static_cast<size_t>(i * dim + t)];
      }
      bias -= 0.1 * g;
    }
  }
  int64_t correct = 0;
  for (int64_t i = 0; i < test.count(); ++i) {
    double dot = bias;
    for (int64_t t = 0; t < dim; ++t) {
      dot += w.data[static_cast<size_t>(t)] * test.pixels[static_cast<size_t>(i * dim + t)];
    }
    const int64_t pred = dot > 0.0 ? 1 : 0;
    correct += (pred == test.labels[static_cast<size_t>(i)]);
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(test.count());
  CHECK(acc > 0.45);
  CHECK(acc < 0.55);
}

TEST_CASE("a nonzero margin is linearly separable enough to learn") {
  SynthSpec spec;
  spec.count = 200;
  spec.margin = 0.8;
  Dataset train = synth_dataset(spec, 9);
  // nearest-centroid sanity check on the same distribution
  Dataset test = synth_dataset(spec, 10);
  const int64_t dim = spec.height * spec.width;
  std::vector<double> mean0(static_cast<size_t>(dim), 0.0), mean1(static_cast<size_t>(dim), 0.0);
  int64_t n0 = 0, n1 = 0;
  for (int64_t i = 0; i < train.count(); ++i) {
    auto& m = train.labels[static_cast<size_t>(i)] == 0 ? mean0 : mean1;
    (train.labels[static_cast<size_t>(i)] == 0 ? n0 : n1)++;
    for (int64_t t = 0; t < dim; ++t) m[static_cast<size_t>(t)] += train.pixels[static_cast<size_t>(i * dim + t)];
  }
  for (int64_t t = 0; t < dim; ++t) {
    mean0[static_cast<size_t>(t)] /= static_cast<double>(n0);
    mean1[static_cast<size_t>(t)] /= static_cast<double>(n1);
  }
  int64_t correct = 0;
  for (int64_t i = 0; i < test.count(); ++i) {
    double d0 = 0.0, d1 = 0.0;
    for (int64_t t = 0; t < dim; ++t) {
      const double v = test.pixels[static_cast<size_t>(i * dim + t)];
      d0 += (v - mean0[static_cast<size_t>(t)]) * (v - mean0[static_cast<size_t>(t)]);
      d1 += (v - mean1[static_cast<size_t>(t)]) * (v - mean1[static_cast<size_t>(t)]);
    }
    correct += ((d1 < d0 ? 1 : 0) == test.labels[static_cast<size_t>(i)]);
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(test.count()) > 0.9);
}

TEST_CASE("search split halves the data deterministically") {
  SynthSpec spec;
  spec.count = 100;
  Dataset data = synth_dataset(spec, 11);
  auto [a, b] = split_search_data(data, 3);
  CHECK(a.count() == 50);
  CHECK(b.count() == 50);
  auto [a2, b2] = split_search_data(data, 3);
  CHECK(a.pixels == a2.pixels);
  CHECK(b.labels == b2.labels);

  // disjoint and union == original: match multisets of example fingerprints
  auto fingerprint = [&](const Dataset& d, int64_t i) {
    double acc = static_cast<double>(d.labels[static_cast<size_t>(i)]);
    const int64_t dim = d.channels * d.height * d.width;
    for (int64_t t = 0; t < dim; ++t) {
      acc += d.pixels[static_cast<size_t>(i * dim + t)] * static_cast<double>(t + 1);
    }
    return acc;
  };
  std::vector<double> all, merged;
  for (int64_t i = 0; i < data.count(); ++i) all.push_back(fingerprint(data, i));
  for (int64_t i = 0; i < a.count(); ++i) merged.push_back(fingerprint(a, i));
  for (int64_t i = 0; i < b.count(); ++i) merged.push_back(fingerprint(b, i));
  std::sort(all.begin(), all.end());
  std::sort(merged.begin(), merged.end());
  CHECK(all == merged);

  Dataset odd = synth_dataset([] { SynthSpec s; s.count = 101; return s; }(), 12);
  auto [c, d] = split_search_data(odd, 4);
  CHECK(std::abs(c.count() - d.count()) <= 1);
  CHECK(c.count() + d.count() == 101);

  Dataset empty;
  CHECK_THROWS_AS(split_search_data(empty, 0), ValueError);
}

TEST_CASE("config parsing, overrides and dump round trip") {
  RunConfig cfg = RunConfig::from_text("search.epochs = 4  # comment\n\n# full line comment\nattack.epsilon=0.1\n");
  CHECK(cfg.get_int("search.epochs") == 4);
  CHECK(cfg.get_double("attack.epsilon") == 0.1);
  CHECK(cfg.get_bool("search.flops_scaling"));  // default survives
  cfg.set("search.tau=2.0");
  CHECK(cfg.get_double("search.tau") == 2.0);
  CHECK_THROWS_AS(cfg.set("search.typo=1"), UsageError);
  CHECK_THROWS_AS(RunConfig::from_text("no equals sign\n"), UsageError);
  CHECK_THROWS_AS(cfg.get_int("attack.epsilon"), UsageError);

  RunConfig reparsed = RunConfig::from_text(cfg.dump());
  CHECK(reparsed.dump() == cfg.dump());
}

TEST_CASE("checkpoints round trip bit-exactly") {
  TempDir dir;
  Rng rng(13);
  Checkpoint ckpt;
  ckpt.add("a.w", dilnas::testing::random_tensor({3, 4}, rng, -5.0, 5.0));
  ckpt.add("b.bias", dilnas::testing::random_tensor({7}, rng, -1e8, 1e8));
  Tensor exact = Tensor::of({4}, {0.1, -0.0, 1.0 / 3.0, 6.02214076e23});
  ckpt.add("exact", exact);
  ckpt.genotype_text = "node_0: (0, identity), (1, identity)\n";
  ckpt.config_text = "run.seed = 0\n";
  ckpt.save(dir.file("model.nadr"));

  Checkpoint loaded = Checkpoint::load(dir.file("model.nadr"));
  REQUIRE(loaded.tensors.size() == 3);
  for (size_t i = 0; i < ckpt.tensors.size(); ++i) {
    CHECK(loaded.tensors[i].first == ckpt.tensors[i].first);
    CHECK(loaded.tensors[i].second.shape == ckpt.tensors[i].second.shape);
    REQUIRE(loaded.tensors[i].second.data.size() == ckpt.tensors[i].second.data.size());
    for (size_t k = 0; k < loaded.tensors[i].second.data.size(); ++k) {
      const uint64_t* lhs = reinterpret_cast<const uint64_t*>(&loaded.tensors[i].second.data[k]);
      const uint64_t* rhs = reinterpret_cast<const uint64_t*>(&ckpt.tensors[i].second.data[k]);
      CHECK(*lhs == *rhs);
    }
  }
  CHECK(loaded.genotype_text == ckpt.genotype_text);
  CHECK(loaded.config_text == ckpt.config_text);

  std::ofstream bad(dir.file("bad.nadr"), std::ios::binary);
  bad << "XXXX";
  bad.close();
  CHECK_THROWS_AS(Checkpoint::load(dir.file("bad.nadr")), DataError);
}

TEST_CASE("backbone checkpoint restores the exact weights") {
  TempDir dir;
  RunConfig cfg;
  BackboneSpec spec;
  spec.num_blocks = 2;
  spec.layers_per_block = 1;
  spec.stem_channels = 4;
  spec.in_h = 8;
  spec.in_w = 8;
  Backbone net = build_backbone(spec, 44);
  Checkpoint ckpt = checkpoint_backbone(net, cfg);
  ckpt.save(dir.file("bb.nadr"));
  Backbone other = build_backbone(spec, 45);
  restore_backbone(other, Checkpoint::load(dir.file("bb.nadr")));
  bool same = true;
  std::vector<std::vector<double>> a, b;
  net.visit_params([&](const std::string&, Tensor& t) { a.push_back(t.data); });
  other.visit_params([&](const std::string&, Tensor& t) { b.push_back(t.data); });
  for (size_t i = 0; i < a.size(); ++i) same = same && a[i] == b[i];
  CHECK(same);
}

TEST_CASE("evaluation rows collapse to natural accuracy at zero budget") {
  BackboneSpec spec;
  spec.num_blocks = 1;
  spec.stem_channels = 2;
  spec.in_h = 6;
  spec.in_w = 6;
  Backbone net = build_backbone(spec, 46);
  SynthSpec synth;
  synth.count = 64;
  synth.height = 6;
  synth.width = 6;
  Dataset data = synth_dataset(synth, 47);
  std::vector<Batch> batches = make_batches(data, 16, false);
  ForwardFn forward = [&](const Tensor& x) { return backbone_forward(net, x).logits; };
  AttackBudget zero;
  zero.epsilon = 0.0;
  auto rows = evaluate(forward, batches, zero, {"natural", "fgsm", "pgd-5"});
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].accuracy == rows[1].accuracy);
  CHECK(rows[0].accuracy == rows[2].accuracy);
}

TEST_CASE("an untrained balanced task sits at chance level") {
  BackboneSpec spec;
  spec.num_blocks = 1;
  spec.stem_channels = 2;
  spec.in_h = 8;
  spec.in_w = 8;
  Backbone net = build_backbone(spec, 48);
  net.head_w = Tensor::zeros(net.head_w.shape);  // untrained head: constant logits
  net.head_b = Tensor::zeros(net.head_b.shape);
  SynthSpec synth;
  synth.count = 200;
  Dataset data = synth_dataset(synth, 49);
  std::vector<Batch> batches = make_batches(data, 50, false);
  ForwardFn forward = [&](const Tensor& x) { return backbone_forward(net, x).logits; };
  const double acc = evaluate_accuracy(forward, batches);
  CHECK(acc == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("pgd accuracy is monotone non-increasing in steps on a trained model") {
  SynthSpec synth;
  synth.count = 96;
  Dataset train = synth_dataset(synth, 50);
  Dataset valid = synth_dataset(synth, 51);
  RunConfig cfg;
  Backbone net = build_backbone(backbone_spec_from(cfg, train, 2), 52);
  TrainOptions opt;
  opt.epochs = 4;
  opt.lr = 0.05;
  opt.batch_size = 16;
  opt.seed = 53;
  train_backbone(net, train, opt);
  std::vector<Batch> batches = make_batches(valid, 24, false);
  ForwardFn forward = [&](const Tensor& x) { return backbone_forward(net, x).logits; };
  AttackBudget budget;
  budget.epsilon = 0.08;
  budget.step_size = 0.02;
  budget.random_start = false;
  auto rows = evaluate(forward, batches, budget, {"natural", "pgd-1", "pgd-20"});
  CHECK(rows[0].accuracy + 0.005 >= rows[1].accuracy);
  CHECK(rows[1].accuracy + 0.005 >= rows[2].accuracy);
}

TEST_CASE("retrain with zero epochs returns an evaluable model and row counts match") {
  SynthSpec synth;
  synth.count = 32;
  Dataset train = synth_dataset(synth, 54);
  RunConfig cfg;
  Backbone backbone = build_backbone(backbone_spec_from(cfg, train, 2), 55);
  CellArchSpec arch;
  arch.num_nodes = 2;
  arch.op_set = {CellOp::Identity, CellOp::Zero, CellOp::SepConv3};
  Genotype geno = discretize(CellArch::make(arch));
  DiscreteDilationNet disc = build_discrete_dilation(backbone.spec, geno, 1, 56);

  TrainOptions opt;
  opt.epochs = 0;
  auto rows0 = retrain_hybrid(backbone, disc, train, opt);
  CHECK(rows0.empty());
  std::vector<Batch> batches = make_batches(train, 16, false);
  ForwardFn forward = [&](const Tensor& x) {
    return hybrid_forward_discrete(backbone, disc, x).logits;
  };
  CHECK(evaluate_accuracy(forward, batches) >= 0.0);

  opt.epochs = 2;
  opt.batch_size = 16;
  opt.budget.epsilon = 0.05;
  opt.budget.step_size = 0.02;
  opt.budget.steps = 2;
  auto rows2 = retrain_hybrid(backbone, disc, train, opt);
  CHECK(rows2.size() == 2);
}

TEST_CASE("attack name parsing rejects junk") {
  std::vector<Batch> batches;
  ForwardFn forward = [](const Tensor& x) { return x; };
  AttackBudget base;
  CHECK_THROWS_AS(evaluate(forward, batches, base, {"pgd-"}), UsageError);
  CHECK_THROWS_AS(evaluate(forward, batches, base, {"warp"}), UsageError);
}

TEST_SUITE_END();
