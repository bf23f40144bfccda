#include "dilnas/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace dilnas {

namespace {

std::vector<std::pair<Tensor*, int64_t>> watch_all(
    Tape& tape, const std::function<void(const std::function<void(const std::string&, Tensor&)>&)>&
                    visit_original,
    const std::function<void(const std::function<void(const std::string&, Tensor&)>&)>& visit_copy) {
  std::vector<Tensor*> targets;
  visit_original([&](const std::string&, Tensor& t) { targets.push_back(&t); });
  std::vector<std::pair<Tensor*, int64_t>> binds;
  size_t i = 0;
  visit_copy([&](const std::string&, Tensor& t) {
    t = tape.watch(t);
    binds.emplace_back(targets[i++], t.node);
  });
  return binds;
}

std::vector<Tensor> grads_for(const std::unordered_map<int64_t, Tensor>& grads,
                              const std::vector<std::pair<Tensor*, int64_t>>& binds) {
  std::vector<Tensor> out;
  out.reserve(binds.size());
  for (const auto& [target, node] : binds) {
    auto it = grads.find(node);
    if (it == grads.end()) {
      out.push_back(Tensor::zeros(target->shape));
      continue;
    }
    for (double v : it->second.data) {
      if (!std::isfinite(v)) throw DivergenceError("training: non-finite gradient");
    }
    out.push_back(it->second.detached());
  }
  return out;
}

std::vector<Batch> shuffled_batches(const Dataset& data, int64_t batch_size, Rng& rng) {
  // deterministic per-epoch shuffle
  const int64_t n = data.count();
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  for (int64_t i = n - 1; i > 0; --i) {
    const int64_t j = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(i + 1)));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  Dataset shuffled;
  shuffled.channels = data.channels;
  shuffled.height = data.height;
  shuffled.width = data.width;
  const int64_t stride = data.channels * data.height * data.width;
  shuffled.pixels.reserve(data.pixels.size());
  for (int64_t i = 0; i < n; ++i) {
    const int64_t src = order[static_cast<size_t>(i)];
    shuffled.pixels.insert(shuffled.pixels.end(), data.pixels.begin() + src * stride,
                           data.pixels.begin() + (src + 1) * stride);
    shuffled.labels.push_back(data.labels[static_cast<size_t>(src)]);
  }
  return make_batches(shuffled, batch_size, /*drop_remainder=*/true);
}

}  // namespace

BackboneSpec backbone_spec_from(const RunConfig& cfg, const Dataset& sample, int64_t num_classes) {
  BackboneSpec spec;
  spec.num_blocks = cfg.get_int("backbone.blocks");
  spec.layers_per_block = cfg.get_int("backbone.layers_per_block");
  spec.stem_channels = cfg.get_int("backbone.stem_channels");
  spec.channel_multiplier = cfg.get_int("backbone.channel_multiplier");
  spec.in_channels = sample.channels;
  spec.in_h = sample.height;
  spec.in_w = sample.width;
  spec.num_classes = num_classes;
  spec.validate();
  return spec;
}

AttackBudget budget_from(const RunConfig& cfg) {
  AttackBudget b;
  const std::string norm = cfg.get_str("attack.norm");
  if (norm == "inf") {
    b.norm = NormOrder::LInf;
  } else if (norm == "l2") {
    b.norm = NormOrder::L2;
  } else {
    throw UsageError("attack.norm must be 'inf' or 'l2', got '" + norm + "'");
  }
  b.epsilon = cfg.get_double("attack.epsilon");
  b.step_size = cfg.get_double("attack.step_size");
  b.steps = cfg.get_int("attack.steps");
  b.random_start = cfg.get_bool("attack.random_start");
  b.clamp_lo = cfg.get_double("attack.clamp_lo");
  b.clamp_hi = cfg.get_double("attack.clamp_hi");
  b.seed = static_cast<uint64_t>(cfg.get_int("run.seed"));
  b.validate();
  return b;
}

CellArchSpec arch_spec_from(const RunConfig& cfg) {
  CellArchSpec spec;
  spec.num_nodes = cfg.get_int("search.nodes");
  spec.channel_ratio = cfg.get_double("search.channel_ratio");
  spec.op_set.clear();
  for (const std::string& name : split_csv_list(cfg.get_str("search.ops"))) {
    spec.op_set.push_back(cell_op_from_name(name));
  }
  spec.validate();
  return spec;
}

SearchOptions search_options_from(const RunConfig& cfg) {
  SearchOptions opt;
  opt.epochs = cfg.get_int("search.epochs");
  opt.batch_size = cfg.get_int("search.batch");
  opt.eta1 = cfg.get_double("search.eta1");
  opt.eta2 = cfg.get_double("search.eta2");
  opt.eta2_min = cfg.get_double("search.eta2_min");
  opt.momentum = cfg.get_double("search.momentum");
  opt.rho = cfg.get_double("search.rho");
  opt.flops_scaling = cfg.get_bool("search.flops_scaling");
  opt.gamma = cfg.get_double("search.gamma");
  opt.tau = cfg.get_double("search.tau");
  const std::string mode = cfg.get_str("search.tau_mode");
  if (mode == "pow-log") {
    opt.tau_mode = TauMode::PowLog;
  } else if (mode == "mul-log") {
    opt.tau_mode = TauMode::MulLog;
  } else {
    throw UsageError("search.tau_mode must be 'pow-log' or 'mul-log', got '" + mode + "'");
  }
  opt.freeat_replay = cfg.get_int("freeat.replay");
  opt.budget = budget_from(cfg);
  opt.seed = static_cast<uint64_t>(cfg.get_int("run.seed"));
  opt.cotrain_backbone = cfg.get_bool("search.cotrain_backbone");
  opt.resample_masks = cfg.get_bool("search.resample_masks");
  return opt;
}

namespace {

Dataset filter_classes(const Dataset& data, int64_t a, int64_t b) {
  Dataset out;
  out.channels = data.channels;
  out.height = data.height;
  out.width = data.width;
  const int64_t stride = data.channels * data.height * data.width;
  for (int64_t i = 0; i < data.count(); ++i) {
    const int64_t y = data.labels[static_cast<size_t>(i)];
    if (y != a && y != b) continue;
    out.pixels.insert(out.pixels.end(), data.pixels.begin() + i * stride,
                      data.pixels.begin() + (i + 1) * stride);
    out.labels.push_back(y == a ? 0 : 1);
  }
  if (out.count() == 0) throw DataError("class filter removed every example");
  return out;
}

Dataset load_idx_pair(const RunConfig& cfg, const std::string& images_key,
                      const std::string& labels_key) {
  Dataset data = load_idx(cfg.get_str(images_key), cfg.get_str(labels_key));
  const int64_t a = cfg.get_int("data.idx.class_a");
  const int64_t b = cfg.get_int("data.idx.class_b");
  if (a >= 0 && b >= 0) data = filter_classes(data, a, b);
  return data;
}

}  // namespace

Dataset load_train_dataset(const RunConfig& cfg) {
  const std::string source = cfg.get_str("data.source");
  if (source == "idx") return load_idx_pair(cfg, "data.idx.train_images", "data.idx.train_labels");
  if (source != "synth") throw UsageError("data.source must be 'synth' or 'idx'");
  SynthSpec spec;
  spec.classes = cfg.get_int("data.synth.classes");
  spec.count = cfg.get_int("data.synth.count");
  spec.height = cfg.get_int("data.synth.height");
  spec.width = cfg.get_int("data.synth.width");
  spec.margin = cfg.get_double("data.synth.margin");
  spec.noise = cfg.get_double("data.synth.noise");
  return synth_dataset(spec, static_cast<uint64_t>(cfg.get_int("run.seed")) * 2 + 1);
}

Dataset load_valid_dataset(const RunConfig& cfg) {
  const std::string source = cfg.get_str("data.source");
  if (source == "idx") return load_idx_pair(cfg, "data.idx.test_images", "data.idx.test_labels");
  if (source != "synth") throw UsageError("data.source must be 'synth' or 'idx'");
  SynthSpec spec;
  spec.classes = cfg.get_int("data.synth.classes");
  spec.count = cfg.get_int("data.synth.valid_count");
  spec.height = cfg.get_int("data.synth.height");
  spec.width = cfg.get_int("data.synth.width");
  spec.margin = cfg.get_double("data.synth.margin");
  spec.noise = cfg.get_double("data.synth.noise");
  return synth_dataset(spec, static_cast<uint64_t>(cfg.get_int("run.seed")) * 2 + 2);
}

int64_t dataset_classes(const Dataset& data) {
  int64_t max_label = 0;
  for (int64_t y : data.labels) max_label = std::max(max_label, y);
  return std::max<int64_t>(2, max_label + 1);
}

std::vector<EpochMetrics> train_backbone(Backbone& net, const Dataset& train,
                                         const TrainOptions& opt) {
  std::vector<EpochMetrics> history;
  SgdMomentum momentum;
  momentum.momentum = opt.momentum;
  Rng rng(opt.seed);
  for (int64_t epoch = 0; epoch < opt.epochs; ++epoch) {
    Rng epoch_rng = rng.fork(static_cast<uint64_t>(epoch) + 1);
    std::vector<Batch> batches = shuffled_batches(train, opt.batch_size, epoch_rng);
    double loss_sum = 0.0, acc_sum = 0.0;
    int64_t steps = 0;
    for (const Batch& batch : batches) {
      Tensor x = batch.images;
      if (opt.adversarial) {
        AttackBudget budget = opt.budget;
        budget.seed = epoch_rng.next_u64();
        x = pgd(
            [&](const Tensor& xa, const std::vector<int64_t>& y) {
              return standard_loss(backbone_forward(net, xa).logits, y);
            },
            batch.images, batch.labels, budget);
      }
      Tape tape;
      Backbone watched = net;
      auto binds = watch_all(
          tape, [&](auto fn) { net.visit_params(fn); },
          [&](auto fn) { watched.visit_params(fn); });
      BackboneTrace trace = backbone_forward(watched, x);
      Tensor loss = standard_loss(trace.logits, batch.labels);
      auto grads = tape.backward(loss);
      std::vector<Tensor*> targets;
      for (const auto& [t, n] : binds) targets.push_back(t);
      momentum.step(targets, grads_for(grads, binds), opt.lr);
      loss_sum += loss.item();
      acc_sum += accuracy(trace.logits, batch.labels);
      ++steps;
    }
    EpochMetrics row;
    row.epoch = epoch;
    row.loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
    row.accuracy = steps ? acc_sum / static_cast<double>(steps) : 0.0;
    history.push_back(row);
  }
  return history;
}

std::vector<EpochMetrics> retrain_hybrid(const Backbone& backbone, DiscreteDilationNet& dilation,
                                         const Dataset& train, const TrainOptions& opt) {
  std::vector<EpochMetrics> history;
  SgdMomentum momentum;
  momentum.momentum = opt.momentum;
  Rng rng(opt.seed);
  for (int64_t epoch = 0; epoch < opt.epochs; ++epoch) {
    Rng epoch_rng = rng.fork(static_cast<uint64_t>(epoch) + 1);
    std::vector<Batch> batches = shuffled_batches(train, opt.batch_size, epoch_rng);
    double loss_sum = 0.0, acc_sum = 0.0;
    int64_t steps = 0;
    for (const Batch& batch : batches) {
      AttackBudget budget = opt.budget;
      budget.seed = epoch_rng.next_u64();
      Tensor x_adv = pgd(
          [&](const Tensor& xa, const std::vector<int64_t>& y) {
            return standard_loss(hybrid_forward_discrete(backbone, dilation, xa).logits, y);
          },
          batch.images, batch.labels, budget);
      Tape tape;
      DiscreteDilationNet watched = dilation;
      auto binds = watch_all(
          tape, [&](auto fn) { dilation.visit_params(fn); },
          [&](auto fn) { watched.visit_params(fn); });
      HybridTrace trace = hybrid_forward_discrete(backbone, watched, x_adv);
      Tensor loss = standard_loss(trace.logits, batch.labels);
      auto grads = tape.backward(loss);
      std::vector<Tensor*> targets;
      for (const auto& [t, n] : binds) targets.push_back(t);
      momentum.step(targets, grads_for(grads, binds), opt.lr);
      loss_sum += loss.item();
      acc_sum += accuracy(trace.logits, batch.labels);
      ++steps;
    }
    EpochMetrics row;
    row.epoch = epoch;
    row.loss = steps ? loss_sum / static_cast<double>(steps) : 0.0;
    row.accuracy = steps ? acc_sum / static_cast<double>(steps) : 0.0;
    history.push_back(row);
  }
  return history;
}

namespace {

AttackBudget budget_for_name(const std::string& name, const AttackBudget& base) {
  AttackBudget b = base;
  if (name == "natural") {
    b.epsilon = 0.0;
    b.steps = 1;
    b.random_start = false;
    return b;
  }
  if (name == "fgsm") {
    b.steps = 1;
    b.random_start = false;
    b.step_size = b.epsilon;
    return b;
  }
  if (name.rfind("pgd-", 0) == 0) {
    try {
      b.steps = std::stoll(name.substr(4));
    } catch (const std::exception&) {
      throw UsageError("bad attack name '" + name + "'");
    }
    if (b.steps < 1) throw UsageError("bad attack name '" + name + "'");
    return b;
  }
  throw UsageError("unknown attack '" + name + "' (expected natural, fgsm or pgd-K)");
}

}  // namespace

std::vector<EvalRow> evaluate(const ForwardFn& forward, const std::vector<Batch>& batches,
                              const AttackBudget& base, const std::vector<std::string>& attacks) {
  std::vector<EvalRow> rows;
  for (const std::string& name : attacks) {
    const AttackBudget budget = budget_for_name(name, base);
    double correct_mass = 0.0;
    int64_t total = 0;
    for (const Batch& batch : batches) {
      Tensor x = batch.images;
      if (name != "natural" && budget.epsilon > 0.0) {
        x = pgd(
            [&](const Tensor& xa, const std::vector<int64_t>& y) {
              return standard_loss(forward(xa), y);
            },
            batch.images, batch.labels, budget);
      }
      const Tensor logits = forward(x);
      correct_mass += accuracy(logits, batch.labels) * static_cast<double>(batch.labels.size());
      total += static_cast<int64_t>(batch.labels.size());
    }
    rows.push_back({name, total ? correct_mass / static_cast<double>(total) : 0.0});
  }
  return rows;
}

double evaluate_accuracy(const ForwardFn& forward, const std::vector<Batch>& batches) {
  double correct = 0.0;
  int64_t total = 0;
  for (const Batch& batch : batches) {
    correct += accuracy(forward(batch.images), batch.labels) * static_cast<double>(batch.labels.size());
    total += static_cast<int64_t>(batch.labels.size());
  }
  return total ? correct / static_cast<double>(total) : 0.0;
}

Checkpoint checkpoint_backbone(Backbone& net, const RunConfig& cfg) {
  Checkpoint ckpt;
  net.visit_params([&](const std::string& name, Tensor& t) { ckpt.add(name, t); });
  ckpt.config_text = cfg.dump();
  return ckpt;
}

void restore_backbone(Backbone& net, const Checkpoint& ckpt) {
  net.visit_params([&](const std::string& name, Tensor& t) {
    const Tensor* stored = ckpt.find(name);
    if (stored == nullptr) throw DataError("checkpoint: missing tensor '" + name + "'");
    if (stored->shape != t.shape) throw DataError("checkpoint: shape mismatch for '" + name + "'");
    t.data = stored->data;
  });
}

Checkpoint checkpoint_search(Backbone& backbone, DilationNet& dilation, const Genotype& genotype,
                             const RunConfig& cfg) {
  Checkpoint ckpt;
  backbone.visit_params([&](const std::string& name, Tensor& t) { ckpt.add(name, t); });
  dilation.visit_params([&](const std::string& name, Tensor& t) { ckpt.add(name, t); });
  dilation.visit_arch([&](const std::string& name, Tensor& t) { ckpt.add(name, t); });
  ckpt.genotype_text = genotype.to_text();
  ckpt.config_text = cfg.dump();
  return ckpt;
}

void restore_dilation(DilationNet& net, const Checkpoint& ckpt) {
  auto restore = [&](const std::string& name, Tensor& t) {
    const Tensor* stored = ckpt.find(name);
    if (stored == nullptr) throw DataError("checkpoint: missing tensor '" + name + "'");
    if (stored->shape != t.shape) throw DataError("checkpoint: shape mismatch for '" + name + "'");
    t.data = stored->data;
  };
  net.visit_params(restore);
  net.visit_arch(restore);
}

Checkpoint checkpoint_hybrid(Backbone& backbone, DiscreteDilationNet& dilation,
                             const RunConfig& cfg) {
  Checkpoint ckpt;
  backbone.visit_params([&](const std::string& name, Tensor& t) { ckpt.add(name, t); });
  dilation.visit_params([&](const std::string& name, Tensor& t) { ckpt.add(name, t); });
  ckpt.genotype_text = dilation.genotype.to_text();
  ckpt.config_text = cfg.dump();
  return ckpt;
}

void restore_discrete(DiscreteDilationNet& net, const Checkpoint& ckpt) {
  net.visit_params([&](const std::string& name, Tensor& t) {
    const Tensor* stored = ckpt.find(name);
    if (stored == nullptr) throw DataError("checkpoint: missing tensor '" + name + "'");
    if (stored->shape != t.shape) throw DataError("checkpoint: shape mismatch for '" + name + "'");
    t.data = stored->data;
  });
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string search_metrics_csv(const std::vector<SearchMetricsRow>& rows) {
  std::ostringstream os;
  os << "epoch,std_train_loss,adv_train_loss,std_valid_loss,adv_valid_loss,c1,c2,lambda1,lambda2,"
        "expected_flops\n";
  for (const SearchMetricsRow& r : rows) {
    os << r.epoch << "," << format_double(r.std_train_loss) << "," << format_double(r.adv_train_loss)
       << "," << format_double(r.std_valid_loss) << "," << format_double(r.adv_valid_loss) << ","
       << format_double(r.c1) << "," << format_double(r.c2) << "," << format_double(r.lambda1) << ","
       << format_double(r.lambda2) << "," << format_double(r.expected_flops) << "\n";
  }
  return os.str();
}

std::string epoch_metrics_csv(const std::vector<EpochMetrics>& rows) {
  std::ostringstream os;
  os << "epoch,loss,accuracy\n";
  for (const EpochMetrics& r : rows) {
    os << r.epoch << "," << format_double(r.loss) << "," << format_double(r.accuracy) << "\n";
  }
  return os.str();
}

std::string eval_table_csv(const std::vector<EvalRow>& rows) {
  std::ostringstream os;
  os << "attack,accuracy\n";
  for (const EvalRow& r : rows) os << r.attack << "," << format_double(r.accuracy) << "\n";
  return os.str();
}

std::vector<std::string> split_csv_list(const std::string& csv) {
  std::vector<std::string> out;
  std::string token;
  std::istringstream is(csv);
  while (std::getline(is, token, ',')) {
    const size_t b = token.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    const size_t e = token.find_last_not_of(" \t");
    out.push_back(token.substr(b, e - b + 1));
  }
  return out;
}

}  // namespace dilnas
