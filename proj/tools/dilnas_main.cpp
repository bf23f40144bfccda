#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "dilnas/bounds.hpp"
#include "dilnas/flops.hpp"
#include "dilnas/pipeline.hpp"

namespace fs = std::filesystem;
using namespace dilnas;

namespace {

RunConfig load_config(const std::string& path, const std::vector<std::string>& sets) {
  RunConfig cfg = path.empty() ? RunConfig() : RunConfig::from_file(path);
  for (const std::string& s : sets) cfg.set(s);
  return cfg;
}

fs::path out_dir(const RunConfig& cfg) {
  fs::path dir(cfg.get_str("run.out"));
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw DataError(path.string() + ": cannot open for writing");
  out << content;
}

TrainOptions pretrain_options(const RunConfig& cfg) {
  TrainOptions opt;
  opt.epochs = cfg.get_int("pretrain.epochs");
  opt.lr = cfg.get_double("pretrain.lr");
  opt.momentum = cfg.get_double("pretrain.momentum");
  opt.batch_size = cfg.get_int("pretrain.batch");
  opt.seed = static_cast<uint64_t>(cfg.get_int("run.seed"));
  opt.adversarial = cfg.get_bool("pretrain.adversarial");
  opt.budget = budget_from(cfg);
  return opt;
}

Backbone backbone_from_checkpoint(const RunConfig& cfg, const Dataset& sample) {
  const std::string path = cfg.get_str("backbone.checkpoint");
  if (path.empty()) throw UsageError("backbone.checkpoint must point at a pretrained model");
  Checkpoint ckpt = Checkpoint::load(path);
  RunConfig snapshot = RunConfig::from_text(ckpt.config_text);
  Backbone net = build_backbone(backbone_spec_from(snapshot, sample, dataset_classes(sample)),
                                static_cast<uint64_t>(snapshot.get_int("run.seed")));
  restore_backbone(net, ckpt);
  return net;
}

int cmd_pretrain(const RunConfig& cfg) {
  Dataset train = load_train_dataset(cfg);
  Dataset valid = load_valid_dataset(cfg);
  Backbone net = build_backbone(backbone_spec_from(cfg, train, dataset_classes(train)),
                                static_cast<uint64_t>(cfg.get_int("run.seed")));
  const TrainOptions opt = pretrain_options(cfg);
  auto history = train_backbone(net, train, opt);
  const fs::path dir = out_dir(cfg);
  Checkpoint ckpt = checkpoint_backbone(net, cfg);
  ckpt.save((dir / "backbone.nadr").string());
  write_file(dir / "pretrain_metrics.csv", epoch_metrics_csv(history));
  std::vector<Batch> batches = make_batches(valid, opt.batch_size, false);
  const double acc = evaluate_accuracy(
      [&](const Tensor& x) { return backbone_forward(net, x).logits; }, batches);
  std::cout << "pretrained " << (opt.adversarial ? "adversarially" : "standard") << ", "
            << opt.epochs << " epochs, natural accuracy " << format_double(acc) << "\n"
            << "checkpoint: " << (dir / "backbone.nadr").string() << "\n";
  return 0;
}

int cmd_search(const RunConfig& cfg) {
  Dataset train = load_train_dataset(cfg);
  Backbone backbone = backbone_from_checkpoint(cfg, train);
  auto [weight_half, arch_half] = split_search_data(train, static_cast<uint64_t>(cfg.get_int("run.seed")));
  const SearchOptions opt = search_options_from(cfg);
  std::vector<Batch> wb = make_batches(weight_half, opt.batch_size, true);
  std::vector<Batch> ab = make_batches(arch_half, opt.batch_size, true);
  if (wb.empty() || ab.empty()) throw DataError("search: not enough data for one batch per split");

  DilationNet dilation = build_dilation(backbone.spec, arch_spec_from(cfg),
                                        cfg.get_int("search.cells_per_block"),
                                        cfg.get_bool("search.split_alpha"), opt.seed);
  SearchResult result = search(backbone, dilation, wb, ab, opt);

  const fs::path dir = out_dir(cfg);
  write_file(dir / "search_metrics.csv", search_metrics_csv(result.history));
  write_file(dir / "genotype.txt", result.genotype.to_text());
  write_file(dir / "genotype.dot", result.genotype.to_dot());
  Checkpoint ckpt = checkpoint_search(backbone, dilation, result.genotype, cfg);
  ckpt.save((dir / "search.nadr").string());
  std::cout << "search done: " << result.history.size() << " epochs, expected dilation multi-adds "
            << format_double(expected_dilation_flops_value(dilation)) << "\n"
            << result.genotype.to_text();
  return 0;
}

int cmd_retrain(const RunConfig& cfg) {
  Dataset train = load_train_dataset(cfg);
  Backbone backbone = backbone_from_checkpoint(cfg, train);
  const std::string geno_path = cfg.get_str("retrain.genotype");
  if (geno_path.empty()) throw UsageError("retrain.genotype must point at a genotype file");
  std::ifstream in(geno_path);
  if (!in) throw DataError(geno_path + ": cannot open");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Genotype geno = Genotype::from_text(text);

  DiscreteDilationNet dilation =
      build_discrete_dilation(backbone.spec, geno, cfg.get_int("retrain.cells_per_block"),
                              static_cast<uint64_t>(cfg.get_int("run.seed")) + 101);
  TrainOptions opt;
  opt.epochs = cfg.get_int("retrain.epochs");
  opt.lr = cfg.get_double("retrain.lr");
  opt.momentum = cfg.get_double("retrain.momentum");
  opt.batch_size = cfg.get_int("retrain.batch");
  opt.seed = static_cast<uint64_t>(cfg.get_int("run.seed"));
  opt.adversarial = true;
  opt.budget = budget_from(cfg);
  opt.budget.steps = cfg.get_int("retrain.attack_steps");
  auto history = retrain_hybrid(backbone, dilation, train, opt);

  const fs::path dir = out_dir(cfg);
  write_file(dir / "retrain_metrics.csv", epoch_metrics_csv(history));
  Checkpoint ckpt = checkpoint_hybrid(backbone, dilation, cfg);
  ckpt.save((dir / "hybrid.nadr").string());
  std::cout << "retrained hybrid for " << opt.epochs << " epochs\n"
            << "checkpoint: " << (dir / "hybrid.nadr").string() << "\n";
  return 0;
}

int cmd_evaluate(const RunConfig& cfg) {
  const std::string path = cfg.get_str("eval.checkpoint");
  if (path.empty()) throw UsageError("eval.checkpoint must point at a backbone or hybrid model");
  Checkpoint ckpt = Checkpoint::load(path);
  RunConfig snapshot = RunConfig::from_text(ckpt.config_text);
  Dataset valid = load_valid_dataset(cfg);

  Backbone backbone = build_backbone(backbone_spec_from(snapshot, valid, dataset_classes(valid)),
                                     static_cast<uint64_t>(snapshot.get_int("run.seed")));
  restore_backbone(backbone, ckpt);

  ForwardFn forward;
  DiscreteDilationNet dilation;
  const bool hybrid = ckpt.find("discrete.b0.c0.pre0.w") != nullptr;
  if (hybrid) {
    Genotype geno = Genotype::from_text(ckpt.genotype_text);
    dilation = build_discrete_dilation(backbone.spec, geno,
                                       snapshot.get_int("retrain.cells_per_block"), 0);
    restore_discrete(dilation, ckpt);
    forward = [&backbone, &dilation](const Tensor& x) {
      return hybrid_forward_discrete(backbone, dilation, x).logits;
    };
  } else if (ckpt.find("dilation.b0.c0.pre0.w") != nullptr) {
    throw DataError("eval.checkpoint holds a relaxed search state; retrain it first");
  } else {
    forward = [&backbone](const Tensor& x) { return backbone_forward(backbone, x).logits; };
  }

  std::vector<Batch> batches = make_batches(valid, 32, false);
  auto rows = evaluate(forward, batches, budget_from(cfg), split_csv_list(cfg.get_str("eval.attacks")));
  const std::string table = eval_table_csv(rows);
  std::cout << (hybrid ? "hybrid" : "backbone") << " accuracy:\n" << table;
  write_file(out_dir(cfg) / "eval.csv", table);
  return 0;
}

int cmd_verify_bounds(const RunConfig& cfg) {
  BoundsLabReport report =
      run_bounds_trials(cfg.get_int("bounds.trials"), cfg.get_int("bounds.domain"),
                        cfg.get_int("bounds.radius"), static_cast<uint64_t>(cfg.get_int("bounds.seed")));
  std::cout << report.table();
  if (!report.all_hold()) {
    std::cerr << "bound violation detected\n";
    return 3;
  }
  return 0;
}

int cmd_flops_report(const RunConfig& cfg) {
  Dataset train = load_train_dataset(cfg);
  BackboneSpec spec = backbone_spec_from(cfg, train, dataset_classes(train));
  Backbone backbone = build_backbone(spec, static_cast<uint64_t>(cfg.get_int("run.seed")));
  DilationNet dilation = build_dilation(spec, arch_spec_from(cfg),
                                        cfg.get_int("search.cells_per_block"),
                                        cfg.get_bool("search.split_alpha"),
                                        static_cast<uint64_t>(cfg.get_int("run.seed")));
  double gamma = cfg.get_double("search.gamma");
  const double tau = cfg.get_double("search.tau");
  const TauMode mode =
      cfg.get_str("search.tau_mode") == "mul-log" ? TauMode::MulLog : TauMode::PowLog;
  if (gamma <= 0.0) gamma = calibrate_gamma(expected_dilation_flops_value(dilation), tau, mode);
  FlopsReport report = flops_report(backbone, dilation, gamma, tau);
  std::cout << report.to_csv();
  const std::string geno_path = cfg.get_str("retrain.genotype");
  if (!geno_path.empty()) {
    std::ifstream in(geno_path);
    if (!in) throw DataError(geno_path + ": cannot open");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const double discrete = genotype_flops(spec, Genotype::from_text(text),
                                           cfg.get_int("retrain.cells_per_block"));
    std::cout << "genotype_total,,," << format_double(discrete) << "\n";
  }
  return 0;
}

int cmd_export_genotype(const RunConfig& cfg) {
  const std::string path = cfg.get_str("export.checkpoint");
  if (path.empty()) throw UsageError("export.checkpoint must point at a search checkpoint");
  Checkpoint ckpt = Checkpoint::load(path);
  RunConfig snapshot = RunConfig::from_text(ckpt.config_text);
  const Tensor* alpha = ckpt.find("arch.alpha");
  const Tensor* beta = ckpt.find("arch.beta");
  if (alpha == nullptr || beta == nullptr) {
    throw DataError(path + ": no relaxed architecture state to export");
  }
  CellArch arch = CellArch::make([&] {
    CellArchSpec spec;
    spec.num_nodes = snapshot.get_int("search.nodes");
    spec.channel_ratio = snapshot.get_double("search.channel_ratio");
    spec.op_set.clear();
    for (const std::string& name : split_csv_list(snapshot.get_str("search.ops"))) {
      spec.op_set.push_back(cell_op_from_name(name));
    }
    return spec;
  }());
  if (arch.alpha.shape != alpha->shape || arch.beta.shape != beta->shape) {
    throw DataError(path + ": architecture state does not match its config snapshot");
  }
  arch.alpha.data = alpha->data;
  arch.beta.data = beta->data;
  Genotype geno = discretize(arch);
  const fs::path dir = out_dir(cfg);
  write_file(dir / "genotype.txt", geno.to_text());
  write_file(dir / "genotype.dot", geno.to_dot());
  std::cout << geno.to_text();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"architecture dilation for adversarial robustness at desk scale"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;

  struct Sub {
    const char* name;
    const char* help;
    int (*run)(const RunConfig&);
  };
  const Sub subs[] = {
      {"pretrain-backbone", "train the fixed backbone on clean data", cmd_pretrain},
      {"search", "run the constrained architecture search", cmd_search},
      {"retrain", "train the discretized hybrid with PGD", cmd_retrain},
      {"evaluate", "accuracy under natural/FGSM/PGD-k attacks", cmd_evaluate},
      {"verify-bounds", "randomized checks of the error-bound inequalities", cmd_verify_bounds},
      {"flops-report", "expected multi-add accounting of the dilation", cmd_flops_report},
      {"export-genotype", "re-derive the genotype from a search checkpoint", cmd_export_genotype},
  };
  std::map<std::string, int (*)(const RunConfig&)> dispatch;
  for (const Sub& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("--config", config_path, "config file (key = value lines)");
    sub->add_option("--set", overrides, "override a config key, key=value")->take_all();
    dispatch[s.name] = s.run;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const RunConfig cfg = load_config(config_path, overrides);
    for (const auto& [name, run] : dispatch) {
      if (app.got_subcommand(name)) return run(cfg);
    }
    std::cerr << "no subcommand selected\n";
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << (e.state.empty() ? "" : " [" + e.state + "]") << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
