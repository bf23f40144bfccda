#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dilnas/admm.hpp"
#include "dilnas/attack.hpp"
#include "dilnas/checkpoint.hpp"
#include "dilnas/config.hpp"
#include "dilnas/data.hpp"
#include "dilnas/net.hpp"
#include "dilnas/supernet.hpp"

namespace dilnas {

// ---- config -> module option bridges ----

BackboneSpec backbone_spec_from(const RunConfig& cfg, const Dataset& sample, int64_t num_classes);
AttackBudget budget_from(const RunConfig& cfg);
CellArchSpec arch_spec_from(const RunConfig& cfg);
SearchOptions search_options_from(const RunConfig& cfg);

Dataset load_train_dataset(const RunConfig& cfg);
Dataset load_valid_dataset(const RunConfig& cfg);
int64_t dataset_classes(const Dataset& data);

// ---- training loops ----

struct TrainOptions {
  int64_t epochs = 10;
  double lr = 0.05;
  double momentum = 0.9;
  int64_t batch_size = 16;
  uint64_t seed = 0;
  bool adversarial = false;  // train on PGD examples instead of clean ones
  AttackBudget budget;
};

struct EpochMetrics {
  int64_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

// Standard (or PGD-adversarial) training of the backbone weights.
std::vector<EpochMetrics> train_backbone(Backbone& net, const Dataset& train,
                                         const TrainOptions& opt);

// PGD-adversarial training of the discrete dilation weights; the backbone
// stays frozen.
std::vector<EpochMetrics> retrain_hybrid(const Backbone& backbone, DiscreteDilationNet& dilation,
                                         const Dataset& train, const TrainOptions& opt);

// ---- evaluation ----

using ForwardFn = std::function<Tensor(const Tensor& images)>;  // returns logits

struct EvalRow {
  std::string attack;
  double accuracy = 0.0;
};

// One row per requested attack: "natural", "fgsm", or "pgd-K".
std::vector<EvalRow> evaluate(const ForwardFn& forward, const std::vector<Batch>& batches,
                              const AttackBudget& base, const std::vector<std::string>& attacks);

double evaluate_accuracy(const ForwardFn& forward, const std::vector<Batch>& batches);

// ---- persistence ----

Checkpoint checkpoint_backbone(Backbone& net, const RunConfig& cfg);
void restore_backbone(Backbone& net, const Checkpoint& ckpt);
Checkpoint checkpoint_search(Backbone& backbone, DilationNet& dilation, const Genotype& genotype,
                             const RunConfig& cfg);
void restore_dilation(DilationNet& net, const Checkpoint& ckpt);
Checkpoint checkpoint_hybrid(Backbone& backbone, DiscreteDilationNet& dilation,
                             const RunConfig& cfg);
void restore_discrete(DiscreteDilationNet& net, const Checkpoint& ckpt);

// ---- reports ----

std::string search_metrics_csv(const std::vector<SearchMetricsRow>& rows);
std::string epoch_metrics_csv(const std::vector<EpochMetrics>& rows);
std::string eval_table_csv(const std::vector<EvalRow>& rows);
std::string format_double(double v);

std::vector<std::string> split_csv_list(const std::string& csv);

}  // namespace dilnas
