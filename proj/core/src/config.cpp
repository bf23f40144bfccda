#include "dilnas/config.hpp"

#include <fstream>
#include <sstream>

#include "dilnas/errors.hpp"

namespace dilnas {

namespace {

std::string trim(const std::string& s) {
  const size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

const std::map<std::string, std::string>& RunConfig::defaults() {
  static const std::map<std::string, std::string> kDefaults = {
      {"run.seed", "0"},
      {"run.out", "out"},
      {"run.deterministic", "true"},

      {"data.source", "synth"},
      {"data.idx.train_images", ""},
      {"data.idx.train_labels", ""},
      {"data.idx.test_images", ""},
      {"data.idx.test_labels", ""},
      {"data.idx.class_a", "-1"},
      {"data.idx.class_b", "-1"},
      {"data.synth.classes", "2"},
      {"data.synth.count", "512"},
      {"data.synth.valid_count", "256"},
      {"data.synth.height", "8"},
      {"data.synth.width", "8"},
      {"data.synth.margin", "0.8"},
      {"data.synth.noise", "0.15"},

      {"backbone.blocks", "3"},
      {"backbone.layers_per_block", "2"},
      {"backbone.stem_channels", "8"},
      {"backbone.channel_multiplier", "2"},
      {"backbone.checkpoint", ""},

      {"attack.norm", "inf"},
      {"attack.epsilon", "0.031372549019607843"},
      {"attack.step_size", "0.00784313725490196"},
      {"attack.steps", "7"},
      {"attack.random_start", "true"},
      {"attack.clamp_lo", "0"},
      {"attack.clamp_hi", "1"},

      {"freeat.replay", "4"},

      {"pretrain.epochs", "10"},
      {"pretrain.lr", "0.05"},
      {"pretrain.momentum", "0.9"},
      {"pretrain.batch", "16"},
      {"pretrain.adversarial", "false"},

      {"search.epochs", "8"},
      {"search.batch", "8"},
      {"search.nodes", "4"},
      {"search.ops",
       "sep_conv_3x3,sep_conv_5x5,dil_conv_3x3,dil_conv_5x5,avg_pool_3x3,max_pool_3x3,identity,"
       "zero"},
      {"search.cells_per_block", "3"},
      {"search.channel_ratio", "0.5"},
      {"search.split_alpha", "false"},
      {"search.resample_masks", "true"},
      {"search.eta1", "0.0003"},
      {"search.eta2", "0.025"},
      {"search.eta2_min", "0"},
      {"search.momentum", "0.9"},
      {"search.rho", "1.0"},
      {"search.flops_scaling", "true"},
      {"search.gamma", "0"},
      {"search.tau", "1.0"},
      {"search.tau_mode", "pow-log"},
      {"search.cotrain_backbone", "false"},

      {"retrain.epochs", "12"},
      {"retrain.cells_per_block", "6"},
      {"retrain.lr", "0.05"},
      {"retrain.momentum", "0.9"},
      {"retrain.batch", "16"},
      {"retrain.attack_steps", "7"},
      {"retrain.genotype", ""},

      {"eval.attacks", "natural,fgsm,pgd-20"},
      {"eval.checkpoint", ""},
      {"export.checkpoint", ""},

      {"bounds.trials", "10000"},
      {"bounds.domain", "64"},
      {"bounds.radius", "2"},
      {"bounds.seed", "20240817"},
  };
  return kDefaults;
}

RunConfig::RunConfig() : values_(defaults()) {}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("config: cannot open " + path);
  std::ostringstream text;
  text << in.rdbuf();
  return from_text(text.str());
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int64_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

void RunConfig::set(const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (defaults().find(key) == defaults().end()) {
    throw UsageError("unknown config key '" + key + "'");
  }
  values_[key] = value;
}

bool RunConfig::has(const std::string& key) const { return values_.count(key) != 0; }

std::string RunConfig::get_str(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
  return it->second;
}

int64_t RunConfig::get_int(const std::string& key) const {
  const std::string v = get_str(key);
  try {
    size_t used = 0;
    const int64_t out = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "': '" + v + "' is not an integer");
  }
}

double RunConfig::get_double(const std::string& key) const {
  const std::string v = get_str(key);
  try {
    size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "': '" + v + "' is not a number");
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string v = get_str(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw UsageError("config key '" + key + "': '" + v + "' is not a boolean");
}

std::string RunConfig::dump() const {
  std::ostringstream os;
  for (const auto& [key, value] : values_) os << key << " = " << value << "\n";
  return os.str();
}

}  // namespace dilnas
