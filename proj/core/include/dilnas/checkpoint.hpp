#pragma once

#include <string>
#include <vector>

#include "dilnas/tensor.hpp"

namespace dilnas {

// Named-tensor container, magic "NADR". All payloads little-endian; doubles
// round-trip bit-exactly. Holds the genotype text and config snapshot of the
// run that produced it.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::string genotype_text;
  std::string config_text;

  void add(const std::string& name, const Tensor& t) { tensors.emplace_back(name, t); }
  const Tensor* find(const std::string& name) const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

}  // namespace dilnas
