#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dilnas/net.hpp"

namespace dilnas {

struct Dataset {
  int64_t channels = 1;
  int64_t height = 0;
  int64_t width = 0;
  std::vector<double> pixels;  // count*channels*height*width, row-major, in [0,1]
  std::vector<int64_t> labels;

  int64_t count() const { return static_cast<int64_t>(labels.size()); }
  Dataset slice(int64_t begin, int64_t count) const;
};

// IDX ingestion (big-endian magic 0x803 for images, 0x801 for labels);
// pixels are scaled byte/255.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

struct SynthSpec {
  int64_t classes = 2;
  int64_t count = 512;
  int64_t height = 8;
  int64_t width = 8;
  double margin = 0.8;  // separation of the class-conditional means
  double noise = 0.15;  // pixel noise stddev
};

// Balanced two-blob images: each class has a Gaussian bump at its own
// location with amplitude `margin`, plus pixel noise, clamped to [0,1].
Dataset synth_dataset(const SynthSpec& spec, uint64_t seed);

// Disjoint halves differing in size by at most one, deterministic per seed.
std::pair<Dataset, Dataset> split_search_data(const Dataset& data, uint64_t seed);

// Materializes minibatches. When `drop_remainder` all batches share one
// shape, as the gradient-recycling loop requires.
std::vector<Batch> make_batches(const Dataset& data, int64_t batch_size, bool drop_remainder);

}  // namespace dilnas
