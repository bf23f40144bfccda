#include "dilnas/data.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "dilnas/errors.hpp"
#include "dilnas/rng.hpp"

namespace dilnas {

namespace {

uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char buf[4];
  in.read(reinterpret_cast<char*>(buf), 4);
  if (!in) throw DataError(path + ": truncated header");
  return (static_cast<uint32_t>(buf[0]) << 24) | (static_cast<uint32_t>(buf[1]) << 16) |
         (static_cast<uint32_t>(buf[2]) << 8) | static_cast<uint32_t>(buf[3]);
}

std::string hex32(uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "0x%08x", v);
  return buf;
}

}  // namespace

Dataset Dataset::slice(int64_t begin, int64_t n) const {
  if (begin < 0 || n < 0 || begin + n > count()) throw ValueError("dataset slice out of range");
  Dataset out;
  out.channels = channels;
  out.height = height;
  out.width = width;
  const int64_t stride = channels * height * width;
  out.pixels.assign(pixels.begin() + begin * stride, pixels.begin() + (begin + n) * stride);
  out.labels.assign(labels.begin() + begin, labels.begin() + begin + n);
  return out;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw DataError(images_path + ": cannot open");
  const uint32_t img_magic = read_be32(img, images_path);
  if (img_magic != 0x00000803u) {
    throw DataError(images_path + ": image magic mismatch, got " + hex32(img_magic) +
                    ", expected 0x00000803");
  }
  const uint32_t count = read_be32(img, images_path);
  const uint32_t rows = read_be32(img, images_path);
  const uint32_t cols = read_be32(img, images_path);

  std::ifstream lbl(labels_path, std::ios::binary);
  if (!lbl) throw DataError(labels_path + ": cannot open");
  const uint32_t lbl_magic = read_be32(lbl, labels_path);
  if (lbl_magic != 0x00000801u) {
    throw DataError(labels_path + ": label magic mismatch, got " + hex32(lbl_magic) +
                    ", expected 0x00000801");
  }
  const uint32_t lbl_count = read_be32(lbl, labels_path);
  if (lbl_count != count) {
    throw DataError("idx: image count " + std::to_string(count) + " does not match label count " +
                    std::to_string(lbl_count));
  }

  Dataset data;
  data.channels = 1;
  data.height = rows;
  data.width = cols;
  const size_t n_pixels = static_cast<size_t>(count) * rows * cols;
  std::vector<unsigned char> raw(n_pixels);
  img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n_pixels));
  if (static_cast<size_t>(img.gcount()) != n_pixels) {
    throw DataError(images_path + ": truncated pixel payload");
  }
  data.pixels.resize(n_pixels);
  for (size_t i = 0; i < n_pixels; ++i) data.pixels[i] = static_cast<double>(raw[i]) / 255.0;

  std::vector<unsigned char> raw_labels(count);
  lbl.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(count));
  if (static_cast<size_t>(lbl.gcount()) != count) {
    throw DataError(labels_path + ": truncated label payload");
  }
  data.labels.assign(raw_labels.begin(), raw_labels.end());
  return data;
}

Dataset synth_dataset(const SynthSpec& spec, uint64_t seed) {
  if (spec.classes < 2) throw ValueError("synth_dataset: need at least two classes");
  if (spec.count < spec.classes) throw ValueError("synth_dataset: fewer samples than classes");
  Rng rng(seed);
  Dataset data;
  data.channels = 1;
  data.height = spec.height;
  data.width = spec.width;
  const int64_t hw = spec.height * spec.width;

  // one Gaussian bump per class, centres spread along the diagonal
  std::vector<std::vector<double>> patterns(static_cast<size_t>(spec.classes));
  for (int64_t k = 0; k < spec.classes; ++k) {
    std::vector<double>& p = patterns[static_cast<size_t>(k)];
    p.resize(static_cast<size_t>(hw));
    const double cy = (static_cast<double>(k) + 0.5) / static_cast<double>(spec.classes) *
                      static_cast<double>(spec.height - 1);
    const double cx = (static_cast<double>(spec.classes - 1 - k) + 0.5) /
                      static_cast<double>(spec.classes) * static_cast<double>(spec.width - 1);
    const double sigma = 0.18 * static_cast<double>(std::min(spec.height, spec.width));
    for (int64_t y = 0; y < spec.height; ++y) {
      for (int64_t x = 0; x < spec.width; ++x) {
        const double dy = static_cast<double>(y) - cy;
        const double dx = static_cast<double>(x) - cx;
        p[static_cast<size_t>(y * spec.width + x)] =
            std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
      }
    }
  }

  data.pixels.resize(static_cast<size_t>(spec.count * hw));
  data.labels.resize(static_cast<size_t>(spec.count));
  for (int64_t i = 0; i < spec.count; ++i) {
    const int64_t label = i % spec.classes;  // balanced by construction
    data.labels[static_cast<size_t>(i)] = label;
    const std::vector<double>& p = patterns[static_cast<size_t>(label)];
    for (int64_t t = 0; t < hw; ++t) {
      const double v = 0.2 + spec.margin * p[static_cast<size_t>(t)] + rng.normal(0.0, spec.noise);
      data.pixels[static_cast<size_t>(i * hw + t)] = std::min(1.0, std::max(0.0, v));
    }
  }
  return data;
}

std::pair<Dataset, Dataset> split_search_data(const Dataset& data, uint64_t seed) {
  if (data.count() < 2) throw ValueError("split_search_data: need at least two examples");
  Rng rng(seed);
  const int64_t n = data.count();
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  for (int64_t i = n - 1; i > 0; --i) {
    const int64_t j = static_cast<int64_t>(rng.uniform_index(static_cast<uint64_t>(i + 1)));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  const int64_t first_n = (n + 1) / 2;
  const int64_t stride = data.channels * data.height * data.width;
  Dataset a, b;
  for (Dataset* d : {&a, &b}) {
    d->channels = data.channels;
    d->height = data.height;
    d->width = data.width;
  }
  for (int64_t i = 0; i < n; ++i) {
    Dataset& dst = (i < first_n) ? a : b;
    const int64_t src = order[static_cast<size_t>(i)];
    dst.pixels.insert(dst.pixels.end(), data.pixels.begin() + src * stride,
                      data.pixels.begin() + (src + 1) * stride);
    dst.labels.push_back(data.labels[static_cast<size_t>(src)]);
  }
  return {std::move(a), std::move(b)};
}

std::vector<Batch> make_batches(const Dataset& data, int64_t batch_size, bool drop_remainder) {
  if (batch_size < 1) throw ValueError("make_batches: batch size must be positive");
  const int64_t stride = data.channels * data.height * data.width;
  std::vector<Batch> batches;
  for (int64_t begin = 0; begin < data.count(); begin += batch_size) {
    const int64_t n = std::min(batch_size, data.count() - begin);
    if (n < batch_size && drop_remainder) break;
    Batch batch;
    batch.images = Tensor::zeros({n, data.channels, data.height, data.width});
    std::copy_n(data.pixels.begin() + begin * stride, n * stride, batch.images.data.begin());
    batch.labels.assign(data.labels.begin() + begin, data.labels.begin() + begin + n);
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace dilnas
