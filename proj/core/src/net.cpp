#include "dilnas/net.hpp"

#include <cmath>

namespace dilnas {

int64_t BackboneSpec::block_channels(int64_t block) const {
  int64_t c = stem_channels;
  for (int64_t l = 1; l <= block; ++l) c *= channel_multiplier;
  return c;
}

int64_t BackboneSpec::block_h(int64_t block) const {
  int64_t h = in_h;
  for (int64_t l = 1; l <= block; ++l) h = (h + 1) / 2;
  return h;
}

int64_t BackboneSpec::block_w(int64_t block) const {
  int64_t w = in_w;
  for (int64_t l = 1; l <= block; ++l) w = (w + 1) / 2;
  return w;
}

void BackboneSpec::validate() const {
  if (num_blocks < 1 || layers_per_block < 1 || stem_channels < 1 || channel_multiplier < 1 ||
      in_channels < 1 || in_h < 1 || in_w < 1 || num_classes < 2) {
    throw ValueError("backbone spec: all extents must be positive (and num_classes >= 2)");
  }
  for (int64_t l = 1; l < num_blocks; ++l) {
    // every block after the first must genuinely halve the resolution
    if (block_h(l) >= block_h(l - 1) || block_w(l) >= block_w(l - 1) || block_h(l) < 1 ||
        block_w(l) < 1) {
      throw ValueError("backbone spec: input too small for the requested block count");
    }
  }
}

Tensor he_normal(Shape shape, int64_t fan_in, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.data) v = rng.normal(0.0, stddev);
  return t;
}

namespace {

ConvLayer make_conv(int64_t c_in, int64_t c_out, int64_t kernel, int64_t stride, int64_t pad,
                    Rng& rng) {
  ConvLayer layer;
  layer.w = he_normal({c_out, c_in, kernel, kernel}, c_in * kernel * kernel, rng);
  layer.b = Tensor::zeros({c_out});
  layer.stride = stride;
  layer.pad = pad;
  return layer;
}

}  // namespace

Backbone build_backbone(const BackboneSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  Backbone net;
  net.spec = spec;
  net.stem = make_conv(spec.in_channels, spec.stem_channels, 3, 1, 1, rng);
  int64_t c_prev = spec.stem_channels;
  for (int64_t l = 0; l < spec.num_blocks; ++l) {
    const int64_t c_out = spec.block_channels(l);
    std::vector<ConvLayer> block;
    for (int64_t k = 0; k < spec.layers_per_block; ++k) {
      const bool first = (k == 0);
      const int64_t stride = (first && l > 0) ? 2 : 1;
      const int64_t c_in = first ? c_prev : c_out;
      block.push_back(make_conv(c_in, c_out, 3, stride, 1, rng));
    }
    net.blocks.push_back(std::move(block));
    c_prev = c_out;
  }
  net.head_w = he_normal({c_prev, spec.num_classes}, c_prev, rng);
  net.head_b = Tensor::zeros({spec.num_classes});
  return net;
}

void Backbone::visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("backbone.stem.w", stem.w);
  fn("backbone.stem.b", stem.b);
  for (size_t l = 0; l < blocks.size(); ++l) {
    for (size_t k = 0; k < blocks[l].size(); ++k) {
      const std::string base = "backbone.block" + std::to_string(l) + ".conv" + std::to_string(k);
      fn(base + ".w", blocks[l][k].w);
      fn(base + ".b", blocks[l][k].b);
    }
  }
  fn("backbone.head.w", head_w);
  fn("backbone.head.b", head_b);
}

Tensor conv_forward(const ConvLayer& layer, const Tensor& x) {
  Tensor y = ops::conv2d(x, layer.w, layer.stride, layer.pad, layer.dilation, layer.groups);
  return ops::bias_add(y, layer.b);
}

Tensor head_forward(const Backbone& net, const Tensor& features) {
  Tensor pooled = ops::global_avg_pool(features);
  return ops::bias_add(ops::matmul(pooled, net.head_w), net.head_b);
}

BackboneTrace backbone_forward(const Backbone& net, const Tensor& images) {
  if (images.shape.size() != 4 || images.shape[1] != net.spec.in_channels ||
      images.shape[2] != net.spec.in_h || images.shape[3] != net.spec.in_w) {
    throw ShapeError("backbone_forward: images " + shape_str(images.shape) + " do not match spec input (" +
                     std::to_string(net.spec.in_channels) + "," + std::to_string(net.spec.in_h) + "," +
                     std::to_string(net.spec.in_w) + ")");
  }
  BackboneTrace trace;
  trace.stem_out = ops::relu(conv_forward(net.stem, images));
  Tensor z = trace.stem_out;
  for (const auto& block : net.blocks) {
    for (const ConvLayer& layer : block) z = ops::relu(conv_forward(layer, z));
    trace.block_out.push_back(z);
  }
  trace.logits = head_forward(net, z);
  return trace;
}

Tensor standard_loss(const Tensor& logits, const std::vector<int64_t>& labels) {
  if (logits.shape.size() != 2) {
    throw ShapeError("standard_loss: logits must be (N,classes), got " + shape_str(logits.shape));
  }
  const int64_t n = logits.shape[0], k = logits.shape[1];
  if (static_cast<int64_t>(labels.size()) != n) {
    throw ShapeError("standard_loss: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  Tensor onehot = Tensor::zeros({n, k});
  for (int64_t i = 0; i < n; ++i) {
    const int64_t y = labels[static_cast<size_t>(i)];
    if (y < 0 || y >= k) {
      throw ValueError("standard_loss: label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
    }
    onehot.data[static_cast<size_t>(i * k + y)] = 1.0;
  }
  Tensor picked = ops::mul(ops::log_softmax(logits), onehot);
  return ops::scale(ops::sum(picked), -1.0 / static_cast<double>(n));
}

double accuracy(const Tensor& logits, const std::vector<int64_t>& labels) {
  const int64_t n = logits.shape[0], k = logits.shape[1];
  int64_t correct = 0;
  for (int64_t i = 0; i < n; ++i) {
    int64_t best = 0;
    for (int64_t j = 1; j < k; ++j) {
      if (logits.data[static_cast<size_t>(i * k + j)] > logits.data[static_cast<size_t>(i * k + best)]) {
        best = j;
      }
    }
    if (best == labels[static_cast<size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace dilnas
