#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dilnas/rng.hpp"
#include "dilnas/tensor.hpp"

namespace dilnas {

// One minibatch of images in [0,1] with integer class labels.
struct Batch {
  Tensor images;  // (N,C,H,W)
  std::vector<int64_t> labels;
};

struct BackboneSpec {
  int64_t num_blocks = 3;
  int64_t layers_per_block = 2;
  int64_t stem_channels = 8;
  int64_t channel_multiplier = 2;
  int64_t in_channels = 1;
  int64_t in_h = 16;
  int64_t in_w = 16;
  int64_t num_classes = 2;

  int64_t block_channels(int64_t block) const;  // block in [0, num_blocks)
  int64_t block_h(int64_t block) const;         // spatial extent after the block
  int64_t block_w(int64_t block) const;
  void validate() const;
};

struct ConvLayer {
  Tensor w;  // (F, C/groups, k, k)
  Tensor b;  // (F,)
  int64_t stride = 1;
  int64_t pad = 0;
  int64_t dilation = 1;
  int64_t groups = 1;
};

// Fixed backbone: stem conv, `num_blocks` blocks of conv3x3+relu layers
// (stride-2 first conv from block 2 on), global average pool + linear head.
struct Backbone {
  BackboneSpec spec;
  ConvLayer stem;
  std::vector<std::vector<ConvLayer>> blocks;
  Tensor head_w;  // (C_L, num_classes)
  Tensor head_b;  // (num_classes,)

  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);
};

struct BackboneTrace {
  Tensor stem_out;
  std::vector<Tensor> block_out;  // z^(1..L)
  Tensor logits;
};

Backbone build_backbone(const BackboneSpec& spec, uint64_t seed);

// Runs the conv layer (conv + bias); `params_watched` variants are produced
// by watching the tensors beforehand, the forward itself is agnostic.
Tensor conv_forward(const ConvLayer& layer, const Tensor& x);

BackboneTrace backbone_forward(const Backbone& net, const Tensor& images);

// Classifier head shared by backbone-only and hybrid forwards.
Tensor head_forward(const Backbone& net, const Tensor& features);

// Mean softmax cross entropy.
Tensor standard_loss(const Tensor& logits, const std::vector<int64_t>& labels);

// Fraction of argmax-correct predictions; argmax ties resolve to the lowest
// class index.
double accuracy(const Tensor& logits, const std::vector<int64_t>& labels);

// He-style fan-in normal initialisation.
Tensor he_normal(Shape shape, int64_t fan_in, Rng& rng);

}  // namespace dilnas
