#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string>
#include <unordered_map>
#include <vector>

#include "dilnas/errors.hpp"

namespace dilnas {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major tensor of doubles. A tensor participates in reverse-mode
// differentiation when `node` refers to a record on the currently active
// tape; stale handles from destroyed tapes are treated as constants.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  int64_t node = -1;
  uint64_t tape_gen = 0;

  Tensor() = default;

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double v);
  static Tensor scalar(double v);
  static Tensor of(Shape s, std::vector<double> d);

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  double item() const;
  bool tracked() const;
  Tensor detached() const;
};

// Gradient callback: given the gradient w.r.t. the node output, return one
// contribution per recorded parent, in parent order.
using GradFn = std::function<std::vector<Tensor>(const Tensor&)>;

// Define-by-run gradient tape. Constructing a Tape makes it active for the
// current thread; tapes nest as a stack. One tape per forward pass.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a differentiable leaf and returns a tracked copy.
  Tensor watch(const Tensor& t);

  // Reverse pass from a scalar root. Returns accumulated gradients keyed by
  // tape node id; every node reachable from the root appears exactly once.
  std::unordered_map<int64_t, Tensor> backward(const Tensor& root);

  int64_t record(std::vector<int64_t> parents, GradFn grad, const Shape& out_shape);

  int64_t size() const { return static_cast<int64_t>(nodes_.size()); }
  uint64_t gen() const { return gen_; }

  static Tape* active();

 private:
  struct NodeRec {
    std::vector<int64_t> parents;
    GradFn grad;  // empty for leaves
    Shape shape;
  };
  std::vector<NodeRec> nodes_;
  uint64_t gen_;
  Tape* prev_ = nullptr;
};

enum class OpKind {
  Add,
  Sub,
  Mul,
  MatMul,
  Conv2d,
  Relu,
  AvgPool,
  MaxPool,
  GlobalAvgPool,
  Softmax,
  LogSoftmax,
  Log,
  Exp,
  Sum,
  Mean,
  Scale,
  ConcatChannels,
  SliceChannels,
  Clamp,
};

struct OpAttrs {
  int64_t stride = 1;
  int64_t pad = 0;
  int64_t dilation = 1;
  int64_t groups = 1;
  int64_t kernel = 0;
  int64_t begin = 0;
  int64_t count = 0;
  double scale = 1.0;
  double lo = 0.0;
  double hi = 0.0;
};

// Generic dispatch used by tests and tooling; the named functions below are
// the primary API.
Tensor record_forward(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs = {});

namespace ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
// x scaled by a tracked 1-element tensor.
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor matmul(const Tensor& a, const Tensor& b);
// x: (N,C,H,W), w: (F,C/groups,kh,kw)
Tensor conv2d(const Tensor& x, const Tensor& w, int64_t stride, int64_t pad,
              int64_t dilation = 1, int64_t groups = 1);
// b: (C,) added per channel of (N,C) or (N,C,H,W)
Tensor bias_add(const Tensor& x, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor avg_pool(const Tensor& x, int64_t kernel, int64_t stride, int64_t pad);
Tensor max_pool(const Tensor& x, int64_t kernel, int64_t stride, int64_t pad);
// (N,C,H,W) -> (N,C)
Tensor global_avg_pool(const Tensor& x);
// over the last axis
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor concat_channels(const std::vector<Tensor>& xs);
Tensor slice_channels(const Tensor& x, int64_t begin, int64_t count);
Tensor channel_gather(const Tensor& x, const std::vector<int64_t>& idx);
Tensor channel_scatter(const Tensor& x, const std::vector<int64_t>& idx, int64_t out_channels);
Tensor clamp(const Tensor& x, double lo, double hi);
// slice along axis 0
Tensor narrow0(const Tensor& x, int64_t begin, int64_t len);
Tensor reshape(const Tensor& x, Shape s);

}  // namespace ops

// Central-difference gradient oracle: (f(x+h*e_i) - f(x-h*e_i)) / (2h).
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

}  // namespace dilnas
