#include "dilnas/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace dilnas {

namespace {

thread_local Tape* g_active_tape = nullptr;
uint64_t g_tape_gen_counter = 0;

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(op) + ": produced a non-finite value");
    }
  }
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) {
    shape_fail(op, "shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  }
}

void require_rank4(const char* op, const Tensor& x) {
  if (x.shape.size() != 4) shape_fail(op, "expected rank-4 (N,C,H,W), got " + shape_str(x.shape));
}

// Records the output on the active tape when any input is tracked. `partial`
// maps (grad_out, input position) to that input's gradient contribution.
Tensor finish(const char* op, Tensor out, std::initializer_list<const Tensor*> ins,
              std::function<Tensor(const Tensor&, size_t)> partial) {
  check_finite(op, out.data);
  Tape* tape = Tape::active();
  if (tape == nullptr) return out;
  std::vector<int64_t> parents;
  std::vector<size_t> positions;
  size_t i = 0;
  for (const Tensor* t : ins) {
    if (t->tracked()) {
      parents.push_back(t->node);
      positions.push_back(i);
    }
    ++i;
  }
  if (parents.empty()) return out;
  GradFn fn = [partial = std::move(partial), positions](const Tensor& g) {
    std::vector<Tensor> res;
    res.reserve(positions.size());
    for (size_t p : positions) res.push_back(partial(g, p));
    return res;
  };
  out.node = tape->record(std::move(parents), std::move(fn), out.shape);
  out.tape_gen = tape->gen();
  out.requires_grad = true;
  return out;
}

void accumulate(Tensor& into, const Tensor& contrib) {
  if (into.shape != contrib.shape) {
    throw ShapeError("backward: gradient shape mismatch " + shape_str(into.shape) + " vs " +
                     shape_str(contrib.shape));
  }
  for (size_t i = 0; i < into.data.size(); ++i) into.data[i] += contrib.data[i];
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << ")";
  return os.str();
}

Tensor Tensor::zeros(Shape s) {
  Tensor t;
  const int64_t n = shape_numel(s);
  if (n < 0) throw ShapeError("zeros: negative extent in " + shape_str(s));
  t.shape = std::move(s);
  t.data.assign(static_cast<size_t>(n), 0.0);
  return t;
}

Tensor Tensor::full(Shape s, double v) {
  Tensor t = zeros(std::move(s));
  std::fill(t.data.begin(), t.data.end(), v);
  return t;
}

Tensor Tensor::scalar(double v) { return of({1}, {v}); }

Tensor Tensor::of(Shape s, std::vector<double> d) {
  if (shape_numel(s) != static_cast<int64_t>(d.size())) {
    throw ShapeError("tensor: " + shape_str(s) + " incompatible with " +
                     std::to_string(d.size()) + " values");
  }
  Tensor t;
  t.shape = std::move(s);
  t.data = std::move(d);
  return t;
}

double Tensor::item() const {
  if (numel() != 1) throw ValueError("item: tensor has " + std::to_string(numel()) + " elements");
  return data[0];
}

bool Tensor::tracked() const {
  Tape* t = Tape::active();
  return t != nullptr && node >= 0 && tape_gen == t->gen();
}

Tensor Tensor::detached() const {
  Tensor t;
  t.shape = shape;
  t.data = data;
  return t;
}

Tape::Tape() : gen_(++g_tape_gen_counter), prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

Tensor Tape::watch(const Tensor& t) {
  Tensor leaf = t.detached();
  leaf.requires_grad = true;
  leaf.node = record({}, nullptr, leaf.shape);
  leaf.tape_gen = gen_;
  return leaf;
}

int64_t Tape::record(std::vector<int64_t> parents, GradFn grad, const Shape& out_shape) {
  nodes_.push_back(NodeRec{std::move(parents), std::move(grad), out_shape});
  return static_cast<int64_t>(nodes_.size()) - 1;
}

std::unordered_map<int64_t, Tensor> Tape::backward(const Tensor& root) {
  if (root.node < 0 || root.tape_gen != gen_) {
    throw ValueError("backward: root is detached from the active tape");
  }
  if (root.numel() != 1) {
    throw ValueError("backward: root must be scalar, got shape " + shape_str(root.shape));
  }
  std::vector<Tensor> grads(nodes_.size());
  std::vector<char> present(nodes_.size(), 0);
  grads[static_cast<size_t>(root.node)] = Tensor::full(root.shape, 1.0);
  present[static_cast<size_t>(root.node)] = 1;
  for (int64_t id = root.node; id >= 0; --id) {
    const auto idx = static_cast<size_t>(id);
    if (!present[idx]) continue;
    const NodeRec& n = nodes_[idx];
    if (!n.grad) continue;  // leaf
    std::vector<Tensor> contribs = n.grad(grads[idx]);
    for (size_t k = 0; k < n.parents.size(); ++k) {
      const auto pid = static_cast<size_t>(n.parents[k]);
      if (!present[pid]) {
        grads[pid] = std::move(contribs[k]);
        present[pid] = 1;
      } else {
        accumulate(grads[pid], contribs[k]);
      }
    }
  }
  std::unordered_map<int64_t, Tensor> out;
  for (size_t i = 0; i < grads.size(); ++i) {
    if (present[i]) out.emplace(static_cast<int64_t>(i), std::move(grads[i]));
  }
  return out;
}

namespace ops {

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out = Tensor::zeros(a.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
  return finish("add", std::move(out), {&a, &b},
                [](const Tensor& g, size_t) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Tensor out = Tensor::zeros(a.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] - b.data[i];
  return finish("sub", std::move(out), {&a, &b}, [](const Tensor& g, size_t pos) {
    if (pos == 0) return g;
    Tensor r = Tensor::zeros(g.shape);
    for (size_t i = 0; i < g.data.size(); ++i) r.data[i] = -g.data[i];
    return r;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out = Tensor::zeros(a.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
  return finish("mul", std::move(out), {&a, &b},
                [ad = a.data, bd = b.data](const Tensor& g, size_t pos) {
                  Tensor r = Tensor::zeros(g.shape);
                  const std::vector<double>& other = (pos == 0) ? bd : ad;
                  for (size_t i = 0; i < g.data.size(); ++i) r.data[i] = g.data[i] * other[i];
                  return r;
                });
}

Tensor scale(const Tensor& x, double s) {
  Tensor out = Tensor::zeros(x.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = x.data[i] * s;
  return finish("scale", std::move(out), {&x}, [s](const Tensor& g, size_t) {
    Tensor r = Tensor::zeros(g.shape);
    for (size_t i = 0; i < g.data.size(); ++i) r.data[i] = g.data[i] * s;
    return r;
  });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) shape_fail("mul_scalar", "scale factor must have 1 element, got " + shape_str(s.shape));
  const double sv = s.data[0];
  Tensor out = Tensor::zeros(x.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = x.data[i] * sv;
  return finish("mul_scalar", std::move(out), {&x, &s},
                [xd = x.data, sv, sshape = s.shape](const Tensor& g, size_t pos) {
                  if (pos == 0) {
                    Tensor r = Tensor::zeros(g.shape);
                    for (size_t i = 0; i < g.data.size(); ++i) r.data[i] = g.data[i] * sv;
                    return r;
                  }
                  double acc = 0.0;
                  for (size_t i = 0; i < g.data.size(); ++i) acc += g.data[i] * xd[i];
                  return Tensor::of(sshape, {acc});
                });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0]) {
    shape_fail("matmul", shape_str(a.shape) + " x " + shape_str(b.shape));
  }
  const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor out = Tensor::zeros({m, n});
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      const double av = a.data[static_cast<size_t>(i * k + p)];
      for (int64_t j = 0; j < n; ++j) {
        out.data[static_cast<size_t>(i * n + j)] += av * b.data[static_cast<size_t>(p * n + j)];
      }
    }
  }
  return finish("matmul", std::move(out), {&a, &b},
                [ad = a.data, bd = b.data, m, k, n](const Tensor& g, size_t pos) {
                  if (pos == 0) {
                    Tensor r = Tensor::zeros({m, k});
                    for (int64_t i = 0; i < m; ++i)
                      for (int64_t j = 0; j < n; ++j) {
                        const double gv = g.data[static_cast<size_t>(i * n + j)];
                        for (int64_t p = 0; p < k; ++p)
                          r.data[static_cast<size_t>(i * k + p)] += gv * bd[static_cast<size_t>(p * n + j)];
                      }
                    return r;
                  }
                  Tensor r = Tensor::zeros({k, n});
                  for (int64_t i = 0; i < m; ++i)
                    for (int64_t p = 0; p < k; ++p) {
                      const double av = ad[static_cast<size_t>(i * k + p)];
                      for (int64_t j = 0; j < n; ++j)
                        r.data[static_cast<size_t>(p * n + j)] += av * g.data[static_cast<size_t>(i * n + j)];
                    }
                  return r;
                });
}

namespace {

struct Conv2dDims {
  int64_t n, c, h, w, f, cg, kh, kw, ho, wo, groups, stride, pad, dilation, fg;
};

Conv2dDims conv2d_dims(const Tensor& x, const Tensor& w, int64_t stride, int64_t pad,
                       int64_t dilation, int64_t groups) {
  require_rank4("conv2d", x);
  if (w.shape.size() != 4) shape_fail("conv2d", "weight must be rank-4, got " + shape_str(w.shape));
  if (stride < 1 || dilation < 1 || groups < 1 || pad < 0) {
    throw ValueError("conv2d: invalid stride/pad/dilation/groups");
  }
  Conv2dDims d{};
  d.n = x.shape[0];
  d.c = x.shape[1];
  d.h = x.shape[2];
  d.w = x.shape[3];
  d.f = w.shape[0];
  d.cg = w.shape[1];
  d.kh = w.shape[2];
  d.kw = w.shape[3];
  d.groups = groups;
  d.stride = stride;
  d.pad = pad;
  d.dilation = dilation;
  if (d.c != d.cg * groups || d.f % groups != 0) {
    shape_fail("conv2d", "channels " + std::to_string(d.c) + " filters " + shape_str(w.shape) +
                             " incompatible with groups=" + std::to_string(groups));
  }
  d.fg = d.f / groups;
  d.ho = (d.h + 2 * pad - dilation * (d.kh - 1) - 1) / stride + 1;
  d.wo = (d.w + 2 * pad - dilation * (d.kw - 1) - 1) / stride + 1;
  if (d.ho < 1 || d.wo < 1) {
    shape_fail("conv2d", "empty output for input " + shape_str(x.shape) + " kernel " + shape_str(w.shape));
  }
  return d;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int64_t stride, int64_t pad, int64_t dilation,
              int64_t groups) {
  const Conv2dDims d = conv2d_dims(x, w, stride, pad, dilation, groups);
  Tensor out = Tensor::zeros({d.n, d.f, d.ho, d.wo});
  for (int64_t n = 0; n < d.n; ++n) {
    for (int64_t grp = 0; grp < d.groups; ++grp) {
      for (int64_t fg = 0; fg < d.fg; ++fg) {
        const int64_t f = grp * d.fg + fg;
        for (int64_t oh = 0; oh < d.ho; ++oh) {
          for (int64_t ow = 0; ow < d.wo; ++ow) {
            double acc = 0.0;
            for (int64_t cg = 0; cg < d.cg; ++cg) {
              const int64_t c = grp * d.cg + cg;
              for (int64_t ki = 0; ki < d.kh; ++ki) {
                const int64_t ih = oh * d.stride - d.pad + ki * d.dilation;
                if (ih < 0 || ih >= d.h) continue;
                for (int64_t kj = 0; kj < d.kw; ++kj) {
                  const int64_t iw = ow * d.stride - d.pad + kj * d.dilation;
                  if (iw < 0 || iw >= d.w) continue;
                  acc += x.data[static_cast<size_t>(((n * d.c + c) * d.h + ih) * d.w + iw)] *
                         w.data[static_cast<size_t>(((f * d.cg + cg) * d.kh + ki) * d.kw + kj)];
                }
              }
            }
            out.data[static_cast<size_t>(((n * d.f + f) * d.ho + oh) * d.wo + ow)] = acc;
          }
        }
      }
    }
  }
  return finish("conv2d", std::move(out), {&x, &w},
                [xd = x.data, wd = w.data, d](const Tensor& g, size_t pos) {
                  if (pos == 0) {
                    Tensor r = Tensor::zeros({d.n, d.c, d.h, d.w});
                    for (int64_t n = 0; n < d.n; ++n)
                      for (int64_t grp = 0; grp < d.groups; ++grp)
                        for (int64_t fg = 0; fg < d.fg; ++fg) {
                          const int64_t f = grp * d.fg + fg;
                          for (int64_t oh = 0; oh < d.ho; ++oh)
                            for (int64_t ow = 0; ow < d.wo; ++ow) {
                              const double gv =
                                  g.data[static_cast<size_t>(((n * d.f + f) * d.ho + oh) * d.wo + ow)];
                              if (gv == 0.0) continue;
                              for (int64_t cg = 0; cg < d.cg; ++cg) {
                                const int64_t c = grp * d.cg + cg;
                                for (int64_t ki = 0; ki < d.kh; ++ki) {
                                  const int64_t ih = oh * d.stride - d.pad + ki * d.dilation;
                                  if (ih < 0 || ih >= d.h) continue;
                                  for (int64_t kj = 0; kj < d.kw; ++kj) {
                                    const int64_t iw = ow * d.stride - d.pad + kj * d.dilation;
                                    if (iw < 0 || iw >= d.w) continue;
                                    r.data[static_cast<size_t>(((n * d.c + c) * d.h + ih) * d.w + iw)] +=
                                        gv * wd[static_cast<size_t>(((f * d.cg + cg) * d.kh + ki) * d.kw + kj)];
                                  }
                                }
                              }
                            }
                        }
                    return r;
                  }
                  Tensor r = Tensor::zeros({d.f, d.cg, d.kh, d.kw});
                  for (int64_t n = 0; n < d.n; ++n)
                    for (int64_t grp = 0; grp < d.groups; ++grp)
                      for (int64_t fg = 0; fg < d.fg; ++fg) {
                        const int64_t f = grp * d.fg + fg;
                        for (int64_t oh = 0; oh < d.ho; ++oh)
                          for (int64_t ow = 0; ow < d.wo; ++ow) {
                            const double gv =
                                g.data[static_cast<size_t>(((n * d.f + f) * d.ho + oh) * d.wo + ow)];
                            if (gv == 0.0) continue;
                            for (int64_t cg = 0; cg < d.cg; ++cg) {
                              const int64_t c = grp * d.cg + cg;
                              for (int64_t ki = 0; ki < d.kh; ++ki) {
                                const int64_t ih = oh * d.stride - d.pad + ki * d.dilation;
                                if (ih < 0 || ih >= d.h) continue;
                                for (int64_t kj = 0; kj < d.kw; ++kj) {
                                  const int64_t iw = ow * d.stride - d.pad + kj * d.dilation;
                                  if (iw < 0 || iw >= d.w) continue;
                                  r.data[static_cast<size_t>(((f * d.cg + cg) * d.kh + ki) * d.kw + kj)] +=
                                      gv * xd[static_cast<size_t>(((n * d.c + c) * d.h + ih) * d.w + iw)];
                                }
                              }
                            }
                          }
                      }
                  return r;
                });
}

Tensor bias_add(const Tensor& x, const Tensor& b) {
  if (b.shape.size() != 1) shape_fail("bias_add", "bias must be rank-1, got " + shape_str(b.shape));
  const bool rank2 = x.shape.size() == 2;
  if (!rank2 && x.shape.size() != 4) {
    shape_fail("bias_add", "input must be (N,C) or (N,C,H,W), got " + shape_str(x.shape));
  }
  const int64_t c = x.shape[1];
  if (b.shape[0] != c) shape_fail("bias_add", "bias " + shape_str(b.shape) + " vs channels " + std::to_string(c));
  const int64_t inner = rank2 ? 1 : x.shape[2] * x.shape[3];
  const int64_t n = x.shape[0];
  Tensor out = Tensor::zeros(x.shape);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      const double bv = b.data[static_cast<size_t>(ch)];
      const int64_t base = (i * c + ch) * inner;
      for (int64_t t = 0; t < inner; ++t)
        out.data[static_cast<size_t>(base + t)] = x.data[static_cast<size_t>(base + t)] + bv;
    }
  return finish("bias_add", std::move(out), {&x, &b}, [n, c, inner](const Tensor& g, size_t pos) {
    if (pos == 0) return g;
    Tensor r = Tensor::zeros({c});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t ch = 0; ch < c; ++ch) {
        const int64_t base = (i * c + ch) * inner;
        double acc = 0.0;
        for (int64_t t = 0; t < inner; ++t) acc += g.data[static_cast<size_t>(base + t)];
        r.data[static_cast<size_t>(ch)] += acc;
      }
    return r;
  });
}

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = x.data[i] > 0.0 ? x.data[i] : 0.0;
  return finish("relu", std::move(out), {&x}, [xd = x.data](const Tensor& g, size_t) {
    Tensor r = Tensor::zeros(g.shape);
    // subgradient at 0 is 0
    for (size_t i = 0; i < g.data.size(); ++i) r.data[i] = xd[i] > 0.0 ? g.data[i] : 0.0;
    return r;
  });
}

namespace {

struct PoolDims {
  int64_t n, c, h, w, ho, wo, k, stride, pad;
};

PoolDims pool_dims(const char* op, const Tensor& x, int64_t kernel, int64_t stride, int64_t pad) {
  require_rank4(op, x);
  if (kernel < 1 || stride < 1 || pad < 0) throw ValueError(std::string(op) + ": invalid kernel/stride/pad");
  PoolDims d{};
  d.n = x.shape[0];
  d.c = x.shape[1];
  d.h = x.shape[2];
  d.w = x.shape[3];
  d.k = kernel;
  d.stride = stride;
  d.pad = pad;
  d.ho = (d.h + 2 * pad - kernel) / stride + 1;
  d.wo = (d.w + 2 * pad - kernel) / stride + 1;
  if (d.ho < 1 || d.wo < 1) shape_fail(op, "empty output for input " + shape_str(x.shape));
  return d;
}

}  // namespace

Tensor avg_pool(const Tensor& x, int64_t kernel, int64_t stride, int64_t pad) {
  const PoolDims d = pool_dims("avg_pool", x, kernel, stride, pad);
  // padding cells count as zeros; divisor is always k*k
  const double inv = 1.0 / static_cast<double>(d.k * d.k);
  Tensor out = Tensor::zeros({d.n, d.c, d.ho, d.wo});
  for (int64_t n = 0; n < d.n; ++n)
    for (int64_t c = 0; c < d.c; ++c)
      for (int64_t oh = 0; oh < d.ho; ++oh)
        for (int64_t ow = 0; ow < d.wo; ++ow) {
          double acc = 0.0;
          for (int64_t ki = 0; ki < d.k; ++ki) {
            const int64_t ih = oh * d.stride - d.pad + ki;
            if (ih < 0 || ih >= d.h) continue;
            for (int64_t kj = 0; kj < d.k; ++kj) {
              const int64_t iw = ow * d.stride - d.pad + kj;
              if (iw < 0 || iw >= d.w) continue;
              acc += x.data[static_cast<size_t>(((n * d.c + c) * d.h + ih) * d.w + iw)];
            }
          }
          out.data[static_cast<size_t>(((n * d.c + c) * d.ho + oh) * d.wo + ow)] = acc * inv;
        }
  return finish("avg_pool", std::move(out), {&x}, [d, inv](const Tensor& g, size_t) {
    Tensor r = Tensor::zeros({d.n, d.c, d.h, d.w});
    for (int64_t n = 0; n < d.n; ++n)
      for (int64_t c = 0; c < d.c; ++c)
        for (int64_t oh = 0; oh < d.ho; ++oh)
          for (int64_t ow = 0; ow < d.wo; ++ow) {
            const double gv =
                g.data[static_cast<size_t>(((n * d.c + c) * d.ho + oh) * d.wo + ow)] * inv;
            for (int64_t ki = 0; ki < d.k; ++ki) {
              const int64_t ih = oh * d.stride - d.pad + ki;
              if (ih < 0 || ih >= d.h) continue;
              for (int64_t kj = 0; kj < d.k; ++kj) {
                const int64_t iw = ow * d.stride - d.pad + kj;
                if (iw < 0 || iw >= d.w) continue;
                r.data[static_cast<size_t>(((n * d.c + c) * d.h + ih) * d.w + iw)] += gv;
              }
            }
          }
    return r;
  });
}

Tensor max_pool(const Tensor& x, int64_t kernel, int64_t stride, int64_t pad) {
  const PoolDims d = pool_dims("max_pool", x, kernel, stride, pad);
  Tensor out = Tensor::zeros({d.n, d.c, d.ho, d.wo});
  std::vector<int64_t> argmax(out.data.size(), -1);
  for (int64_t n = 0; n < d.n; ++n)
    for (int64_t c = 0; c < d.c; ++c)
      for (int64_t oh = 0; oh < d.ho; ++oh)
        for (int64_t ow = 0; ow < d.wo; ++ow) {
          double best = -std::numeric_limits<double>::infinity();
          int64_t best_idx = -1;
          // ties keep the first candidate in row-major window order
          for (int64_t ki = 0; ki < d.k; ++ki) {
            const int64_t ih = oh * d.stride - d.pad + ki;
            if (ih < 0 || ih >= d.h) continue;
            for (int64_t kj = 0; kj < d.k; ++kj) {
              const int64_t iw = ow * d.stride - d.pad + kj;
              if (iw < 0 || iw >= d.w) continue;
              const int64_t idx = ((n * d.c + c) * d.h + ih) * d.w + iw;
              const double v = x.data[static_cast<size_t>(idx)];
              if (v > best) {
                best = v;
                best_idx = idx;
              }
            }
          }
          if (best_idx < 0) shape_fail("max_pool", "window fully outside input");
          const size_t o = static_cast<size_t>(((n * d.c + c) * d.ho + oh) * d.wo + ow);
          out.data[o] = best;
          argmax[o] = best_idx;
        }
  return finish("max_pool", std::move(out), {&x}, [d, argmax](const Tensor& g, size_t) {
    Tensor r = Tensor::zeros({d.n, d.c, d.h, d.w});
    for (size_t o = 0; o < g.data.size(); ++o) r.data[static_cast<size_t>(argmax[o])] += g.data[o];
    return r;
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank4("global_avg_pool", x);
  const int64_t n = x.shape[0], c = x.shape[1], hw = x.shape[2] * x.shape[3];
  const double inv = 1.0 / static_cast<double>(hw);
  Tensor out = Tensor::zeros({n, c});
  for (int64_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (int64_t t = 0; t < hw; ++t) acc += x.data[static_cast<size_t>(i * hw + t)];
    out.data[static_cast<size_t>(i)] = acc * inv;
  }
  return finish("global_avg_pool", std::move(out), {&x},
                [n, c, hw, inv, hs = x.shape[2], ws = x.shape[3]](const Tensor& g, size_t) {
                  Tensor r = Tensor::zeros({n, c, hs, ws});
                  for (int64_t i = 0; i < n * c; ++i) {
                    const double gv = g.data[static_cast<size_t>(i)] * inv;
                    for (int64_t t = 0; t < hw; ++t) r.data[static_cast<size_t>(i * hw + t)] = gv;
                  }
                  return r;
                });
}

namespace {

std::pair<int64_t, int64_t> rowcols(const char* op, const Tensor& x) {
  if (x.shape.empty()) shape_fail(op, "rank-0 input");
  const int64_t cols = x.shape.back();
  return {x.numel() / cols, cols};
}

}  // namespace

Tensor softmax(const Tensor& x) {
  const auto [rows, cols] = rowcols("softmax", x);
  Tensor out = Tensor::zeros(x.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const size_t base = static_cast<size_t>(r * cols);
    double m = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < cols; ++j) m = std::max(m, x.data[base + static_cast<size_t>(j)]);
    double z = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      const double e = std::exp(x.data[base + static_cast<size_t>(j)] - m);
      out.data[base + static_cast<size_t>(j)] = e;
      z += e;
    }
    for (int64_t j = 0; j < cols; ++j) out.data[base + static_cast<size_t>(j)] /= z;
  }
  std::vector<double> saved = out.data;
  return finish("softmax", std::move(out), {&x},
                [sd = std::move(saved), rows, cols](const Tensor& g, size_t) {
                  Tensor r = Tensor::zeros(g.shape);
                  for (int64_t row = 0; row < rows; ++row) {
                    const size_t base = static_cast<size_t>(row * cols);
                    double dot = 0.0;
                    for (int64_t j = 0; j < cols; ++j)
                      dot += g.data[base + static_cast<size_t>(j)] * sd[base + static_cast<size_t>(j)];
                    for (int64_t j = 0; j < cols; ++j)
                      r.data[base + static_cast<size_t>(j)] =
                          sd[base + static_cast<size_t>(j)] * (g.data[base + static_cast<size_t>(j)] - dot);
                  }
                  return r;
                });
}

Tensor log_softmax(const Tensor& x) {
  const auto [rows, cols] = rowcols("log_softmax", x);
  Tensor out = Tensor::zeros(x.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const size_t base = static_cast<size_t>(r * cols);
    double m = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < cols; ++j) m = std::max(m, x.data[base + static_cast<size_t>(j)]);
    double z = 0.0;
    for (int64_t j = 0; j < cols; ++j) z += std::exp(x.data[base + static_cast<size_t>(j)] - m);
    const double lse = m + std::log(z);
    for (int64_t j = 0; j < cols; ++j)
      out.data[base + static_cast<size_t>(j)] = x.data[base + static_cast<size_t>(j)] - lse;
  }
  std::vector<double> saved = out.data;
  return finish("log_softmax", std::move(out), {&x},
                [od = std::move(saved), rows, cols](const Tensor& g, size_t) {
                  Tensor r = Tensor::zeros(g.shape);
                  for (int64_t row = 0; row < rows; ++row) {
                    const size_t base = static_cast<size_t>(row * cols);
                    double gsum = 0.0;
                    for (int64_t j = 0; j < cols; ++j) gsum += g.data[base + static_cast<size_t>(j)];
                    for (int64_t j = 0; j < cols; ++j)
                      r.data[base + static_cast<size_t>(j)] =
                          g.data[base + static_cast<size_t>(j)] -
                          std::exp(od[base + static_cast<size_t>(j)]) * gsum;
                  }
                  return r;
                });
}

Tensor log(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::log(x.data[i]);
  return finish("log", std::move(out), {&x}, [xd = x.data](const Tensor& g, size_t) {
    Tensor r = Tensor::zeros(g.shape);
    for (size_t i = 0; i < g.data.size(); ++i) r.data[i] = g.data[i] / xd[i];
    return r;
  });
}

Tensor exp(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::exp(x.data[i]);
  std::vector<double> saved = out.data;
  return finish("exp", std::move(out), {&x}, [od = std::move(saved)](const Tensor& g, size_t) {
    Tensor r = Tensor::zeros(g.shape);
    for (size_t i = 0; i < g.data.size(); ++i) r.data[i] = g.data[i] * od[i];
    return r;
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data) acc += v;
  Tensor out = Tensor::scalar(acc);
  return finish("sum", std::move(out), {&x}, [shape = x.shape](const Tensor& g, size_t) {
    return Tensor::full(shape, g.data[0]);
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) shape_fail("mean", "empty tensor");
  double acc = 0.0;
  for (double v : x.data) acc += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  Tensor out = Tensor::scalar(acc * inv);
  return finish("mean", std::move(out), {&x}, [shape = x.shape, inv](const Tensor& g, size_t) {
    return Tensor::full(shape, g.data[0] * inv);
  });
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
  if (xs.empty()) shape_fail("concat_channels", "no inputs");
  for (const Tensor& t : xs) require_rank4("concat_channels", t);
  const int64_t n = xs[0].shape[0], h = xs[0].shape[2], w = xs[0].shape[3];
  int64_t c_total = 0;
  for (const Tensor& t : xs) {
    if (t.shape[0] != n || t.shape[2] != h || t.shape[3] != w) {
      shape_fail("concat_channels", "mismatched " + shape_str(t.shape) + " vs " + shape_str(xs[0].shape));
    }
    c_total += t.shape[1];
  }
  Tensor out = Tensor::zeros({n, c_total, h, w});
  const int64_t hw = h * w;
  std::vector<int64_t> offsets;
  int64_t off = 0;
  for (const Tensor& t : xs) {
    offsets.push_back(off);
    const int64_t ci = t.shape[1];
    for (int64_t i = 0; i < n; ++i)
      for (int64_t ch = 0; ch < ci; ++ch)
        std::copy_n(t.data.begin() + (i * ci + ch) * hw, hw,
                    out.data.begin() + ((i * c_total + off + ch)) * hw);
    off += ci;
  }
  std::vector<const Tensor*> ptrs;
  for (const Tensor& t : xs) ptrs.push_back(&t);
  std::vector<int64_t> cs;
  for (const Tensor& t : xs) cs.push_back(t.shape[1]);
  // finish() takes an initializer_list; inline the recording for the variadic case
  check_finite("concat_channels", out.data);
  Tape* tape = Tape::active();
  if (tape == nullptr) return out;
  std::vector<int64_t> parents;
  std::vector<size_t> positions;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].tracked()) {
      parents.push_back(xs[i].node);
      positions.push_back(i);
    }
  }
  if (parents.empty()) return out;
  GradFn fn = [positions, offsets, cs, n, c_total, h, w, hw](const Tensor& g) {
    std::vector<Tensor> res;
    for (size_t p : positions) {
      Tensor r = Tensor::zeros({n, cs[p], h, w});
      for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < cs[p]; ++ch)
          std::copy_n(g.data.begin() + ((i * c_total + offsets[p] + ch)) * hw, hw,
                      r.data.begin() + (i * cs[p] + ch) * hw);
      res.push_back(std::move(r));
    }
    return res;
  };
  out.node = tape->record(std::move(parents), std::move(fn), out.shape);
  out.tape_gen = tape->gen();
  out.requires_grad = true;
  return out;
}

Tensor channel_gather(const Tensor& x, const std::vector<int64_t>& idx) {
  require_rank4("channel_gather", x);
  const int64_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  for (int64_t i : idx) {
    if (i < 0 || i >= c) throw ValueError("channel_gather: index " + std::to_string(i) + " out of range");
  }
  const int64_t k = static_cast<int64_t>(idx.size());
  const int64_t hw = h * w;
  Tensor out = Tensor::zeros({n, k, h, w});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t t = 0; t < k; ++t)
      std::copy_n(x.data.begin() + (i * c + idx[static_cast<size_t>(t)]) * hw, hw,
                  out.data.begin() + (i * k + t) * hw);
  return finish("channel_gather", std::move(out), {&x}, [idx, n, c, h, w, k, hw](const Tensor& g, size_t) {
    Tensor r = Tensor::zeros({n, c, h, w});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t t = 0; t < k; ++t) {
        const size_t src = static_cast<size_t>((i * k + t) * hw);
        const size_t dst = static_cast<size_t>((i * c + idx[static_cast<size_t>(t)]) * hw);
        for (int64_t e = 0; e < hw; ++e) r.data[dst + static_cast<size_t>(e)] += g.data[src + static_cast<size_t>(e)];
      }
    return r;
  });
}

Tensor channel_scatter(const Tensor& x, const std::vector<int64_t>& idx, int64_t out_channels) {
  require_rank4("channel_scatter", x);
  const int64_t n = x.shape[0], k = x.shape[1], h = x.shape[2], w = x.shape[3];
  if (static_cast<int64_t>(idx.size()) != k) {
    shape_fail("channel_scatter", "index count " + std::to_string(idx.size()) + " vs channels " + std::to_string(k));
  }
  for (int64_t i : idx) {
    if (i < 0 || i >= out_channels) throw ValueError("channel_scatter: index " + std::to_string(i) + " out of range");
  }
  const int64_t hw = h * w;
  Tensor out = Tensor::zeros({n, out_channels, h, w});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t t = 0; t < k; ++t) {
      const size_t src = static_cast<size_t>((i * k + t) * hw);
      const size_t dst = static_cast<size_t>((i * out_channels + idx[static_cast<size_t>(t)]) * hw);
      for (int64_t e = 0; e < hw; ++e) out.data[dst + static_cast<size_t>(e)] += x.data[src + static_cast<size_t>(e)];
    }
  return finish("channel_scatter", std::move(out), {&x}, [idx, n, k, h, w, hw, out_channels](const Tensor& g, size_t) {
    Tensor r = Tensor::zeros({n, k, h, w});
    for (int64_t i = 0; i < n; ++i)
      for (int64_t t = 0; t < k; ++t)
        std::copy_n(g.data.begin() + (i * out_channels + idx[static_cast<size_t>(t)]) * hw, hw,
                    r.data.begin() + (i * k + t) * hw);
    return r;
  });
}

Tensor slice_channels(const Tensor& x, int64_t begin, int64_t count) {
  require_rank4("slice_channels", x);
  if (begin < 0 || count < 1 || begin + count > x.shape[1]) {
    shape_fail("slice_channels", "range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                                     ") outside " + std::to_string(x.shape[1]) + " channels");
  }
  std::vector<int64_t> idx(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = begin + i;
  return channel_gather(x, idx);
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw ValueError("clamp: lo > hi");
  Tensor out = Tensor::zeros(x.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::min(std::max(x.data[i], lo), hi);
  return finish("clamp", std::move(out), {&x}, [xd = x.data, lo, hi](const Tensor& g, size_t) {
    Tensor r = Tensor::zeros(g.shape);
    for (size_t i = 0; i < g.data.size(); ++i)
      r.data[i] = (xd[i] > lo && xd[i] < hi) ? g.data[i] : 0.0;
    return r;
  });
}

Tensor narrow0(const Tensor& x, int64_t begin, int64_t len) {
  if (x.shape.empty()) shape_fail("narrow0", "rank-0 input");
  if (begin < 0 || len < 1 || begin + len > x.shape[0]) {
    shape_fail("narrow0", "range [" + std::to_string(begin) + "," + std::to_string(begin + len) +
                              ") outside extent " + std::to_string(x.shape[0]));
  }
  const int64_t row = x.numel() / x.shape[0];
  Shape out_shape = x.shape;
  out_shape[0] = len;
  Tensor out = Tensor::zeros(out_shape);
  std::copy_n(x.data.begin() + begin * row, len * row, out.data.begin());
  return finish("narrow0", std::move(out), {&x}, [shape = x.shape, begin, len, row](const Tensor& g, size_t) {
    Tensor r = Tensor::zeros(shape);
    std::copy_n(g.data.begin(), len * row, r.data.begin() + begin * row);
    return r;
  });
}

Tensor reshape(const Tensor& x, Shape s) {
  if (shape_numel(s) != x.numel()) {
    shape_fail("reshape", shape_str(x.shape) + " to " + shape_str(s));
  }
  Tensor out;
  out.shape = s;
  out.data = x.data;
  return finish("reshape", std::move(out), {&x}, [shape = x.shape](const Tensor& g, size_t) {
    Tensor r;
    r.shape = shape;
    r.data = g.data;
    return r;
  });
}

}  // namespace ops

Tensor record_forward(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
  auto one = [&]() -> const Tensor& {
    if (inputs.size() != 1) throw ValueError("record_forward: expected 1 input");
    return inputs[0];
  };
  auto two = [&]() -> std::pair<const Tensor&, const Tensor&> {
    if (inputs.size() != 2) throw ValueError("record_forward: expected 2 inputs");
    return {inputs[0], inputs[1]};
  };
  switch (kind) {
    case OpKind::Add: {
      auto [a, b] = two();
      return ops::add(a, b);
    }
    case OpKind::Sub: {
      auto [a, b] = two();
      return ops::sub(a, b);
    }
    case OpKind::Mul: {
      auto [a, b] = two();
      return ops::mul(a, b);
    }
    case OpKind::MatMul: {
      auto [a, b] = two();
      return ops::matmul(a, b);
    }
    case OpKind::Conv2d: {
      auto [a, b] = two();
      return ops::conv2d(a, b, attrs.stride, attrs.pad, attrs.dilation, attrs.groups);
    }
    case OpKind::Relu:
      return ops::relu(one());
    case OpKind::AvgPool:
      return ops::avg_pool(one(), attrs.kernel, attrs.stride, attrs.pad);
    case OpKind::MaxPool:
      return ops::max_pool(one(), attrs.kernel, attrs.stride, attrs.pad);
    case OpKind::GlobalAvgPool:
      return ops::global_avg_pool(one());
    case OpKind::Softmax:
      return ops::softmax(one());
    case OpKind::LogSoftmax:
      return ops::log_softmax(one());
    case OpKind::Log:
      return ops::log(one());
    case OpKind::Exp:
      return ops::exp(one());
    case OpKind::Sum:
      return ops::sum(one());
    case OpKind::Mean:
      return ops::mean(one());
    case OpKind::Scale:
      return ops::scale(one(), attrs.scale);
    case OpKind::ConcatChannels:
      return ops::concat_channels(inputs);
    case OpKind::SliceChannels:
      return ops::slice_channels(one(), attrs.begin, attrs.count);
    case OpKind::Clamp:
      return ops::clamp(one(), attrs.lo, attrs.hi);
  }
  throw ValueError("record_forward: unknown op kind");
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (h <= 0.0) throw ValueError("finite_diff_grad: step must be positive");
  Tensor g = Tensor::zeros(x.shape);
  Tensor probe = x.detached();
  for (size_t i = 0; i < x.data.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + h;
    const double fp = f(probe);
    probe.data[i] = orig - h;
    const double fm = f(probe);
    probe.data[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite function value");
    }
    g.data[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace dilnas
