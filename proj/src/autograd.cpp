#include "aslip/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

#include "aslip/error.hpp"

namespace aslip::ag {

Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape s, Vector v) : shape(std::move(s)), values(std::move(v)) {
  if (values.size() != numel(shape)) {
    throw InputError("tensor values (" + std::to_string(values.size()) + ") do not match shape " +
                     shape_string(shape));
  }
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (values.size() != 1) throw UsageError("item() on a tensor with " + std::to_string(values.size()) + " values");
  return values[0];
}

// ---------------------------------------------------------------------------
// Tape

template <typename Scalar>
const typename Tape<Scalar>::Node& Tape<Scalar>::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw UsageError("invalid tape variable");
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <typename Scalar>
typename Tape<Scalar>::Node& Tape<Scalar>::node(Var v) {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) throw UsageError("invalid tape variable");
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <typename Scalar>
Var Tape<Scalar>::constant(Tensor<Scalar> value) {
  return record(std::move(value), false, nullptr);
}

template <typename Scalar>
Var Tape<Scalar>::variable(Tensor<Scalar> value) {
  return record(std::move(value), true, nullptr);
}

template <typename Scalar>
Var Tape<Scalar>::parameter(Parameter<Scalar>& p) {
  Var v = record(p.value, p.trainable && grad_enabled_, nullptr);
  nodes_.back().param = &p;
  return v;
}

template <typename Scalar>
const typename Tape<Scalar>::Vector& Tape<Scalar>::grad(Var v) const {
  const Node& n = node(v);
  if (!n.has_grad) throw UsageError("variable has no gradient");
  return n.grad;
}

template <typename Scalar>
typename Tape<Scalar>::Vector& Tape<Scalar>::accumulator(Var v) {
  Node& n = node(v);
  if (!n.has_grad) {
    n.grad = Vector::Zero(n.value.size());
    n.has_grad = true;
  }
  return n.grad;
}

template <typename Scalar>
Var Tape<Scalar>::record(Tensor<Scalar> value, bool requires_grad, BackwardFn fn) {
  if (backward_done_) throw UsageError("cannot record on a tape after backward()");
  if (!grad_enabled_) requires_grad = false;
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <typename Scalar>
void Tape<Scalar>::backward(Var loss) {
  if (backward_done_) throw UsageError("backward() called twice on the same tape");
  Node& root = node(loss);
  if (root.value.size() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " + shape_string(root.value.shape));
  }
  backward_done_ = true;
  if (!root.requires_grad) return;
  accumulator(loss).setOnes();
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || !n.has_grad) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param != nullptr && n.param->trainable) {
      if (n.param->grad.size() != n.grad.size()) n.param->grad.setZero(n.grad.size());
      n.param->grad += n.grad;
    }
  }
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require(bool ok, const std::string& what) {
  if (!ok) throw InputError(what);
}

Index normalize_axis(Index axis, Index rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw InputError("axis out of range");
  return axis;
}

// (outer, extent, inner) decomposition around an axis of a row-major tensor.
struct AxisSplit {
  Index outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, Index axis) {
  AxisSplit s;
  for (Index i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.extent = shape[static_cast<std::size_t>(axis)];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) s.inner *= shape[static_cast<std::size_t>(i)];
  return s;
}

template <typename Scalar>
Var unary(Tape<Scalar>& tape, Var a, Vec<Scalar> out, Vec<Scalar> local_grad) {
  Tensor<Scalar> result(tape.shape(a), std::move(out));
  return tape.record(std::move(result), tape.requires_grad(a),
                     [a, g = std::move(local_grad)](Tape<Scalar>& t, const Vec<Scalar>& dy) {
                       t.accumulator(a).array() += dy.array() * g.array();
                     });
}

// Same-padded stride-1 convolution over [N, C, H, W] shared by conv1d/conv2d.
struct ConvGeometry {
  Index n, cin, h, w, cout, kh, kw;
  Index k() const { return cin * kh * kw; }
  Index cols() const { return n * h * w; }
};

template <typename Scalar>
void im2col(const Vec<Scalar>& x, const ConvGeometry& g, RowMat<Scalar>& cols) {
  cols.setZero(g.k(), g.cols());
  const Index ph = g.kh / 2, pw = g.kw / 2;
  for (Index c = 0; c < g.cin; ++c) {
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        Scalar* row = cols.row((c * g.kh + i) * g.kw + j).data();
        const Index w_lo = std::max<Index>(0, pw - j);
        const Index w_hi = std::min<Index>(g.w, g.w + pw - j);
        for (Index n = 0; n < g.n; ++n) {
          for (Index h = 0; h < g.h; ++h) {
            const Index hs = h + i - ph;
            if (hs < 0 || hs >= g.h) continue;
            const Scalar* src = x.data() + ((n * g.cin + c) * g.h + hs) * g.w + (j - pw);
            Scalar* dst = row + (n * g.h + h) * g.w;
            for (Index ww = w_lo; ww < w_hi; ++ww) dst[ww] = src[ww];
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const RowMat<Scalar>& cols, const ConvGeometry& g, Vec<Scalar>& dx) {
  const Index ph = g.kh / 2, pw = g.kw / 2;
  for (Index c = 0; c < g.cin; ++c) {
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        const Scalar* row = cols.row((c * g.kh + i) * g.kw + j).data();
        const Index w_lo = std::max<Index>(0, pw - j);
        const Index w_hi = std::min<Index>(g.w, g.w + pw - j);
        for (Index n = 0; n < g.n; ++n) {
          for (Index h = 0; h < g.h; ++h) {
            const Index hs = h + i - ph;
            if (hs < 0 || hs >= g.h) continue;
            Scalar* dst = dx.data() + ((n * g.cin + c) * g.h + hs) * g.w + (j - pw);
            const Scalar* src = row + (n * g.h + h) * g.w;
            for (Index ww = w_lo; ww < w_hi; ++ww) dst[ww] += src[ww];
          }
        }
      }
    }
  }
}

template <typename Scalar>
Var conv_same(Tape<Scalar>& tape, Var x, Var kernels, Var bias, const ConvGeometry& g,
              const Shape& out_shape) {
  require(g.kh % 2 == 1 && g.kw % 2 == 1, "same-padded convolution needs odd kernel extents");
  require(tape.value(bias).size() == g.cout, "conv bias does not match output channels");

  auto cols = std::make_shared<RowMat<Scalar>>();
  im2col(tape.value(x).values, g, *cols);
  const Eigen::Map<const RowMat<Scalar>> wm(tape.value(kernels).values.data(), g.cout, g.k());
  RowMat<Scalar> y(g.cout, g.cols());
  y.noalias() = wm * (*cols);
  const auto& b = tape.value(bias).values;
  for (Index o = 0; o < g.cout; ++o) y.row(o).array() += b[o];

  // [Cout, N*H*W] -> [N, Cout, H, W]
  const Index plane = g.h * g.w;
  Vec<Scalar> out(g.n * g.cout * plane);
  for (Index n = 0; n < g.n; ++n) {
    for (Index o = 0; o < g.cout; ++o) {
      out.segment((n * g.cout + o) * plane, plane) = y.row(o).segment(n * plane, plane).transpose();
    }
  }

  const bool rg = tape.requires_grad(x) || tape.requires_grad(kernels) || tape.requires_grad(bias);
  return tape.record(
      Tensor<Scalar>(out_shape, std::move(out)), rg,
      [x, kernels, bias, g, cols](Tape<Scalar>& t, const Vec<Scalar>& dy) {
        const Index plane = g.h * g.w;
        RowMat<Scalar> dym(g.cout, g.cols());
        for (Index n = 0; n < g.n; ++n) {
          for (Index o = 0; o < g.cout; ++o) {
            dym.row(o).segment(n * plane, plane) = dy.segment((n * g.cout + o) * plane, plane).transpose();
          }
        }
        if (t.requires_grad(kernels)) {
          Eigen::Map<RowMat<Scalar>> dw(t.accumulator(kernels).data(), g.cout, g.k());
          dw.noalias() += dym * cols->transpose();
        }
        if (t.requires_grad(bias)) t.accumulator(bias) += dym.rowwise().sum();
        if (t.requires_grad(x)) {
          const Eigen::Map<const RowMat<Scalar>> wm(t.value(kernels).values.data(), g.cout, g.k());
          RowMat<Scalar> dcols(g.k(), g.cols());
          dcols.noalias() = wm.transpose() * dym;
          col2im(dcols, g, t.accumulator(x));
        }
      });
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise and structural ops

template <typename Scalar>
Var add(Tape<Scalar>& tape, Var a, Var b) {
  require(tape.shape(a) == tape.shape(b), "add: shape mismatch " + shape_string(tape.shape(a)) + " vs " +
                                              shape_string(tape.shape(b)));
  Tensor<Scalar> out(tape.shape(a), tape.value(a).values + tape.value(b).values);
  return tape.record(std::move(out), tape.requires_grad(a) || tape.requires_grad(b),
                     [a, b](Tape<Scalar>& t, const Vec<Scalar>& dy) {
                       if (t.requires_grad(a)) t.accumulator(a) += dy;
                       if (t.requires_grad(b)) t.accumulator(b) += dy;
                     });
}

template <typename Scalar>
Var sub(Tape<Scalar>& tape, Var a, Var b) {
  require(tape.shape(a) == tape.shape(b), "sub: shape mismatch " + shape_string(tape.shape(a)) + " vs " +
                                              shape_string(tape.shape(b)));
  Tensor<Scalar> out(tape.shape(a), tape.value(a).values - tape.value(b).values);
  return tape.record(std::move(out), tape.requires_grad(a) || tape.requires_grad(b),
                     [a, b](Tape<Scalar>& t, const Vec<Scalar>& dy) {
                       if (t.requires_grad(a)) t.accumulator(a) += dy;
                       if (t.requires_grad(b)) t.accumulator(b) -= dy;
                     });
}

template <typename Scalar>
Var mul(Tape<Scalar>& tape, Var a, Var b) {
  require(tape.shape(a) == tape.shape(b), "mul: shape mismatch " + shape_string(tape.shape(a)) + " vs " +
                                              shape_string(tape.shape(b)));
  Tensor<Scalar> out(tape.shape(a), tape.value(a).values.cwiseProduct(tape.value(b).values));
  return tape.record(std::move(out), tape.requires_grad(a) || tape.requires_grad(b),
                     [a, b](Tape<Scalar>& t, const Vec<Scalar>& dy) {
                       if (t.requires_grad(a)) t.accumulator(a) += dy.cwiseProduct(t.value(b).values);
                       if (t.requires_grad(b)) t.accumulator(b) += dy.cwiseProduct(t.value(a).values);
                     });
}

template <typename Scalar>
Var scale(Tape<Scalar>& tape, Var a, Scalar s) {
  Tensor<Scalar> out(tape.shape(a), tape.value(a).values * s);
  return tape.record(std::move(out), tape.requires_grad(a),
                     [a, s](Tape<Scalar>& t, const Vec<Scalar>& dy) { t.accumulator(a) += dy * s; });
}

template <typename Scalar>
Var sum(Tape<Scalar>& tape, Var a) {
  Tensor<Scalar> out(Shape{1});
  out.values[0] = tape.value(a).values.sum();
  return tape.record(std::move(out), tape.requires_grad(a),
                     [a](Tape<Scalar>& t, const Vec<Scalar>& dy) { t.accumulator(a).array() += dy[0]; });
}

template <typename Scalar>
Var mean(Tape<Scalar>& tape, Var a) {
  const Index n = tape.value(a).size();
  require(n > 0, "mean of an empty tensor");
  Tensor<Scalar> out(Shape{1});
  out.values[0] = tape.value(a).values.sum() / static_cast<Scalar>(n);
  return tape.record(std::move(out), tape.requires_grad(a), [a, n](Tape<Scalar>& t, const Vec<Scalar>& dy) {
    t.accumulator(a).array() += dy[0] / static_cast<Scalar>(n);
  });
}

template <typename Scalar>
Var mean_axis(Tape<Scalar>& tape, Var a, Index axis) {
  const Shape& in_shape = tape.shape(a);
  axis = normalize_axis(axis, static_cast<Index>(in_shape.size()));
  const AxisSplit s = split_axis(in_shape, axis);
  Shape out_shape = in_shape;
  out_shape.erase(out_shape.begin() + axis);
  if (out_shape.empty()) out_shape = {1};
  const auto& x = tape.value(a).values;
  Vec<Scalar> out = Vec<Scalar>::Zero(s.outer * s.inner);
  const Scalar inv = Scalar(1) / static_cast<Scalar>(s.extent);
  for (Index o = 0; o < s.outer; ++o) {
    for (Index e = 0; e < s.extent; ++e) {
      out.segment(o * s.inner, s.inner) += x.segment((o * s.extent + e) * s.inner, s.inner);
    }
  }
  out *= inv;
  return tape.record(Tensor<Scalar>(out_shape, std::move(out)), tape.requires_grad(a),
                     [a, s, inv](Tape<Scalar>& t, const Vec<Scalar>& dy) {
                       auto& dx = t.accumulator(a);
                       for (Index o = 0; o < s.outer; ++o) {
                         for (Index e = 0; e < s.extent; ++e) {
                           dx.segment((o * s.extent + e) * s.inner, s.inner) += dy.segment(o * s.inner, s.inner) * inv;
                         }
                       }
                     });
}

template <typename Scalar>
Var broadcast_axis(Tape<Scalar>& tape, Var a, Index axis, Index count) {
  const Shape& in_shape = tape.shape(a);
  require(axis >= 0 && axis <= static_cast<Index>(in_shape.size()), "broadcast axis out of range");
  require(count >= 1, "broadcast count must be positive");
  Shape out_shape = in_shape;
  out_shape.insert(out_shape.begin() + axis, count);
  const AxisSplit s = split_axis(out_shape, axis);
  const auto& x = tape.value(a).values;
  Vec<Scalar> out(s.outer * s.extent * s.inner);
  for (Index o = 0; o < s.outer; ++o) {
    for (Index e = 0; e < s.extent; ++e) {
      out.segment((o * s.extent + e) * s.inner, s.inner) = x.segment(o * s.inner, s.inner);
    }
  }
  return tape.record(Tensor<Scalar>(out_shape, std::move(out)), tape.requires_grad(a),
                     [a, s](Tape<Scalar>& t, const Vec<Scalar>& dy) {
                       auto& dx = t.accumulator(a);
                       for (Index o = 0; o < s.outer; ++o) {
                         for (Index e = 0; e < s.extent; ++e) {
                           dx.segment(o * s.inner, s.inner) += dy.segment((o * s.extent + e) * s.inner, s.inner);
                         }
                       }
                     });
}

template <typename Scalar>
Var reshape(Tape<Scalar>& tape, Var a, Shape shape) {
  require(numel(shape) == tape.value(a).size(),
          "reshape " + shape_string(tape.shape(a)) + " -> " + shape_string(shape) + " changes size");
  Tensor<Scalar> out(std::move(shape), tape.value(a).values);
  return tape.record(std::move(out), tape.requires_grad(a),
                     [a](Tape<Scalar>& t, const Vec<Scalar>& dy) { t.accumulator(a) += dy; });
}

template <typename Scalar>
Var concat(Tape<Scalar>& tape, const std::vector<Var>& parts, Index axis) {
  require(!parts.empty(), "concat of nothing");
  const Shape& first = tape.shape(parts.front());
  axis = normalize_axis(axis, static_cast<Index>(first.size()));
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  std::vector<AxisSplit> splits;
  bool rg = false;
  for (Var p : parts) {
    const Shape& s = tape.shape(p);
    require(s.size() == first.size(), "concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (static_cast<Index>(d) != axis) require(s[d] == first[d], "concat: shape mismatch off the concat axis");
    }
    out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
    splits.push_back(split_axis(s, axis));
    rg = rg || tape.requires_grad(p);
  }
  const AxisSplit os = split_axis(out_shape, axis);
  Vec<Scalar> out(numel(out_shape));
  Index offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& x = tape.value(parts[k]).values;
    const Index block = splits[k].extent * os.inner;
    for (Index o = 0; o < os.outer; ++o) {
      out.segment(o * os.extent * os.inner + offset, block) = x.segment(o * block, block);
    }
    offset += block;
  }
  return tape.record(Tensor<Scalar>(out_shape, std::move(out)), rg,
                     [parts, splits, os](Tape<Scalar>& t, const Vec<Scalar>& dy) {
                       Index offset = 0;
                       for (std::size_t k = 0; k < parts.size(); ++k) {
                         const Index block = splits[k].extent * os.inner;
                         if (t.requires_grad(parts[k])) {
                           auto& dx = t.accumulator(parts[k]);
                           for (Index o = 0; o < os.outer; ++o) {
                             dx.segment(o * block, block) += dy.segment(o * os.extent * os.inner + offset, block);
                           }
                         }
                         offset += block;
                       }
                     });
}

template <typename Scalar>
Var relu(Tape<Scalar>& tape, Var a) {
  const auto& x = tape.value(a).values;
  Vec<Scalar> y = x.cwiseMax(Scalar(0));
  Vec<Scalar> g = (x.array() > Scalar(0)).template cast<Scalar>();
  return unary(tape, a, std::move(y), std::move(g));
}

template <typename Scalar>
Var sigmoid(Tape<Scalar>& tape, Var a) {
  const auto& x = tape.value(a).values;
  Vec<Scalar> y = x.unaryExpr([](Scalar v) {
    if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
    const Scalar e = std::exp(v);
    return e / (Scalar(1) + e);
  });
  Vec<Scalar> g = y.array() * (Scalar(1) - y.array());
  return unary(tape, a, std::move(y), std::move(g));
}

template <typename Scalar>
Var tanh(Tape<Scalar>& tape, Var a) {
  Vec<Scalar> y = tape.value(a).values.array().tanh();
  Vec<Scalar> g = Scalar(1) - y.array().square();
  return unary(tape, a, std::move(y), std::move(g));
}

template <typename Scalar>
Var softplus(Tape<Scalar>& tape, Var a) {
  const auto& x = tape.value(a).values;
  Vec<Scalar> y = x.unaryExpr([](Scalar v) { return std::log1p(std::exp(-std::abs(v))) + std::max(v, Scalar(0)); });
  Vec<Scalar> g = x.unaryExpr([](Scalar v) {
    if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
    const Scalar e = std::exp(v);
    return e / (Scalar(1) + e);
  });
  return unary(tape, a, std::move(y), std::move(g));
}

template <typename Scalar>
Var softmax(Tape<Scalar>& tape, Var a, Index axis) {
  const Shape& shape = tape.shape(a);
  axis = normalize_axis(axis, static_cast<Index>(shape.size()));
  const AxisSplit s = split_axis(shape, axis);
  const auto& x = tape.value(a).values;
  Vec<Scalar> y(x.size());
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.extent * s.inner + i;
      Scalar mx = x[base];
      for (Index e = 1; e < s.extent; ++e) mx = std::max(mx, x[base + e * s.inner]);
      Scalar total = 0;
      for (Index e = 0; e < s.extent; ++e) {
        const Scalar v = std::exp(x[base + e * s.inner] - mx);
        y[base + e * s.inner] = v;
        total += v;
      }
      for (Index e = 0; e < s.extent; ++e) y[base + e * s.inner] /= total;
    }
  }
  Var out = tape.record(Tensor<Scalar>(shape, y), tape.requires_grad(a),
                        [a, s, y](Tape<Scalar>& t, const Vec<Scalar>& dy) {
                          auto& dx = t.accumulator(a);
                          for (Index o = 0; o < s.outer; ++o) {
                            for (Index i = 0; i < s.inner; ++i) {
                              const Index base = o * s.extent * s.inner + i;
                              Scalar dot = 0;
                              for (Index e = 0; e < s.extent; ++e) dot += dy[base + e * s.inner] * y[base + e * s.inner];
                              for (Index e = 0; e < s.extent; ++e) {
                                const Index k = base + e * s.inner;
                                dx[k] += y[k] * (dy[k] - dot);
                              }
                            }
                          }
                        });
  return out;
}

template <typename Scalar>
Var dropout(Tape<Scalar>& tape, Var a, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must be in [0, 1)");
  if (mode == Mode::Eval || p == 0.0) return a;
  const Index n = tape.value(a).size();
  Vec<Scalar> mask(n);
  const Scalar keep = static_cast<Scalar>(1.0 / (1.0 - p));
  for (Index i = 0; i < n; ++i) mask[i] = uniform01(rng) >= p ? keep : Scalar(0);
  Vec<Scalar> y = tape.value(a).values.cwiseProduct(mask);
  return unary(tape, a, std::move(y), std::move(mask));
}

template <typename Scalar>
Var linear(Tape<Scalar>& tape, Var x, Var weight, Var bias) {
  const Shape& xs = tape.shape(x);
  const Shape& ws = tape.shape(weight);
  require(xs.size() == 2 && ws.size() == 2, "linear expects x [N, In] and weight [Out, In]");
  const Index n = xs[0], in = xs[1], outd = ws[0];
  require(ws[1] == in, "linear: input width " + std::to_string(in) + " does not match weight " + shape_string(ws));
  require(tape.value(bias).size() == outd, "linear: bias does not match output width");
  const Eigen::Map<const RowMat<Scalar>> xm(tape.value(x).values.data(), n, in);
  const Eigen::Map<const RowMat<Scalar>> wm(tape.value(weight).values.data(), outd, in);
  RowMat<Scalar> y = xm * wm.transpose();
  y.rowwise() += tape.value(bias).values.transpose();
  Vec<Scalar> flat = Eigen::Map<Vec<Scalar>>(y.data(), y.size());
  const bool rg = tape.requires_grad(x) || tape.requires_grad(weight) || tape.requires_grad(bias);
  return tape.record(Tensor<Scalar>(Shape{n, outd}, std::move(flat)), rg,
                     [x, weight, bias, n, in, outd](Tape<Scalar>& t, const Vec<Scalar>& dy) {
                       const Eigen::Map<const RowMat<Scalar>> dym(dy.data(), n, outd);
                       if (t.requires_grad(x)) {
                         const Eigen::Map<const RowMat<Scalar>> wm(t.value(weight).values.data(), outd, in);
                         Eigen::Map<RowMat<Scalar>> dx(t.accumulator(x).data(), n, in);
                         dx.noalias() += dym * wm;
                       }
                       if (t.requires_grad(weight)) {
                         const Eigen::Map<const RowMat<Scalar>> xm(t.value(x).values.data(), n, in);
                         Eigen::Map<RowMat<Scalar>> dw(t.accumulator(weight).data(), outd, in);
                         dw.noalias() += dym.transpose() * xm;
                       }
                       if (t.requires_grad(bias)) t.accumulator(bias) += dym.colwise().sum().transpose();
                     });
}

template <typename Scalar>
Var conv2d(Tape<Scalar>& tape, Var x, Var kernels, Var bias) {
  const Shape& xs = tape.shape(x);
  const Shape& ks = tape.shape(kernels);
  require(xs.size() == 4, "conv2d expects input [N, C, H, W], got " + shape_string(xs));
  require(ks.size() == 4, "conv2d expects kernels [Cout, Cin, kh, kw], got " + shape_string(ks));
  require(ks[1] == xs[1], "conv2d: kernel input channels " + std::to_string(ks[1]) + " != input channels " +
                              std::to_string(xs[1]));
  const ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], ks[3]};
  return conv_same(tape, x, kernels, bias, g, Shape{g.n, g.cout, g.h, g.w});
}

template <typename Scalar>
Var conv1d(Tape<Scalar>& tape, Var x, Var kernels, Var bias) {
  const Shape& xs = tape.shape(x);
  const Shape& ks = tape.shape(kernels);
  require(xs.size() == 3, "conv1d expects input [N, C, T], got " + shape_string(xs));
  require(ks.size() == 3, "conv1d expects kernels [Cout, Cin, k], got " + shape_string(ks));
  require(ks[1] == xs[1], "conv1d: kernel input channels " + std::to_string(ks[1]) + " != input channels " +
                              std::to_string(xs[1]));
  const ConvGeometry g{xs[0], xs[1], 1, xs[2], ks[0], 1, ks[2]};
  return conv_same(tape, x, kernels, bias, g, Shape{g.n, g.cout, g.w});
}

template <typename Scalar>
Var batchnorm(Tape<Scalar>& tape, Var x, Var gamma, Var beta, BatchNormState<Scalar>& state, Mode mode) {
  const Shape& xs = tape.shape(x);
  require(xs.size() >= 2, "batchnorm expects at least [N, C]");
  const AxisSplit s = split_axis(xs, 1);
  const Index features = s.extent;
  require(tape.value(gamma).size() == features && tape.value(beta).size() == features,
          "batchnorm: gamma/beta do not match feature axis");
  require(state.running_mean.size() == features && state.running_var.size() == features,
          "batchnorm: running statistics do not match feature axis");
  const Index count = s.outer * s.inner;
  const auto& xv = tape.value(x).values;
  const auto& gv = tape.value(gamma).values;
  const auto& bv = tape.value(beta).values;

  Vec<Scalar> mu(features), inv_std(features);
  if (mode == Mode::Train) {
    for (Index f = 0; f < features; ++f) {
      double acc = 0.0;
      for (Index o = 0; o < s.outer; ++o) acc += xv.segment((o * features + f) * s.inner, s.inner).template cast<double>().sum();
      const double m = acc / static_cast<double>(count);
      double sq = 0.0;
      for (Index o = 0; o < s.outer; ++o) {
        sq += (xv.segment((o * features + f) * s.inner, s.inner).template cast<double>().array() - m).square().sum();
      }
      const double var = sq / static_cast<double>(count);
      mu[f] = static_cast<Scalar>(m);
      inv_std[f] = static_cast<Scalar>(1.0 / std::sqrt(var + state.eps));
      const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
      state.running_mean[f] = static_cast<Scalar>((1.0 - state.momentum) * state.running_mean[f] + state.momentum * m);
      state.running_var[f] = static_cast<Scalar>((1.0 - state.momentum) * state.running_var[f] + state.momentum * unbiased);
    }
    state.initialized = true;
  } else {
    if (!state.initialized) throw StateError("batchnorm evaluated before running statistics were initialized");
    for (Index f = 0; f < features; ++f) {
      mu[f] = state.running_mean[f];
      inv_std[f] = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(state.running_var[f]) + state.eps));
    }
  }

  Vec<Scalar> xhat(xv.size()), y(xv.size());
  for (Index o = 0; o < s.outer; ++o) {
    for (Index f = 0; f < features; ++f) {
      const Index base = (o * features + f) * s.inner;
      xhat.segment(base, s.inner) = (xv.segment(base, s.inner).array() - mu[f]) * inv_std[f];
      y.segment(base, s.inner) = xhat.segment(base, s.inner).array() * gv[f] + bv[f];
    }
  }

  const bool rg = tape.requires_grad(x) || tape.requires_grad(gamma) || tape.requires_grad(beta);
  const bool train = mode == Mode::Train;
  return tape.record(Tensor<Scalar>(xs, std::move(y)), rg,
                     [x, gamma, beta, s, count, inv_std, xhat = std::move(xhat), train](Tape<Scalar>& t, const Vec<Scalar>& dy) {
                       const Index features = s.extent;
                       const auto& gv = t.value(gamma).values;
                       Vec<Scalar> dsum = Vec<Scalar>::Zero(features), dxhat_sum = Vec<Scalar>::Zero(features);
                       for (Index o = 0; o < s.outer; ++o) {
                         for (Index f = 0; f < features; ++f) {
                           const Index base = (o * features + f) * s.inner;
                           dsum[f] += dy.segment(base, s.inner).sum();
                           dxhat_sum[f] += dy.segment(base, s.inner).dot(xhat.segment(base, s.inner));
                         }
                       }
                       if (t.requires_grad(gamma)) t.accumulator(gamma) += dxhat_sum;
                       if (t.requires_grad(beta)) t.accumulator(beta) += dsum;
                       if (!t.requires_grad(x)) return;
                       auto& dx = t.accumulator(x);
                       const Scalar m = static_cast<Scalar>(count);
                       for (Index o = 0; o < s.outer; ++o) {
                         for (Index f = 0; f < features; ++f) {
                           const Index base = (o * features + f) * s.inner;
                           if (train) {
                             // dx = g*inv_std/m * (m*dy - sum(dy) - xhat*sum(dy*xhat))
                             dx.segment(base, s.inner).array() +=
                                 (gv[f] * inv_std[f] / m) *
                                 (m * dy.segment(base, s.inner).array() - dsum[f] -
                                  xhat.segment(base, s.inner).array() * dxhat_sum[f]);
                           } else {
                             dx.segment(base, s.inner) += dy.segment(base, s.inner) * (gv[f] * inv_std[f]);
                           }
                         }
                       }
                     });
}

template <typename Scalar>
Var max_pool_freq(Tape<Scalar>& tape, Var x, Index pool) {
  const Shape& xs = tape.shape(x);
  require(xs.size() == 4, "max_pool_freq expects [N, C, H, W]");
  if (pool < 1) throw ConfigError("pool size must be >= 1");
  const Index n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const Index ho = h / pool;
  if (ho < 1) {
    throw ConfigError("frequency pooling by " + std::to_string(pool) + " would reduce mel axis of " +
                      std::to_string(h) + " below 1");
  }
  const auto& xv = tape.value(x).values;
  Vec<Scalar> y(n * c * ho * w);
  std::vector<Index> argmax(static_cast<std::size_t>(y.size()));
  for (Index nc = 0; nc < n * c; ++nc) {
    for (Index i = 0; i < ho; ++i) {
      for (Index j = 0; j < w; ++j) {
        Index best = (nc * h + i * pool) * w + j;
        for (Index p = 1; p < pool; ++p) {
          const Index k = (nc * h + i * pool + p) * w + j;
          if (xv[k] > xv[best]) best = k;
        }
        const Index o = (nc * ho + i) * w + j;
        y[o] = xv[best];
        argmax[static_cast<std::size_t>(o)] = best;
      }
    }
  }
  return tape.record(Tensor<Scalar>(Shape{n, c, ho, w}, std::move(y)), tape.requires_grad(x),
                     [x, argmax = std::move(argmax)](Tape<Scalar>& t, const Vec<Scalar>& dy) {
                       auto& dx = t.accumulator(x);
                       for (Index o = 0; o < dy.size(); ++o) dx[argmax[static_cast<std::size_t>(o)]] += dy[o];
                     });
}

template <typename Scalar>
Var channel_fuse(Tape<Scalar>& tape, Var x, Var weights) {
  const Shape& xs = tape.shape(x);
  const Shape& ws = tape.shape(weights);
  require(xs.size() == 4 && ws.size() == 3, "channel_fuse expects x [N,K,R,T] and weights [N,K,T]");
  require(ws[0] == xs[0] && ws[1] == xs[1] && ws[2] == xs[3], "channel_fuse: weights do not match input");
  const Index n = xs[0], k = xs[1], r = xs[2], tt = xs[3];
  const auto& xv = tape.value(x).values;
  const auto& wv = tape.value(weights).values;
  Vec<Scalar> y = Vec<Scalar>::Zero(n * r * tt);
  for (Index b = 0; b < n; ++b) {
    for (Index c = 0; c < k; ++c) {
      const auto wrow = wv.segment((b * k + c) * tt, tt).array();
      for (Index m = 0; m < r; ++m) {
        y.segment((b * r + m) * tt, tt).array() += wrow * xv.segment(((b * k + c) * r + m) * tt, tt).array();
      }
    }
  }
  const bool rg = tape.requires_grad(x) || tape.requires_grad(weights);
  return tape.record(Tensor<Scalar>(Shape{n, r, tt}, std::move(y)), rg,
                     [x, weights, n, k, r, tt](Tape<Scalar>& t, const Vec<Scalar>& dy) {
                       const auto& xv = t.value(x).values;
                       const auto& wv = t.value(weights).values;
                       for (Index b = 0; b < n; ++b) {
                         for (Index c = 0; c < k; ++c) {
                           for (Index m = 0; m < r; ++m) {
                             const auto dyr = dy.segment((b * r + m) * tt, tt).array();
                             const Index xo = ((b * k + c) * r + m) * tt;
                             if (t.requires_grad(x)) {
                               t.accumulator(x).segment(xo, tt).array() += dyr * wv.segment((b * k + c) * tt, tt).array();
                             }
                             if (t.requires_grad(weights)) {
                               t.accumulator(weights).segment((b * k + c) * tt, tt).array() += dyr * xv.segment(xo, tt).array();
                             }
                           }
                         }
                       }
                     });
}

template <typename Scalar>
Var attention_pool(Tape<Scalar>& tape, Var x, Var weights) {
  const Shape& xs = tape.shape(x);
  const Shape& ws = tape.shape(weights);
  require(xs.size() == 3 && ws.size() == 2, "attention_pool expects x [N,C,T] and weights [N,T]");
  require(ws[0] == xs[0] && ws[1] == xs[2], "attention_pool: weights do not match input");
  const Index n = xs[0], c = xs[1], tt = xs[2];
  const auto& xv = tape.value(x).values;
  const auto& wv = tape.value(weights).values;
  Vec<Scalar> y(n * c);
  for (Index b = 0; b < n; ++b) {
    for (Index ch = 0; ch < c; ++ch) y[b * c + ch] = xv.segment((b * c + ch) * tt, tt).dot(wv.segment(b * tt, tt));
  }
  const bool rg = tape.requires_grad(x) || tape.requires_grad(weights);
  return tape.record(Tensor<Scalar>(Shape{n, c}, std::move(y)), rg,
                     [x, weights, n, c, tt](Tape<Scalar>& t, const Vec<Scalar>& dy) {
                       const auto& xv = t.value(x).values;
                       const auto& wv = t.value(weights).values;
                       for (Index b = 0; b < n; ++b) {
                         for (Index ch = 0; ch < c; ++ch) {
                           const Scalar g = dy[b * c + ch];
                           if (t.requires_grad(x)) t.accumulator(x).segment((b * c + ch) * tt, tt) += g * wv.segment(b * tt, tt);
                           if (t.requires_grad(weights)) t.accumulator(weights).segment(b * tt, tt) += g * xv.segment((b * c + ch) * tt, tt);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Adam

template <typename Scalar>
void adam_step(std::span<Parameter<Scalar>* const> params, AdamState<Scalar>& state) {
  using V = Vec<Scalar>;
  const AdamConfig& cfg = state.config;
  for (const Parameter<Scalar>* p : params) {
    if (p->trainable && p->grad.size() != p->value.size()) {
      throw UsageError("gradient of " + p->name + " does not match its shape");
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const auto b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  const auto lr = static_cast<Scalar>(cfg.learning_rate), eps = static_cast<Scalar>(cfg.eps);
  const auto wd = static_cast<Scalar>(cfg.weight_decay);
  for (Parameter<Scalar>* p : params) {
    if (!p->trainable) continue;
    auto [m_it, m_new] = state.first_moment.try_emplace(p->name, V::Zero(p->value.size()));
    auto [v_it, v_new] = state.second_moment.try_emplace(p->name, V::Zero(p->value.size()));
    V& m = m_it->second;
    V& v = v_it->second;
    if (m.size() != p->value.size() || v.size() != p->value.size()) {
      throw UsageError("optimizer state for " + p->name + " does not match parameter shape");
    }
    const V g = p->grad + wd * p->value.values;
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
    const V mhat = m / static_cast<Scalar>(c1);
    const V vhat = v / static_cast<Scalar>(c2);
    p->value.values.array() -= lr * mhat.array() / (vhat.array().sqrt() + eps);
  }
}

// ---------------------------------------------------------------------------

#define ASLIP_INSTANTIATE(S)                                                                    \
  template struct Tensor<S>;                                                                    \
  template class Tape<S>;                                                                       \
  template Var add<S>(Tape<S>&, Var, Var);                                                      \
  template Var sub<S>(Tape<S>&, Var, Var);                                                      \
  template Var mul<S>(Tape<S>&, Var, Var);                                                      \
  template Var scale<S>(Tape<S>&, Var, S);                                                      \
  template Var sum<S>(Tape<S>&, Var);                                                           \
  template Var mean<S>(Tape<S>&, Var);                                                          \
  template Var mean_axis<S>(Tape<S>&, Var, Index);                                              \
  template Var broadcast_axis<S>(Tape<S>&, Var, Index, Index);                                  \
  template Var reshape<S>(Tape<S>&, Var, Shape);                                                \
  template Var concat<S>(Tape<S>&, const std::vector<Var>&, Index);                             \
  template Var relu<S>(Tape<S>&, Var);                                                          \
  template Var sigmoid<S>(Tape<S>&, Var);                                                       \
  template Var tanh<S>(Tape<S>&, Var);                                                          \
  template Var softplus<S>(Tape<S>&, Var);                                                      \
  template Var softmax<S>(Tape<S>&, Var, Index);                                                \
  template Var dropout<S>(Tape<S>&, Var, double, Mode, Rng&);                                   \
  template Var linear<S>(Tape<S>&, Var, Var, Var);                                              \
  template Var conv2d<S>(Tape<S>&, Var, Var, Var);                                              \
  template Var conv1d<S>(Tape<S>&, Var, Var, Var);                                              \
  template Var batchnorm<S>(Tape<S>&, Var, Var, Var, BatchNormState<S>&, Mode);                 \
  template Var max_pool_freq<S>(Tape<S>&, Var, Index);                                          \
  template Var channel_fuse<S>(Tape<S>&, Var, Var);                                             \
  template Var attention_pool<S>(Tape<S>&, Var, Var);                                           \
  template void adam_step<S>(std::span<Parameter<S>* const>, AdamState<S>&);

ASLIP_INSTANTIATE(float)
ASLIP_INSTANTIATE(double)

#undef ASLIP_INSTANTIATE

}  // namespace aslip::ag
