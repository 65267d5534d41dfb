#include "stflow/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Core>

namespace stflow {

// ---------------------------------------------------------------------------
// Var / Tape

template <typename T>
void Var<T>::check() const {
  if (tape_ == nullptr) throw std::logic_error("use of an empty Var");
  if (generation_ != tape_->generation()) throw std::logic_error("use of a Var after its tape was cleared");
}

template <typename T>
const Tensor<T>& Var<T>::value() const {
  check();
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  check();
  return tape_->requires_grad(id_);
}

template <typename T>
Var<T> Tape<T>::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1, generation_);
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.kind = "constant";
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  Node n;
  n.kind = "variable";
  n.value = std::move(value);
  n.requires_grad = true;
  n.free_leaf = true;
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& param) {
  Node n;
  n.kind = "parameter";
  n.value = param.value;
  n.requires_grad = true;
  n.param = &param;
  return push(std::move(n));
}

template <typename T>
Var<T> Tape<T>::record(const char* kind, Tensor<T> value, std::vector<std::size_t> inputs,
                       BackwardFn fn) {
  Node n;
  n.kind = kind;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [this](std::size_t i) { return nodes_.at(i).requires_grad; });
  if (n.requires_grad) {
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
  }
  return push(std::move(n));
}

template <typename T>
Tensor<T>& Tape<T>::grad_accumulator(std::size_t id) {
  auto& node = nodes_.at(id);
  if (!node.grad) node.grad = Tensor<T>::zeros(node.value.shape());
  return *node.grad;
}

template <typename T>
const Tensor<T>& Tape<T>::grad(std::size_t id) {
  return grad_accumulator(id);
}

template <typename T>
Gradients<T> Tape<T>::backward(const Var<T>& loss) {
  if (loss.tape() != this) throw std::logic_error("backward: loss belongs to another tape");
  const auto& lv = loss.value();
  if (lv.size() != 1) {
    throw ShapeError("backward", "loss must be a single element, got " + shape_str(lv.shape()));
  }
  if (nodes_.empty()) throw std::logic_error("backward: empty tape");

  Gradients<T> out;
  if (nodes_[loss.id()].requires_grad) {
    grad_accumulator(loss.id()).fill(T{1});
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.grad || !node.requires_grad) continue;
      if (node.backward) {
        node.backward(*this, i);
      } else if (node.param != nullptr) {
        auto& pg = node.param->grad;
        if (pg.shape() != node.value.shape()) pg = Tensor<T>::zeros(node.value.shape());
        const auto g = node.grad->data();
        auto dst = pg.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += g[k];
      } else if (node.free_leaf) {
        out.emplace(i, std::move(*node.grad));
      }
    }
  }
  clear();
  return out;
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
  ++generation_;
}

template class Var<float>;
template class Var<double>;
template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// Broadcasting helpers

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(op, "cannot broadcast " + shape_str(a) + " with " + shape_str(b) +
                               " (axis " + std::to_string(i) + ": " + std::to_string(da) +
                               " vs " + std::to_string(db) + ")");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace {

std::vector<std::size_t> broadcast_strides(const Shape& operand, const Shape& out) {
  const std::size_t rank = out.size();
  const std::size_t pad = rank - operand.size();
  std::vector<std::size_t> strides(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = rank; i-- > pad;) {
    const std::size_t d = operand[i - pad];
    strides[i] = (d == 1 && out[i] != 1) ? 0 : s;
    s *= d;
  }
  return strides;
}

// Calls fn(out_index, a_index, b_index) over the broadcast output in order.
template <typename Fn>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, Fn&& fn) {
  const std::size_t total = element_count(out);
  if (a == out && b == out) {
    for (std::size_t i = 0; i < total; ++i) fn(i, i, i);
    return;
  }
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  const std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; ++o) {
    fn(o, ia, ib);
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out[ax]) break;
      ia -= sa[ax] * out[ax];
      ib -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

template <typename T>
Tape<T>& tape_of(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.tape() != b.tape()) throw std::logic_error(std::string(op) + ": operands on different tapes");
  return *a.tape();
}

enum class BinaryKind { add, sub, mul };

template <typename T>
Var<T> binary(const char* op, BinaryKind kind, const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = tape_of(op, a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  Shape out_shape = broadcast_shape(op, av.shape(), bv.shape());
  Tensor<T> out(out_shape);
  const T* pa = av.raw();
  const T* pb = bv.raw();
  T* po = out.raw();
  switch (kind) {
    case BinaryKind::add:
      for_each_broadcast(out_shape, av.shape(), bv.shape(),
                         [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] + pb[j]; });
      break;
    case BinaryKind::sub:
      for_each_broadcast(out_shape, av.shape(), bv.shape(),
                         [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] - pb[j]; });
      break;
    case BinaryKind::mul:
      for_each_broadcast(out_shape, av.shape(), bv.shape(),
                         [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] * pb[j]; });
      break;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(op, std::move(out), {ia, ib}, [kind, ia, ib](Tape<T>& t, std::size_t self) {
    const Tensor<T>& g = t.grad(self);
    const Shape& os = g.shape();
    const Shape as = t.value(ia).shape();
    const Shape bs = t.value(ib).shape();
    const T* pg = g.raw();
    if (t.requires_grad(ia)) {
      T* ga = t.grad_accumulator(ia).raw();
      if (kind == BinaryKind::mul) {
        const T* pb = t.value(ib).raw();
        for_each_broadcast(os, as, bs, [&](std::size_t o, std::size_t i, std::size_t j) { ga[i] += pg[o] * pb[j]; });
      } else {
        for_each_broadcast(os, as, bs, [&](std::size_t o, std::size_t i, std::size_t) { ga[i] += pg[o]; });
      }
    }
    if (t.requires_grad(ib)) {
      T* gb = t.grad_accumulator(ib).raw();
      if (kind == BinaryKind::mul) {
        const T* pa = t.value(ia).raw();
        for_each_broadcast(os, as, bs, [&](std::size_t o, std::size_t i, std::size_t j) { gb[j] += pg[o] * pa[i]; });
      } else if (kind == BinaryKind::sub) {
        for_each_broadcast(os, as, bs, [&](std::size_t o, std::size_t, std::size_t j) { gb[j] -= pg[o]; });
      } else {
        for_each_broadcast(os, as, bs, [&](std::size_t o, std::size_t, std::size_t j) { gb[j] += pg[o]; });
      }
    }
  });
}

// Unary op whose derivative is expressed through (input, output).
template <typename T, typename Fwd, typename Deriv>
Var<T> unary(const char* op, const Var<T>& x, Fwd fwd, Deriv deriv) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  const T* px = xv.raw();
  T* po = out.raw();
  for (std::size_t i = 0; i < xv.size(); ++i) po[i] = fwd(px[i]);
  const std::size_t ix = x.id();
  return x.tape()->record(op, std::move(out), {ix}, [ix, deriv](Tape<T>& t, std::size_t self) {
    const T* pg = t.grad(self).raw();
    const T* px = t.value(ix).raw();
    const T* py = t.value(self).raw();
    Tensor<T>& gx = t.grad_accumulator(ix);
    T* pgx = gx.raw();
    for (std::size_t i = 0; i < gx.size(); ++i) pgx[i] += pg[i] * deriv(px[i], py[i]);
  });
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary("add", BinaryKind::add, a, b);
}
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary("sub", BinaryKind::sub, a, b);
}
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary("mul", BinaryKind::mul, a, b);
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  return unary<T>("scale", a, [factor](T v) { return v * factor; },
                  [factor](T, T) { return factor; });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary<T>("relu", x, [](T v) { return v > T{0} ? v : T{0}; },
                  [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary<T>("sigmoid", x, [](T v) { return T{1} / (T{1} + std::exp(-v)); },
                  [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& x) {
  return unary<T>("tanh", x, [](T v) { return std::tanh(v); },
                  [](T, T y) { return T{1} - y * y; });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return unary<T>("square", x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  const auto& xv = x.value();
  T acc{0};
  for (T v : xv.data()) acc += v;
  const std::size_t ix = x.id();
  return x.tape()->record("sum", Tensor<T>::scalar(acc), {ix}, [ix](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    for (T& v : t.grad_accumulator(ix).data()) v += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const auto& xv = x.value();
  T acc{0};
  for (T v : xv.data()) acc += v;
  const T inv = T{1} / static_cast<T>(xv.size());
  const std::size_t ix = x.id();
  return x.tape()->record("mean", Tensor<T>::scalar(acc * inv), {ix},
                          [ix, inv](Tape<T>& t, std::size_t self) {
                            const T g = t.grad(self)[0] * inv;
                            for (T& v : t.grad_accumulator(ix).data()) v += g;
                          });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tape<T>& tape = tape_of("matmul", a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul", "expected [m,k] x [k,n], got " + shape_str(av.shape()) + " x " +
                                   shape_str(bv.shape()));
  }
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Map = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;
  const auto m = static_cast<Eigen::Index>(av.dim(0));
  const auto k = static_cast<Eigen::Index>(av.dim(1));
  const auto n = static_cast<Eigen::Index>(bv.dim(1));
  Tensor<T> out({av.dim(0), bv.dim(1)});
  Map(out.raw(), m, n).noalias() = CMap(av.raw(), m, k) * CMap(bv.raw(), k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record("matmul", std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape<T>& t, std::size_t self) {
    CMap g(t.grad(self).raw(), m, n);
    if (t.requires_grad(ia)) {
      Map(t.grad_accumulator(ia).raw(), m, k).noalias() += g * CMap(t.value(ib).raw(), k, n).transpose();
    }
    if (t.requires_grad(ib)) {
      Map(t.grad_accumulator(ib).raw(), k, n).noalias() += CMap(t.value(ia).raw(), m, k).transpose() * g;
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  return x.tape()->record("reshape", std::move(out), {ix}, [ix](Tape<T>& t, std::size_t self) {
    const T* pg = t.grad(self).raw();
    auto gx = t.grad_accumulator(ix).data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += pg[i];
  });
}

namespace {

// outer = product of dims before axis, inner = product after axis.
void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace

template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto& xv = x.value();
  if (axis >= xv.rank() || begin >= end || end > xv.dim(axis)) {
    throw ShapeError("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                  ") on axis " + std::to_string(axis) + " of " + shape_str(xv.shape()));
  }
  std::size_t outer, inner;
  split_axis(xv.shape(), axis, outer, inner);
  const std::size_t len = xv.dim(axis);
  const std::size_t width = end - begin;
  Shape os = xv.shape();
  os[axis] = width;
  Tensor<T> out(os);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.raw() + (o * len + begin) * inner, width * inner, out.raw() + o * width * inner);
  }
  const std::size_t ix = x.id();
  return x.tape()->record("slice", std::move(out), {ix},
                          [ix, outer, inner, len, begin, width](Tape<T>& t, std::size_t self) {
                            const T* pg = t.grad(self).raw();
                            T* gx = t.grad_accumulator(ix).raw();
                            for (std::size_t o = 0; o < outer; ++o) {
                              T* dst = gx + (o * len + begin) * inner;
                              const T* src = pg + o * width * inner;
                              for (std::size_t i = 0; i < width * inner; ++i) dst[i] += src[i];
                            }
                          });
}

template <typename T>
Var<T> select(const Var<T>& x, std::size_t axis, std::size_t index) {
  const auto& xv = x.value();
  if (axis >= xv.rank() || index >= xv.dim(axis) || xv.rank() < 2) {
    throw ShapeError("select", "index " + std::to_string(index) + " on axis " + std::to_string(axis) +
                                   " of " + shape_str(xv.shape()));
  }
  Var<T> s = slice(x, axis, index, index + 1);
  Shape os = xv.shape();
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  return reshape(s, os);
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  Tape<T>& tape = *parts.front().tape();
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat", "axis out of range for " + shape_str(first));
  std::vector<std::size_t> widths;
  std::vector<std::size_t> ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.tape() != &tape) throw std::logic_error("concat: inputs on different tapes");
    Shape s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat", "rank mismatch " + shape_str(s) + " vs " + shape_str(first));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw ShapeError("concat", "shape " + shape_str(s) + " incompatible with " + shape_str(first));
      }
    }
    widths.push_back(s[axis]);
    ids.push_back(p.id());
    total += s[axis];
  }
  std::size_t outer, inner;
  split_axis(first, axis, outer, inner);
  Shape os = first;
  os[axis] = total;
  Tensor<T> out(os);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const T* src = parts[k].value().raw();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src + o * widths[k] * inner, widths[k] * inner, out.raw() + (o * total + offset) * inner);
    }
    offset += widths[k];
  }
  return tape.record("concat", std::move(out), ids,
                     [ids, widths, outer, inner, total](Tape<T>& t, std::size_t self) {
                       const T* pg = t.grad(self).raw();
                       std::size_t offset = 0;
                       for (std::size_t k = 0; k < ids.size(); ++k) {
                         if (t.requires_grad(ids[k])) {
                           T* gx = t.grad_accumulator(ids[k]).raw();
                           for (std::size_t o = 0; o < outer; ++o) {
                             const T* src = pg + (o * total + offset) * inner;
                             T* dst = gx + o * widths[k] * inner;
                             for (std::size_t i = 0; i < widths[k] * inner; ++i) dst[i] += src[i];
                           }
                         }
                         offset += widths[k];
                       }
                     });
}

#define STFLOW_INSTANTIATE_AD(T)                                                   \
  template Var<T> add(const Var<T>&, const Var<T>&);                               \
  template Var<T> sub(const Var<T>&, const Var<T>&);                               \
  template Var<T> mul(const Var<T>&, const Var<T>&);                               \
  template Var<T> scale(const Var<T>&, T);                                         \
  template Var<T> relu(const Var<T>&);                                             \
  template Var<T> sigmoid(const Var<T>&);                                          \
  template Var<T> tanh(const Var<T>&);                                             \
  template Var<T> square(const Var<T>&);                                           \
  template Var<T> sum(const Var<T>&);                                              \
  template Var<T> mean(const Var<T>&);                                             \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                            \
  template Var<T> reshape(const Var<T>&, Shape);                                   \
  template Var<T> select(const Var<T>&, std::size_t, std::size_t);                 \
  template Var<T> slice(const Var<T>&, std::size_t, std::size_t, std::size_t);     \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);

STFLOW_INSTANTIATE_AD(float)
STFLOW_INSTANTIATE_AD(double)

// ---------------------------------------------------------------------------
// Gradient checking

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace {

void absorb(GradcheckResult& r, std::size_t position, double analytic, double numeric) {
  ++r.checked;
  if (r.status != GradcheckResult::Status::ok) return;
  if (std::isnan(analytic)) {
    r.status = GradcheckResult::Status::analytic_nan;
  } else if (std::isnan(numeric)) {
    r.status = GradcheckResult::Status::numeric_nan;
  }
  if (r.status != GradcheckResult::Status::ok) {
    r.max_rel_error = std::numeric_limits<double>::quiet_NaN();
    r.worst = position;
    r.worst_analytic = analytic;
    r.worst_numeric = numeric;
    return;
  }
  const double e = relative_error(analytic, numeric);
  if (r.checked == 1 || e > r.max_rel_error) {
    r.max_rel_error = e;
    r.worst = position;
    r.worst_analytic = analytic;
    r.worst_numeric = numeric;
  }
}

// Fourth-order central difference (8[f(h)-f(-h)] - [f(2h)-f(-2h)]) / 12h.
// Differences are taken first so a flat function yields exactly zero.
template <typename Eval>
double central_difference(Eval&& at, double h) {
  const double near = at(h) - at(-h);
  const double far = at(2 * h) - at(-2 * h);
  return (8 * near - far) / (12 * h);
}

// Central differences over a ladder of halving steps. Each interior rung is
// scored by its disagreement with both neighbours; the best-scored estimate
// wins, so an isolated coincidence between two rungs is not enough.
template <typename Eval>
double ladder_difference(Eval&& at, double h, std::size_t halvings) {
  if (halvings == 0) return central_difference(at, h);
  if (halvings == 1) return central_difference(at, h / 2);
  std::vector<double> d;
  for (std::size_t i = 0; i <= halvings; ++i, h /= 2) d.push_back(central_difference(at, h));
  std::size_t best = 1;
  double best_score = std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i + 1 < d.size(); ++i) {
    const double score = std::max(std::abs(d[i] - d[i - 1]), std::abs(d[i + 1] - d[i]));
    if (score < best_score) {
      best_score = score;
      best = i;
    }
  }
  return d[best];
}

}  // namespace

GradcheckResult gradcheck(const std::function<Var<double>(Tape<double>&, const Var<double>&)>& f,
                          const Tensor<double>& x, double eps) {
  Tape<double> tape;
  Var<double> xv = tape.variable(x);
  Var<double> y = f(tape, xv);
  const std::size_t xid = xv.id();
  Gradients<double> grads = tape.backward(y);
  Tensor<double> analytic = grads.count(xid) ? grads.at(xid) : Tensor<double>::zeros(x.shape());

  auto eval = [&](const Tensor<double>& at) {
    Tape<double> t;
    Var<double> v = t.constant(at);
    return f(t, v).value()[0];
  };

  GradcheckResult r;
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    const double numeric = central_difference(
        [&](double d) {
          probe[i] = orig + d;
          return eval(probe);
        },
        eps);
    probe[i] = orig;
    absorb(r, i, analytic[i], numeric);
  }
  return r;
}

GradcheckResult gradcheck_parameters(const std::function<Var<double>(Tape<double>&)>& loss,
                                     const std::vector<ParamCoordinate>& coords, double eps,
                                     std::size_t halvings) {
  std::vector<Parameter<double>*> touched;
  for (const auto& c : coords) {
    if (std::find(touched.begin(), touched.end(), c.param) == touched.end()) touched.push_back(c.param);
  }
  for (auto* p : touched) p->zero_grad();
  {
    Tape<double> tape;
    Var<double> l = loss(tape);
    tape.backward(l);
  }

  auto eval = [&]() {
    Tape<double> t;
    return loss(t).value()[0];
  };

  GradcheckResult r;
  for (std::size_t k = 0; k < coords.size(); ++k) {
    auto& value = coords[k].param->value;
    const std::size_t i = coords[k].element;
    const double orig = value[i];
    const double numeric = ladder_difference(
        [&](double d) {
          value[i] = orig + d;
          return eval();
        },
        eps, halvings);
    value[i] = orig;
    absorb(r, k, coords[k].param->grad[i], numeric);
  }
  return r;
}

}  // namespace stflow
