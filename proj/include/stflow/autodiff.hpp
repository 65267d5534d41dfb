#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Tape records every primitive evaluated on values that require a
// gradient, in evaluation order, so node inputs always precede the node.
// backward() walks the record in reverse, sums gradient contributions into
// each node and finally into bound Parameters, then clears the tape.

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stflow/tensor.hpp"

namespace stflow {

/// Named trainable array with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor<T>::zeros(value.shape());
  }
  void zero_grad() { grad.fill(T{0}); }
};

template <typename T>
class Tape;

/// Handle to a value on a tape. Invalidated when the tape is cleared.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id, std::uint64_t generation)
      : tape_(tape), id_(id), generation_(generation) {}

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  bool requires_grad() const;
  std::size_t id() const noexcept { return id_; }
  Tape<T>* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  void check() const;

  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
  std::uint64_t generation_ = 0;
};

/// Gradients of free (non-parameter) leaves, keyed by Var::id().
template <typename T>
using Gradients = std::map<std::size_t, Tensor<T>>;

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape<T>&, std::size_t node)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var<T> constant(Tensor<T> value);
  /// Leaf whose gradient is returned by backward().
  Var<T> variable(Tensor<T> value);
  /// Leaf bound to a parameter; backward() adds into param.grad.
  Var<T> parameter(Parameter<T>& param);

  /// Records a primitive. When no input requires a gradient the result is
  /// stored as a constant and `fn` is dropped.
  Var<T> record(const char* kind, Tensor<T> value, std::vector<std::size_t> inputs,
                BackwardFn fn);

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  const char* kind(std::size_t id) const { return nodes_.at(id).kind; }

  /// Gradient flowing into node `id` during backward (zeros if none arrived).
  const Tensor<T>& grad(std::size_t id);
  /// Zero-initialised accumulator for node `id`; backward functions add into it.
  Tensor<T>& grad_accumulator(std::size_t id);

  /// Runs the reverse sweep from a single-element loss and clears the tape.
  Gradients<T> backward(const Var<T>& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  std::uint64_t generation() const noexcept { return generation_; }
  void clear();

 private:
  struct Node {
    const char* kind = "leaf";
    Tensor<T> value;
    std::optional<Tensor<T>> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    bool free_leaf = false;
  };

  Var<T> push(Node node);

  std::deque<Node> nodes_;  // deque: values stay addressable while nodes are appended
  std::uint64_t generation_ = 1;
};

// ---------------------------------------------------------------------------
// Elementwise and structural primitives.
//
// Binary arithmetic broadcasts with trailing-axis alignment: shapes are
// right-aligned and each axis must match or be 1 on one side (a missing
// leading axis counts as 1). Gradients of broadcast operands are summed over
// the broadcast axes.

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T factor);

template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> tanh(const Var<T>& x);
template <typename T> Var<T> square(const Var<T>& x);

/// Sum of all elements in a fixed sequential order; returns shape [1].
template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);

/// [m,k] x [k,n] -> [m,n].
template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);

template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
/// Removes `axis` by picking one index along it.
template <typename T> Var<T> select(const Var<T>& x, std::size_t axis, std::size_t index);
/// Sub-range [begin, end) along `axis`.
template <typename T> Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t begin,
                                   std::size_t end);
/// Joins along `axis`; all other axes must agree.
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis);

/// Output shape of a broadcast between two shapes, or ShapeError.
Shape broadcast_shape(const char* op, const Shape& a, const Shape& b);

// ---------------------------------------------------------------------------
// Finite-difference gradient checking (64-bit).

struct GradcheckResult {
  enum class Status { ok, analytic_nan, numeric_nan };
  Status status = Status::ok;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t worst = 0;  ///< position (within the checked list) of the max error
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Relative error |a-n| / max(|a|, |n|, 1e-8).
double relative_error(double analytic, double numeric);

/// Compares d f(x)/dx from the tape against the fourth-order central
/// difference with step `eps`, over every element of x. f must be
/// deterministic. Keep `eps` well below the distance to any kink (ReLU at 0,
/// max-pool ties).
GradcheckResult gradcheck(const std::function<Var<double>(Tape<double>&, const Var<double>&)>& f,
                          const Tensor<double>& x, double eps = 1e-3);

/// One (parameter, flat element) coordinate to check.
struct ParamCoordinate {
  Parameter<double>* param;
  std::size_t element;
};

/// Same comparison for a loss built from parameters bound on the tape.
///
/// With `halvings` > 0 each coordinate is differenced at eps, eps/2, ...,
/// eps/2^halvings and the estimate is taken from the adjacent pair that agrees
/// best. Large steps keep rounding small, small steps stay clear of nearby
/// kinks; a network full of ReLUs needs both.
GradcheckResult gradcheck_parameters(const std::function<Var<double>(Tape<double>&)>& loss,
                                     const std::vector<ParamCoordinate>& coords,
                                     double eps = 1e-3, std::size_t halvings = 0);

}  // namespace stflow
