#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Graph records every primitive applied to its Vars in creation order,
// so node ids are already a topological order and backward() is a single
// reverse sweep. Parameters live outside the graph in a ParameterStore and
// are bound into each graph as leaves; backward() returns one gradient
// buffer per store slot.
//
// Broadcasting is limited to the leading dimensions: in add/sub/mul the
// right operand's shape must equal a suffix of the left operand's shape.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pointdiff::tensor {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape) noexcept;
std::string to_string(const Shape& shape);

template <typename T>
struct Array {
  Shape shape;
  std::vector<T> data;

  Array() = default;
  explicit Array(Shape s);
  Array(Shape s, std::vector<T> values);

  std::size_t size() const noexcept { return data.size(); }
  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }
};

// Throws NonFinite naming `what` if any element is NaN or Inf.
template <typename T>
void assert_finite(std::span<const T> values, std::string_view what);

template <typename T>
struct Parameter {
  std::string name;
  Array<T> value;
};

template <typename T>
class ParameterStore {
 public:
  std::size_t add(std::string name, Shape shape);
  // Truncated normal at two standard deviations.
  std::size_t add_trunc_normal(std::string name, Shape shape, double stddev, std::mt19937_64& rng);

  std::size_t size() const noexcept { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  // Index of the named parameter, or size() when absent.
  std::size_t find(std::string_view name) const;
  std::size_t total_elements() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter<T>> params_;
};

template <typename T>
using Gradients = std::vector<std::vector<T>>;

template <typename T>
Gradients<T> zero_gradients(const ParameterStore<T>& store);

struct Var {
  std::size_t id;
};

template <typename T>
class Graph {
 public:
  // With record_grad=false no backward closures are kept and nothing
  // requires grad; used for inference and frozen sub-networks.
  explicit Graph(bool record_grad = true) : record_grad_(record_grad) {}

  Var constant(Array<T> value);
  // A leaf whose gradient can be read back with grad().
  Var input(Array<T> value, bool requires_grad = true);
  Var param(const ParameterStore<T>& store, std::size_t index, bool trainable = true);

  const Shape& shape(Var v) const { return nodes_[v.id].shape; }
  const std::vector<T>& value(Var v) const { return nodes_[v.id].value; }
  Array<T> array(Var v) const { return Array<T>(nodes_[v.id].shape, nodes_[v.id].value); }
  // Gradient of the last backward() loss w.r.t. v; empty if v took no part.
  const std::vector<T>& grad(Var v) const { return nodes_[v.id].grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Primitives.
  Var matmul(Var a, Var b);  // [..., k] x [k, n] or [B, m, k] x [B, k, n]
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, T factor);
  Var reshape(Var a, Shape shape);
  Var transpose(Var a, std::size_t dim0, std::size_t dim1);
  Var concat(std::span<const Var> parts, std::size_t axis);
  Var slice(Var a, std::size_t axis, std::size_t start, std::size_t length);
  std::vector<Var> split(Var a, std::size_t axis, std::span<const std::size_t> sizes);
  Var sum(Var a);
  Var sum(Var a, std::size_t axis);
  Var mean(Var a);
  Var mean(Var a, std::size_t axis);
  Var softmax(Var a, std::size_t axis);
  Var gelu(Var a);
  // With order_invariant the statistics are summed in sorted order, so
  // permuting the normalized axis permutes the output exactly.
  Var layer_norm(Var a, std::size_t axis, T eps, bool order_invariant = false);
  Var embedding_lookup(Var table, std::span<const std::size_t> indices);
  Var conv1d_pointwise(Var x, Var weight, Var bias);  // [..., c_in] -> [..., c_out]
  Var max_pool(Var a, std::size_t axis);
  // Symmetric mean-of-squared nearest-neighbour distance between [n,3] and [m,3].
  Var chamfer_l2(Var a, Var b);

  // Loss must hold exactly one element.
  Gradients<T> backward(Var loss, const ParameterStore<T>* store = nullptr);

 private:
  using Backward = std::function<void(Graph&, std::size_t)>;
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::ptrdiff_t param = -1;
    Backward backward;
  };

  Var push(Shape shape, std::vector<T> value, std::initializer_list<Var> inputs, Backward bw);
  Var push(Shape shape, std::vector<T> value, bool requires_grad, Backward bw);
  bool needs(Var v) const { return nodes_[v.id].requires_grad; }
  std::vector<T>& grad_of(std::size_t id);
  Var binary(Var a, Var b, char op);

  bool record_grad_;
  std::vector<Node> nodes_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  Gradients<T> m, v;
  std::uint64_t step = 0;
};

template <typename T>
AdamState<T> make_adam_state(const ParameterStore<T>& store);

template <typename T>
void adam_step(ParameterStore<T>& params, const Gradients<T>& grads, AdamState<T>& state,
               const AdamConfig& cfg);

// Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-12),
// with per-coordinate step h * (1 + |x|).
double grad_check(const std::function<Var(Graph<double>&, Var)>& f, const Array<double>& point,
                  double h = 1e-5);

// Same measure over parameter coordinates. `coords_per_tensor` limits the
// number of probed entries per tensor (0 = all), chosen with `rng`.
double grad_check_parameters(ParameterStore<double>& store,
                             const std::function<Var(Graph<double>&)>& loss_fn, double h,
                             std::size_t coords_per_tensor, std::mt19937_64& rng);

}  // namespace pointdiff::tensor
