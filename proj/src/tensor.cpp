#include "pointdiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include "pointdiff/errors.hpp"
#include "pointdiff/kernels.hpp"

namespace pointdiff::tensor {

std::size_t numel(const Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Array<T>::Array(Shape s) : shape(std::move(s)), data(numel(shape), T(0)) {}

template <typename T>
Array<T>::Array(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != numel(shape))
    throw ShapeError("Array: " + std::to_string(data.size()) + " values for shape " +
                     to_string(shape));
}

template <typename T>
void assert_finite(std::span<const T> values, std::string_view what) {
  for (std::size_t i = 0; i < values.size(); ++i)
    if (!std::isfinite(values[i]))
      throw NonFinite(std::string(what) + ": non-finite value at element " + std::to_string(i));
}

template <typename T>
std::size_t ParameterStore<T>::add(std::string name, Shape shape) {
  params_.push_back(Parameter<T>{std::move(name), Array<T>(std::move(shape))});
  return params_.size() - 1;
}

template <typename T>
std::size_t ParameterStore<T>::add_trunc_normal(std::string name, Shape shape, double stddev,
                                                std::mt19937_64& rng) {
  const std::size_t id = add(std::move(name), std::move(shape));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : params_[id].value.data) {
    double z;
    do z = normal(rng);
    while (std::abs(z) > 2.0);
    v = static_cast<T>(z * stddev);
  }
  return id;
}

template <typename T>
std::size_t ParameterStore<T>::find(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  return params_.size();
}

template <typename T>
std::size_t ParameterStore<T>::total_elements() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
Gradients<T> zero_gradients(const ParameterStore<T>& store) {
  Gradients<T> g(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) g[i].assign(store[i].value.size(), T(0));
  return g;
}

namespace {

// C[m x k] += A[m x n] * B[k x n]^T
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      T acc = 0;
      const T* ar = a + i * n;
      const T* br = b + p * n;
      for (std::size_t j = 0; j < n; ++j) acc += ar[j] * br[j];
      c[i * k + p] += acc;
    }
}

// C[k x n] += A[m x k]^T * B[m x n]
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      T* cr = c + p * n;
      const T* br = b + i * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
}

struct AxisSplit {
  std::size_t outer, dim, inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out = s;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

bool is_suffix(const Shape& big, const Shape& small) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace

template <typename T>
Var Graph<T>::push(Shape shape, std::vector<T> value, bool requires_grad, Backward bw) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.requires_grad = record_grad_ && requires_grad;
  if (n.requires_grad) n.backward = std::move(bw);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var Graph<T>::push(Shape shape, std::vector<T> value, std::initializer_list<Var> inputs,
                   Backward bw) {
  bool rg = false;
  for (auto v : inputs) rg = rg || nodes_[v.id].requires_grad;
  return push(std::move(shape), std::move(value), rg, std::move(bw));
}

template <typename T>
std::vector<T>& Graph<T>::grad_of(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

template <typename T>
Var Graph<T>::constant(Array<T> value) {
  return push(std::move(value.shape), std::move(value.data), false, nullptr);
}

template <typename T>
Var Graph<T>::input(Array<T> value, bool requires_grad) {
  return push(std::move(value.shape), std::move(value.data), requires_grad, nullptr);
}

template <typename T>
Var Graph<T>::param(const ParameterStore<T>& store, std::size_t index, bool trainable) {
  const auto& p = store[index];
  Var v = push(p.value.shape, p.value.data, trainable, nullptr);
  nodes_[v.id].param = static_cast<std::ptrdiff_t>(index);
  return v;
}

template <typename T>
Var Graph<T>::matmul(Var a, Var b) {
  const Shape sa = shape(a), sb = shape(b);
  auto fail = [&] {
    throw ShapeError("matmul: incompatible shapes " + to_string(sa) + " and " + to_string(sb));
  };
  if (sa.empty()) fail();
  if (sb.size() == 2) {
    const std::size_t k = sb[0], n = sb[1];
    if (sa.back() != k) fail();
    const std::size_t m = numel(sa) / k;
    Shape so = sa;
    so.back() = n;
    std::vector<T> out(m * n);
    kernels::omp::matmul(value(a).data(), value(b).data(), out.data(), m, k, n);
    return push(std::move(so), std::move(out), {a, b}, [a, b, m, k, n](Graph& g, std::size_t self) {
      const auto& dy = g.nodes_[self].grad;
      if (g.needs(a)) gemm_nt_acc(dy.data(), g.value(b).data(), g.grad_of(a.id).data(), m, n, k);
      if (g.needs(b)) gemm_tn_acc(g.value(a).data(), dy.data(), g.grad_of(b.id).data(), m, k, n);
    });
  }
  if (sb.size() == 3 && sa.size() == 3 && sa[0] == sb[0] && sa[2] == sb[1]) {
    const std::size_t batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
    std::vector<T> out(batch * m * n);
    for (std::size_t i = 0; i < batch; ++i)
      kernels::omp::matmul(value(a).data() + i * m * k, value(b).data() + i * k * n,
                           out.data() + i * m * n, m, k, n);
    return push(Shape{batch, m, n}, std::move(out), {a, b},
                [a, b, batch, m, k, n](Graph& g, std::size_t self) {
                  const auto& dy = g.nodes_[self].grad;
                  for (std::size_t i = 0; i < batch; ++i) {
                    if (g.needs(a))
                      gemm_nt_acc(dy.data() + i * m * n, g.value(b).data() + i * k * n,
                                  g.grad_of(a.id).data() + i * m * k, m, n, k);
                    if (g.needs(b))
                      gemm_tn_acc(g.value(a).data() + i * m * k, dy.data() + i * m * n,
                                  g.grad_of(b.id).data() + i * k * n, m, k, n);
                  }
                });
  }
  fail();
  return a;
}

template <typename T>
Var Graph<T>::binary(Var a, Var b, char op) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (!is_suffix(sa, sb))
    throw ShapeError(std::string("elementwise '") + op + "': cannot broadcast " + to_string(sb) +
                     " onto " + to_string(sa));
  const std::size_t inner = numel(sb), total = numel(sa);
  const auto& va = value(a);
  const auto& vb = value(b);
  std::vector<T> out(total);
  for (std::size_t i = 0; i < total; ++i) {
    const T x = va[i], y = vb[i % inner];
    out[i] = op == '+' ? x + y : op == '-' ? x - y : x * y;
  }
  return push(sa, std::move(out), {a, b}, [a, b, op, inner, total](Graph& g, std::size_t self) {
    const auto& dy = g.nodes_[self].grad;
    if (g.needs(a)) {
      auto& da = g.grad_of(a.id);
      if (op == '*') {
        const auto& vb = g.value(b);
        for (std::size_t i = 0; i < total; ++i) da[i] += dy[i] * vb[i % inner];
      } else {
        for (std::size_t i = 0; i < total; ++i) da[i] += dy[i];
      }
    }
    if (g.needs(b)) {
      auto& db = g.grad_of(b.id);
      if (op == '*') {
        const auto& va = g.value(a);
        for (std::size_t i = 0; i < total; ++i) db[i % inner] += dy[i] * va[i];
      } else {
        const T sign = op == '-' ? T(-1) : T(1);
        for (std::size_t i = 0; i < total; ++i) db[i % inner] += sign * dy[i];
      }
    }
  });
}

template <typename T>
Var Graph<T>::add(Var a, Var b) {
  return binary(a, b, '+');
}

template <typename T>
Var Graph<T>::sub(Var a, Var b) {
  return binary(a, b, '-');
}

template <typename T>
Var Graph<T>::mul(Var a, Var b) {
  return binary(a, b, '*');
}

template <typename T>
Var Graph<T>::scale(Var a, T factor) {
  std::vector<T> out = value(a);
  for (auto& x : out) x *= factor;
  return push(shape(a), std::move(out), {a}, [a, factor](Graph& g, std::size_t self) {
    const auto& dy = g.nodes_[self].grad;
    auto& da = g.grad_of(a.id);
    for (std::size_t i = 0; i < dy.size(); ++i) da[i] += factor * dy[i];
  });
}

template <typename T>
Var Graph<T>::reshape(Var a, Shape s) {
  if (numel(s) != value(a).size())
    throw ShapeError("reshape: " + to_string(shape(a)) + " to " + to_string(s));
  return push(std::move(s), value(a), {a}, [a](Graph& g, std::size_t self) {
    const auto& dy = g.nodes_[self].grad;
    auto& da = g.grad_of(a.id);
    for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
  });
}

template <typename T>
Var Graph<T>::transpose(Var a, std::size_t d0, std::size_t d1) {
  const Shape sa = shape(a);
  if (d0 >= sa.size() || d1 >= sa.size())
    throw ShapeError("transpose: axes (" + std::to_string(d0) + ", " + std::to_string(d1) +
                     ") for shape " + to_string(sa));
  const std::size_t nd = sa.size();
  std::vector<std::size_t> stride(nd, 1);
  for (std::size_t i = nd; i-- > 1;) stride[i - 1] = stride[i] * sa[i];
  Shape so = sa;
  std::swap(so[d0], so[d1]);
  std::vector<std::size_t> src_stride = stride;
  std::swap(src_stride[d0], src_stride[d1]);

  const std::size_t total = numel(sa);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(nd, 0);
  for (std::size_t o = 0; o < total; ++o) {
    std::size_t s = 0;
    for (std::size_t d = 0; d < nd; ++d) s += idx[d] * src_stride[d];
    map[o] = s;
    for (std::size_t d = nd; d-- > 0;) {
      if (++idx[d] < so[d]) break;
      idx[d] = 0;
    }
  }
  const auto& va = value(a);
  std::vector<T> out(total);
  for (std::size_t o = 0; o < total; ++o) out[o] = va[map[o]];
  return push(std::move(so), std::move(out), {a},
              [a, map = std::move(map)](Graph& g, std::size_t self) {
                const auto& dy = g.nodes_[self].grad;
                auto& da = g.grad_of(a.id);
                for (std::size_t o = 0; o < dy.size(); ++o) da[map[o]] += dy[o];
              });
}

template <typename T>
Var Graph<T>::concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape first = shape(parts[0]);
  const auto base = split_at(first, axis);
  std::size_t dim_total = 0;
  std::vector<std::size_t> dims;
  bool rg = false;
  for (auto p : parts) {
    const Shape& s = shape(p);
    Shape a = s, b = first;
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch " + to_string(s) + " vs " + to_string(first));
    a[axis] = b[axis] = 0;
    if (a != b) throw ShapeError("concat: " + to_string(s) + " vs " + to_string(first));
    dims.push_back(s[axis]);
    dim_total += s[axis];
    rg = rg || needs(p);
  }
  Shape so = first;
  so[axis] = dim_total;
  std::vector<T> out(base.outer * dim_total * base.inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = value(parts[k]);
    const std::size_t block = dims[k] * base.inner;
    for (std::size_t o = 0; o < base.outer; ++o)
      std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>(o * dim_total * base.inner + offset));
    offset += block;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return push(std::move(so), std::move(out), rg,
              [inputs, dims, dim_total, base](Graph& g, std::size_t self) {
                const auto& dy = g.nodes_[self].grad;
                std::size_t offset = 0;
                for (std::size_t k = 0; k < inputs.size(); ++k) {
                  const std::size_t block = dims[k] * base.inner;
                  if (g.needs(inputs[k])) {
                    auto& dx = g.grad_of(inputs[k].id);
                    for (std::size_t o = 0; o < base.outer; ++o)
                      for (std::size_t i = 0; i < block; ++i)
                        dx[o * block + i] += dy[o * dim_total * base.inner + offset + i];
                  }
                  offset += block;
                }
              });
}

template <typename T>
Var Graph<T>::slice(Var a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape sa = shape(a);
  const auto s = split_at(sa, axis);
  if (start + length > s.dim || length == 0)
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") on axis " + std::to_string(axis) + " of " + to_string(sa));
  Shape so = sa;
  so[axis] = length;
  const auto& va = value(a);
  std::vector<T> out(s.outer * length * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(va.begin() + static_cast<std::ptrdiff_t>((o * s.dim + start) * s.inner),
                length * s.inner, out.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
  return push(std::move(so), std::move(out), {a}, [a, s, start, length](Graph& g, std::size_t self) {
    const auto& dy = g.nodes_[self].grad;
    auto& da = g.grad_of(a.id);
    const std::size_t block = length * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < block; ++i) da[(o * s.dim + start) * s.inner + i] += dy[o * block + i];
  });
}

template <typename T>
std::vector<Var> Graph<T>::split(Var a, std::size_t axis, std::span<const std::size_t> sizes) {
  const auto s = split_at(shape(a), axis);
  if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != s.dim)
    throw ShapeError("split: sizes do not cover axis of " + to_string(shape(a)));
  std::vector<Var> out;
  std::size_t start = 0;
  for (auto len : sizes) {
    out.push_back(slice(a, axis, start, len));
    start += len;
  }
  return out;
}

template <typename T>
Var Graph<T>::sum(Var a) {
  T acc = 0;
  for (auto x : value(a)) acc += x;
  return push(Shape{}, {acc}, {a}, [a](Graph& g, std::size_t self) {
    const T d = g.nodes_[self].grad[0];
    for (auto& x : g.grad_of(a.id)) x += d;
  });
}

template <typename T>
Var Graph<T>::sum(Var a, std::size_t axis) {
  const auto s = split_at(shape(a), axis);
  const auto& va = value(a);
  std::vector<T> out(s.outer * s.inner, T(0));
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.dim; ++i)
      for (std::size_t r = 0; r < s.inner; ++r)
        out[o * s.inner + r] += va[(o * s.dim + i) * s.inner + r];
  return push(drop_axis(shape(a), axis), std::move(out), {a}, [a, s](Graph& g, std::size_t self) {
    const auto& dy = g.nodes_[self].grad;
    auto& da = g.grad_of(a.id);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.dim; ++i)
        for (std::size_t r = 0; r < s.inner; ++r) da[(o * s.dim + i) * s.inner + r] += dy[o * s.inner + r];
  });
}

template <typename T>
Var Graph<T>::mean(Var a) {
  return scale(sum(a), T(1) / static_cast<T>(value(a).size()));
}

template <typename T>
Var Graph<T>::mean(Var a, std::size_t axis) {
  const std::size_t dim = split_at(shape(a), axis).dim;
  return scale(sum(a, axis), T(1) / static_cast<T>(dim));
}

template <typename T>
Var Graph<T>::softmax(Var a, std::size_t axis) {
  const auto s = split_at(shape(a), axis);
  const auto& va = value(a);
  std::vector<T> out(va.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t r = 0; r < s.inner; ++r) {
      auto at = [&](std::size_t i) { return (o * s.dim + i) * s.inner + r; };
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < s.dim; ++i) mx = std::max(mx, va[at(i)]);
      T z = 0;
      for (std::size_t i = 0; i < s.dim; ++i) z += (out[at(i)] = std::exp(va[at(i)] - mx));
      for (std::size_t i = 0; i < s.dim; ++i) out[at(i)] /= z;
    }
  return push(shape(a), std::move(out), {a}, [a, s](Graph& g, std::size_t self) {
    const auto& dy = g.nodes_[self].grad;
    const auto& y = g.nodes_[self].value;
    auto& da = g.grad_of(a.id);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t r = 0; r < s.inner; ++r) {
        auto at = [&](std::size_t i) { return (o * s.dim + i) * s.inner + r; };
        T dot = 0;
        for (std::size_t i = 0; i < s.dim; ++i) dot += dy[at(i)] * y[at(i)];
        for (std::size_t i = 0; i < s.dim; ++i) da[at(i)] += y[at(i)] * (dy[at(i)] - dot);
      }
  });
}

template <typename T>
Var Graph<T>::gelu(Var a) {
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  std::vector<T> out = value(a);
  for (auto& x : out) x = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  return push(shape(a), std::move(out), {a}, [a, inv_sqrt2](Graph& g, std::size_t self) {
    const T inv_sqrt_2pi = static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    const auto& dy = g.nodes_[self].grad;
    const auto& x = g.value(a);
    auto& da = g.grad_of(a.id);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x[i] * x[i]);
      da[i] += dy[i] * (cdf + x[i] * pdf);
    }
  });
}

template <typename T>
Var Graph<T>::layer_norm(Var a, std::size_t axis, T eps, bool order_invariant) {
  const auto s = split_at(shape(a), axis);
  const auto& va = value(a);
  std::vector<T> out(va.size());
  std::vector<T> inv_std(s.outer * s.inner);
  const T n = static_cast<T>(s.dim);
  std::vector<T> buf(s.dim);
  auto total = [&]() {
    if (order_invariant) std::sort(buf.begin(), buf.end());
    T acc = 0;
    for (T v : buf) acc += v;
    return acc;
  };
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t r = 0; r < s.inner; ++r) {
      auto at = [&](std::size_t i) { return (o * s.dim + i) * s.inner + r; };
      for (std::size_t i = 0; i < s.dim; ++i) buf[i] = va[at(i)];
      const T mu = total() / n;
      for (std::size_t i = 0; i < s.dim; ++i) buf[i] = (va[at(i)] - mu) * (va[at(i)] - mu);
      const T var = total() / n;
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[o * s.inner + r] = is;
      for (std::size_t i = 0; i < s.dim; ++i) out[at(i)] = (va[at(i)] - mu) * is;
    }
  return push(shape(a), std::move(out), {a},
              [a, s, n, inv_std = std::move(inv_std)](Graph& g, std::size_t self) {
                const auto& dy = g.nodes_[self].grad;
                const auto& y = g.nodes_[self].value;
                auto& da = g.grad_of(a.id);
                for (std::size_t o = 0; o < s.outer; ++o)
                  for (std::size_t r = 0; r < s.inner; ++r) {
                    auto at = [&](std::size_t i) { return (o * s.dim + i) * s.inner + r; };
                    T mdy = 0, mdyy = 0;
                    for (std::size_t i = 0; i < s.dim; ++i) {
                      mdy += dy[at(i)];
                      mdyy += dy[at(i)] * y[at(i)];
                    }
                    mdy /= n;
                    mdyy /= n;
                    const T is = inv_std[o * s.inner + r];
                    for (std::size_t i = 0; i < s.dim; ++i)
                      da[at(i)] += is * (dy[at(i)] - mdy - y[at(i)] * mdyy);
                  }
              });
}

template <typename T>
Var Graph<T>::embedding_lookup(Var table, std::span<const std::size_t> indices) {
  const Shape& st = shape(table);
  if (st.size() != 2) throw ShapeError("embedding_lookup: table must be 2-D, got " + to_string(st));
  const std::size_t rows = st[0], width = st[1];
  const auto& vt = value(table);
  std::vector<T> out(indices.size() * width);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows)
      throw InvalidArgument("embedding_lookup: index " + std::to_string(indices[i]) +
                            " >= " + std::to_string(rows));
    std::copy_n(vt.begin() + static_cast<std::ptrdiff_t>(indices[i] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return push(Shape{idx.size(), width}, std::move(out), {table},
              [table, width, idx = std::move(idx)](Graph& g, std::size_t self) {
                const auto& dy = g.nodes_[self].grad;
                auto& dt = g.grad_of(table.id);
                for (std::size_t i = 0; i < idx.size(); ++i)
                  for (std::size_t j = 0; j < width; ++j) dt[idx[i] * width + j] += dy[i * width + j];
              });
}

template <typename T>
Var Graph<T>::conv1d_pointwise(Var x, Var weight, Var bias) {
  const Shape& sw = shape(weight);
  if (sw.size() != 2 || shape(bias) != Shape{sw[1]})
    throw ShapeError("conv1d_pointwise: weight " + to_string(sw) + " with bias " +
                     to_string(shape(bias)));
  return add(matmul(x, weight), bias);
}

template <typename T>
Var Graph<T>::max_pool(Var a, std::size_t axis) {
  const auto s = split_at(shape(a), axis);
  const auto& va = value(a);
  std::vector<T> out(s.outer * s.inner);
  std::vector<std::size_t> arg(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t r = 0; r < s.inner; ++r) {
      std::size_t best = o * s.dim * s.inner + r;
      for (std::size_t i = 1; i < s.dim; ++i) {
        const std::size_t at = (o * s.dim + i) * s.inner + r;
        if (va[at] > va[best]) best = at;
      }
      out[o * s.inner + r] = va[best];
      arg[o * s.inner + r] = best;
    }
  return push(drop_axis(shape(a), axis), std::move(out), {a},
              [a, arg = std::move(arg)](Graph& g, std::size_t self) {
                const auto& dy = g.nodes_[self].grad;
                auto& da = g.grad_of(a.id);
                for (std::size_t i = 0; i < arg.size(); ++i) da[arg[i]] += dy[i];
              });
}

template <typename T>
Var Graph<T>::chamfer_l2(Var a, Var b) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != 3 || sb[1] != 3)
    throw ShapeError("chamfer_l2: expected [n,3] and [m,3], got " + to_string(sa) + " and " +
                     to_string(sb));
  const std::size_t n = sa[0], m = sb[0];
  if (n == 0 || m == 0) throw InvalidArgument("chamfer_l2: empty cloud");
  const auto& va = value(a);
  const auto& vb = value(b);
  auto sq = [](const T* p, const T* q) {
    const T dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
    return dx * dx + dy * dy + dz * dz;
  };
  auto directed = [&](const std::vector<T>& from, std::size_t nf, const std::vector<T>& to,
                      std::size_t nt, std::vector<std::size_t>& nn) {
    T acc = 0;
    nn.resize(nf);
    for (std::size_t i = 0; i < nf; ++i) {
      T best = std::numeric_limits<T>::infinity();
      std::size_t bi = 0;
      for (std::size_t j = 0; j < nt; ++j) {
        const T d = sq(&from[3 * i], &to[3 * j]);
        if (d < best) {
          best = d;
          bi = j;
        }
      }
      nn[i] = bi;
      acc += best;
    }
    return acc / static_cast<T>(nf);
  };
  std::vector<std::size_t> nn_ab, nn_ba;
  const T loss = directed(va, n, vb, m, nn_ab) + directed(vb, m, va, n, nn_ba);
  return push(Shape{}, {loss}, {a, b},
              [a, b, n, m, nn_ab = std::move(nn_ab), nn_ba = std::move(nn_ba)](Graph& g,
                                                                               std::size_t self) {
                const T d = g.nodes_[self].grad[0];
                const auto& va = g.value(a);
                const auto& vb = g.value(b);
                auto apply = [&](Var from, Var to, std::size_t nf, const std::vector<T>& vf,
                                 const std::vector<T>& vt, const std::vector<std::size_t>& nn) {
                  const T c = T(2) * d / static_cast<T>(nf);
                  const bool gf = g.needs(from), gt = g.needs(to);
                  for (std::size_t i = 0; i < nf; ++i)
                    for (int k = 0; k < 3; ++k) {
                      const T diff = c * (vf[3 * i + k] - vt[3 * nn[i] + k]);
                      if (gf) g.grad_of(from.id)[3 * i + k] += diff;
                      if (gt) g.grad_of(to.id)[3 * nn[i] + k] -= diff;
                    }
                };
                apply(a, b, n, va, vb, nn_ab);
                apply(b, a, m, vb, va, nn_ba);
              });
}

template <typename T>
Gradients<T> Graph<T>::backward(Var loss, const ParameterStore<T>* store) {
  if (value(loss).size() != 1)
    throw InvalidArgument("backward: loss must be scalar, got shape " + to_string(shape(loss)));
  for (auto& n : nodes_) n.grad.clear();
  grad_of(loss.id)[0] = T(1);
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    auto& n = nodes_[id];
    if (n.requires_grad && n.backward && !n.grad.empty()) n.backward(*this, id);
  }
  Gradients<T> grads;
  if (store) {
    grads = zero_gradients(*store);
    for (const auto& n : nodes_) {
      if (n.param < 0 || n.grad.empty()) continue;
      auto& dst = grads[static_cast<std::size_t>(n.param)];
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
    }
  }
  return grads;
}

template <typename T>
AdamState<T> make_adam_state(const ParameterStore<T>& store) {
  return AdamState<T>{zero_gradients(store), zero_gradients(store), 0};
}

template <typename T>
void adam_step(ParameterStore<T>& params, const Gradients<T>& grads, AdamState<T>& state,
               const AdamConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw ShapeError("adam_step: parameter/gradient count mismatch");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& w = params[p].value.data;
    const auto& g = grads[p];
    auto& m = state.m[p];
    auto& v = state.v[p];
    if (g.size() != w.size())
      throw ShapeError("adam_step: gradient size mismatch for " + params[p].name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const double mhat = static_cast<double>(m[i]) / bc1;
      const double vhat = static_cast<double>(v[i]) / bc2;
      w[i] = static_cast<T>(static_cast<double>(w[i]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

namespace {

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / (std::abs(analytic) + std::abs(numeric) + 1e-12);
}

}  // namespace

double grad_check(const std::function<Var(Graph<double>&, Var)>& f, const Array<double>& point,
                  double h) {
  Graph<double> g;
  const Var x = g.input(point, true);
  const Var loss = f(g, x);
  g.backward(loss);
  std::vector<double> analytic = g.grad(x);
  if (analytic.empty()) analytic.assign(point.size(), 0.0);

  auto eval = [&](const Array<double>& p) {
    Graph<double> ge(false);
    return ge.value(f(ge, ge.input(p, false)))[0];
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double hi = h * (1.0 + std::abs(point[i]));
    Array<double> plus = point, minus = point;
    plus[i] += hi;
    minus[i] -= hi;
    const double numeric = (eval(plus) - eval(minus)) / (plus[i] - minus[i]);
    worst = std::max(worst, rel_error(analytic[i], numeric));
  }
  return worst;
}

double grad_check_parameters(ParameterStore<double>& store,
                             const std::function<Var(Graph<double>&)>& loss_fn, double h,
                             std::size_t coords_per_tensor, std::mt19937_64& rng) {
  Graph<double> g;
  const auto grads = g.backward(loss_fn(g), &store);
  auto eval = [&] {
    Graph<double> ge(false);
    return ge.value(loss_fn(ge))[0];
  };
  double worst = 0.0;
  for (std::size_t p = 0; p < store.size(); ++p) {
    auto& w = store[p].value.data;
    std::vector<std::size_t> coords(w.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords_per_tensor && coords.size() > coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(coords_per_tensor);
    }
    for (auto i : coords) {
      const double orig = w[i];
      const double hi = h * (1.0 + std::abs(orig));
      w[i] = orig + hi;
      const double up = eval();
      const double xp = w[i];
      w[i] = orig - hi;
      const double down = eval();
      const double xm = w[i];
      w[i] = orig;
      worst = std::max(worst, rel_error(grads[p][i], (up - down) / (xp - xm)));
    }
  }
  return worst;
}

template struct Array<float>;
template struct Array<double>;
template void assert_finite<float>(std::span<const float>, std::string_view);
template void assert_finite<double>(std::span<const double>, std::string_view);
template class ParameterStore<float>;
template class ParameterStore<double>;
template Gradients<float> zero_gradients(const ParameterStore<float>&);
template Gradients<double> zero_gradients(const ParameterStore<double>&);
template class Graph<float>;
template class Graph<double>;
template AdamState<float> make_adam_state(const ParameterStore<float>&);
template AdamState<double> make_adam_state(const ParameterStore<double>&);
template void adam_step(ParameterStore<float>&, const Gradients<float>&, AdamState<float>&,
                        const AdamConfig&);
template void adam_step(ParameterStore<double>&, const Gradients<double>&, AdamState<double>&,
                        const AdamConfig&);

}  // namespace pointdiff::tensor
