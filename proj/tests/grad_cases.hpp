#pragma once

// Central-difference checks of every tensor primitive, shared by the unit
// suite and the acceptance run.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "pointdiff/tensor.hpp"

namespace testing {

struct GradCase {
  std::string name;
  double error;
};

inline pointdiff::tensor::Array<double> gaussian(pointdiff::tensor::Shape s, std::uint64_t seed) {
  std::mt19937_64 r(seed);
  std::normal_distribution<double> n;
  pointdiff::tensor::Array<double> a(std::move(s));
  for (auto& v : a.data) v = n(r);
  return a;
}

// Weighted sum so every output element carries a distinct gradient.
inline double primitive_error(
    const std::function<pointdiff::tensor::Var(pointdiff::tensor::Graph<double>&, pointdiff::tensor::Var)>& f,
    const pointdiff::tensor::Shape& at, std::uint64_t seed = 1) {
  using namespace pointdiff::tensor;
  return grad_check(
      [&](Graph<double>& g, Var x) {
        const Var o = f(g, x);
        return g.sum(g.mul(o, g.constant(gaussian(g.shape(o), 99))));
      },
      gaussian(at, seed));
}

inline std::vector<GradCase> primitive_grad_cases() {
  using namespace pointdiff::tensor;
  using G = Graph<double>;
  const auto W = gaussian({4, 5}, 7), B = gaussian({5}, 8), Y = gaussian({3, 4, 5}, 9);
  std::vector<GradCase> out;
  auto add = [&](std::string name, const std::function<Var(G&, Var)>& f, Shape at) {
    out.push_back({std::move(name), primitive_error(f, at)});
  };
  add("matmul lhs", [&](G& g, Var x) { return g.matmul(x, g.constant(W)); }, {3, 4});
  add("matmul rhs", [&](G& g, Var x) { return g.matmul(g.constant(gaussian({3, 4}, 2)), x); }, {4, 5});
  add("matmul batched", [&](G& g, Var x) { return g.matmul(x, g.constant(gaussian({2, 4, 5}, 3))); }, {2, 3, 4});
  add("add broadcast", [&](G& g, Var x) { return g.add(g.constant(Y), x); }, {5});
  add("sub broadcast", [&](G& g, Var x) { return g.sub(g.constant(Y), x); }, {4, 5});
  add("mul", [&](G& g, Var x) { return g.mul(x, x); }, {3, 4});
  add("scale", [&](G& g, Var x) { return g.scale(x, 0.3); }, {3, 4});
  add("reshape", [&](G& g, Var x) { return g.reshape(x, {4, 3}); }, {3, 4});
  add("transpose", [&](G& g, Var x) { return g.transpose(x, 0, 2); }, {2, 3, 4});
  add("concat", [&](G& g, Var x) {
        Var p[] = {x, g.scale(x, 2.0)};
        return g.concat(p, 1);
      }, {3, 4});
  add("split", [&](G& g, Var x) {
        const std::size_t sizes[] = {1, 3};
        auto parts = g.split(x, 1, sizes);
        return g.add(g.scale(parts[0], 2.0), g.sum(parts[1]));
      }, {3, 4});
  add("slice", [&](G& g, Var x) { return g.slice(x, 1, 1, 2); }, {3, 4});
  add("sum axis", [&](G& g, Var x) { return g.sum(x, 0); }, {3, 4, 2});
  add("mean axis", [&](G& g, Var x) { return g.mean(x, 1); }, {3, 4, 2});
  add("mean all", [&](G& g, Var x) { return g.mean(x); }, {3, 4});
  add("softmax last", [&](G& g, Var x) { return g.softmax(x, 1); }, {3, 4});
  add("softmax first", [&](G& g, Var x) { return g.softmax(x, 0); }, {3, 4});
  add("gelu", [&](G& g, Var x) { return g.gelu(x); }, {3, 4});
  add("layer_norm last", [&](G& g, Var x) { return g.layer_norm(x, 1, 1e-5); }, {3, 4});
  add("layer_norm first", [&](G& g, Var x) { return g.layer_norm(x, 0, 1e-5); }, {3, 4});
  add("layer_norm sorted", [&](G& g, Var x) { return g.layer_norm(x, 1, 1e-5, true); }, {2, 5, 3});
  add("embedding_lookup", [&](G& g, Var x) {
        const std::size_t idx[] = {0, 2, 2};
        return g.embedding_lookup(x, idx);
      }, {3, 4});
  add("conv1d input", [&](G& g, Var x) { return g.conv1d_pointwise(x, g.constant(W), g.constant(B)); }, {3, 4});
  add("conv1d weight",
      [&](G& g, Var x) { return g.conv1d_pointwise(g.constant(gaussian({2, 3, 4}, 5)), x, g.constant(B)); }, {4, 5});
  add("conv1d bias",
      [&](G& g, Var x) { return g.conv1d_pointwise(g.constant(gaussian({2, 3, 4}, 5)), g.constant(W), x); }, {5});
  add("max_pool", [&](G& g, Var x) { return g.max_pool(x, 1); }, {3, 4, 2});
  add("chamfer_l2 lhs", [&](G& g, Var x) { return g.chamfer_l2(x, g.constant(gaussian({6, 3}, 4))); }, {5, 3});
  add("chamfer_l2 rhs", [&](G& g, Var x) { return g.chamfer_l2(g.constant(gaussian({6, 3}, 4)), x); }, {5, 3});
  return out;
}

}  // namespace testing
