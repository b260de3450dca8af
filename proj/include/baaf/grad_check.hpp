#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "baaf/ops.hpp"

namespace baaf {

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  std::size_t max_coords_per_tensor = 0;  // 0 checks every coordinate
  std::uint64_t seed = 1;
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::string failing_tensor;  // tensor holding the worst coordinate
  std::size_t failing_coordinate = 0;
  double analytic = 0, numeric = 0;
  std::size_t checked = 0;
  bool passed = true;
};

inline double relative_error(double a, double n) {
  return std::abs(a - n) / std::max({1.0, std::abs(a), std::abs(n)});
}

namespace detail {

inline std::vector<std::size_t> pick_coords(std::size_t size, std::size_t max, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(size);
  for (std::size_t i = 0; i < size; ++i) idx[i] = i;
  if (max == 0 || max >= size) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(max);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename T>
void note(GradCheckReport& r, const std::string& name, std::size_t coord, double a, double n, double tol) {
  const double e = relative_error(a, n);
  ++r.checked;
  if (r.checked == 1 || e > r.max_rel_error) {
    r.max_rel_error = e;
    r.failing_tensor = name;
    r.failing_coordinate = coord;
    r.analytic = a;
    r.numeric = n;
  }
  if (e > tol) r.passed = false;
}

}  // namespace detail

/// Compares reverse-mode gradients of `build` against central differences.
/// A non-scalar output is reduced with fixed random weights so that every
/// output component contributes.
template <typename T>
GradCheckReport grad_check(const std::function<Var<T>(Tape<T>&, const std::vector<Var<T>>&)>& build,
                           std::vector<Tensor<T>> inputs, GradCheckOptions opt = {}) {
  std::mt19937_64 rng(opt.seed);
  Tensor<T> weights;
  auto objective = [&](Tape<T>& tape, const std::vector<Var<T>>& vars) {
    Var<T> out = build(tape, vars);
    if (out.value().size() == 1) return out;
    if (weights.empty()) {
      std::normal_distribution<double> nd(0.0, 1.0);
      weights = Tensor<T>(out.value().shape());
      for (auto& w : weights.storage()) w = static_cast<T>(nd(rng));
    }
    return sum(mul(out, tape.constant(weights)));
  };
  auto evaluate = [&]() {
    Tape<T> tape(false);
    std::vector<Var<T>> vars;
    for (const auto& in : inputs) vars.push_back(tape.constant(in));
    return static_cast<double>(objective(tape, vars).value()[0]);
  };

  Tape<T> tape;
  std::vector<Var<T>> vars;
  for (const auto& in : inputs) vars.push_back(tape.input(in));
  Var<T> loss = objective(tape, vars);
  tape.backward(loss);

  GradCheckReport rep;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const Tensor<T> analytic = tape.has_grad(vars[t].id) ? tape.grad(vars[t].id) : Tensor<T>(inputs[t].shape());
    for (std::size_t i : detail::pick_coords(inputs[t].size(), opt.max_coords_per_tensor, rng)) {
      const T orig = inputs[t][i];
      inputs[t][i] = orig + static_cast<T>(opt.eps);
      const double fp = evaluate();
      inputs[t][i] = orig - static_cast<T>(opt.eps);
      const double fm = evaluate();
      inputs[t][i] = orig;
      detail::note<T>(rep, "input" + std::to_string(t), i, analytic[i], (fp - fm) / (2 * opt.eps), opt.tolerance);
    }
  }
  return rep;
}

/// Same check, over entries of a parameter store. `loss` must read its
/// parameters through `tape.parameter(store, path)`. The store is restored
/// to its original contents afterwards.
template <typename T>
GradCheckReport grad_check_parameters(ParameterStore<T>& store, const std::function<Var<T>(Tape<T>&)>& loss,
                                      const std::vector<std::string>& paths, GradCheckOptions opt = {}) {
  const ParameterStore<T> snapshot = store;
  std::mt19937_64 rng(opt.seed);
  GradientMap<T> grads;
  {
    Tape<T> tape;
    Var<T> l = loss(tape);
    tape.backward(l);
    grads = tape.parameter_gradients(store);
  }
  store = snapshot;
  auto evaluate = [&]() {
    Tape<T> tape(false);
    return static_cast<double>(loss(tape).value()[0]);
  };
  GradCheckReport rep;
  for (const auto& path : paths) {
    const auto& g = grads.grads.at(path);
    for (std::size_t i : detail::pick_coords(g.size(), opt.max_coords_per_tensor, rng)) {
      Tensor<T>& v = store.value(path);
      const T orig = snapshot.value(path)[i];
      v[i] = orig + static_cast<T>(opt.eps);
      const double fp = evaluate();
      store = snapshot;
      store.value(path)[i] = orig - static_cast<T>(opt.eps);
      const double fm = evaluate();
      store = snapshot;
      detail::note<T>(rep, path, i, g[i], (fp - fm) / (2 * opt.eps), opt.tolerance);
    }
  }
  return rep;
}

}  // namespace baaf
