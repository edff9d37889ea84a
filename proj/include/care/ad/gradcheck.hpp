#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "care/ad/graph.hpp"
#include "care/ad/tensor.hpp"
#include "care/error.hpp"

namespace care::ad {

struct GradCheckOptions {
  double step = 1e-3;
  // 0 checks every coordinate; otherwise a seeded sample of this many.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  // Coordinates left out because a probe crossed a relu or maxpool switch.
  std::size_t coords_skipped = 0;
};

// Value of f at a point plus the branch signature of the evaluation.
struct Probe {
  double value = 0.0;
  std::uint64_t branches = 0;
};

namespace detail {

template <typename T, typename F>
GradCheckReport run_finite_diff(F&& probe, std::span<T> params, std::span<const T> analytic,
                                const GradCheckOptions& opts, bool skip_kinks) {
  if (params.size() != analytic.size()) {
    throw UsageError("finite_diff_check: " + std::to_string(params.size()) +
                     " params but " + std::to_string(analytic.size()) + " gradients");
  }
  std::vector<std::size_t> coords(params.size());
  std::iota(coords.begin(), coords.end(), std::size_t{0});
  const bool sampled = opts.max_coords != 0 && opts.max_coords < coords.size();
  if (sampled) {
    std::mt19937_64 rng(opts.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
  }
  const std::uint64_t base = skip_kinks ? probe().branches : 0;
  GradCheckReport report;
  for (std::size_t k : coords) {
    if (sampled && report.coords_checked == opts.max_coords) break;
    const T saved = params[k];
    params[k] = static_cast<T>(saved + opts.step);
    const Probe up = probe();
    params[k] = static_cast<T>(saved - opts.step);
    const Probe down = probe();
    params[k] = saved;
    if (skip_kinks && (up.branches != base || down.branches != base)) {
      ++report.coords_skipped;
      continue;
    }
    const double numeric = (up.value - down.value) / (2.0 * opts.step);
    const double a = static_cast<double>(analytic[k]);
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > report.max_rel_error || report.coords_checked == 0) {
      report.max_rel_error = rel;
      report.worst_coord = k;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
    ++report.coords_checked;
  }
  return report;
}

}  // namespace detail

// Compares `analytic` against central differences (f(p+h e_k) - f(p-h e_k))/2h.
// `f` must read the current contents of `params`; they are perturbed in
// place and restored exactly. Relative error uses the denominator
// max(|analytic|, |numeric|, 1e-6).
template <typename T, typename F>
GradCheckReport finite_diff_check(F&& f, std::span<T> params, std::span<const T> analytic,
                                  const GradCheckOptions& opts = {}) {
  return detail::run_finite_diff<T>([&] { return Probe{static_cast<double>(f()), 0}; }, params,
                                    analytic, opts, false);
}

// As finite_diff_check, but `probe` also reports the branch signature of each
// evaluation. A coordinate whose +h or -h probe lands on a different linear
// piece than the unperturbed point is skipped: a central difference across a
// relu or maxpool switch does not estimate the derivative at the point. With
// sampling, skipped coordinates are replaced until max_coords are checked.
template <typename T, typename F>
GradCheckReport finite_diff_check_piecewise(F&& probe, std::span<T> params,
                                            std::span<const T> analytic,
                                            const GradCheckOptions& opts = {}) {
  return detail::run_finite_diff<T>(probe, params, analytic, opts, true);
}

// Convenience over a graph builder: `build(graph, leaves)` must return a
// scalar loss computed from the given leaf vars. Every input tensor is
// treated as a differentiable leaf and all their coordinates are pooled.
template <typename T>
GradCheckReport finite_diff_check_graph(
    const std::function<Var<T>(Graph<T>&, const std::vector<Var<T>>&)>& build,
    std::vector<BasicTensor<T>> inputs, const GradCheckOptions& opts = {}) {
  std::vector<T> flat;
  for (const auto& t : inputs) flat.insert(flat.end(), t.values().begin(), t.values().end());

  auto unflatten = [&](std::span<const T> values) {
    std::vector<BasicTensor<T>> out;
    std::size_t off = 0;
    for (const auto& t : inputs) {
      std::vector<T> v(values.begin() + off, values.begin() + off + t.size());
      out.emplace_back(t.shape(), std::move(v));
      off += t.size();
    }
    return out;
  };

  std::vector<T> analytic;
  {
    Graph<T> g;
    std::vector<Var<T>> leaves;
    for (auto& t : unflatten(flat)) leaves.push_back(g.leaf(std::move(t)));
    Var<T> loss = build(g, leaves);
    g.backward(loss);
    for (const Var<T>& v : leaves) {
      BasicTensor<T> gr = g.grad(v);
      analytic.insert(analytic.end(), gr.values().begin(), gr.values().end());
    }
  }

  auto f = [&]() {
    Graph<T> g;
    std::vector<Var<T>> leaves;
    for (auto& t : unflatten(flat)) leaves.push_back(g.leaf(std::move(t), false));
    return static_cast<double>(build(g, leaves).value()[0]);
  };
  return finite_diff_check<T>(f, std::span<T>(flat), std::span<const T>(analytic), opts);
}

}  // namespace care::ad
