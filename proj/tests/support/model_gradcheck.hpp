#pragma once

// Finite-difference check over every parameter of a model at once. Probes
// run with branch tracing so coordinates that straddle a relu or maxpool
// switch are skipped (see finite_diff_check_piecewise).

#include <vector>

#include "care/ad/gradcheck.hpp"
#include "care/model.hpp"

namespace care::testing {

// build(graph, model) returns the scalar loss.
template <typename T, typename Build>
ad::GradCheckReport check_model_gradient(CareModel<T>& model, Build&& build,
                                         const ad::GradCheckOptions& opts = {}) {
  auto& params = model.parameters();
  std::vector<T> flat;
  for (const auto& [name, p] : params) flat.insert(flat.end(), p.value.values().begin(), p.value.values().end());

  auto load = [&]() {
    std::size_t off = 0;
    for (auto& [name, p] : params) {
      for (auto& v : p.value.values()) v = flat[off++];
    }
  };

  model.zero_grad();
  {
    ad::Graph<T> g;
    g.backward(build(g, model));
  }
  std::vector<T> analytic;
  for (const auto& [name, p] : params) analytic.insert(analytic.end(), p.grad.values().begin(), p.grad.values().end());

  auto probe = [&]() {
    load();
    ad::Graph<T> g;
    g.enable_branch_trace();
    const double value = static_cast<double>(build(g, model).value()[0]);
    return ad::Probe{value, g.branch_signature()};
  };
  auto report =
      ad::finite_diff_check_piecewise<T>(probe, std::span<T>(flat), std::span<const T>(analytic), opts);
  load();
  return report;
}

}  // namespace care::testing
