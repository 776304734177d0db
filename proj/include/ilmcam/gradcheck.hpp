#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ilmcam/graph.hpp"
#include "ilmcam/tensor.hpp"

namespace ilmcam {

struct GradCheckReport {
  std::string name;
  std::size_t instances = 0;
  std::size_t elements_checked = 0;
  double max_rel_error = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;

  void merge(const GradCheckReport& other) {
    instances += other.instances;
    elements_checked += other.elements_checked;
    if (other.max_rel_error > max_rel_error) {
      max_rel_error = other.max_rel_error;
      worst_analytic = other.worst_analytic;
      worst_numeric = other.worst_numeric;
    }
    passed = passed && other.passed;
  }
};

/// Relative error |a - n| / max(|a|, |n|, 1). The floor of 1 keeps
/// near-zero gradients from turning float round-off into large ratios.
inline double gradient_rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1.0});
}

/// Compares reverse-mode gradients of L = sum_i r_i f(x)_i against central
/// differences, where r is a seeded random projection.
///
/// The analytic side runs the production float path. The reference side
/// re-evaluates f on a double-precision graph, so float round-off in the
/// forward pass does not swamp the O(h^2) difference quotient. `f` must be
/// callable with both Graph& and GraphD& plus the leaf handles.
template <typename F>
GradCheckReport finite_diff_check(F&& f, const std::vector<Tensor>& inputs, std::uint64_t seed, double h = 1e-3,
                                  double tol = 1e-3, std::string name = {}) {
  GradCheckReport report;
  report.name = std::move(name);
  report.instances = 1;

  std::vector<double> projection;
  std::vector<std::vector<float>> analytic;
  {
    Graph g;
    std::vector<Var> leaves;
    for (const Tensor& t : inputs) leaves.push_back(g.variable(t));
    Var out = f(g, std::span<const Var>(leaves));
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    projection.resize(g.value(out).numel());
    for (double& r : projection) r = dist(rng);
    std::vector<float> seed_grad(projection.begin(), projection.end());
    g.backward(out, seed_grad);
    for (Var v : leaves) {
      if (g.has_grad(v)) {
        auto gr = g.grad(v);
        analytic.emplace_back(gr.begin(), gr.end());
      } else {
        analytic.emplace_back(g.value(v).numel(), 0.0f);
      }
    }
  }

  auto evaluate = [&](const std::vector<TensorD>& xs) {
    GraphD g;
    std::vector<Var> leaves;
    for (const TensorD& t : xs) leaves.push_back(g.input(t));
    const auto out = g.value(f(g, std::span<const Var>(leaves))).data();
    double l = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) l += projection[i] * out[i];
    return l;
  };

  std::vector<TensorD> work;
  for (const Tensor& t : inputs) work.push_back(tensor_cast<double>(t));
  for (std::size_t k = 0; k < work.size(); ++k) {
    for (std::size_t j = 0; j < work[k].numel(); ++j) {
      const double orig = work[k][j];
      work[k][j] = orig + h;
      const double lp = evaluate(work);
      work[k][j] = orig - h;
      const double lm = evaluate(work);
      work[k][j] = orig;
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = analytic[k][j];
      const double err = gradient_rel_error(a, numeric);
      ++report.elements_checked;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

}  // namespace ilmcam
