#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "disac/numerics/parameters.hpp"

namespace disac::nn {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
  bool passed = false;
};

/// Compares reverse-mode gradients with central differences
/// (f(w+h) - f(w-h)) / 2h for every coordinate of every trainable parameter.
///
/// The relative error of one coordinate is |a - n| / max(|a|, |n|, floor);
/// the floor keeps coordinates with vanishing gradient from dominating.
/// `max_coords_per_param` bounds the work on large tensors (0 = all).
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f, ParameterStore<T>& params, double h, double tol,
                           std::size_t max_coords_per_param = 0, double floor = 1e-6) {
  if (!(h > 0)) throw ConfigError("grad_check: step must be positive");
  params.zero_grad();
  auto loss = f();
  if (!std::isfinite(double(loss.item()))) throw DomainError("grad_check: objective is not finite");
  loss.backward();

  GradCheckReport rep;
  for (auto& p : params.all()) {
    if (!p.trainable) continue;
    std::vector<T> analytic(p.value.grad().begin(), p.value.grad().end());
    if (analytic.empty()) analytic.assign(p.value.numel(), T(0));
    auto w = p.value.mutable_data();
    const std::size_t n = w.size();
    const std::size_t stride = (max_coords_per_param && n > max_coords_per_param) ? n / max_coords_per_param : 1;
    for (std::size_t i = 0; i < n; i += stride) {
      const T orig = w[i];
      double fp, fm;
      {
        NoGradGuard ng;
        w[i] = orig + T(h);
        fp = double(f().item());
        w[i] = orig - T(h);
        fm = double(f().item());
        w[i] = orig;
      }
      if (!std::isfinite(fp) || !std::isfinite(fm)) throw DomainError("grad_check: objective is not finite");
      const double numeric = (fp - fm) / (2 * h);
      const double a = double(analytic[i]);
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      ++rep.coordinates;
      rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_parameter = p.name;
        rep.worst_index = i;
      }
    }
  }
  params.zero_grad();
  rep.passed = rep.max_rel_error <= tol;
  return rep;
}

}  // namespace disac::nn
