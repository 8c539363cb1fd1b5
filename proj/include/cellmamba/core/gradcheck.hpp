#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cellmamba/core/rng.hpp"
#include "cellmamba/core/tensor.hpp"

namespace cm {

template <typename S>
constexpr double default_fd_step() {
  return sizeof(S) == 4 ? 1e-3 : 1e-5;
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_param;
  i64 worst_coord = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  i64 coords_checked = 0;
};

// Compares analytic gradients of a scalar-valued function against central
// finite differences:
//
//   numeric_i = (f(x + h e_i) - f(x - h e_i)) / (2h)
//   rel_err_i = |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|)
//
// `f` must recompute the loss from the parameters' current contents on every
// call. When `max_coords_per_param` >= 0, that many coordinates are sampled
// without replacement per parameter (deterministically from `seed`).
template <typename S>
GradCheckResult finite_difference_check(
    const std::function<Tensor<S>()>& f,
    const std::vector<std::pair<std::string, Tensor<S>>>& params,
    double h = default_fd_step<S>(), i64 max_coords_per_param = -1,
    std::uint64_t seed = 0x5eed) {
  for (const auto& [name, p] : params) {
    Tensor<S> t = p;  // handles share storage
    t.set_requires_grad(true);
    t.zero_grad();
  }

  // Analytic pass on a private tape.
  std::vector<std::vector<S>> analytic;
  {
    Tape<S> tape;
    typename Tape<S>::Scope scope(tape);
    Tensor<S> loss = f();
    CM_CHECK(loss.numel() == 1, "finite_difference_check: loss must be scalar, got ",
             shape_str(loss.shape()));
    CM_CHECK_NUMERIC(std::isfinite(static_cast<double>(loss.item())),
                     "finite_difference_check: non-finite loss");
    tape.backward(loss);
    for (const auto& [name, p] : params) {
      p.ensure_grad();  // params untouched by the loss check as all-zero
      analytic.push_back(p.grad_vec());
    }
  }

  // Numeric pass with recording disabled.
  GradCheckResult res;
  Rng rng(seed);
  typename Tape<S>::Scope no_tape(nullptr);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& name = params[pi].first;
    Tensor<S> p = params[pi].second;
    S* pd = p.data();

    std::vector<i64> coords;
    if (max_coords_per_param < 0 || max_coords_per_param >= p.numel()) {
      coords.resize(p.numel());
      for (i64 i = 0; i < p.numel(); ++i) coords[i] = i;
    } else {
      std::vector<i64> all(p.numel());
      for (i64 i = 0; i < p.numel(); ++i) all[i] = i;
      for (i64 i = 0; i < max_coords_per_param; ++i) {
        const i64 j = rng.uniform_int(i, p.numel() - 1);
        std::swap(all[i], all[j]);
        coords.push_back(all[i]);
      }
    }

    for (i64 ci : coords) {
      const S saved = pd[ci];
      pd[ci] = saved + static_cast<S>(h);
      const double fp = static_cast<double>(f().item());
      pd[ci] = saved - static_cast<S>(h);
      const double fm = static_cast<double>(f().item());
      pd[ci] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = static_cast<double>(analytic[pi][ci]);
      const double rel =
          std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++res.coords_checked;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = name;
        res.worst_coord = ci;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace cm
