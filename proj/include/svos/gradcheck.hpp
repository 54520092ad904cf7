#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "svos/tensor.hpp"

namespace svos {

// Central-difference estimate of d f / d x, one element at a time.
// `f` receives a perturbed copy of `x` and must be deterministic.
template <typename Real>
Tensor<Real> finite_diff_grad(const std::function<Real(const Tensor<Real>&)>& f, const Tensor<Real>& x,
                              Real eps);

// Same estimate for a tensor that `f` reads implicitly (a model parameter).
// `x` is perturbed in place and restored. With `indices` non-empty only
// those elements are estimated; the rest of the result stays zero.
template <typename Real>
Tensor<Real> finite_diff_grad_inplace(const std::function<Real()>& f, Tensor<Real>& x, Real eps,
                                      const std::vector<std::size_t>& indices = {});

template <typename Real>
struct KinkAwareGrad {
  Tensor<Real> grad;
  std::size_t kink_limited = 0;  // elements estimated with a reduced step
  std::size_t unresolved = 0;    // still crossing a kink at the smallest step
};

// Central differences at `eps`, except where relu / max-pool decisions at
// x +- eps differ from those at x: a difference across a kink does not
// estimate the derivative, so the step shrinks tenfold (up to
// `max_refinements` times) until both sides stay on x's smooth piece.
template <typename Real>
KinkAwareGrad<Real> finite_diff_grad_kink_aware(const std::function<Real()>& f, Tensor<Real>& x, Real eps,
                                                int max_refinements = 6);

// max_i |analytic_i - numeric_i| / max(1, |numeric_i|)
template <typename Real>
double max_relative_error(std::span<const Real> analytic, std::span<const Real> numeric);

}  // namespace svos
