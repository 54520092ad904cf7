#include "svos/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace svos {

template <typename Real>
Tensor<Real> finite_diff_grad(const std::function<Real(const Tensor<Real>&)>& f, const Tensor<Real>& x,
                              Real eps) {
  if (!(eps > Real(0))) throw ValueError("finite_diff_grad: eps must be positive");
  NoGradScope<Real> no_grad;
  Tensor<Real> work = x.detach();
  Tensor<Real> grad(x.shape());
  auto g = grad.mutable_data();
  auto w = work.mutable_data();
  for (std::size_t i = 0; i < w.size(); ++i) {
    const Real original = w[i];
    w[i] = original + eps;
    const Real plus = f(work);
    w[i] = original - eps;
    const Real minus = f(work);
    w[i] = original;
    g[i] = (plus - minus) / (Real(2) * eps);
  }
  return grad;
}

template <typename Real>
Tensor<Real> finite_diff_grad_inplace(const std::function<Real()>& f, Tensor<Real>& x, Real eps,
                                      const std::vector<std::size_t>& indices) {
  if (!(eps > Real(0))) throw ValueError("finite_diff_grad: eps must be positive");
  NoGradScope<Real> no_grad;
  Tensor<Real> grad(x.shape());
  auto g = grad.mutable_data();
  auto w = x.mutable_data();
  std::vector<std::size_t> order = indices;
  if (order.empty()) {
    order.resize(w.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
  }
  for (auto i : order) {
    const Real original = w[i];
    w[i] = original + eps;
    const Real plus = f();
    w[i] = original - eps;
    const Real minus = f();
    w[i] = original;
    g[i] = (plus - minus) / (Real(2) * eps);
  }
  return grad;
}

template <typename Real>
KinkAwareGrad<Real> finite_diff_grad_kink_aware(const std::function<Real()>& f, Tensor<Real>& x, Real eps,
                                                int max_refinements) {
  if (!(eps > Real(0))) throw ValueError("finite_diff_grad: eps must be positive");
  NoGradScope<Real> no_grad;
  std::uint64_t* previous = debug::branch_recorder();
  struct Restore {
    std::uint64_t* p;
    ~Restore() { debug::set_branch_recorder(p); }
  } restore{previous};

  auto evaluate = [&](std::uint64_t& pattern) {
    pattern = 0xcbf29ce484222325ULL;
    debug::set_branch_recorder(&pattern);
    const Real v = f();
    debug::set_branch_recorder(nullptr);
    return v;
  };
  std::uint64_t base = 0;
  (void)evaluate(base);

  KinkAwareGrad<Real> out{Tensor<Real>(x.shape())};
  auto g = out.grad.mutable_data();
  auto w = x.mutable_data();
  for (std::size_t i = 0; i < w.size(); ++i) {
    const Real original = w[i];
    Real step = eps;
    for (int r = 0;; ++r) {
      std::uint64_t hp = 0, hm = 0;
      w[i] = original + step;
      const Real plus = evaluate(hp);
      w[i] = original - step;
      const Real minus = evaluate(hm);
      w[i] = original;
      g[i] = (plus - minus) / (Real(2) * step);
      if (hp == base && hm == base) {
        if (r > 0) ++out.kink_limited;
        break;
      }
      if (r == max_refinements) {
        ++out.unresolved;
        break;
      }
      step /= Real(10);
    }
  }
  return out;
}

template <typename Real>
double max_relative_error(std::span<const Real> analytic, std::span<const Real> numeric) {
  if (analytic.size() != numeric.size()) throw ShapeError("max_relative_error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double n = numeric[i];
    const double err = std::abs(static_cast<double>(analytic[i]) - n) / std::max(1.0, std::abs(n));
    worst = std::max(worst, err);
  }
  return worst;
}

template Tensor<float> finite_diff_grad(const std::function<float(const Tensor<float>&)>&,
                                        const Tensor<float>&, float);
template Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>&,
                                         const Tensor<double>&, double);
template Tensor<float> finite_diff_grad_inplace(const std::function<float()>&, Tensor<float>&, float,
                                                const std::vector<std::size_t>&);
template Tensor<double> finite_diff_grad_inplace(const std::function<double()>&, Tensor<double>&,
                                                 double, const std::vector<std::size_t>&);
template KinkAwareGrad<float> finite_diff_grad_kink_aware(const std::function<float()>&, Tensor<float>&, float, int);
template KinkAwareGrad<double> finite_diff_grad_kink_aware(const std::function<double()>&, Tensor<double>&, double,
                                                           int);
template double max_relative_error(std::span<const float>, std::span<const float>);
template double max_relative_error(std::span<const double>, std::span<const double>);

}  // namespace svos
