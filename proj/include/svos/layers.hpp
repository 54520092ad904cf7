#pragma once

// Network building blocks: convolution, pooling, upsampling, the masked
// binary cross-entropy loss, Xavier initialisation and Adam.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "svos/random.hpp"
#include "svos/tensor.hpp"

namespace svos {

template <typename Real>
struct Conv2dParams {
  Tensor<Real> weight;  // out_ch x in_ch x kH x kW
  Tensor<Real> bias;    // out_ch
  int stride = 1;
  int padding = 0;
};

// Cross-correlation of a C_in x H x W input. Output extent is
// (H + 2 * padding - kH) / stride + 1 and must be integral.
template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& input, const Conv2dParams<Real>& p);

// 2x2 max pooling with stride 2. Ties route the gradient to the first
// element of the window in row-major order.
template <typename Real>
Tensor<Real> max_pool2(const Tensor<Real>& input);

template <typename Real>
Tensor<Real> upsample_nearest2(const Tensor<Real>& input);

// Nearest-neighbour 2x upsampling followed by a 5x5 "same" convolution.
template <typename Real>
Tensor<Real> upsample_conv(const Tensor<Real>& input, const Conv2dParams<Real>& p);

// Mean over pixels of -[y log p + (1 - y) log(1 - p)] with p clamped to
// [1e-7, 1 - 1e-7]. An invalid step yields a constant zero that is not
// recorded on any tape and never reads `target`.
template <typename Real>
Tensor<Real> bce_loss(const Tensor<Real>& pred, const Tensor<Real>& target, bool valid = true);

inline constexpr double kBceClamp = 1e-7;

// Uniform in [-a, a], a = sqrt(6 / (fan_in + fan_out)). For a rank-4
// convolution weight fan_in = in_ch * kH * kW and fan_out = out_ch * kH * kW;
// for rank 2 the fans are the two extents.
template <typename Real>
Tensor<Real> xavier_init(const Shape& shape, std::uint64_t seed);

struct AdamOptions {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename Real>
struct AdamMoments {
  Tensor<Real> m;
  Tensor<Real> v;
};

template <typename Real>
struct AdamState {
  AdamOptions options;
  std::uint64_t step = 0;
  std::map<std::string, AdamMoments<Real>> moments;  // keyed by parameter name
};

template <typename Real>
using NamedTensors = std::vector<std::pair<std::string, Tensor<Real>>>;

// One bias-corrected Adam update of every tensor in `params`; gradients are
// cleared afterwards. Throws ValueError if a parameter has no gradient.
template <typename Real>
void adam_step(NamedTensors<Real>& params, AdamState<Real>& state);

namespace debug {
// Test hook: when set, conv2d's weight gradient is perturbed so gradient
// checks can be shown to fail.
void set_conv_gradient_fault(bool enabled);
bool conv_gradient_fault();
}  // namespace debug

}  // namespace svos
