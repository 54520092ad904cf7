#include "svos/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>
#include <sstream>

namespace svos {

namespace debug {
namespace {
std::atomic<bool> conv_fault{false};
}
void set_conv_gradient_fault(bool enabled) { conv_fault = enabled; }
bool conv_gradient_fault() { return conv_fault; }
}  // namespace debug

namespace {

template <typename Real>
using RowMajorMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  int channels, height, width;
  int kernel_h, kernel_w, stride, pad;
  int out_h, out_w;

  Eigen::Index rows() const { return static_cast<Eigen::Index>(channels) * kernel_h * kernel_w; }
  Eigen::Index cols() const { return static_cast<Eigen::Index>(out_h) * out_w; }
  bool pointwise() const { return kernel_h == 1 && kernel_w == 1 && stride == 1 && pad == 0; }
};

// Valid output-column range [lo, hi) for kernel column offset `k`.
inline void valid_span(int k, int stride, int pad, int extent, int out_extent, int& lo, int& hi) {
  // ix = ox * stride - pad + k must lie in [0, extent)
  lo = 0;
  while (lo < out_extent && lo * stride - pad + k < 0) ++lo;
  hi = out_extent;
  while (hi > lo && (hi - 1) * stride - pad + k >= extent) --hi;
}

template <typename Real>
void im2col(const Real* in, const ConvGeometry& g, Real* col) {
  const std::size_t plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    for (int ki = 0; ki < g.kernel_h; ++ki) {
      for (int kj = 0; kj < g.kernel_w; ++kj) {
        Real* row = col + ((static_cast<std::size_t>(c) * g.kernel_h + ki) * g.kernel_w + kj) * plane;
        int lo, hi;
        valid_span(kj, g.stride, g.pad, g.width, g.out_w, lo, hi);
        for (int oy = 0; oy < g.out_h; ++oy) {
          Real* dst = row + static_cast<std::size_t>(oy) * g.out_w;
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, Real(0));
            continue;
          }
          const Real* src = in + (static_cast<std::size_t>(c) * g.height + iy) * g.width;
          std::fill(dst, dst + lo, Real(0));
          if (g.stride == 1) {
            std::copy(src + lo - g.pad + kj, src + hi - g.pad + kj, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride - g.pad + kj];
          }
          std::fill(dst + hi, dst + g.out_w, Real(0));
        }
      }
    }
  }
}

template <typename Real>
void col2im_add(const Real* col, const ConvGeometry& g, Real* in_grad) {
  const std::size_t plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int c = 0; c < g.channels; ++c) {
    for (int ki = 0; ki < g.kernel_h; ++ki) {
      for (int kj = 0; kj < g.kernel_w; ++kj) {
        const Real* row = col + ((static_cast<std::size_t>(c) * g.kernel_h + ki) * g.kernel_w + kj) * plane;
        int lo, hi;
        valid_span(kj, g.stride, g.pad, g.width, g.out_w, lo, hi);
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.height) continue;
          const Real* src = row + static_cast<std::size_t>(oy) * g.out_w;
          Real* dst = in_grad + (static_cast<std::size_t>(c) * g.height + iy) * g.width;
          for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride - g.pad + kj] += src[ox];
        }
      }
    }
  }
}

template <typename Real>
ConvGeometry conv_geometry(const Tensor<Real>& input, const Conv2dParams<Real>& p) {
  if (input.rank() != 3) throw ShapeError("conv2d expects a C x H x W input, got " + shape_str(input.shape()));
  if (!p.weight.defined() || p.weight.rank() != 4) throw ShapeError("conv2d weight must be rank 4");
  if (!p.bias.defined() || p.bias.size() != p.weight.dim(0))
    throw ShapeError("conv2d bias must have one entry per output channel");
  if (p.stride < 1 || p.padding < 0) throw ShapeError("conv2d stride must be >= 1 and padding >= 0");
  if (p.weight.dim(1) != input.dim(0))
    throw ShapeError("conv2d channel mismatch: input " + shape_str(input.shape()) + ", weight " +
                     shape_str(p.weight.shape()));
  ConvGeometry g{};
  g.channels = static_cast<int>(input.dim(0));
  g.height = static_cast<int>(input.dim(1));
  g.width = static_cast<int>(input.dim(2));
  g.kernel_h = static_cast<int>(p.weight.dim(2));
  g.kernel_w = static_cast<int>(p.weight.dim(3));
  g.stride = p.stride;
  g.pad = p.padding;
  const int span_h = g.height + 2 * g.pad - g.kernel_h;
  const int span_w = g.width + 2 * g.pad - g.kernel_w;
  if (span_h < 0 || span_w < 0)
    throw ShapeError("conv2d kernel larger than padded input " + shape_str(input.shape()));
  if (span_h % g.stride != 0 || span_w % g.stride != 0)
    throw ShapeError("conv2d output extent is not integral for input " + shape_str(input.shape()) +
                     " and stride " + std::to_string(g.stride));
  g.out_h = span_h / g.stride + 1;
  g.out_w = span_w / g.stride + 1;
  return g;
}

}  // namespace

template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& input, const Conv2dParams<Real>& p) {
  const ConvGeometry g = conv_geometry(input, p);
  const auto out_ch = static_cast<Eigen::Index>(p.weight.dim(0));
  Tensor<Real> out(Shape{p.weight.dim(0), static_cast<std::size_t>(g.out_h), static_cast<std::size_t>(g.out_w)});

  std::vector<Real> col_buffer;
  const Real* col = input.data().data();
  if (!g.pointwise()) {
    col_buffer.resize(static_cast<std::size_t>(g.rows() * g.cols()));
    im2col(input.data().data(), g, col_buffer.data());
    col = col_buffer.data();
  }
  {
    Eigen::Map<const RowMajorMatrix<Real>> w(p.weight.data().data(), out_ch, g.rows());
    Eigen::Map<const RowMajorMatrix<Real>> c(col, g.rows(), g.cols());
    Eigen::Map<RowMajorMatrix<Real>> y(out.mutable_data().data(), out_ch, g.cols());
    y.noalias() = w * c;
    auto b = p.bias.data();
    for (Eigen::Index o = 0; o < out_ch; ++o) y.row(o).array() += b[static_cast<std::size_t>(o)];
  }

  const Tensor<Real>& weight = p.weight;
  const Tensor<Real>& bias = p.bias;
  if (auto* tape = recording_tape<Real>({&input, &weight, &bias})) {
    tape->record(out, {input, weight, bias}, [input, weight, bias, g, out_ch](std::span<const Real> grad) mutable {
      Eigen::Map<const RowMajorMatrix<Real>> gy(grad.data(), out_ch, g.cols());
      std::vector<Real> col_buffer;
      const Real* col = input.data().data();
      if (weight.requires_grad() && !g.pointwise()) {
        col_buffer.resize(static_cast<std::size_t>(g.rows() * g.cols()));
        im2col(input.data().data(), g, col_buffer.data());
        col = col_buffer.data();
      }
      if (weight.requires_grad()) {
        Eigen::Map<const RowMajorMatrix<Real>> c(col, g.rows(), g.cols());
        Eigen::Map<RowMajorMatrix<Real>> gw(weight.mutable_grad().data(), out_ch, g.rows());
        gw.noalias() += gy * c.transpose();
        if (debug::conv_gradient_fault()) weight.mutable_grad()[0] += Real(0.5);
      }
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        // Plain loop: Eigen's vectorised sum peels by address, so its order
        // (and the rounding) would depend on where the buffer landed.
        const auto n = static_cast<std::size_t>(g.cols());
        for (std::size_t o = 0; o < static_cast<std::size_t>(out_ch); ++o) {
          Real s = 0;
          for (std::size_t i = 0; i < n; ++i) s += grad[o * n + i];
          gb[o] += s;
        }
      }
      if (input.requires_grad()) {
        Eigen::Map<const RowMajorMatrix<Real>> w(weight.data().data(), out_ch, g.rows());
        if (g.pointwise()) {
          Eigen::Map<RowMajorMatrix<Real>> gx(input.mutable_grad().data(), g.rows(), g.cols());
          gx.noalias() += w.transpose() * gy;
        } else {
          RowMajorMatrix<Real> gcol = w.transpose() * gy;
          col2im_add(gcol.data(), g, input.mutable_grad().data());
        }
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> max_pool2(const Tensor<Real>& input) {
  if (input.rank() != 3) throw ShapeError("max_pool2 expects a C x H x W input");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (h % 2 != 0 || w % 2 != 0)
    throw ShapeError("max_pool2 needs even extents, got " + shape_str(input.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<Real> out(Shape{c, oh, ow});
  auto x = input.data();
  auto y = out.mutable_data();
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(y.size());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t base = (ch * h + 2 * oy) * w + 2 * ox;
        const std::size_t window[4] = {base, base + 1, base + w, base + w + 1};
        std::size_t best = window[0];
        for (int k = 1; k < 4; ++k)
          if (x[window[k]] > x[best]) best = window[k];
        const std::size_t o = (ch * oh + oy) * ow + ox;
        y[o] = x[best];
        (*argmax)[o] = static_cast<std::uint32_t>(best);
        if (auto* h = debug::branch_recorder()) debug::record_branch(h, best);
      }
    }
  }
  if (auto* tape = recording_tape<Real>({&input})) {
    tape->record(out, {input}, [input, argmax](std::span<const Real> g) mutable {
      auto gx = input.mutable_grad();
      for (std::size_t o = 0; o < g.size(); ++o) gx[(*argmax)[o]] += g[o];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> upsample_nearest2(const Tensor<Real>& input) {
  if (input.rank() != 3) throw ShapeError("upsample expects a C x H x W input");
  const std::size_t c = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t oh = 2 * h, ow = 2 * w;
  Tensor<Real> out(Shape{c, oh, ow});
  auto x = input.data();
  auto y = out.mutable_data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const Real* src = x.data() + (ch * h + oy / 2) * w;
      Real* dst = y.data() + (ch * oh + oy) * ow;
      for (std::size_t ox = 0; ox < ow; ++ox) dst[ox] = src[ox / 2];
    }
  if (auto* tape = recording_tape<Real>({&input})) {
    tape->record(out, {input}, [input, c, h, w](std::span<const Real> g) mutable {
      auto gx = input.mutable_grad();
      const std::size_t oh = 2 * h, ow = 2 * w;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const Real* src = g.data() + (ch * oh + oy) * ow;
          Real* dst = gx.data() + (ch * h + oy / 2) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) dst[ox / 2] += src[ox];
        }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> upsample_conv(const Tensor<Real>& input, const Conv2dParams<Real>& p) {
  if (!p.weight.defined() || p.weight.rank() != 4 || p.weight.dim(2) != 5 || p.weight.dim(3) != 5)
    throw ShapeError("upsample_conv needs a 5x5 kernel");
  if (p.stride != 1 || p.padding != 2) throw ShapeError("upsample_conv needs stride 1 and padding 2");
  return conv2d(upsample_nearest2(input), p);
}

template <typename Real>
Tensor<Real> bce_loss(const Tensor<Real>& pred, const Tensor<Real>& target, bool valid) {
  if (!valid) return Tensor<Real>::scalar(Real(0));
  if (pred.shape() != target.shape())
    throw ShapeError("bce_loss shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  const Real lo = static_cast<Real>(kBceClamp);
  const Real hi = Real(1) - lo;
  auto p = pred.data();
  auto y = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], lo, hi);
    acc -= y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q);
  }
  const auto n = static_cast<double>(p.size());
  auto out = Tensor<Real>::scalar(static_cast<Real>(acc / n));
  if (auto* tape = recording_tape<Real>({&pred})) {
    tape->record(out, {pred}, [pred, target, lo, hi, n](std::span<const Real> g) mutable {
      auto p = pred.data();
      auto y = target.data();
      auto gp = pred.mutable_grad();
      const Real s = static_cast<Real>(g[0] / n);
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] < lo || p[i] > hi) continue;
        gp[i] += s * ((Real(1) - y[i]) / (Real(1) - p[i]) - y[i] / p[i]);
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> xavier_init(const Shape& shape, std::uint64_t seed) {
  if (shape.size() < 2) throw ShapeError("xavier_init needs rank >= 2, got " + shape_str(shape));
  std::size_t receptive = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) receptive *= shape[i];
  const double fan_in = static_cast<double>(shape[1] * receptive);
  const double fan_out = static_cast<double>(shape[0] * receptive);
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  Tensor<Real> out(shape);
  Rng rng(seed);
  for (auto& v : out.mutable_data()) v = static_cast<Real>(uniform(rng, -a, a));
  return out;
}

template <typename Real>
void adam_step(NamedTensors<Real>& params, AdamState<Real>& state) {
  for (auto& [name, t] : params)
    if (!t.has_grad()) throw ValueError("adam_step: parameter '" + name + "' has no gradient");

  state.step += 1;
  const auto& o = state.options;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(o.beta1, t);
  const double correction2 = 1.0 - std::pow(o.beta2, t);
  for (auto& [name, param] : params) {
    auto it = state.moments.find(name);
    if (it == state.moments.end())
      it = state.moments.emplace(name, AdamMoments<Real>{Tensor<Real>(param.shape()), Tensor<Real>(param.shape())}).first;
    auto m = it->second.m.mutable_data();
    auto v = it->second.v.mutable_data();
    if (m.size() != param.size()) throw ShapeError("adam_step: moment shape mismatch for '" + name + "'");
    auto g = param.grad();
    auto w = param.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double mi = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
      const double vi = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
      m[i] = static_cast<Real>(mi);
      v[i] = static_cast<Real>(vi);
      const double m_hat = mi / correction1;
      const double v_hat = vi / correction2;
      w[i] = static_cast<Real>(w[i] - o.lr * m_hat / (std::sqrt(v_hat) + o.epsilon));
    }
    param.clear_grad();
  }
}

std::string rng_state(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

void restore_rng_state(Rng& rng, const std::string& state) {
  std::istringstream in(state);
  in >> rng;
  if (!in) throw FormatError("malformed rng state");
}

#define SVOS_INSTANTIATE(Real)                                                          \
  template Tensor<Real> conv2d(const Tensor<Real>&, const Conv2dParams<Real>&);         \
  template Tensor<Real> max_pool2(const Tensor<Real>&);                                 \
  template Tensor<Real> upsample_nearest2(const Tensor<Real>&);                         \
  template Tensor<Real> upsample_conv(const Tensor<Real>&, const Conv2dParams<Real>&);  \
  template Tensor<Real> bce_loss(const Tensor<Real>&, const Tensor<Real>&, bool);       \
  template Tensor<Real> xavier_init<Real>(const Shape&, std::uint64_t);                 \
  template void adam_step(NamedTensors<Real>&, AdamState<Real>&);

SVOS_INSTANTIATE(float)
SVOS_INSTANTIATE(double)

}  // namespace svos
