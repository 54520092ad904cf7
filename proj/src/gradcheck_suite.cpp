#include "svos/gradcheck_suite.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <numeric>

#include "svos/error.hpp"
#include "svos/gradcheck.hpp"
#include "svos/layers.hpp"
#include "svos/model.hpp"
#include "svos/training.hpp"

namespace svos {

bool GradcheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(),
                     [&](const auto& e) { return e.max_rel_error < tolerance && e.unresolved == 0; });
}

const GradcheckEntry& GradcheckReport::worst() const {
  if (entries.empty()) throw ValueError("empty gradcheck report");
  return *std::max_element(entries.begin(), entries.end(),
                           [](const auto& a, const auto& b) { return a.max_rel_error < b.max_rel_error; });
}

namespace {

using T = Tensor<double>;

T random_tensor(Shape shape, Rng& rng, double lo, double hi) {
  T t(std::move(shape));
  for (auto& v : t.mutable_data()) v = uniform(rng, lo, hi);
  return t.set_requires_grad(true);
}

// Values at least `gap` apart so max / relu decisions survive a perturbation.
T spread_tensor(Shape shape, Rng& rng, double gap, double offset) {
  const auto n = shape_numel(shape);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = offset + gap * static_cast<double>(i);
  for (std::size_t i = n; i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(uniform_int(rng, 0, i - 1))]);
  T t(std::move(shape), std::move(v));
  return t.set_requires_grad(true);
}

class Suite {
 public:
  Suite(double eps, std::uint64_t seed) : eps_(eps), rng_(seed) {}

  // Projects the output onto fixed random weights so every output element
  // influences the scalar.
  void check(const std::string& name, const std::function<T()>& forward, std::vector<std::pair<std::string, T*>> inputs) {
    T weights;
    auto scalar = [&]() -> double {
      const T out = forward();
      if (!weights.defined()) {
        weights = T(out.shape());
        for (auto& v : weights.mutable_data()) v = uniform(rng_, -1.0, 1.0);
      }
      double s = 0.0;
      for (std::size_t i = 0; i < out.size(); ++i) s += out.at(i) * weights.at(i);
      return s;
    };
    (void)scalar();  // fixes the projection weights

    for (auto& [_, x] : inputs) x->clear_grad();
    GradTape<double> tape;
    {
      TapeScope<double> scope(tape);
      const T out = forward();
      const T loss = sum(mul(out, weights));
      tape.backward(loss);
    }
    for (auto& [suffix, x] : inputs) {
      const auto numeric = finite_diff_grad_kink_aware<double>(scalar, *x, eps_);
      std::vector<double> analytic(x->size(), 0.0);
      if (x->has_grad()) std::copy(x->grad().begin(), x->grad().end(), analytic.begin());
      entries.push_back({name + (suffix.empty() ? "" : "." + suffix),
                         max_relative_error<double>(analytic, numeric.grad.data()), x->size(), numeric.kink_limited,
                         numeric.unresolved});
      x->clear_grad();
    }
  }

  // Gradient of an already scalar loss with respect to named model parameters.
  void check_scalar(const std::string& prefix, const std::function<T()>& loss_fn, const NamedTensors<double>& params) {
    for (auto [_, p] : params) p.clear_grad();
    GradTape<double> tape;
    {
      TapeScope<double> scope(tape);
      tape.backward(loss_fn());
    }
    auto scalar = [&]() { return loss_fn().item(); };
    for (auto [name, p] : params) {
      const auto numeric = finite_diff_grad_kink_aware<double>(scalar, p, eps_);
      std::vector<double> analytic(p.size(), 0.0);
      if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
      entries.push_back({prefix + name, max_relative_error<double>(analytic, numeric.grad.data()), p.size(),
                         numeric.kink_limited, numeric.unresolved});
      p.clear_grad();
    }
  }

  Rng& rng() { return rng_; }
  std::vector<GradcheckEntry> entries;

 private:
  double eps_;
  Rng rng_;
};

void tensor_cases(Suite& s) {
  auto& rng = s.rng();
  T a = random_tensor({2, 3, 4}, rng, -1, 1), b = random_tensor({2, 3, 4}, rng, -1, 1);
  T k = random_tensor({1}, rng, 0.5, 1.5);
  T pos = random_tensor({2, 3, 4}, rng, 0.5, 2.0);
  T kinked = spread_tensor({2, 3, 4}, rng, 0.05, -0.575);

  s.check("tensor.add", [&] { return add(a, b); }, {{"lhs", &a}, {"rhs", &b}});
  s.check("tensor.add_broadcast", [&] { return add(a, k); }, {{"lhs", &a}, {"rhs", &k}});
  s.check("tensor.sub", [&] { return sub(a, b); }, {{"lhs", &a}, {"rhs", &b}});
  s.check("tensor.mul", [&] { return mul(a, b); }, {{"lhs", &a}, {"rhs", &b}});
  s.check("tensor.mul_broadcast", [&] { return mul(k, b); }, {{"lhs", &k}, {"rhs", &b}});
  s.check("tensor.sigmoid", [&] { return sigmoid(a); }, {{"", &a}});
  s.check("tensor.relu", [&] { return relu(kinked); }, {{"", &kinked}});
  s.check("tensor.log", [&] { return log(pos); }, {{"", &pos}});
  s.check("tensor.scale", [&] { return scale(a, 0.37); }, {{"", &a}});
  s.check("tensor.sum", [&] { return sum(a); }, {{"", &a}});
  s.check("tensor.mean", [&] { return mean(a); }, {{"", &a}});
  s.check("tensor.reshape", [&] { return sigmoid(a.reshape({6, 4})); }, {{"", &a}});
  s.check("tensor.concat_channels", [&] { return concat_channels<double>({a, b, a}); }, {{"first", &a}, {"second", &b}});
  s.check("tensor.slice_channels", [&] { return slice_channels(b, 1, 1); }, {{"", &b}});
}

void layer_cases(Suite& s) {
  auto& rng = s.rng();
  T x = random_tensor({3, 7, 9}, rng, -1, 1);
  Conv2dParams<double> c3{random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5), random_tensor({4}, rng, -0.5, 0.5), 1, 1};
  s.check("layers.conv2d_3x3", [&] { return conv2d(x, c3); }, {{"input", &x}, {"weight", &c3.weight}, {"bias", &c3.bias}});
  Conv2dParams<double> cs{random_tensor({2, 3, 3, 3}, rng, -0.5, 0.5), random_tensor({2}, rng, -0.5, 0.5), 2, 1};
  s.check("layers.conv2d_stride2", [&] { return conv2d(x, cs); }, {{"input", &x}, {"weight", &cs.weight}, {"bias", &cs.bias}});
  Conv2dParams<double> c1{random_tensor({5, 3, 1, 1}, rng, -0.5, 0.5), random_tensor({5}, rng, -0.5, 0.5), 1, 0};
  s.check("layers.conv2d_1x1", [&] { return conv2d(x, c1); }, {{"input", &x}, {"weight", &c1.weight}, {"bias", &c1.bias}});

  T px = spread_tensor({2, 6, 8}, rng, 0.01, -0.5);
  s.check("layers.max_pool2", [&] { return max_pool2(px); }, {{"", &px}});

  T ux = random_tensor({2, 3, 4}, rng, -1, 1);
  s.check("layers.upsample_nearest2", [&] { return upsample_nearest2(ux); }, {{"", &ux}});
  Conv2dParams<double> c5{random_tensor({3, 2, 5, 5}, rng, -0.3, 0.3), random_tensor({3}, rng, -0.3, 0.3), 1, 2};
  s.check("layers.upsample_conv", [&] { return upsample_conv(ux, c5); },
          {{"input", &ux}, {"weight", &c5.weight}, {"bias", &c5.bias}});

  T pred = random_tensor({1, 4, 5}, rng, 0.05, 0.95);
  T target(Shape{1, 4, 5});
  for (auto& v : target.mutable_data()) v = uniform01(rng) < 0.5 ? 0.0 : 1.0;
  s.check("layers.bce_loss", [&] { return bce_loss(pred, target, true); }, {{"prediction", &pred}});
}

TrainClip<double> random_clip(const ModelConfig& cfg, Rng& rng, std::size_t T) {
  TrainClip<double> clip;
  const auto h = static_cast<std::size_t>(cfg.input_h), w = static_cast<std::size_t>(cfg.input_w);
  for (std::size_t t = 0; t < T; ++t) {
    Tensor<double> frame(Shape{3, h, w});
    for (auto& v : frame.mutable_data()) v = uniform01(rng);
    // An axis-aligned box at a random place.
    Tensor<double> mask(Shape{1, h, w});
    const auto y0 = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(h / 2)));
    const auto x0 = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(w / 2)));
    for (std::size_t y = y0; y < y0 + h / 2; ++y)
      for (std::size_t x = x0; x < x0 + w / 2; ++x) mask.mutable_data()[y * w + x] = 1.0;
    clip.frames.push_back(frame);
    clip.masks.push_back(mask);
    clip.valid.push_back(true);
    clip.raw_indices.push_back(static_cast<int>(t));
  }
  return clip;
}

void model_case(Suite& s, const std::string& label, const ModelConfig& cfg, Feedback feedback, std::uint64_t seed) {
  SegmentationModel<double> model(cfg, seed);
  const auto clip = random_clip(cfg, s.rng(), 3);
  s.check_scalar("model." + label + ".", [&] { return sequence_loss(model, clip, feedback); }, model.params().named());
}

}  // namespace

GradcheckReport run_gradcheck_suite(const std::string& preset, double tolerance, double eps) {
  const auto start = std::chrono::steady_clock::now();
  Suite suite(eps, 20240611);
  tensor_cases(suite);
  layer_cases(suite);

  auto cfg = ModelConfig::from_preset(preset);
  model_case(suite, "network", cfg, Feedback::none, 11);
  auto mask_cfg = cfg;
  mask_cfg.encoder_variant = EncoderVariant::rgb_plus_prev_mask;
  mask_cfg.init_variant = InitVariant::mask_reshape;
  model_case(suite, "prev_mask", mask_cfg, Feedback::teacher_forcing, 12);

  GradcheckReport report;
  report.entries = std::move(suite.entries);
  report.tolerance = tolerance;
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace svos
