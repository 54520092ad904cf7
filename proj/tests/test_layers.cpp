#include <cmath>

#include "support.hpp"
#include "svos/error.hpp"
#include "svos/gradcheck.hpp"
#include "svos/layers.hpp"
#include "svos/training.hpp"

using namespace svos;
using T = Tensor<double>;

namespace {

// Direct summation over the kernel window.
T conv_oracle(const T& x, const T& w, const T& b, int stride, int pad) {
  const auto C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const auto O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
  const auto OH = (H + 2 * pad - KH) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
  T out(Shape{O, OH, OW});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox) {
        double s = b.at(o);
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t ky = 0; ky < KH; ++ky)
            for (std::size_t kx = 0; kx < KW; ++kx) {
              const long iy = static_cast<long>(oy * stride + ky) - pad;
              const long ix = static_cast<long>(ox * stride + kx) - pad;
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
              s += w.at(((o * C + c) * KH + ky) * KW + kx) * x.at((c * H + iy) * W + ix);
            }
        out.mutable_data()[(o * OH + oy) * OW + ox] = s;
      }
  return out;
}

double grad_error(const std::function<T()>& forward, T& input, Rng& rng) {
  const T probe = forward();
  const T w = test::random_tensor<double>(probe.shape(), rng);
  input.clear_grad();
  input.set_requires_grad(true);
  GradTape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(sum(mul(forward(), w)));
  }
  std::vector<double> analytic(input.grad().begin(), input.grad().end());
  auto f = [&]() {
    const T out = forward();
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out.at(i) * w.at(i);
    return s;
  };
  const T numeric = finite_diff_grad_inplace<double>(f, input, 1e-3);
  input.clear_grad();
  return max_relative_error<double>(analytic, numeric.data());
}

// Distinct values so a 1e-3 perturbation never changes a max.
T distinct(Shape shape, Rng& rng) {
  const auto n = shape_numel(shape);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 0.01 * static_cast<double>(i);
  for (std::size_t i = n; i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(uniform_int(rng, 0, i - 1))]);
  return T(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("conv2d examples") {
  Conv2dParams<double> zero{T(Shape{1, 1, 3, 3}), T(Shape{1}), 1, 0};
  Rng rng(1);
  const T out = conv2d(test::random_tensor<double>({1, 3, 3}, rng), zero);
  CHECK(out.shape() == Shape{1, 1, 1});
  CHECK(out.item() == 0.0);

  T x(Shape{1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Conv2dParams<double> ones{T(Shape{1, 1, 3, 3}, 1.0), T(Shape{1}), 1, 1};
  const T y = conv2d(x, ones);
  CHECK(y.shape() == Shape{1, 3, 3});
  CHECK(y.at(4) == conv_oracle(x, ones.weight, ones.bias, 1, 1).at(4));
  CHECK(y.at(4) == 45.0);
}

TEST_CASE("conv2d keeps 512 x 8 x 14 with 512 same-padded 3x3 filters") {
  Rng rng(2);
  Conv2dParams<float> p{xavier_init<float>({512, 512, 3, 3}, 1), Tensor<float>(Shape{512}), 1, 1};
  const auto y = conv2d(test::random_tensor<float>({512, 8, 14}, rng), p);
  CHECK(y.shape() == Shape{512, 8, 14});
}

TEST_CASE("conv2d agrees with direct summation") {
  Rng rng(3);
  struct Case {
    std::size_t c, h, w, o, k;
    int stride, pad;
  };
  for (const auto& cs : {Case{1, 5, 5, 1, 3, 1, 1}, Case{3, 7, 9, 4, 3, 1, 1}, Case{2, 9, 9, 3, 3, 2, 1},
                         Case{4, 6, 10, 2, 1, 1, 0}, Case{2, 9, 7, 3, 5, 1, 2}, Case{3, 6, 6, 2, 3, 1, 0},
                         Case{2, 7, 7, 2, 3, 2, 0}}) {
    const T x = test::random_tensor<double>({cs.c, cs.h, cs.w}, rng);
    Conv2dParams<double> p{test::random_tensor<double>({cs.o, cs.c, cs.k, cs.k}, rng),
                           test::random_tensor<double>({cs.o}, rng), cs.stride, cs.pad};
    const T got = conv2d(x, p);
    const T want = conv_oracle(x, p.weight, p.bias, cs.stride, cs.pad);
    REQUIRE(got.shape() == want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got.at(i) == doctest::Approx(want.at(i)).epsilon(1e-12));
  }
}

TEST_CASE("conv2d errors") {
  Conv2dParams<double> p{T(Shape{2, 3, 3, 3}), T(Shape{2}), 1, 1};
  CHECK_THROWS_AS(conv2d(T(Shape{4, 5, 5}), p), ShapeError);  // channel mismatch
  Conv2dParams<double> s2{T(Shape{2, 3, 3, 3}), T(Shape{2}), 2, 0};
  CHECK_THROWS_AS(conv2d(T(Shape{3, 6, 6}), s2), ShapeError);  // (6 - 3) / 2 is not integral
  CHECK_THROWS_AS(conv2d(T(Shape{3, 2, 2}), Conv2dParams<double>{T(Shape{2, 3, 3, 3}), T(Shape{2}), 1, 0}), ShapeError);
  CHECK_THROWS_AS(conv2d(T(Shape{3, 5}), p), ShapeError);
}

TEST_CASE("same padding preserves extents for odd kernels") {
  Rng rng(4);
  for (std::size_t k : {1u, 3u, 5u, 7u}) {
    Conv2dParams<double> p{test::random_tensor<double>({2, 3, k, k}, rng), T(Shape{2}), 1, static_cast<int>(k / 2)};
    CHECK(conv2d(test::random_tensor<double>({3, 9, 11}, rng), p).shape() == Shape{2, 9, 11});
  }
}

TEST_CASE("max_pool2") {
  CHECK(max_pool2(T(Shape{1, 2, 2}, {1, 2, 3, 4})).item() == 4.0);
  CHECK(max_pool2(Tensor<float>(Shape{16, 64, 112})).shape() == Shape{16, 32, 56});
  CHECK_THROWS_AS(max_pool2(T(Shape{1, 3, 4})), ShapeError);

  T c = T(Shape{1, 2, 4}, 7.0).set_requires_grad(true);
  GradTape<double> tape;
  {
    TapeScope<double> scope(tape);
    const T y = max_pool2(c);
    for (double v : y.data()) CHECK(v == 7.0);
    tape.backward(sum(y));
  }
  // Ties: the first element of each window in row-major order.
  CHECK(std::vector<double>(c.grad().begin(), c.grad().end()) == std::vector<double>{1, 0, 1, 0, 0, 0, 0, 0});
}

TEST_CASE("upsample_conv") {
  T k(Shape{1, 1, 5, 5});
  k.mutable_data()[12] = 1.0;
  Conv2dParams<double> id{k, T(Shape{1}), 1, 2};
  const T y = upsample_conv(T(Shape{1, 1, 1}, {2.5}), id);
  CHECK(y.shape() == Shape{1, 2, 2});
  for (double v : y.data()) CHECK(v == 2.5);

  Rng rng(5);
  const T r = upsample_conv(test::random_tensor<double>({2, 3, 5}, rng),
                            Conv2dParams<double>{test::random_tensor<double>({4, 2, 5, 5}, rng), T(Shape{4}), 1, 2});
  CHECK(r.shape() == Shape{4, 6, 10});

  Conv2dParams<float> big{xavier_init<float>({256, 512, 5, 5}, 3), Tensor<float>(Shape{256}), 1, 2};
  CHECK(upsample_conv(test::random_tensor<float>({512, 8, 14}, rng), big).shape() == Shape{256, 16, 28});

  CHECK_THROWS(upsample_conv(T(Shape{1, 2, 2}), Conv2dParams<double>{T(Shape{1, 1, 3, 3}), T(Shape{1}), 1, 1}));
  CHECK_THROWS(upsample_conv(T(Shape{1, 2, 2}), Conv2dParams<double>{T(Shape{1, 1, 5, 5}), T(Shape{1}), 1, 0}));
}

TEST_CASE("bce_loss values") {
  Rng rng(6);
  T target(Shape{1, 4, 4});
  for (auto& v : target.mutable_data()) v = uniform01(rng) < 0.5 ? 0 : 1;
  CHECK(bce_loss(T(Shape{1, 4, 4}, 0.5), target).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(bce_loss(T(Shape{1, 1, 1}, 0.9), T(Shape{1, 1, 1}, 1.0)).item() ==
        doctest::Approx(-std::log(0.9)).epsilon(1e-12));
  CHECK(std::abs(bce_loss(T(Shape{1, 1, 1}, 0.9), T(Shape{1, 1, 1}, 1.0)).item() - 0.105361) < 5e-7);
  CHECK_THROWS_AS(bce_loss(T(Shape{1, 2, 2}, 0.5), T(Shape{1, 2, 3})), ShapeError);
}

TEST_CASE("bce_loss with valid = false is an untracked zero") {
  T pred = T(Shape{1, 2, 2}, 0.3).set_requires_grad(true);
  GradTape<double> tape;
  TapeScope<double> scope(tape);
  const T l = bce_loss(pred, T(Shape{1, 2, 2}, 1.0), false);
  CHECK(l.item() == 0.0);
  CHECK(tape.size() == 0);
  CHECK_FALSE(l.requires_grad());
  // The target is never read, so even a malformed one is accepted.
  CHECK(bce_loss(pred, T(), false).item() == 0.0);
}

TEST_CASE("bce_loss is positive for valid steps, including after clamping") {
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    const T p = test::random_tensor<double>({1, 3, 3}, rng, 0.0, 1.0);
    T y(Shape{1, 3, 3});
    for (auto& v : y.mutable_data()) v = uniform01(rng) < 0.5 ? 0 : 1;
    CHECK(bce_loss(p, y).item() > 0.0);
    CHECK(bce_loss(y, y).item() > 0.0);
    CHECK(bce_loss(y, y).item() < 1e-6);
  }
  // Saturated predictions are clamped rather than producing infinities.
  CHECK(std::isfinite(bce_loss(T(Shape{1, 1, 2}, {0.0, 1.0}), T(Shape{1, 1, 2}, {1.0, 0.0})).item()));
}

TEST_CASE("layer gradients match finite differences (eps 1e-3, 1e-4 relative)") {
  Rng rng(9);
  for (int trial = 0; trial < 3; ++trial) {
    T x = test::random_tensor<double>({3, 8, 8}, rng);
    Conv2dParams<double> p{test::random_tensor<double>({4, 3, 3, 3}, rng), test::random_tensor<double>({4}, rng), 1,
                           1};
    auto fwd = [&] { return conv2d(x, p); };
    CHECK(grad_error(fwd, x, rng) < 1e-4);
    CHECK(grad_error(fwd, p.weight, rng) < 1e-4);
    CHECK(grad_error(fwd, p.bias, rng) < 1e-4);

    Conv2dParams<double> s{test::random_tensor<double>({2, 3, 3, 3}, rng), test::random_tensor<double>({2}, rng), 2,
                           0};
    T xs = test::random_tensor<double>({3, 7, 7}, rng);
    CHECK(grad_error([&] { return conv2d(xs, s); }, xs, rng) < 1e-4);
    CHECK(grad_error([&] { return conv2d(xs, s); }, s.weight, rng) < 1e-4);

    T px = distinct({4, 8, 8}, rng);
    CHECK(grad_error([&] { return max_pool2(px); }, px, rng) < 1e-4);

    T u = test::random_tensor<double>({2, 4, 4}, rng);
    Conv2dParams<double> up{test::random_tensor<double>({3, 2, 5, 5}, rng), test::random_tensor<double>({3}, rng), 1,
                            2};
    auto ufwd = [&] { return upsample_conv(u, up); };
    CHECK(grad_error(ufwd, u, rng) < 1e-4);
    CHECK(grad_error(ufwd, up.weight, rng) < 1e-4);
    CHECK(grad_error(ufwd, up.bias, rng) < 1e-4);

    T pred = test::random_tensor<double>({1, 4, 4}, rng, 0.05, 0.95);
    T tgt(Shape{1, 4, 4});
    for (auto& v : tgt.mutable_data()) v = uniform01(rng) < 0.5 ? 0 : 1;
    CHECK(grad_error([&] { return bce_loss(pred, tgt); }, pred, rng) < 1e-4);
  }
}

TEST_CASE("xavier_init") {
  const Shape shape{64, 32, 3, 3};
  const auto a = xavier_init<double>(shape, 42);
  CHECK(test::bit_equal(a, xavier_init<double>(shape, 42)));
  CHECK_FALSE(test::bit_equal(a, xavier_init<double>(shape, 43)));
  CHECK_THROWS(xavier_init<double>({5}, 1));

  const double fan_in = 32 * 9, fan_out = 64 * 9;
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (double v : a.data()) CHECK(std::abs(v) <= bound);

  // 10^5 draws from a rank-2 tensor.
  const auto big = xavier_init<double>({400, 250}, 7);
  const double n = static_cast<double>(big.size());
  double mean = 0, sq = 0;
  for (double v : big.data()) mean += v;
  mean /= n;
  for (double v : big.data()) sq += (v - mean) * (v - mean);
  const double var = sq / (n - 1);
  const double b2 = std::sqrt(6.0 / 650.0);
  const double expected_var = b2 * b2 / 3.0;  // uniform on [-b, b]
  CHECK(expected_var == doctest::Approx(2.0 / 650.0).epsilon(1e-12));
  CHECK(std::abs(mean) < 3 * std::sqrt(expected_var) / std::sqrt(n));
  CHECK(std::abs(var - expected_var) < 0.1 * expected_var);
}

TEST_CASE("adam_step") {
  AdamState<double> st;
  st.options.lr = 0.1;
  NamedTensors<double> params{{"p", T::scalar(0).set_requires_grad(true)}};
  params[0].second.mutable_grad()[0] = 1.0;
  adam_step(params, st);
  // m = 0.1, v = 0.001, bias-corrected m_hat = v_hat = 1.
  const double m_hat = (0.1 * 1.0) / (1 - 0.9), v_hat = (0.001 * 1.0) / (1 - 0.999);
  CHECK(params[0].second.item() == doctest::Approx(-0.1 * m_hat / (std::sqrt(v_hat) + 1e-8)).epsilon(1e-12));
  CHECK(std::abs(params[0].second.item() + 0.1) < 1e-6);
  CHECK(st.step == 1);
  CHECK_FALSE(params[0].second.has_grad());
  CHECK(st.moments.at("p").m.shape() == params[0].second.shape());

  params[0].second.mutable_grad();
  adam_step(params, st);
  CHECK(st.step == 2);

  AdamState<double> fresh;
  NamedTensors<double> still{{"q", T(Shape{3}, 0.25).set_requires_grad(true)}};
  still[0].second.mutable_grad();
  adam_step(still, fresh);
  for (double v : still[0].second.data()) CHECK(v == 0.25);

  NamedTensors<double> missing{{"r", T::scalar(1).set_requires_grad(true)}};
  CHECK_THROWS_AS(adam_step(missing, fresh), ValueError);
}

TEST_CASE("default learning rate is 1e-5") {
  CHECK(AdamOptions{}.lr == 1e-5);
  CHECK(TrainConfig{}.lr == 1e-5);
}

TEST_CASE("float and double conv agree") {
  Rng rng(10);
  const auto xd = test::random_tensor<double>({3, 6, 6}, rng);
  const auto wd = test::random_tensor<double>({2, 3, 3, 3}, rng);
  Tensor<float> xf(xd.shape()), wf(wd.shape());
  for (std::size_t i = 0; i < xd.size(); ++i) xf.mutable_data()[i] = static_cast<float>(xd.at(i));
  for (std::size_t i = 0; i < wd.size(); ++i) wf.mutable_data()[i] = static_cast<float>(wd.at(i));
  const auto yd = conv2d(xd, Conv2dParams<double>{wd, T(Shape{2}), 1, 1});
  const auto yf = conv2d(xf, Conv2dParams<float>{wf, Tensor<float>(Shape{2}), 1, 1});
  for (std::size_t i = 0; i < yd.size(); ++i) CHECK(yf.at(i) == doctest::Approx(yd.at(i)).epsilon(1e-5));
}
