#include "svos/online.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <tuple>

#include "svos/error.hpp"

namespace svos {

void OnlineConfig::validate() const {
  if (iterations < 1) throw ConfigError("online iterations must be at least 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("online lr must be positive");
  affine.validate();
}

OnlineConfig OnlineConfig::from_key_values(KeyValues& kv) {
  OnlineConfig c;
  if (auto v = kv.take_int("iterations")) c.iterations = static_cast<int>(*v);
  if (auto v = kv.take_double("lr")) c.lr = *v;
  if (auto v = kv.take_int("seed")) {
    if (*v < 0) throw ConfigError("seed must be non-negative");
    c.seed = static_cast<std::uint64_t>(*v);
  }
  if (auto v = kv.take_double("rotation_deg")) c.affine.rotation_deg = *v;
  if (auto v = kv.take_range("scale")) std::tie(c.affine.scale_min, c.affine.scale_max) = *v;
  if (auto v = kv.take_double("translate")) c.affine.translate = *v;
  if (auto v = kv.take_double("shear_deg")) c.affine.shear_deg = *v;
  kv.finish();
  c.validate();
  return c;
}

OnlineConfig OnlineConfig::load(const std::filesystem::path& path) {
  auto kv = KeyValues::load(path);
  return from_key_values(kv);
}

std::map<std::string, std::string> OnlineConfig::to_key_values() const {
  auto real = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  return {{"iterations", std::to_string(iterations)},
          {"lr", real(lr)},
          {"seed", std::to_string(seed)},
          {"rotation_deg", real(affine.rotation_deg)},
          {"scale", real(affine.scale_min) + "," + real(affine.scale_max)},
          {"translate", real(affine.translate)},
          {"shear_deg", real(affine.shear_deg)}};
}

namespace {

double head_mean(const std::vector<double>& v, bool from_end) {
  if (v.empty()) return 0.0;
  const std::size_t n = std::min<std::size_t>(10, v.size());
  const auto begin = from_end ? v.end() - static_cast<std::ptrdiff_t>(n) : v.begin();
  return std::accumulate(begin, begin + static_cast<std::ptrdiff_t>(n), 0.0) / static_cast<double>(n);
}

}  // namespace

double OnlineResult::initial_loss() const { return head_mean(losses, false); }
double OnlineResult::final_loss() const { return head_mean(losses, true); }

template <typename Real>
OnlineResult online_finetune(SegmentationModel<Real>& model, const Tensor<Real>& x0, const Tensor<Real>& y0,
                             const OnlineConfig& config) {
  config.validate();
  if (!is_binary(y0)) throw ValueError("first-frame mask must be binary");
  if (std::all_of(y0.data().begin(), y0.data().end(), [](Real v) { return v == Real(0); }))
    throw ValueError("first-frame mask is empty");

  auto& params = model.params();
  params.set_requires_grad(true);
  params.set_requires_grad(ParamGroup::convlstm, false);
  const auto trainable = [&] {
    return params.named({ParamGroup::initializer, ParamGroup::encoder, ParamGroup::decoder});
  };
  // The previous-mask encoder sees the (warped) first mask as its input.
  const Feedback feedback = model.config().encoder_variant == EncoderVariant::rgb_plus_prev_mask
                                ? Feedback::teacher_forcing
                                : Feedback::none;

  AdamState<Real> adam;
  adam.options.lr = config.lr;
  Rng rng(mix_seed(config.seed, 0x0411e));
  OnlineResult result;

  for (int it = 0; it < config.iterations; ++it) {
    auto [xa, ya] = affine_sample(x0, y0, rng, config.affine);
    auto [xb, yb] = affine_sample(x0, y0, rng, config.affine);

    // Snapshot so a non-finite step can be undone.
    std::vector<std::vector<Real>> saved;
    AdamState<Real> saved_adam = adam;
    for (auto& m : saved_adam.moments) m.second = {m.second.m.detach(), m.second.v.detach()};
    for (const auto& [name, t] : trainable()) saved.emplace_back(t.data().begin(), t.data().end());

    GradTape<Real> tape;
    double value;
    {
      TapeScope<Real> scope(tape);
      const std::vector<std::optional<Tensor<Real>>> gt{ya, yb};
      const auto preds = model.unroll({xa, xb}, ya, feedback, gt);
      const auto loss = bce_loss(preds[0], yb, true);
      value = static_cast<double>(loss.item());
      if (std::isfinite(value)) tape.backward(loss);
    }
    auto named = trainable();
    bool finite = std::isfinite(value);
    if (finite) {
      adam_step(named, adam);
      for (const auto& [name, t] : named)
        for (Real v : t.data())
          if (!std::isfinite(static_cast<double>(v))) finite = false;
    }
    if (!finite) {
      for (std::size_t i = 0; i < named.size(); ++i) {
        auto dst = named[i].second.mutable_data();
        std::copy(saved[i].begin(), saved[i].end(), dst.begin());
        named[i].second.clear_grad();
      }
      adam = std::move(saved_adam);
      result.diverged = true;
      break;
    }
    result.losses.push_back(value);
  }
  params.clear_grads();
  params.set_requires_grad(true);
  return result;
}

Checkpoint online_finetune(const Checkpoint& ck, const Tensor<float>& x0, const Tensor<float>& y0,
                           const OnlineConfig& config, OnlineResult* result) {
  auto model = ck.make_model();
  auto r = online_finetune(model, x0, y0, config);
  if (result) *result = std::move(r);
  Checkpoint out;
  out.model = ck.model;
  out.params = model.params().clone();
  out.optimizer = ck.optimizer;
  for (auto& [name, m] : out.optimizer.moments) m = {m.m.detach(), m.v.detach()};
  out.progress = ck.progress;
  out.rng_state = ck.rng_state;
  out.train_config = ck.train_config;
  return out;
}

template OnlineResult online_finetune(SegmentationModel<float>&, const Tensor<float>&, const Tensor<float>&,
                                      const OnlineConfig&);
template OnlineResult online_finetune(SegmentationModel<double>&, const Tensor<double>&, const Tensor<double>&,
                                      const OnlineConfig&);

}  // namespace svos
