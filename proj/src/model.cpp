#include "svos/model.hpp"

#include "svos/image.hpp"

namespace svos {

std::string_view to_string(InitVariant v) { return v == InitVariant::network ? "network" : "mask_reshape"; }
std::string_view to_string(EncoderVariant v) {
  return v == EncoderVariant::rgb_only ? "rgb_only" : "rgb_plus_prev_mask";
}
std::string_view to_string(Feedback v) {
  switch (v) {
    case Feedback::none: return "none";
    case Feedback::self_prediction: return "self_prediction";
    case Feedback::teacher_forcing: return "teacher_forcing";
  }
  return "?";
}

InitVariant parse_init_variant(std::string_view s) {
  if (s == "network") return InitVariant::network;
  if (s == "mask_reshape") return InitVariant::mask_reshape;
  throw ConfigError("unknown init_variant '" + std::string(s) + "'");
}

EncoderVariant parse_encoder_variant(std::string_view s) {
  if (s == "rgb_only") return EncoderVariant::rgb_only;
  if (s == "rgb_plus_prev_mask") return EncoderVariant::rgb_plus_prev_mask;
  throw ConfigError("unknown encoder_variant '" + std::string(s) + "'");
}

Feedback parse_feedback(std::string_view s) {
  if (s == "none") return Feedback::none;
  if (s == "self_prediction") return Feedback::self_prediction;
  if (s == "teacher_forcing") return Feedback::teacher_forcing;
  throw ConfigError("unknown feedback '" + std::string(s) + "'");
}

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.preset = "paper";
  c.input_h = 256;
  c.input_w = 448;
  c.encoder_channels = {64, 128, 256, 512, 512};
  c.convs_per_stage = {2, 2, 3, 3, 3};
  c.fc_channels = 4096;
  c.lstm_channels = 512;
  c.decoder_channels = {512, 256, 128, 64, 64};
  return c;
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::desk_micro() {
  ModelConfig c;
  c.preset = "desk-micro";
  c.input_h = 16;
  c.input_w = 28;
  c.encoder_channels = {4, 8};
  c.convs_per_stage = {1, 1};
  c.fc_channels = 8;
  c.lstm_channels = 8;
  c.decoder_channels = {8, 4};
  return c;
}

ModelConfig ModelConfig::from_preset(std::string_view name) {
  if (name == "paper") return paper();
  if (name == "desk") return desk();
  if (name == "desk-micro" || name == "desk_micro") return desk_micro();
  throw ConfigError("unknown preset '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  const int p = stages();
  if (p < 1) throw ConfigError("model needs at least one pooling stage");
  if (static_cast<int>(convs_per_stage.size()) != p)
    throw ConfigError("convs_per_stage must have one entry per encoder stage");
  if (static_cast<int>(decoder_channels.size()) != p)
    throw ConfigError("decoder_channels must have one entry per pooling stage");
  if (input_h <= 0 || input_w <= 0 || input_h % (1 << p) != 0 || input_w % (1 << p) != 0)
    throw ConfigError("input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                      " is not divisible by 2^" + std::to_string(p));
  auto positive = [](const std::vector<int>& v) {
    for (int x : v)
      if (x <= 0) return false;
    return true;
  };
  if (!positive(encoder_channels) || !positive(convs_per_stage) || !positive(decoder_channels) || fc_channels <= 0 ||
      lstm_channels <= 0)
    throw ConfigError("channel counts must be positive");
}

std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::initializer: return "initializer";
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::convlstm: return "convlstm";
    case ParamGroup::decoder: return "decoder";
  }
  return "?";
}

ParamGroup group_of(std::string_view name) {
  const auto head = name.substr(0, name.find('.'));
  for (auto g : kAllParamGroups)
    if (head == to_string(g)) return g;
  throw ValueError("parameter name '" + std::string(name) + "' has no known group prefix");
}

namespace {

void add_conv(std::vector<ParamSpec>& specs, ParamGroup g, const std::string& name, int out, int in, int k) {
  const auto uk = static_cast<std::size_t>(k);
  specs.push_back({g, name + ".weight", Shape{static_cast<std::size_t>(out), static_cast<std::size_t>(in), uk, uk},
                   ParamInit::xavier});
  specs.push_back({g, name + ".bias", Shape{static_cast<std::size_t>(out)}, ParamInit::zeros});
}

// VGG-style stack: stages of 3x3 convs and a 2x2 pool, then a 1x1 conv.
void add_backbone(std::vector<ParamSpec>& specs, ParamGroup g, const ModelConfig& c, int in_channels) {
  const std::string prefix(to_string(g));
  int in = in_channels;
  for (int s = 0; s < c.stages(); ++s) {
    for (int k = 0; k < c.convs_per_stage[static_cast<std::size_t>(s)]; ++k) {
      const int out = c.encoder_channels[static_cast<std::size_t>(s)];
      add_conv(specs, g, prefix + ".stage" + std::to_string(s) + ".conv" + std::to_string(k), out, in, 3);
      in = out;
    }
  }
  add_conv(specs, g, prefix + ".fc", c.fc_channels, in, 1);
}

}  // namespace

std::vector<ParamSpec> parameter_specs(const ModelConfig& c) {
  c.validate();
  std::vector<ParamSpec> specs;
  if (c.init_variant == InitVariant::network) {
    add_backbone(specs, ParamGroup::initializer, c, 4);
    add_conv(specs, ParamGroup::initializer, "initializer.c_head", c.lstm_channels, c.fc_channels, 1);
    add_conv(specs, ParamGroup::initializer, "initializer.h_head", c.lstm_channels, c.fc_channels, 1);
  }
  add_backbone(specs, ParamGroup::encoder, c, c.encoder_input_channels());
  add_conv(specs, ParamGroup::encoder, "encoder.head", c.lstm_channels, c.fc_channels, 1);

  for (const char* gate : {"input_gate", "forget_gate", "output_gate", "candidate"})
    add_conv(specs, ParamGroup::convlstm, std::string("convlstm.") + gate, c.lstm_channels, 2 * c.lstm_channels, 3);
  for (auto& s : specs)
    if (s.name == kForgetBiasName) s.init = ParamInit::ones;

  int in = c.lstm_channels;
  for (std::size_t i = 0; i < c.decoder_channels.size(); ++i) {
    add_conv(specs, ParamGroup::decoder, "decoder.up" + std::to_string(i), c.decoder_channels[i], in, 5);
    in = c.decoder_channels[i];
  }
  add_conv(specs, ParamGroup::decoder, "decoder.out", 1, in, 5);
  return specs;
}

// ModelParams

template <typename Real>
void ModelParams<Real>::add(std::string name, Tensor<Real> tensor) {
  auto& map = groups_[static_cast<std::size_t>(group_of(name))];
  if (map.contains(name)) throw ValueError("duplicate parameter '" + name + "'");
  map.emplace(std::move(name), std::move(tensor));
}

template <typename Real>
bool ModelParams<Real>::contains(const std::string& name) const {
  return groups_[static_cast<std::size_t>(group_of(name))].contains(name);
}

template <typename Real>
const Tensor<Real>& ModelParams<Real>::at(const std::string& name) const {
  const auto& map = groups_[static_cast<std::size_t>(group_of(name))];
  auto it = map.find(name);
  if (it == map.end()) throw ValueError("unknown parameter '" + name + "'");
  return it->second;
}

template <typename Real>
Tensor<Real>& ModelParams<Real>::at(const std::string& name) {
  return const_cast<Tensor<Real>&>(std::as_const(*this).at(name));
}

template <typename Real>
NamedTensors<Real> ModelParams<Real>::named(std::initializer_list<ParamGroup> groups) const {
  NamedTensors<Real> out;
  for (auto g : kAllParamGroups) {
    if (std::find(groups.begin(), groups.end(), g) == groups.end()) continue;
    for (const auto& [name, t] : group(g)) out.emplace_back(name, t);
  }
  return out;
}

template <typename Real>
std::size_t ModelParams<Real>::tensor_count() const {
  std::size_t n = 0;
  for (const auto& m : groups_) n += m.size();
  return n;
}

template <typename Real>
std::size_t ModelParams<Real>::element_count() const {
  std::size_t n = 0;
  for (const auto& m : groups_)
    for (const auto& [_, t] : m) n += t.size();
  return n;
}

template <typename Real>
void ModelParams<Real>::set_requires_grad(ParamGroup g, bool flag) {
  for (auto& [_, t] : groups_[static_cast<std::size_t>(g)]) t.set_requires_grad(flag);
}

template <typename Real>
void ModelParams<Real>::set_requires_grad(bool flag) {
  for (auto g : kAllParamGroups) set_requires_grad(g, flag);
}

template <typename Real>
void ModelParams<Real>::clear_grads() {
  for (auto& m : groups_)
    for (auto& [_, t] : m) t.clear_grad();
}

template <typename Real>
ModelParams<Real> ModelParams<Real>::clone() const {
  ModelParams out;
  for (std::size_t g = 0; g < groups_.size(); ++g)
    for (const auto& [name, t] : groups_[g]) {
      auto copy = t.detach();
      copy.set_requires_grad(t.requires_grad());
      out.groups_[g].emplace(name, std::move(copy));
    }
  return out;
}

template <typename Real>
template <typename To>
ModelParams<To> ModelParams<Real>::cast() const {
  ModelParams<To> out;
  for (const auto& m : groups_)
    for (const auto& [name, t] : m) {
      std::vector<To> values(t.data().begin(), t.data().end());
      Tensor<To> copy(t.shape(), std::move(values));
      copy.set_requires_grad(t.requires_grad());
      out.add(name, std::move(copy));
    }
  return out;
}

// SegmentationModel

template <typename Real>
SegmentationModel<Real>::SegmentationModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  const auto specs = parameter_specs(config_);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    Tensor<Real> t = s.init == ParamInit::xavier ? xavier_init<Real>(s.shape, mix_seed(seed, i))
                                                 : Tensor<Real>(s.shape, s.init == ParamInit::ones ? Real(1) : Real(0));
    t.set_requires_grad(true);
    params_.add(s.name, std::move(t));
  }
}

template <typename Real>
SegmentationModel<Real>::SegmentationModel(ModelConfig config, ModelParams<Real> params)
    : config_(std::move(config)), params_(std::move(params)) {
  const auto specs = parameter_specs(config_);
  if (specs.size() != params_.tensor_count())
    throw ShapeError("parameter set has " + std::to_string(params_.tensor_count()) + " tensors, config needs " +
                     std::to_string(specs.size()));
  for (const auto& s : specs) {
    if (!params_.contains(s.name)) throw ShapeError("missing parameter '" + s.name + "'");
    if (params_.at(s.name).shape() != s.shape)
      throw ShapeError("parameter '" + s.name + "' has shape " + shape_str(params_.at(s.name).shape()) +
                       ", expected " + shape_str(s.shape));
  }
}

template <typename Real>
Conv2dParams<Real> SegmentationModel<Real>::conv(const std::string& prefix, int padding) const {
  return Conv2dParams<Real>{params_.at(prefix + ".weight"), params_.at(prefix + ".bias"), 1, padding};
}

template <typename Real>
Tensor<Real> SegmentationModel<Real>::backbone(const std::string& prefix, Tensor<Real> x) const {
  for (int s = 0; s < config_.stages(); ++s) {
    for (int k = 0; k < config_.convs_per_stage[static_cast<std::size_t>(s)]; ++k)
      x = relu(conv2d(x, conv(prefix + ".stage" + std::to_string(s) + ".conv" + std::to_string(k), 1)));
    x = max_pool2(x);
  }
  return relu(conv2d(x, conv(prefix + ".fc", 0)));
}

namespace {

template <typename Real>
void check_frame(const Tensor<Real>& t, std::size_t channels, const ModelConfig& c, const char* what) {
  const Shape expected{channels, static_cast<std::size_t>(c.input_h), static_cast<std::size_t>(c.input_w)};
  if (t.shape() != expected)
    throw ShapeError(std::string(what) + " has shape " + shape_str(t.shape()) + ", expected " + shape_str(expected));
}

}  // namespace

template <typename Real>
LstmState<Real> SegmentationModel<Real>::initialize(const Tensor<Real>& x0, const Tensor<Real>& y0) const {
  check_frame(x0, 3, config_, "initial frame");
  check_frame(y0, 1, config_, "initial mask");
  if (!is_binary(y0)) throw ValueError("initial mask must be binary");

  if (config_.init_variant == InitVariant::mask_reshape) {
    const auto small = resize_bilinear(y0, config_.feature_h(), config_.feature_w());
    const auto c = static_cast<std::size_t>(config_.lstm_channels);
    Tensor<Real> tiled(Shape{c, small.dim(1), small.dim(2)});
    auto dst = tiled.mutable_data();
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy(small.data().begin(), small.data().end(), dst.begin() + static_cast<std::ptrdiff_t>(ch * small.size()));
    return {tiled, tiled.detach()};
  }
  const auto features = backbone("initializer", concat_channels<Real>({x0, y0}));
  return {relu(conv2d(features, conv("initializer.c_head", 0))), relu(conv2d(features, conv("initializer.h_head", 0)))};
}

template <typename Real>
Tensor<Real> SegmentationModel<Real>::encode(const Tensor<Real>& frame, const Tensor<Real>* prev_mask) const {
  check_frame(frame, 3, config_, "frame");
  Tensor<Real> input = frame;
  if (config_.encoder_variant == EncoderVariant::rgb_plus_prev_mask) {
    if (!prev_mask) throw ValueError("rgb_plus_prev_mask encoder needs the previous mask");
    check_frame(*prev_mask, 1, config_, "previous mask");
    input = concat_channels<Real>({frame, *prev_mask});
  }
  return relu(conv2d(backbone("encoder", input), conv("encoder.head", 0)));
}

template <typename Real>
LstmState<Real> SegmentationModel<Real>::step(const Tensor<Real>& features, const LstmState<Real>& prev) const {
  const Shape expected{static_cast<std::size_t>(config_.lstm_channels), static_cast<std::size_t>(config_.feature_h()),
                       static_cast<std::size_t>(config_.feature_w())};
  if (features.shape() != expected || prev.c.shape() != expected || prev.h.shape() != expected)
    throw ShapeError("convlstm_step: features " + shape_str(features.shape()) + ", c " + shape_str(prev.c.shape()) +
                     ", h " + shape_str(prev.h.shape()) + "; expected " + shape_str(expected));
  const auto stacked = concat_channels<Real>({features, prev.h});
  const auto i = sigmoid(conv2d(stacked, conv("convlstm.input_gate", 1)));
  const auto f = sigmoid(conv2d(stacked, conv("convlstm.forget_gate", 1)));
  const auto o = sigmoid(conv2d(stacked, conv("convlstm.output_gate", 1)));
  const auto g = relu(conv2d(stacked, conv("convlstm.candidate", 1)));
  auto c = add(mul(f, prev.c), mul(i, g));
  auto h = mul(o, relu(c));
  return {std::move(c), std::move(h)};
}

template <typename Real>
Tensor<Real> SegmentationModel<Real>::decode(const Tensor<Real>& hidden) const {
  const Shape expected{static_cast<std::size_t>(config_.lstm_channels), static_cast<std::size_t>(config_.feature_h()),
                       static_cast<std::size_t>(config_.feature_w())};
  if (hidden.shape() != expected)
    throw ShapeError("decoder input " + shape_str(hidden.shape()) + ", expected " + shape_str(expected));
  Tensor<Real> x = hidden;
  for (std::size_t i = 0; i < config_.decoder_channels.size(); ++i)
    x = relu(upsample_conv(x, conv("decoder.up" + std::to_string(i), 2)));
  return sigmoid(conv2d(x, conv("decoder.out", 2)));
}

template <typename Real>
std::vector<Tensor<Real>> SegmentationModel<Real>::unroll(
    const std::vector<Tensor<Real>>& frames, const Tensor<Real>& y0, Feedback feedback,
    const std::vector<std::optional<Tensor<Real>>>& ground_truth) const {
  const std::size_t steps = frames.size();
  if (steps < 2) throw ValueError("unroll needs at least two frames");
  const bool uses_mask = config_.encoder_variant == EncoderVariant::rgb_plus_prev_mask;
  if (uses_mask && feedback == Feedback::none)
    throw ValueError("rgb_plus_prev_mask encoder needs self_prediction or teacher_forcing feedback");
  if (feedback == Feedback::teacher_forcing && ground_truth.size() != steps && ground_truth.size() != steps - 1)
    throw ShapeError("teacher forcing got " + std::to_string(ground_truth.size()) + " masks for " +
                     std::to_string(steps) + " frames");

  auto state = initialize(frames[0], y0);
  Tensor<Real> prev_mask = y0;
  std::vector<Tensor<Real>> predictions;
  predictions.reserve(steps - 1);
  for (std::size_t t = 1; t < steps; ++t) {
    const auto features = encode(frames[t], uses_mask ? &prev_mask : nullptr);
    state = step(features, state);
    predictions.push_back(decode(state.h));
    if (!uses_mask || t + 1 == steps) continue;
    // A length T - 1 list starts at frame 1.
    const std::size_t gt_index = ground_truth.size() == steps ? t : t - 1;
    if (feedback == Feedback::teacher_forcing && ground_truth[gt_index].has_value()) {
      prev_mask = *ground_truth[gt_index];
    } else {
      // Thresholded, detached prediction.
      Tensor<Real> m(predictions.back().shape());
      auto src = predictions.back().data();
      auto dst = m.mutable_data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = src[k] > Real(0.5) ? Real(1) : Real(0);
      prev_mask = std::move(m);
    }
  }
  return predictions;
}

template class ModelParams<float>;
template class ModelParams<double>;
template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;
template ModelParams<double> ModelParams<double>::cast<double>() const;
template class SegmentationModel<float>;
template class SegmentationModel<double>;

}  // namespace svos
