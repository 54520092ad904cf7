#pragma once

// Sequence-to-sequence segmentation network: an Initializer turns the first
// frame and its mask into the initial ConvLSTM state, an Encoder turns each
// later frame into features, the ConvLSTM updates its state, and a Decoder
// maps the hidden state to a full-resolution foreground probability map.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "svos/layers.hpp"
#include "svos/tensor.hpp"

namespace svos {

enum class InitVariant { network, mask_reshape };
enum class EncoderVariant { rgb_only, rgb_plus_prev_mask };
// How the previous-mask input of the rgb_plus_prev_mask encoder is fed.
enum class Feedback { none, self_prediction, teacher_forcing };

std::string_view to_string(InitVariant v);
std::string_view to_string(EncoderVariant v);
std::string_view to_string(Feedback v);
InitVariant parse_init_variant(std::string_view s);
EncoderVariant parse_encoder_variant(std::string_view s);
Feedback parse_feedback(std::string_view s);

struct ModelConfig {
  std::string preset = "desk";
  int input_h = 64;
  int input_w = 112;
  std::vector<int> encoder_channels{16, 32, 64, 64};  // one entry per pooling stage
  std::vector<int> convs_per_stage{1, 1, 1, 1};       // 3x3 conv + ReLU layers before each pool
  int fc_channels = 64;                                // 1x1 conv standing in for the first FC layer
  int lstm_channels = 64;
  std::vector<int> decoder_channels{64, 32, 16, 16};  // one upsampling layer each
  InitVariant init_variant = InitVariant::network;
  EncoderVariant encoder_variant = EncoderVariant::rgb_only;

  // VGG-16 backbone at 256 x 448, 512-channel ConvLSTM.
  static ModelConfig paper();
  // 64 x 112 input, four pooling stages, trainable on one CPU core.
  static ModelConfig desk();
  // 16 x 28 input used by the gradient checks.
  static ModelConfig desk_micro();
  static ModelConfig from_preset(std::string_view name);

  int stages() const { return static_cast<int>(encoder_channels.size()); }
  int feature_h() const { return input_h >> stages(); }
  int feature_w() const { return input_w >> stages(); }
  int encoder_input_channels() const { return encoder_variant == EncoderVariant::rgb_plus_prev_mask ? 4 : 3; }

  // Throws ConfigError when the invariants do not hold.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class ParamGroup { initializer = 0, encoder = 1, convlstm = 2, decoder = 3 };
inline constexpr std::array<ParamGroup, 4> kAllParamGroups{ParamGroup::initializer, ParamGroup::encoder,
                                                           ParamGroup::convlstm, ParamGroup::decoder};
std::string_view to_string(ParamGroup g);
// Group encoded in a parameter name's first component ("encoder.fc.weight").
ParamGroup group_of(std::string_view name);

enum class ParamInit { xavier, zeros, ones };

struct ParamSpec {
  ParamGroup group;
  std::string name;
  Shape shape;
  ParamInit init;
};

// Every parameter the configuration needs, in construction order.
std::vector<ParamSpec> parameter_specs(const ModelConfig& config);

template <typename Real>
class ModelParams {
 public:
  using Map = std::map<std::string, Tensor<Real>>;

  void add(std::string name, Tensor<Real> tensor);
  bool contains(const std::string& name) const;
  const Tensor<Real>& at(const std::string& name) const;
  Tensor<Real>& at(const std::string& name);
  const Map& group(ParamGroup g) const { return groups_[static_cast<std::size_t>(g)]; }

  // Handles (not copies) of the tensors in the requested groups, ordered by
  // group then name.
  NamedTensors<Real> named(std::initializer_list<ParamGroup> groups = {ParamGroup::initializer, ParamGroup::encoder,
                                                                        ParamGroup::convlstm, ParamGroup::decoder}) const;
  std::size_t tensor_count() const;
  std::size_t element_count() const;
  void set_requires_grad(ParamGroup g, bool flag);
  void set_requires_grad(bool flag);
  void clear_grads();
  ModelParams clone() const;

  template <typename To>
  ModelParams<To> cast() const;

 private:
  std::array<Map, 4> groups_;
};

template <typename Real>
struct LstmState {
  Tensor<Real> c;
  Tensor<Real> h;
};

template <typename Real>
class SegmentationModel {
 public:
  // Fresh model: Xavier weights, zero biases, forget-gate bias one.
  SegmentationModel(ModelConfig config, std::uint64_t seed);
  // Adopts `params`, which must match parameter_specs(config) exactly.
  SegmentationModel(ModelConfig config, ModelParams<Real> params);

  const ModelConfig& config() const { return config_; }
  const ModelParams<Real>& params() const { return params_; }
  ModelParams<Real>& params() { return params_; }
  SegmentationModel clone() const { return SegmentationModel(config_, params_.clone()); }

  // x0: 3 x H x W frame, y0: 1 x H x W binary mask.
  LstmState<Real> initialize(const Tensor<Real>& x0, const Tensor<Real>& y0) const;
  // Feature map lstm_channels x h' x w'. prev_mask is required by the
  // rgb_plus_prev_mask variant and ignored otherwise.
  Tensor<Real> encode(const Tensor<Real>& frame, const Tensor<Real>* prev_mask = nullptr) const;
  LstmState<Real> step(const Tensor<Real>& features, const LstmState<Real>& prev) const;
  // 1 x H x W probabilities.
  Tensor<Real> decode(const Tensor<Real>& hidden) const;

  // Predictions for frames 1..T-1. For teacher forcing, `ground_truth[t]` is
  // the mask of frame t (length T - 1 or T); missing entries fall back to the
  // model's own thresholded prediction.
  std::vector<Tensor<Real>> unroll(const std::vector<Tensor<Real>>& frames, const Tensor<Real>& y0,
                                   Feedback feedback = Feedback::none,
                                   const std::vector<std::optional<Tensor<Real>>>& ground_truth = {}) const;

 private:
  Tensor<Real> backbone(const std::string& prefix, Tensor<Real> x) const;
  Conv2dParams<Real> conv(const std::string& prefix, int padding) const;

  ModelConfig config_;
  ModelParams<Real> params_;
};

// Forget-gate bias of the ConvLSTM.
inline constexpr const char* kForgetBiasName = "convlstm.forget_gate.bias";

}  // namespace svos
