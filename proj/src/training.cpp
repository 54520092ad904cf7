#include "svos/training.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "svos/error.hpp"

namespace svos {

std::string_view to_string(TrainStage s) { return s == TrainStage::annotated_only ? "annotated_only" : "all_frames"; }

TrainStage parse_train_stage(std::string_view s) {
  if (s == "annotated_only") return TrainStage::annotated_only;
  if (s == "all_frames") return TrainStage::all_frames;
  throw ConfigError("unknown training stage '" + std::string(s) + "'");
}

// TrainConfig

TrainConfig TrainConfig::from_key_values(KeyValues& kv) {
  TrainConfig c;
  if (auto v = kv.take_string("data")) c.data = *v;
  if (auto v = kv.take_string("preset")) c.model = ModelConfig::from_preset(*v);
  if (auto v = kv.take_string("init_variant")) c.model.init_variant = parse_init_variant(*v);
  if (auto v = kv.take_string("encoder_variant")) c.model.encoder_variant = parse_encoder_variant(*v);
  if (auto v = kv.take_int("input_h")) c.model.input_h = static_cast<int>(*v);
  if (auto v = kv.take_int("input_w")) c.model.input_w = static_cast<int>(*v);
  if (auto v = kv.take_int_list("encoder_channels")) c.model.encoder_channels = *v;
  if (auto v = kv.take_int_list("convs_per_stage")) c.model.convs_per_stage = *v;
  if (auto v = kv.take_int("fc_channels")) c.model.fc_channels = static_cast<int>(*v);
  if (auto v = kv.take_int("lstm_channels")) c.model.lstm_channels = static_cast<int>(*v);
  if (auto v = kv.take_int_list("decoder_channels")) c.model.decoder_channels = *v;
  if (auto v = kv.take_double("lr")) c.lr = *v;
  if (auto v = kv.take_int("max_epochs")) c.max_epochs = static_cast<int>(*v);
  if (auto v = kv.take_int("steps_per_epoch")) c.steps_per_epoch = static_cast<long>(*v);
  if (auto v = kv.take_int("max_steps")) c.max_steps = static_cast<long>(*v);
  if (auto v = kv.take_int("t_min")) c.t_min = static_cast<int>(*v);
  if (auto v = kv.take_int("t_max")) c.t_max = static_cast<int>(*v);
  if (auto v = kv.take_int("plateau_window")) c.plateau_window = static_cast<int>(*v);
  if (auto v = kv.take_int("plateau_span")) c.plateau_span = static_cast<int>(*v);
  if (auto v = kv.take_double("plateau_threshold")) c.plateau_threshold = *v;
  if (auto v = kv.take_double("clip_grad")) c.clip_grad = *v;
  if (auto v = kv.take_int("seed")) {
    if (*v < 0) throw ConfigError("seed must be non-negative");
    c.seed = static_cast<std::uint64_t>(*v);
  }
  if (auto v = kv.take_int("checkpoint_interval")) c.checkpoint_interval = static_cast<long>(*v);
  kv.finish();
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  auto kv = KeyValues::load(path);
  auto c = from_key_values(kv);
  if (!c.data.empty() && c.data.is_relative()) c.data = path.parent_path() / c.data;
  return c;
}

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::map<std::string, std::string> TrainConfig::to_key_values() const {
  return {
      {"data", data.string()},
      {"preset", model.preset},
      {"init_variant", std::string(to_string(model.init_variant))},
      {"encoder_variant", std::string(to_string(model.encoder_variant))},
      {"input_h", std::to_string(model.input_h)},
      {"input_w", std::to_string(model.input_w)},
      {"encoder_channels", join_ints(model.encoder_channels)},
      {"convs_per_stage", join_ints(model.convs_per_stage)},
      {"fc_channels", std::to_string(model.fc_channels)},
      {"lstm_channels", std::to_string(model.lstm_channels)},
      {"decoder_channels", join_ints(model.decoder_channels)},
      {"lr", format_real(lr)},
      {"max_epochs", std::to_string(max_epochs)},
      {"steps_per_epoch", std::to_string(steps_per_epoch)},
      {"max_steps", std::to_string(max_steps)},
      {"t_min", std::to_string(t_min)},
      {"t_max", std::to_string(t_max)},
      {"plateau_window", std::to_string(plateau_window)},
      {"plateau_span", std::to_string(plateau_span)},
      {"plateau_threshold", format_real(plateau_threshold)},
      {"clip_grad", format_real(clip_grad)},
      {"seed", std::to_string(seed)},
      {"checkpoint_interval", std::to_string(checkpoint_interval)},
  };
}

void TrainConfig::validate() const {
  model.validate();
  if (t_min < 2) throw ConfigError("t_min must be at least 2");
  if (t_max < t_min) throw ConfigError("t_max must be >= t_min");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
  if (steps_per_epoch < 0 || max_steps < 0 || checkpoint_interval < 0)
    throw ConfigError("step counts must be non-negative");
  if (plateau_window < 1 || plateau_span < 1) throw ConfigError("plateau window and span must be positive");
  if (!(plateau_threshold > 0.0)) throw ConfigError("plateau_threshold must be positive");
  if (!(clip_grad >= 0.0)) throw ConfigError("clip_grad must be non-negative");
}

// Data preparation and sampling

std::vector<TrainingVideo> prepare_training_set(const std::vector<VideoSequence>& videos, const ModelConfig& model) {
  std::vector<TrainingVideo> out;
  out.reserve(videos.size());
  for (const auto& v : videos) {
    v.validate();
    TrainingVideo tv;
    tv.id = v.id;
    tv.annotation_stride = v.annotation_stride;
    for (const auto& f : v.frames)
      tv.frames.push_back(resize_bilinear(image_to_tensor<float>(f), model.input_h, model.input_w));
    for (const auto& obj : v.objects) {
      auto& masks = tv.masks.emplace_back();
      for (const auto& m : obj.masks) {
        if (m)
          masks.emplace_back(resize_nearest(mask_to_tensor<float>(*m), model.input_h, model.input_w));
        else
          masks.emplace_back(std::nullopt);
      }
    }
    out.push_back(std::move(tv));
  }
  return out;
}

template <typename Real>
std::size_t TrainClip<Real>::valid_targets() const {
  std::size_t n = 0;
  for (std::size_t t = 1; t < valid.size(); ++t) n += valid[t] ? 1 : 0;
  return n;
}

TrainClip<float> sample_training_clip(const std::vector<TrainingVideo>& dataset, Rng& rng, int t_min, int t_max,
                                      TrainStage stage) {
  if (dataset.empty()) throw ValueError("training set is empty");
  if (t_min < 2 || t_max < t_min) throw ValueError("invalid clip length range");
  const int T = static_cast<int>(uniform_int(rng, t_min, t_max));

  auto step_of = [&](const TrainingVideo& v) { return stage == TrainStage::annotated_only ? v.annotation_stride : 1; };
  // Video and object pairs that can host a clip of length T at all.
  bool any = false;
  for (const auto& v : dataset) {
    const auto span = static_cast<std::size_t>((T - 1) * step_of(v));
    for (const auto& masks : v.masks)
      for (std::size_t k = 0; k + span < v.frames.size() && !any; ++k) any = masks[k].has_value();
  }
  if (!any) throw ValueError("no training video is long enough for T = " + std::to_string(T));

  for (;;) {
    const auto vi = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(dataset.size()) - 1));
    const auto& v = dataset[vi];
    if (v.masks.empty()) continue;
    const auto oi = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(v.masks.size()) - 1));
    const int step = step_of(v);
    const auto span = static_cast<std::size_t>((T - 1) * step);
    std::vector<std::size_t> starts;
    for (std::size_t k = 0; k + span < v.frames.size(); ++k)
      if (v.masks[oi][k]) starts.push_back(k);
    if (starts.empty()) continue;
    const auto k = starts[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(starts.size()) - 1))];

    TrainClip<float> clip;
    clip.video = vi;
    clip.object = oi;
    for (int t = 0; t < T; ++t) {
      const auto idx = k + static_cast<std::size_t>(t * step);
      clip.raw_indices.push_back(static_cast<int>(idx));
      clip.frames.push_back(v.frames[idx]);
      const auto& m = v.masks[oi][idx];
      clip.valid.push_back(m.has_value());
      clip.masks.push_back(m ? *m : Tensor<float>(v.frames[idx].shape().size() == 3
                                                      ? Shape{1, v.frames[idx].dim(1), v.frames[idx].dim(2)}
                                                      : Shape{1}));
    }
    return clip;
  }
}

template <typename Real>
Tensor<Real> sequence_loss(const SegmentationModel<Real>& model, const TrainClip<Real>& clip, Feedback feedback) {
  const std::size_t T = clip.length();
  if (T < 2 || clip.masks.size() != T || clip.valid.size() != T)
    throw ShapeError("clip needs matching frames, masks and valid flags (T >= 2)");
  if (!clip.valid[0]) throw ValueError("clip's first frame has no mask");

  std::vector<std::optional<Tensor<Real>>> ground_truth;
  if (feedback == Feedback::teacher_forcing) {
    ground_truth.resize(T);
    for (std::size_t t = 0; t < T; ++t)
      if (clip.valid[t]) ground_truth[t] = clip.masks[t];
  }
  const auto predictions = model.unroll(clip.frames, clip.masks[0], feedback, ground_truth);

  Tensor<Real> total;
  std::size_t count = 0;
  for (std::size_t t = 1; t < T; ++t) {
    if (!clip.valid[t]) continue;
    auto l = bce_loss(predictions[t - 1], clip.masks[t], true);
    total = total.defined() ? add(total, l) : l;
    ++count;
  }
  if (count == 0) return Tensor<Real>::scalar(Real(0));
  return count == 1 ? total : scale(total, Real(1) / static_cast<Real>(count));
}

// Plateau detection

PlateauDetector::PlateauDetector(int window, int span, double threshold)
    : window_(window), span_(span), threshold_(threshold) {
  if (window < 1 || span < 1 || !(threshold > 0.0)) throw ValueError("invalid plateau parameters");
}

bool PlateauDetector::push(double loss) {
  history_.push_back(loss);
  const auto w = static_cast<std::size_t>(window_), s = static_cast<std::size_t>(span_);
  if (history_.size() > w + s) history_.erase(history_.begin());
  if (history_.size() < w + s) return false;
  const auto end = history_.end();
  const double now = std::accumulate(end - static_cast<std::ptrdiff_t>(w), end, 0.0) / static_cast<double>(w);
  const auto then_end = end - static_cast<std::ptrdiff_t>(s);
  const double then = std::accumulate(then_end - static_cast<std::ptrdiff_t>(w), then_end, 0.0) / static_cast<double>(w);
  if (then <= 0.0) return true;
  return (then - now) / then < threshold_;
}

// Trainer

Trainer::Trainer(TrainConfig config, std::vector<TrainingVideo> dataset)
    : config_(std::move(config)),
      dataset_(std::move(dataset)),
      model_(config_.model, config_.seed),
      rng_(mix_seed(config_.seed, 0x5a4d)),
      plateau_(config_.plateau_window, config_.plateau_span, config_.plateau_threshold) {
  config_.validate();
  if (dataset_.empty()) throw ValueError("training set is empty");
  optimizer_.options.lr = config_.lr;
}

Trainer::Trainer(TrainConfig config, std::vector<TrainingVideo> dataset, const Checkpoint& resume)
    : Trainer(std::move(config), std::move(dataset)) {
  if (!(resume.model == config_.model)) throw ConfigError("checkpoint model does not match the training config");
  model_ = resume.make_model();
  model_.params().set_requires_grad(true);
  optimizer_ = resume.optimizer;
  optimizer_.options.lr = config_.lr;
  progress_ = resume.progress;
  plateau_.restore(progress_.plateau_history);
  restore_rng_state(rng_, resume.rng_state);
}

long Trainer::total_steps() const {
  const long per_epoch = config_.steps_per_epoch > 0 ? config_.steps_per_epoch : static_cast<long>(dataset_.size());
  return config_.max_steps > 0 ? config_.max_steps : per_epoch * config_.max_epochs;
}

Feedback Trainer::feedback() const {
  if (config_.model.encoder_variant == EncoderVariant::rgb_only) return Feedback::none;
  return progress_.curriculum ? Feedback::self_prediction : Feedback::teacher_forcing;
}

StepRecord Trainer::step() {
  TrainClip<float> clip;
  // all_frames clips can land entirely between annotations; draw again.
  for (int attempt = 0;; ++attempt) {
    clip = sample_training_clip(dataset_, rng_, config_.t_min, config_.t_max, progress_.stage);
    if (clip.valid_targets() > 0) break;
    if (attempt == 1000) throw ValueError("could not sample a clip with any annotated target");
  }

  GradTape<float> tape;
  double loss_value = 0.0;
  {
    TapeScope<float> scope(tape);
    auto loss = sequence_loss(model_, clip, feedback());
    loss_value = loss.item();
    if (!std::isfinite(loss_value))
      throw DivergenceError("loss became non-finite at step " + std::to_string(progress_.step));
    tape.backward(loss);
  }

  auto named = model_.params().named();
  if (config_.clip_grad > 0.0) {
    double sq = 0.0;
    for (auto& [name, t] : named)
      if (t.has_grad())
        for (float g : t.grad()) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_grad) {
      const auto f = static_cast<float>(config_.clip_grad / norm);
      for (auto& [name, t] : named)
        if (t.has_grad())
          for (float& g : t.mutable_grad()) g *= f;
    }
  }
  adam_step(named, optimizer_);

  StepRecord rec{progress_.step, progress_.stage, progress_.curriculum, loss_value};
  ++progress_.step;
  const long per_epoch = config_.steps_per_epoch > 0 ? config_.steps_per_epoch : static_cast<long>(dataset_.size());
  progress_.epoch = progress_.step / per_epoch;
  advance_schedule(loss_value);
  return rec;
}

void Trainer::advance_schedule(double loss) {
  const bool mask_variant = config_.model.encoder_variant == EncoderVariant::rgb_plus_prev_mask;
  const bool pending = progress_.stage == TrainStage::annotated_only || (mask_variant && !progress_.curriculum);
  if (!pending || !plateau_.push(loss)) return;
  plateau_.reset();
  if (progress_.stage == TrainStage::annotated_only) {
    progress_.stage = TrainStage::all_frames;
    progress_.stage_switch_step = progress_.step;
  } else {
    progress_.curriculum = true;
    progress_.curriculum_switch_step = progress_.step;
  }
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ck;
  ck.model = config_.model;
  ck.params = model_.params().clone();
  ck.optimizer = optimizer_;
  for (auto& [name, m] : ck.optimizer.moments) m = {m.m.detach(), m.v.detach()};
  ck.progress = progress_;
  ck.progress.plateau_history = plateau_.history();
  ck.rng_state = rng_state(rng_);
  ck.train_config = config_.to_key_values();
  return ck;
}

Checkpoint Trainer::run(const std::function<void(const StepRecord&)>& on_step,
                        const std::function<void(const Checkpoint&)>& on_checkpoint) {
  while (!finished()) {
    const auto rec = step();
    if (on_step) on_step(rec);
    if (on_checkpoint && config_.checkpoint_interval > 0 && progress_.step % config_.checkpoint_interval == 0 &&
        !finished())
      on_checkpoint(checkpoint());
  }
  return checkpoint();
}

Checkpoint train(const TrainConfig& config, std::vector<TrainingVideo> dataset,
                 const std::function<void(const StepRecord&)>& on_step) {
  Trainer trainer(config, std::move(dataset));
  return trainer.run(on_step);
}

template struct TrainClip<float>;
template struct TrainClip<double>;
template Tensor<float> sequence_loss(const SegmentationModel<float>&, const TrainClip<float>&, Feedback);
template Tensor<double> sequence_loss(const SegmentationModel<double>&, const TrainClip<double>&, Feedback);

}  // namespace svos
