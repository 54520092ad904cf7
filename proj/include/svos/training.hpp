#pragma once

// Offline training: clip sampling over skip-frame annotations, the
// annotated-only -> all-frames schedule, teacher forcing -> curriculum for
// the previous-mask encoder, and the binary checkpoint format.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "svos/config.hpp"
#include "svos/data.hpp"
#include "svos/layers.hpp"
#include "svos/model.hpp"

namespace svos {

enum class TrainStage { annotated_only, all_frames };
std::string_view to_string(TrainStage s);
TrainStage parse_train_stage(std::string_view s);

struct TrainConfig {
  std::filesystem::path data;  // manifest.json
  ModelConfig model = ModelConfig::desk();
  double lr = 1e-5;
  int max_epochs = 80;
  long steps_per_epoch = 0;  // 0: one step per training video
  long max_steps = 0;        // 0: max_epochs * steps_per_epoch
  int t_min = 5;
  int t_max = 11;
  // "Loss is stable": the mean loss over the last plateau_window steps
  // improved by less than plateau_threshold (relative) compared with the same
  // window plateau_span steps earlier.
  int plateau_window = 200;
  int plateau_span = 400;
  double plateau_threshold = 0.01;
  double clip_grad = 0.0;  // global-norm clip, 0 disables
  std::uint64_t seed = 0;
  long checkpoint_interval = 0;  // steps between intermediate checkpoints, 0 disables

  static TrainConfig from_key_values(KeyValues& kv);
  static TrainConfig load(const std::filesystem::path& path);
  std::map<std::string, std::string> to_key_values() const;
  void validate() const;
};

// A video converted to model-resolution tensors.
struct TrainingVideo {
  std::string id;
  int annotation_stride = 1;
  std::vector<Tensor<float>> frames;
  std::vector<std::vector<std::optional<Tensor<float>>>> masks;  // [object][frame]
};

// Resizes frames (bilinear) and masks (nearest) to the model input size.
std::vector<TrainingVideo> prepare_training_set(const std::vector<VideoSequence>& videos, const ModelConfig& model);

template <typename Real>
struct TrainClip {
  std::size_t video = 0;
  std::size_t object = 0;
  std::vector<int> raw_indices;
  std::vector<Tensor<Real>> frames;
  // Target per clip step. Steps without ground truth carry valid = false and
  // an all-zero placeholder mask that the loss never reads.
  std::vector<Tensor<Real>> masks;
  std::vector<bool> valid;

  std::size_t length() const { return frames.size(); }
  std::size_t valid_targets() const;  // valid steps among 1..T-1
};

// Samples a video, an object, a length T uniform in [t_min, t_max] and a
// start frame where the object is annotated. annotated_only clips step by
// the annotation stride; all_frames clips step by one raw frame. Videos too
// short for T are skipped in favour of another draw.
TrainClip<float> sample_training_clip(const std::vector<TrainingVideo>& dataset, Rng& rng, int t_min, int t_max,
                                      TrainStage stage);

// Mean over valid steps 1..T-1 of the per-step BCE; a constant zero if no
// step is valid.
template <typename Real>
Tensor<Real> sequence_loss(const SegmentationModel<Real>& model, const TrainClip<Real>& clip, Feedback feedback);

class PlateauDetector {
 public:
  PlateauDetector(int window, int span, double threshold);
  // Returns true when the loss history has plateaued.
  bool push(double loss);
  void reset() { history_.clear(); }
  // The last window + span losses, enough to resume detection.
  const std::vector<double>& history() const { return history_; }
  void restore(std::vector<double> history) { history_ = std::move(history); }

 private:
  int window_, span_;
  double threshold_;
  std::vector<double> history_;
};

struct TrainProgress {
  long step = 0;
  long epoch = 0;
  TrainStage stage = TrainStage::annotated_only;
  bool curriculum = false;  // previous-mask input comes from predictions
  long stage_switch_step = -1;
  long curriculum_switch_step = -1;
  std::vector<double> plateau_history;  // pending losses of the plateau detector
};

struct Checkpoint {
  ModelConfig model;
  ModelParams<float> params;
  AdamState<float> optimizer;
  TrainProgress progress;
  std::string rng_state;
  std::map<std::string, std::string> train_config;  // informational

  SegmentationModel<float> make_model() const { return SegmentationModel<float>(model, params.clone()); }
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ck);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
// Throws ChecksumError on CRC mismatch, FormatError on bad magic, version or
// truncation, ConfigError if `expected_preset` is given and differs.
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_preset = {});

// Hex CRC32 over names, shapes and values.
std::string tensors_digest(const NamedTensors<float>& tensors);
std::string crc32_hex(std::span<const std::uint8_t> bytes);

struct StepRecord {
  long step = 0;
  TrainStage stage = TrainStage::annotated_only;
  bool curriculum = false;
  double loss = 0.0;
};

class Trainer {
 public:
  Trainer(TrainConfig config, std::vector<TrainingVideo> dataset);
  Trainer(TrainConfig config, std::vector<TrainingVideo> dataset, const Checkpoint& resume);

  // One sampled clip: forward, backward, Adam update. Throws DivergenceError
  // on a non-finite loss.
  StepRecord step();
  long total_steps() const;
  bool finished() const { return progress_.step >= total_steps(); }

  Checkpoint run(const std::function<void(const StepRecord&)>& on_step = {},
                 const std::function<void(const Checkpoint&)>& on_checkpoint = {});
  Checkpoint checkpoint() const;

  const SegmentationModel<float>& model() const { return model_; }
  const TrainProgress& progress() const { return progress_; }
  Feedback feedback() const;

 private:
  void advance_schedule(double loss);

  TrainConfig config_;
  std::vector<TrainingVideo> dataset_;
  SegmentationModel<float> model_;
  AdamState<float> optimizer_;
  TrainProgress progress_;
  Rng rng_;
  PlateauDetector plateau_;
};

Checkpoint train(const TrainConfig& config, std::vector<TrainingVideo> dataset,
                 const std::function<void(const StepRecord&)>& on_step = {});

}  // namespace svos
