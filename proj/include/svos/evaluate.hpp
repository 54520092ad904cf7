#pragma once

// Per-object inference over whole videos and scoring against annotations.

#include <string>
#include <vector>

#include "svos/data.hpp"
#include "svos/metrics.hpp"
#include "svos/model.hpp"
#include "svos/online.hpp"

namespace svos {

struct EvalOptions {
  bool online = false;
  OnlineConfig online_config;
  int threads = 1;
  bool keep_probabilities = false;  // fill EvalResult::predictions
};

struct ObjectPrediction {
  int object_id = 0;
  std::vector<Tensor<float>> probabilities;  // frames 1..T-1, 1 x H x W at native resolution
};

struct VideoPrediction {
  std::string video_id;
  std::vector<ObjectPrediction> objects;
};

struct EvalResult {
  MetricReport report;
  std::vector<VideoPrediction> predictions;
  std::vector<OnlineResult> online;  // one per object when options.online
};

// Resizes frames to the model input, optionally fine-tunes a copy of the
// model on the first frame, unrolls, and resizes the probability maps back
// to the frames' resolution (bilinear).
std::vector<Tensor<float>> predict_object(const SegmentationModel<float>& model, const std::vector<Image>& frames,
                                          const Mask& first_mask, const EvalOptions& options,
                                          std::uint64_t online_seed = 0, OnlineResult* online = nullptr);

EvalResult evaluate(const SegmentationModel<float>& model, const std::vector<VideoSequence>& videos,
                    const EvalOptions& options = {});

// Per-pixel object label (1-based index into `probabilities`, 0 for
// background): the object with the highest probability wins among those
// above 0.5.
std::vector<int> resolve_overlaps(const std::vector<const Tensor<float>*>& probabilities);

// Frame with labelled pixels tinted in a per-object colour.
Image overlay(const Image& frame, const std::vector<int>& labels);

}  // namespace svos
