#include "svos/evaluate.hpp"

#include <array>

#include "svos/error.hpp"

namespace svos {

std::vector<Tensor<float>> predict_object(const SegmentationModel<float>& model, const std::vector<Image>& frames,
                                          const Mask& first_mask, const EvalOptions& options,
                                          std::uint64_t online_seed, OnlineResult* online) {
  if (frames.size() < 2) throw ValueError("need at least two frames to predict");
  const int h = frames[0].height, w = frames[0].width;
  for (const auto& f : frames)
    if (f.width != w || f.height != h) throw ShapeError("frames of one video differ in size");
  if (first_mask.width != w || first_mask.height != h)
    throw ShapeError("first-frame mask is " + std::to_string(first_mask.width) + "x" +
                     std::to_string(first_mask.height) + " but frames are " + std::to_string(w) + "x" +
                     std::to_string(h));

  const auto& cfg = model.config();
  std::vector<Tensor<float>> inputs;
  inputs.reserve(frames.size());
  for (const auto& f : frames) inputs.push_back(resize_bilinear(image_to_tensor<float>(f), cfg.input_h, cfg.input_w));
  const auto y0 = resize_nearest(mask_to_tensor<float>(first_mask), cfg.input_h, cfg.input_w);

  const SegmentationModel<float>* use = &model;
  std::optional<SegmentationModel<float>> tuned;
  if (options.online) {
    tuned.emplace(model.clone());
    auto oc = options.online_config;
    oc.seed = online_seed;
    auto r = online_finetune(*tuned, inputs[0], y0, oc);
    if (online) *online = std::move(r);
    use = &*tuned;
  }

  NoGradScope<float> no_grad;
  const Feedback fb =
      cfg.encoder_variant == EncoderVariant::rgb_plus_prev_mask ? Feedback::self_prediction : Feedback::none;
  auto preds = use->unroll(inputs, y0, fb);
  for (auto& p : preds) p = resize_bilinear(p, h, w);
  return preds;
}

EvalResult evaluate(const SegmentationModel<float>& model, const std::vector<VideoSequence>& videos,
                    const EvalOptions& options) {
  struct Job {
    std::size_t video, object;
  };
  std::vector<Job> jobs;
  for (std::size_t v = 0; v < videos.size(); ++v) {
    const auto& vid = videos[v];
    for (std::size_t o = 0; o < vid.objects.size(); ++o) {
      const auto& masks = vid.objects[o].masks;
      if (masks.empty() || !masks[0])
        throw ValueError("video '" + vid.id + "' object " + std::to_string(vid.objects[o].id) +
                         " has no frame-0 mask");
      jobs.push_back({v, o});
    }
  }

  std::vector<ObjectMetrics> metrics(jobs.size());
  std::vector<std::vector<Tensor<float>>> probs(jobs.size());
  std::vector<OnlineResult> online(options.online ? jobs.size() : 0);
  parallel_for(jobs.size(), options.threads, [&](std::size_t i) {
    const auto& vid = videos[jobs[i].video];
    const auto& obj = vid.objects[jobs[i].object];
    const auto seed = mix_seed(options.online_config.seed, i);
    auto p = predict_object(model, vid.frames, *obj.masks[0], options, seed, options.online ? &online[i] : nullptr);

    auto& m = metrics[i];
    m.video_id = vid.id;
    m.object_id = obj.id;
    m.length = static_cast<int>(vid.length());
    // Frame 0 is the given mask; it is never scored.
    for (std::size_t t = 1; t < vid.length(); ++t) {
      if (!obj.masks[t]) continue;
      const Mask pred = tensor_to_mask(p[t - 1], 0.5);
      m.frames.push_back(static_cast<int>(t));
      m.j.push_back(region_similarity(pred, *obj.masks[t]));
      m.f.push_back(contour_accuracy(pred, *obj.masks[t]));
    }
    if (options.keep_probabilities) probs[i] = std::move(p);
  });

  EvalResult result;
  result.report = build_report(std::move(metrics));
  result.online = std::move(online);
  if (options.keep_probabilities) {
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      const auto& vid = videos[jobs[i].video];
      if (result.predictions.empty() || result.predictions.back().video_id != vid.id)
        result.predictions.push_back({vid.id, {}});
      result.predictions.back().objects.push_back({vid.objects[jobs[i].object].id, std::move(probs[i])});
    }
  }
  return result;
}

std::vector<int> resolve_overlaps(const std::vector<const Tensor<float>*>& probabilities) {
  if (probabilities.empty()) return {};
  const std::size_t n = probabilities[0]->size();
  for (const auto* p : probabilities)
    if (p->shape() != probabilities[0]->shape()) throw ShapeError("probability maps differ in shape");
  std::vector<int> labels(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    float best = 0.5f;
    for (std::size_t k = 0; k < probabilities.size(); ++k) {
      const float v = probabilities[k]->data()[i];
      if (v > best) {
        best = v;
        labels[i] = static_cast<int>(k) + 1;
      }
    }
  }
  return labels;
}

Image overlay(const Image& frame, const std::vector<int>& labels) {
  if (labels.size() != static_cast<std::size_t>(frame.width) * frame.height)
    throw ShapeError("label map does not match the frame");
  static constexpr std::array<std::array<int, 3>, 6> palette{
      {{230, 25, 75}, {60, 180, 75}, {0, 130, 200}, {255, 225, 25}, {145, 30, 180}, {70, 240, 240}}};
  Image out = frame;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!labels[i]) continue;
    const auto& c = palette[static_cast<std::size_t>(labels[i] - 1) % palette.size()];
    auto* px = out.rgb.data() + i * 3;
    for (int k = 0; k < 3; ++k) px[k] = static_cast<std::uint8_t>((px[k] + c[static_cast<std::size_t>(k)]) / 2);
  }
  return out;
}

}  // namespace svos
