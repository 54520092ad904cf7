#pragma once

// Synthetic moving-object videos: textured background, shapes that drift in
// position and colour, optional occluders and camera shake. Every frame gets
// an exact visibility mask per object.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "svos/config.hpp"
#include "svos/data.hpp"

namespace svos {

enum class ShapeKind { disc, square, triangle };

struct SynthConfig {
  int num_objects = 1;
  std::vector<ShapeKind> shapes{ShapeKind::disc, ShapeKind::square, ShapeKind::triangle};
  double velocity_x_min = -2.5, velocity_x_max = 2.5;  // px / frame
  double velocity_y_min = -1.5, velocity_y_max = 1.5;
  double radius_min = 10.0, radius_max = 16.0;
  double color_drift = 0.0;  // max per-channel colour change per frame, 0..255 scale
  double camera_jitter = 0.0;  // max camera offset per frame, px
  int occluders = 0;
  int frames = 12;
  int height = 64;
  int width = 112;
  int annotation_stride = 1;
  double fps = 30.0;
  std::uint64_t seed = 0;

  void validate() const;
  // Reads and consumes the synth keys; unknown keys are left for the caller.
  static SynthConfig from_key_values(KeyValues& kv);
  std::map<std::string, std::string> to_key_values() const;
};

VideoSequence synth_generate(const SynthConfig& config, const std::string& id = "synth");

// `count` sequences with seeds base_seed + i and ids "<prefix>_<i>".
std::vector<VideoSequence> synth_dataset(const SynthConfig& config, int count, const std::string& prefix = "synth");

}  // namespace svos
