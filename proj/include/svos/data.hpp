#pragma once

// Video sequences with skip-frame object annotations, the JSON manifest that
// describes them on disk, and the affine augmentation used by online
// learning.

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "svos/image.hpp"
#include "svos/random.hpp"

namespace svos {

struct ObjectTrack {
  int id = 1;
  std::vector<std::optional<Mask>> masks;  // one slot per frame
};

struct VideoSequence {
  std::string id;
  double fps = 30.0;
  int annotation_stride = 1;  // raw-frame distance between annotated frames
  std::vector<Image> frames;
  std::vector<ObjectTrack> objects;

  int width() const { return frames.empty() ? 0 : frames.front().width; }
  int height() const { return frames.empty() ? 0 : frames.front().height; }
  std::size_t length() const { return frames.size(); }

  // Throws FormatError if a mask has the wrong size, an object lacks a
  // frame-0 mask, or a mask sits off the annotation stride.
  void validate() const;
};

struct MaskRef {
  int frame_index = 0;
  std::filesystem::path path;
};

struct ObjectDescriptor {
  int id = 1;
  std::vector<MaskRef> masks;
};

// A manifest entry whose pixels have not been decoded yet.
struct VideoDescriptor {
  std::string id;
  double fps = 30.0;
  int annotation_stride = 1;
  int width = 0;
  int height = 0;
  std::vector<std::filesystem::path> frames;
  std::vector<ObjectDescriptor> objects;

  // Per-frame presence flags for one object.
  std::vector<bool> mask_present(std::size_t object) const;
  // Frame indices that carry a mask for any object, ascending.
  std::vector<int> annotated_indices() const;
};

// Parses and validates manifest.json (files exist, headers agree on
// dimensions, stride rule, frame-0 masks). Paths resolve relative to the
// manifest's directory.
std::vector<VideoDescriptor> load_manifest(const std::filesystem::path& path);
VideoSequence load_video(const VideoDescriptor& descriptor);
// Decodes every video; uses up to `threads` workers.
std::vector<VideoSequence> load_dataset(const std::filesystem::path& manifest, int threads = 1);

// Writes frames as P6, masks as P5 under `root/<video id>/` and returns the
// manifest entry with paths relative to `root`.
VideoDescriptor write_video(const std::filesystem::path& root, const VideoSequence& video);
void write_manifest(const std::filesystem::path& path, const std::vector<VideoDescriptor>& videos);

struct AffineParams {
  double rotation_deg = 0.0;
  double scale = 1.0;
  double translate_x = 0.0;  // fraction of width
  double translate_y = 0.0;  // fraction of height
  double shear_deg = 0.0;

  bool is_identity() const {
    return rotation_deg == 0.0 && scale == 1.0 && translate_x == 0.0 && translate_y == 0.0 && shear_deg == 0.0;
  }
};

struct AffineRanges {
  double rotation_deg = 10.0;  // symmetric: [-r, r]
  double scale_min = 0.9;
  double scale_max = 1.1;
  double translate = 0.1;  // symmetric fraction of extent
  double shear_deg = 5.0;  // symmetric

  static AffineRanges identity() { return {0.0, 1.0, 1.0, 0.0, 0.0}; }
  void validate() const;
};

AffineParams sample_affine(Rng& rng, const AffineRanges& ranges);

// Warps a C x H x W tensor about its centre. Source coordinates outside the
// image are clamped to the border (edge replication).
template <typename Real>
Tensor<Real> warp_affine(const Tensor<Real>& image, const AffineParams& params, bool nearest);

// One draw applied to both the frame (bilinear) and the mask (nearest).
// Draws whose warped mask is empty are retried up to 10 times before
// ValueError.
template <typename Real>
std::pair<Tensor<Real>, Tensor<Real>> affine_sample(const Tensor<Real>& frame, const Tensor<Real>& mask, Rng& rng,
                                                    const AffineRanges& ranges = {});

// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);
// --threads fallback: SVOS_THREADS, else 1.
int default_thread_count();

}  // namespace svos
