#pragma once

// Region similarity J (IoU), contour accuracy F (boundary F-measure with a
// pixel tolerance), mean / recall / decay aggregates and J-over-time curves.

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "svos/image.hpp"

namespace svos {

// 1 when both masks are empty, 0 when exactly one is.
double region_similarity(const Mask& pred, const Mask& gt);

// Foreground pixels with at least one 4-neighbour outside the mask; the
// image border counts as outside.
Mask boundary(const Mask& mask);

// ceil(0.008 * image diagonal).
int default_contour_tolerance(int width, int height);

// Boundary pixels match when an opposite boundary pixel lies within
// Euclidean distance `tolerance`.
double contour_accuracy(const Mask& pred, const Mask& gt, std::optional<int> tolerance = std::nullopt);

struct Aggregate {
  double mean = 0.0;
  double recall = 0.0;  // fraction of values > 0.5
  double decay = 0.0;   // mean of first ceil(N/4) values minus mean of last ceil(N/4)
};

Aggregate aggregate(std::span<const double> per_frame);

inline constexpr int kCurveBuckets = 20;

struct ObjectMetrics {
  std::string video_id;
  int object_id = 0;
  int length = 0;           // raw frames in the video
  std::vector<int> frames;  // evaluated frame indices (annotated, > 0)
  std::vector<double> j;
  std::vector<double> f;
  Aggregate j_agg;
  Aggregate f_agg;
};

struct CurveBucket {
  double j_mean = 0.0;
  double f_mean = 0.0;
  int objects = 0;  // objects contributing to the bucket; 0 means empty
};

struct MetricReport {
  std::vector<ObjectMetrics> objects;
  Aggregate j;  // per-object aggregates averaged over objects
  Aggregate f;
  std::array<CurveBucket, kCurveBuckets> curve{};
};

// Bucket of frame t in a video of `length` frames; positions run over
// frames 1..length-1.
int curve_bucket(int t, int length);

// Fills the aggregates of each object and the report-level fields.
MetricReport build_report(std::vector<ObjectMetrics> objects);

std::string report_json(const MetricReport& report);
std::string per_frame_csv(const MetricReport& report);
std::string curve_csv(const MetricReport& report);

}  // namespace svos
