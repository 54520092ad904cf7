#pragma once

// Finite-difference checks of every differentiable operation and of a full
// T = 3 unroll, all in double precision.

#include <string>
#include <vector>

namespace svos {

struct GradcheckEntry {
  std::string name;  // "tensor.sigmoid", "layers.conv2d.weight", "model.network.decoder.out.weight", ...
  double max_rel_error = 0.0;
  std::size_t elements = 0;
  std::size_t kink_limited = 0;  // elements whose step had to shrink to avoid a relu / max-pool kink
  std::size_t unresolved = 0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 1e-4;
  double seconds = 0.0;

  // Every error under tolerance and no element left straddling a kink.
  bool passed() const;
  const GradcheckEntry& worst() const;
};

// `preset` picks the model shapes for the end-to-end part.
GradcheckReport run_gradcheck_suite(const std::string& preset = "desk-micro", double tolerance = 1e-4,
                                    double eps = 1e-3);

}  // namespace svos
