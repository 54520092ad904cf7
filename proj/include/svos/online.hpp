#pragma once

// Test-time fine-tuning on affine-warped copies of the first frame. The
// ConvLSTM stays frozen; initializer, encoder and decoder are updated.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "svos/config.hpp"
#include "svos/data.hpp"
#include "svos/model.hpp"
#include "svos/training.hpp"

namespace svos {

struct OnlineConfig {
  int iterations = 200;
  double lr = 1e-5;
  AffineRanges affine;
  std::uint64_t seed = 0;

  void validate() const;
  // Keys: iterations, lr, seed, rotation_deg, scale ("lo,hi"), translate,
  // shear_deg.
  static OnlineConfig from_key_values(KeyValues& kv);
  static OnlineConfig load(const std::filesystem::path& path);
  std::map<std::string, std::string> to_key_values() const;
};

struct OnlineResult {
  std::vector<double> losses;  // one pair loss per iteration
  bool diverged = false;       // stopped early on a non-finite loss

  // Means of the first and last min(10, n) iteration losses.
  double initial_loss() const;
  double final_loss() const;
};

// Fine-tunes `model` in place. x0: 3 x H x W, y0: 1 x H x W binary and
// nonempty, both at the model's input size. On a non-finite loss the
// parameters of the last finite iteration are kept and `diverged` is set.
template <typename Real>
OnlineResult online_finetune(SegmentationModel<Real>& model, const Tensor<Real>& x0, const Tensor<Real>& y0,
                             const OnlineConfig& config);

// Checkpoint form: returns a fine-tuned copy; the input is untouched.
Checkpoint online_finetune(const Checkpoint& ck, const Tensor<float>& x0, const Tensor<float>& y0,
                           const OnlineConfig& config, OnlineResult* result = nullptr);

}  // namespace svos
