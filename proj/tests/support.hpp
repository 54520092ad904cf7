#pragma once

#include <doctest.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <string>

#include "svos/image.hpp"
#include "svos/random.hpp"
#include "svos/tensor.hpp"

namespace test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "svos-test-XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

template <typename Real>
svos::Tensor<Real> random_tensor(svos::Shape shape, svos::Rng& rng, double lo = -1.0, double hi = 1.0,
                                 bool grad = false) {
  svos::Tensor<Real> t(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<Real>(svos::uniform(rng, lo, hi));
  t.set_requires_grad(grad);
  return t;
}

inline svos::Mask random_mask(int w, int h, svos::Rng& rng, double density = 0.5) {
  svos::Mask m(w, h);
  for (auto& v : m.values) v = svos::uniform01(rng) < density ? 1 : 0;
  return m;
}

template <typename Real>
bool bit_equal(const svos::Tensor<Real>& a, const svos::Tensor<Real>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::memcmp(&a.data()[i], &b.data()[i], sizeof(Real)) != 0) return false;
  return true;
}

}  // namespace test
