#pragma once

// Dense row-major tensors with a tape-based reverse-mode differentiation
// engine. Every differentiable operation checks the calling thread's active
// GradTape; when one is installed and at least one input requires a gradient,
// the operation records a backward closure on it.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "svos/error.hpp"

namespace svos {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename Real>
class GradTape;

namespace detail {

template <typename Real>
struct TensorStorage {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::uint64_t producer = 0;  // id of the tape that recorded this tensor, 0 for leaves

  std::vector<Real>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), Real(0));
    return grad;
  }
};

}  // namespace detail

template <typename Real>
class Tensor {
 public:
  using value_type = Real;
  using Storage = detail::TensorStorage<Real>;

  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> values);

  static Tensor scalar(Real value) { return Tensor(Shape{1}, std::vector<Real>{value}); }

  bool defined() const { return static_cast<bool>(storage_); }
  const Shape& shape() const { return storage_->shape; }
  std::size_t rank() const { return storage_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return storage_->shape.at(axis); }
  std::size_t size() const { return storage_->data.size(); }

  std::span<const Real> data() const { return storage_->data; }
  std::span<Real> mutable_data() { return storage_->data; }
  Real at(std::size_t i) const { return storage_->data.at(i); }
  Real item() const;

  bool requires_grad() const { return storage_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return !storage_->grad.empty(); }
  std::span<const Real> grad() const { return storage_->grad; }
  // Allocates a zero gradient on first access.
  // Const because it mutates the shared storage, not the handle.
  std::span<Real> mutable_grad() const { return storage_->grad_buffer(); }
  void clear_grad() { std::vector<Real>().swap(storage_->grad); }

  // Deep copy that is detached from any tape and carries no gradient.
  Tensor detach() const;
  Tensor reshape(Shape shape) const;

  bool is_same(const Tensor& other) const { return storage_ == other.storage_; }
  const std::shared_ptr<Storage>& storage() const { return storage_; }

 private:
  std::shared_ptr<Storage> storage_;
};

template <typename Real>
class GradTape {
 public:
  using Storage = detail::TensorStorage<Real>;
  using BackwardFn = std::function<void(std::span<const Real> out_grad)>;

  GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  // Registers `output` as produced from `inputs`. `backward` receives the
  // gradient of the output and accumulates into the inputs' gradients.
  void record(const Tensor<Real>& output, std::vector<Tensor<Real>> inputs, BackwardFn backward);

  // Propagates d(loss)/d(.) to every requires_grad tensor reachable from
  // `loss`. A tape can be replayed once; call reset() before reuse.
  void backward(const Tensor<Real>& loss);

  void reset();
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  std::uint64_t id() const { return id_; }

 private:
  struct Node {
    std::shared_ptr<Storage> output;
    std::vector<std::shared_ptr<Storage>> inputs;
    BackwardFn backward;
  };

  std::uint64_t id_;
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Tape that operations on this thread record onto, or nullptr.
template <typename Real>
GradTape<Real>* active_tape();

// Installs a tape as the thread's active tape for the scope's lifetime.
template <typename Real>
class TapeScope {
 public:
  explicit TapeScope(GradTape<Real>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape<Real>* previous_;
};

// Suspends recording for the scope's lifetime.
template <typename Real>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape<Real>* previous_;
};

// Active tape if any of `inputs` requires a gradient.
template <typename Real>
GradTape<Real>* recording_tape(std::initializer_list<const Tensor<Real>*> inputs);

// Elementwise arithmetic. Binary ops require identical shapes, except that a
// single-element operand broadcasts against the other.
template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& a);
// relu'(0) is taken as 0.
template <typename Real>
Tensor<Real> relu(const Tensor<Real>& a);
// Throws ValueError on non-positive input.
template <typename Real>
Tensor<Real> log(const Tensor<Real>& a);

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real factor);

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& a);
template <typename Real>
Tensor<Real> mean(const Tensor<Real>& a);

// Concatenates rank-3 tensors (C x H x W) along the channel axis.
template <typename Real>
Tensor<Real> concat_channels(const std::vector<Tensor<Real>>& parts);
// Channels [begin, begin + count) of a rank-3 tensor.
template <typename Real>
Tensor<Real> slice_channels(const Tensor<Real>& a, std::size_t begin, std::size_t count);

namespace debug {
// While a recorder is installed on this thread, relu and max_pool2 fold each
// branch decision into it. Finite-difference checks use this to spot
// perturbations that cross a kink.
void set_branch_recorder(std::uint64_t* hash);
std::uint64_t* branch_recorder();
inline void record_branch(std::uint64_t* hash, std::uint64_t decision) {
  *hash = (*hash ^ decision) * 0x100000001b3ULL;
}
}  // namespace debug

}  // namespace svos
