#include "svos/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace svos {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

namespace {

void check_extents(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
  for (auto extent : shape)
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
}

std::atomic<std::uint64_t> next_tape_id{1};

template <typename Real>
GradTape<Real>*& tape_slot() {
  thread_local GradTape<Real>* slot = nullptr;
  return slot;
}

}  // namespace

// Tensor

template <typename Real>
Tensor<Real>::Tensor(Shape shape, Real fill) : storage_(std::make_shared<Storage>()) {
  check_extents(shape);
  storage_->data.assign(shape_numel(shape), fill);
  storage_->shape = std::move(shape);
}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, std::vector<Real> values) : storage_(std::make_shared<Storage>()) {
  check_extents(shape);
  if (shape_numel(shape) != values.size())
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                     " values");
  storage_->shape = std::move(shape);
  storage_->data = std::move(values);
}

template <typename Real>
Real Tensor<Real>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return storage_->data[0];
}

template <typename Real>
Tensor<Real>& Tensor<Real>::set_requires_grad(bool flag) {
  storage_->requires_grad = flag;
  return *this;
}

template <typename Real>
Tensor<Real> Tensor<Real>::detach() const {
  return Tensor(storage_->shape, storage_->data);
}

template <typename Real>
Tensor<Real> Tensor<Real>::reshape(Shape shape) const {
  if (shape_numel(shape) != size())
    throw ShapeError("cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
  Tensor out(std::move(shape), storage_->data);
  if (auto* tape = recording_tape<Real>({this})) {
    tape->record(out, {*this}, [in = *this](std::span<const Real> g) mutable {
      auto gi = in.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    });
  }
  return out;
}

// GradTape

template <typename Real>
GradTape<Real>::GradTape() : id_(next_tape_id.fetch_add(1)) {}

template <typename Real>
void GradTape<Real>::record(const Tensor<Real>& output, std::vector<Tensor<Real>> inputs,
                            BackwardFn backward) {
  if (consumed_) throw TapeError("recording onto a tape that was already replayed; reset() it first");
  auto out = output.storage();
  out->requires_grad = true;
  out->producer = id_;
  Node node{out, {}, std::move(backward)};
  node.inputs.reserve(inputs.size());
  for (auto& in : inputs) node.inputs.push_back(in.storage());
  nodes_.push_back(std::move(node));
}

template <typename Real>
void GradTape<Real>::backward(const Tensor<Real>& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw TapeError("backward() needs a single-element loss");
  if (consumed_) throw TapeError("tape already replayed; reset() before a second backward()");
  if (loss.storage()->producer != id_) throw TapeError("loss was not produced on this tape");

  // Leaves that feed the graph get a (possibly zero) gradient even when the
  // loss does not depend on them.
  std::unordered_set<const Storage*> produced;
  for (const auto& node : nodes_) produced.insert(node.output.get());
  for (const auto& node : nodes_)
    for (const auto& in : node.inputs)
      if (in->requires_grad && !produced.contains(in.get())) in->grad_buffer();

  // Intermediate gradients start from zero for this replay.
  for (const auto& node : nodes_) node.output->grad.clear();
  loss.storage()->grad.assign(1, Real(1));

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(it->output->grad);
  }
  consumed_ = true;
}

template <typename Real>
void GradTape<Real>::reset() {
  nodes_.clear();
  consumed_ = false;
  id_ = next_tape_id.fetch_add(1);
}

template <typename Real>
GradTape<Real>* active_tape() {
  return tape_slot<Real>();
}

template <typename Real>
TapeScope<Real>::TapeScope(GradTape<Real>& tape) : previous_(tape_slot<Real>()) {
  tape_slot<Real>() = &tape;
}

template <typename Real>
TapeScope<Real>::~TapeScope() {
  tape_slot<Real>() = previous_;
}

template <typename Real>
NoGradScope<Real>::NoGradScope() : previous_(tape_slot<Real>()) {
  tape_slot<Real>() = nullptr;
}

template <typename Real>
NoGradScope<Real>::~NoGradScope() {
  tape_slot<Real>() = previous_;
}

template <typename Real>
GradTape<Real>* recording_tape(std::initializer_list<const Tensor<Real>*> inputs) {
  auto* tape = tape_slot<Real>();
  if (!tape) return nullptr;
  for (const auto* t : inputs)
    if (t->requires_grad()) return tape;
  return nullptr;
}

// Elementwise ops

namespace {

template <typename Real>
void check_binary(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  if (a.shape() == b.shape() || a.size() == 1 || b.size() == 1) return;
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                   shape_str(b.shape()));
}

// Index helper for single-element broadcasting.
struct Broadcast {
  bool a_scalar, b_scalar;
  std::size_t ia(std::size_t i) const { return a_scalar ? 0 : i; }
  std::size_t ib(std::size_t i) const { return b_scalar ? 0 : i; }
};

template <typename Real>
Tensor<Real> binary_output(const Tensor<Real>& a, const Tensor<Real>& b, Broadcast& bc) {
  bc.a_scalar = a.size() == 1 && b.size() != 1;
  bc.b_scalar = b.size() == 1 && a.size() != 1;
  return Tensor<Real>(bc.a_scalar ? b.shape() : a.shape());
}

}  // namespace

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  check_binary(a, b, "add");
  Broadcast bc{};
  auto out = binary_output(a, b, bc);
  auto x = a.data(), y = b.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[bc.ia(i)] + y[bc.ib(i)];
  if (auto* tape = recording_tape<Real>({&a, &b})) {
    tape->record(out, {a, b}, [a, b, bc](std::span<const Real> g) mutable {
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[bc.ia(i)] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[bc.ib(i)] += g[i];
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  check_binary(a, b, "sub");
  Broadcast bc{};
  auto out = binary_output(a, b, bc);
  auto x = a.data(), y = b.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[bc.ia(i)] - y[bc.ib(i)];
  if (auto* tape = recording_tape<Real>({&a, &b})) {
    tape->record(out, {a, b}, [a, b, bc](std::span<const Real> g) mutable {
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[bc.ia(i)] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[bc.ib(i)] -= g[i];
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  check_binary(a, b, "mul");
  Broadcast bc{};
  auto out = binary_output(a, b, bc);
  auto x = a.data(), y = b.data();
  auto z = out.mutable_data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[bc.ia(i)] * y[bc.ib(i)];
  if (auto* tape = recording_tape<Real>({&a, &b})) {
    tape->record(out, {a, b}, [a, b, bc](std::span<const Real> g) mutable {
      auto x = a.data(), y = b.data();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[bc.ia(i)] += g[i] * y[bc.ib(i)];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[bc.ib(i)] += g[i] * x[bc.ia(i)];
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
  Tensor<Real> out(a.shape());
  auto x = a.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = Real(1) / (Real(1) + std::exp(-x[i]));
  if (auto* tape = recording_tape<Real>({&a})) {
    tape->record(out, {a}, [a, out](std::span<const Real> g) mutable {
      auto y = out.data();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (Real(1) - y[i]);
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> relu(const Tensor<Real>& a) {
  Tensor<Real> out(a.shape());
  auto x = a.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] > Real(0) ? x[i] : Real(0);
  if (auto* h = debug::branch_recorder())
    for (std::size_t i = 0; i < y.size(); ++i) debug::record_branch(h, x[i] > Real(0));
  if (auto* tape = recording_tape<Real>({&a})) {
    tape->record(out, {a}, [a](std::span<const Real> g) mutable {
      auto x = a.data();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > Real(0)) ga[i] += g[i];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> log(const Tensor<Real>& a) {
  auto x = a.data();
  for (auto v : x)
    if (!(v > Real(0))) throw ValueError("log of non-positive value " + std::to_string(v));
  Tensor<Real> out(a.shape());
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::log(x[i]);
  if (auto* tape = recording_tape<Real>({&a})) {
    tape->record(out, {a}, [a](std::span<const Real> g) mutable {
      auto x = a.data();
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real factor) {
  Tensor<Real> out(a.shape());
  auto x = a.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * factor;
  if (auto* tape = recording_tape<Real>({&a})) {
    tape->record(out, {a}, [a, factor](std::span<const Real> g) mutable {
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& a) {
  double acc = 0.0;
  for (auto v : a.data()) acc += v;
  auto out = Tensor<Real>::scalar(static_cast<Real>(acc));
  if (auto* tape = recording_tape<Real>({&a})) {
    tape->record(out, {a}, [a](std::span<const Real> g) mutable {
      auto ga = a.mutable_grad();
      for (auto& v : ga) v += g[0];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& a) {
  return scale(sum(a), Real(1) / static_cast<Real>(a.size()));
}

template <typename Real>
Tensor<Real> concat_channels(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels of nothing");
  const auto& first = parts.front();
  if (first.rank() != 3) throw ShapeError("concat_channels expects C x H x W tensors");
  std::size_t channels = 0;
  for (const auto& p : parts) {
    if (p.rank() != 3 || p.dim(1) != first.dim(1) || p.dim(2) != first.dim(2))
      throw ShapeError("concat_channels spatial mismatch " + shape_str(first.shape()) + " vs " +
                       shape_str(p.shape()));
    channels += p.dim(0);
  }
  Tensor<Real> out(Shape{channels, first.dim(1), first.dim(2)});
  auto y = out.mutable_data();
  std::size_t offset = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), y.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.size();
    any_grad = any_grad || p.requires_grad();
  }
  auto* tape = active_tape<Real>();
  if (tape && any_grad) {
    tape->record(out, parts, [parts](std::span<const Real> g) mutable {
      std::size_t offset = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto gp = p.mutable_grad();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
        }
        offset += p.size();
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> slice_channels(const Tensor<Real>& a, std::size_t begin, std::size_t count) {
  if (a.rank() != 3 || count == 0 || begin + count > a.dim(0))
    throw ShapeError("slice_channels [" + std::to_string(begin) + ", +" + std::to_string(count) +
                     ") out of range for " + shape_str(a.shape()));
  const std::size_t plane = a.dim(1) * a.dim(2);
  Tensor<Real> out(Shape{count, a.dim(1), a.dim(2)});
  auto src = a.data().subspan(begin * plane, count * plane);
  std::copy(src.begin(), src.end(), out.mutable_data().begin());
  if (auto* tape = recording_tape<Real>({&a})) {
    tape->record(out, {a}, [a, begin, plane](std::span<const Real> g) mutable {
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[begin * plane + i] += g[i];
    });
  }
  return out;
}

#define SVOS_INSTANTIATE(Real)                                                                  \
  template class Tensor<Real>;                                                                  \
  template class GradTape<Real>;                                                                \
  template class TapeScope<Real>;                                                               \
  template class NoGradScope<Real>;                                                             \
  template GradTape<Real>* active_tape<Real>();                                                 \
  template GradTape<Real>* recording_tape<Real>(std::initializer_list<const Tensor<Real>*>);    \
  template Tensor<Real> add(const Tensor<Real>&, const Tensor<Real>&);                           \
  template Tensor<Real> sub(const Tensor<Real>&, const Tensor<Real>&);                           \
  template Tensor<Real> mul(const Tensor<Real>&, const Tensor<Real>&);                           \
  template Tensor<Real> sigmoid(const Tensor<Real>&);                                           \
  template Tensor<Real> relu(const Tensor<Real>&);                                              \
  template Tensor<Real> log(const Tensor<Real>&);                                               \
  template Tensor<Real> scale(const Tensor<Real>&, Real);                                       \
  template Tensor<Real> sum(const Tensor<Real>&);                                               \
  template Tensor<Real> mean(const Tensor<Real>&);                                              \
  template Tensor<Real> concat_channels(const std::vector<Tensor<Real>>&);                      \
  template Tensor<Real> slice_channels(const Tensor<Real>&, std::size_t, std::size_t);

SVOS_INSTANTIATE(float)
SVOS_INSTANTIATE(double)

namespace debug {
namespace {
thread_local std::uint64_t* g_branch_recorder = nullptr;
}
void set_branch_recorder(std::uint64_t* hash) { g_branch_recorder = hash; }
std::uint64_t* branch_recorder() { return g_branch_recorder; }
}  // namespace debug

}  // namespace svos
