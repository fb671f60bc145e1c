#pragma once

// Dense tensors (rank 0..3, row-major) with reverse-mode automatic
// differentiation. BasicTensor is a shared handle: copies alias the same
// storage and graph node. The library is instantiated for float (training
// and inference) and double (gradient checking).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cofact/error.hpp"

namespace cofact {

using Shape = std::vector<std::size_t>;

constexpr std::size_t kMaxRank = 3;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
class BasicTensor;

namespace detail {

template <typename T>
struct TensorImpl;

template <typename T>
struct GraphNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Reads out.grad and accumulates into the grads of the captured inputs.
  std::function<void(const TensorImpl<T>& out)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;
  bool requires_grad = false;
  std::shared_ptr<GraphNode<T>> node;

  // Lazily allocates a zero gradient buffer of the value size.
  std::vector<T>& grad_buffer() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(std::shared_ptr<detail::TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  static BasicTensor constant(Shape shape, std::vector<T> values);
  static BasicTensor parameter(Shape shape, std::vector<T> values);
  static BasicTensor zeros(Shape shape);
  static BasicTensor full(Shape shape, T value);
  static BasicTensor scalar(T value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return values().size(); }

  std::span<const T> values() const;
  // In-place access for leaves only (initialization, optimizer updates,
  // checkpoint loading). Throws ContractViolation on graph outputs.
  std::span<T> mutable_values();
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  // Empty span when no gradient has been accumulated yet.
  std::span<const T> grad() const;
  void zero_grad();

  // A constant copy sharing no graph linkage.
  BasicTensor detach() const;
  template <typename U>
  BasicTensor<U> cast() const;

  // Accumulates dL/dtheta into every reachable tensor that requires grad.
  // Leaf gradients accumulate across calls; interior ones are recomputed.
  void backward() const;

  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;

// Disables graph construction on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool active();

 private:
  bool previous_;
};

// Records every branch decision taken by non-smooth ops (relu, seq_max)
// on the current thread. Two forward passes with equal signatures took the
// same piecewise-smooth branch, which is what finite-difference checks need.
class NonsmoothProbe {
 public:
  NonsmoothProbe();
  ~NonsmoothProbe();
  NonsmoothProbe(const NonsmoothProbe&) = delete;
  NonsmoothProbe& operator=(const NonsmoothProbe&) = delete;

  std::uint64_t signature() const { return hash_; }
  void reset() { hash_ = 14695981039346656037ULL; }
  void record(std::uint64_t value);

  static NonsmoothProbe* current();

 private:
  NonsmoothProbe* previous_;
  std::uint64_t hash_ = 14695981039346656037ULL;
};

// Builds an op result. The node is attached only when some input requires
// grad and no NoGradGuard is active. Used by ops defined outside this file.
template <typename T>
BasicTensor<T> make_op(const char* op, Shape shape, std::vector<T> values,
                       const std::vector<BasicTensor<T>>& inputs,
                       std::function<void(const detail::TensorImpl<T>&)> backward);

// ---- operations ----------------------------------------------------------

// [m×k]·[k×n], [b×m×k]·[k×n] (shared right operand) or [b×m×k]·[b×k×n].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Swaps the last two axes.
template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

// x[..., n] + bias[n]
template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);

// Normalizes over the last axis: (x - mean) / sqrt(var + eps) * gain + bias.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, T eps);

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);

// Removes `axis`.
template <typename T>
BasicTensor<T> mean_over_axis(const BasicTensor<T>& x, std::size_t axis);

// Rank-0 sum of all elements.
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

// [b×l×(h·k)] -> [(b·h)×l×k] and back.
template <typename T>
BasicTensor<T> split_heads(const BasicTensor<T>& x, std::size_t heads);
template <typename T>
BasicTensor<T> merge_heads(const BasicTensor<T>& x, std::size_t heads);

// scores[(b·h)×lq×lk]: key positions >= key_lengths[b] are set to -inf.
template <typename T>
BasicTensor<T> mask_keys(const BasicTensor<T>& scores, std::span<const std::size_t> key_lengths,
                         std::size_t heads);

// Reductions over the sequence axis of x[b×l×d] honouring true lengths.
template <typename T>
BasicTensor<T> seq_mean(const BasicTensor<T>& x, std::span<const std::size_t> lengths);
template <typename T>
BasicTensor<T> seq_max(const BasicTensor<T>& x, std::span<const std::size_t> lengths);
template <typename T>
BasicTensor<T> seq_last(const BasicTensor<T>& x, std::span<const std::size_t> lengths);

// Inverted dropout. Identity when !training or p == 0; otherwise the mask is
// a pure function of (seed, element index).
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double p, std::uint64_t seed, bool training);

}  // namespace cofact
