#include "cofact/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "cofact/random.hpp"

namespace cofact {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << "]";
  return out.str();
}

namespace {

thread_local bool g_no_grad = false;
thread_local NonsmoothProbe* g_probe = nullptr;

void check_shape(const Shape& shape, std::size_t n_values) {
  if (shape.size() > kMaxRank)
    throw DimensionError("tensor rank " + std::to_string(shape.size()) + " exceeds 3");
  for (auto e : shape)
    if (e == 0) throw DimensionError("zero extent in shape " + shape_string(shape));
  if (shape_size(shape) != n_values)
    throw DimensionError("shape " + shape_string(shape) + " does not hold " +
                         std::to_string(n_values) + " values");
}

template <typename T>
std::shared_ptr<detail::TensorImpl<T>> new_impl(Shape shape, std::vector<T> values,
                                               bool requires_grad) {
  check_shape(shape, values.size());
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->values = std::move(values);
  impl->requires_grad = requires_grad;
  return impl;
}

template <typename T>
const detail::TensorImpl<T>& deref(const BasicTensor<T>& t) {
  if (!t.defined()) throw ContractViolation("use of an undefined tensor");
  return *t.impl();
}

// C[m×n] (+)= A[m×k]·B[k×n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m×k] += G[m×n]·B[k×n]^T
template <typename T>
void gemm_nt(const T* g, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* grow = g + i * n;
    T* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C[k×n] += A[m×k]^T·G[m×n]
template <typename T>
void gemm_tn(const T* a, const T* g, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

struct AxisSplit {
  std::size_t outer;
  std::size_t extent;
  std::size_t inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void check_lengths(const Shape& shape, std::span<const std::size_t> lengths, const char* op) {
  if (shape.size() != 3)
    throw DimensionError(std::string(op) + " expects [batch×len×dim], got " + shape_string(shape));
  if (lengths.size() != shape[0])
    throw DimensionError(std::string(op) + ": " + std::to_string(lengths.size()) +
                         " lengths for batch of " + std::to_string(shape[0]));
  for (auto len : lengths)
    if (len == 0 || len > shape[1])
      throw DimensionError(std::string(op) + ": sequence length " + std::to_string(len) +
                           " outside [1, " + std::to_string(shape[1]) + "]");
}

}  // namespace

// ---- guards ----------------------------------------------------------------

NoGradGuard::NoGradGuard() : previous_(g_no_grad) { g_no_grad = true; }
NoGradGuard::~NoGradGuard() { g_no_grad = previous_; }
bool NoGradGuard::active() { return g_no_grad; }

NonsmoothProbe::NonsmoothProbe() : previous_(g_probe) { g_probe = this; }
NonsmoothProbe::~NonsmoothProbe() { g_probe = previous_; }
NonsmoothProbe* NonsmoothProbe::current() { return g_probe; }

void NonsmoothProbe::record(std::uint64_t value) {
  hash_ ^= value + 0x9e3779b97f4a7c15ULL + (hash_ << 6) + (hash_ >> 2);
  hash_ *= 1099511628211ULL;
}

// ---- BasicTensor -----------------------------------------------------------

template <typename T>
BasicTensor<T> BasicTensor<T>::constant(Shape shape, std::vector<T> values) {
  return BasicTensor(new_impl<T>(std::move(shape), std::move(values), false));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::parameter(Shape shape, std::vector<T> values) {
  return BasicTensor(new_impl<T>(std::move(shape), std::move(values), true));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape) {
  const auto n = shape_size(shape);
  return constant(std::move(shape), std::vector<T>(n, T(0)));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value) {
  const auto n = shape_size(shape);
  return constant(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value) {
  return constant({}, {value});
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
  return deref(*this).shape;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
  return s[axis];
}

template <typename T>
std::span<const T> BasicTensor<T>::values() const {
  return deref(*this).values;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_values() {
  if (!is_leaf()) throw ContractViolation("in-place update of a graph output");
  return impl_->values;
}

template <typename T>
T BasicTensor<T>::item() const {
  const auto& impl = deref(*this);
  if (impl.values.size() != 1)
    throw ContractViolation("item() on tensor of shape " + shape_string(impl.shape));
  return impl.values[0];
}

template <typename T>
bool BasicTensor<T>::requires_grad() const {
  return deref(*this).requires_grad;
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool flag) {
  if (!is_leaf()) throw ContractViolation("requires_grad can only be changed on leaves");
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.clear();
}

template <typename T>
bool BasicTensor<T>::is_leaf() const {
  return deref(*this).node == nullptr;
}

template <typename T>
bool BasicTensor<T>::has_grad() const {
  const auto& impl = deref(*this);
  return !impl.grad.empty() && impl.grad.size() == impl.values.size();
}

template <typename T>
std::span<const T> BasicTensor<T>::grad() const {
  if (!has_grad()) return {};
  return impl_->grad;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  const auto& impl = deref(*this);
  return constant(impl.shape, impl.values);
}

template <typename T>
template <typename U>
BasicTensor<U> BasicTensor<T>::cast() const {
  const auto& impl = deref(*this);
  std::vector<U> out(impl.values.begin(), impl.values.end());
  return BasicTensor<U>::constant(impl.shape, std::move(out));
}

template <typename T>
void BasicTensor<T>::backward() const {
  const auto& root = deref(*this);
  if (root.values.size() != 1)
    throw ContractViolation("backward() needs a scalar loss, got shape " +
                            shape_string(root.shape));
  if (!root.requires_grad)
    throw ContractViolation("backward() on a loss that depends on no trainable tensor");
  if (!std::isfinite(static_cast<double>(root.values[0])))
    throw NumericError("backward() on a non-finite loss");

  // Iterative post-order DFS; `order` ends up with inputs before outputs.
  using Impl = detail::TensorImpl<T>;
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->node && next < node->node->inputs.size()) {
      Impl* child = node->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  for (Impl* node : order)
    if (node->node) node->grad.assign(node->values.size(), T(0));
  impl_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->node) (*it)->node->backward(**it);
}

template <typename T>
BasicTensor<T> make_op(const char* op, Shape shape, std::vector<T> values,
                       const std::vector<BasicTensor<T>>& inputs,
                       std::function<void(const detail::TensorImpl<T>&)> backward) {
  bool needs_grad = false;
  if (!g_no_grad)
    for (const auto& in : inputs) needs_grad = needs_grad || deref(in).requires_grad;
  auto impl = new_impl<T>(std::move(shape), std::move(values), needs_grad);
  if (needs_grad) {
    auto node = std::make_shared<detail::GraphNode<T>>();
    node->op = op;
    for (const auto& in : inputs) node->inputs.push_back(in.impl());
    node->backward = std::move(backward);
    impl->node = std::move(node);
  }
  return BasicTensor<T>(std::move(impl));
}

// ---- ops -------------------------------------------------------------------

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  auto mismatch = [&] {
    return DimensionError("matmul shape mismatch: " + shape_string(as) + " x " + shape_string(bs));
  };
  if (as.size() < 2 || bs.size() < 2) throw mismatch();
  const std::size_t batch = as.size() == 3 ? as[0] : 1;
  const bool batched_b = bs.size() == 3;
  if (as.size() == 2 && batched_b) throw mismatch();
  if (batched_b && bs[0] != batch) throw mismatch();
  const std::size_t m = as[as.size() - 2], k = as.back();
  const std::size_t kb = bs[bs.size() - 2], n = bs.back();
  if (k != kb) throw mismatch();

  Shape out_shape = as.size() == 3 ? Shape{batch, m, n} : Shape{m, n};
  std::vector<T> out(batch * m * n, T(0));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  if (!batched_b) {
    // Shared right operand: one (batch·m)×k by k×n product.
    gemm_nn(av, bv, out.data(), batch * m, k, n);
  } else {
    for (std::size_t s = 0; s < batch; ++s)
      gemm_nn(av + s * m * k, bv + s * k * n, out.data() + s * m * n, m, k, n);
  }

  auto ai = a.impl();
  auto bi = b.impl();
  return make_op<T>("matmul", std::move(out_shape), std::move(out), {a, b},
                    [ai, bi, batch, m, k, n, batched_b](const detail::TensorImpl<T>& o) {
                      const T* g = o.grad.data();
                      if (ai->requires_grad) {
                        T* ga = ai->grad_buffer().data();
                        const std::size_t bstride = batched_b ? k * n : 0;
                        for (std::size_t s = 0; s < batch; ++s)
                          gemm_nt(g + s * m * n, bi->values.data() + s * bstride,
                                  ga + s * m * k, m, k, n);
                      }
                      if (bi->requires_grad) {
                        T* gb = bi->grad_buffer().data();
                        if (!batched_b) {
                          gemm_tn(ai->values.data(), g, gb, batch * m, k, n);
                        } else {
                          for (std::size_t s = 0; s < batch; ++s)
                            gemm_tn(ai->values.data() + s * m * k, g + s * m * n,
                                    gb + s * k * n, m, k, n);
                        }
                      }
                    });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  const auto& xs = x.shape();
  if (xs.size() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_string(xs));
  const std::size_t batch = xs.size() == 3 ? xs[0] : 1;
  const std::size_t r = xs[xs.size() - 2], c = xs.back();
  Shape os = xs;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  std::vector<T> out(x.size());
  const auto xv = x.values();
  for (std::size_t s = 0; s < batch; ++s)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[s * r * c + j * r + i] = xv[s * r * c + i * c + j];
  auto xi = x.impl();
  return make_op<T>("transpose", std::move(os), std::move(out), {x},
                    [xi, batch, r, c](const detail::TensorImpl<T>& o) {
                      auto& g = xi->grad_buffer();
                      for (std::size_t s = 0; s < batch; ++s)
                        for (std::size_t i = 0; i < r; ++i)
                          for (std::size_t j = 0; j < c; ++j)
                            g[s * r * c + i * c + j] += o.grad[s * r * c + j * r + i];
                    });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add shape mismatch: " + shape_string(a.shape()) + " + " +
                         shape_string(b.shape()));
  std::vector<T> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return make_op<T>("add", a.shape(), std::move(out), {a, b},
                    [ai, bi](const detail::TensorImpl<T>& o) {
                      for (auto* in : {ai.get(), bi.get()}) {
                        if (!in->requires_grad) continue;
                        auto& g = in->grad_buffer();
                        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                      }
                    });
}

template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  const auto& xs = x.shape();
  if (xs.empty() || bias.rank() != 1 || bias.dim(0) != xs.back())
    throw DimensionError("add_bias shape mismatch: " + shape_string(xs) + " + " +
                         shape_string(bias.shape()));
  const std::size_t n = xs.back();
  std::vector<T> out(x.values().begin(), x.values().end());
  const auto bv = bias.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
  auto xi = x.impl();
  auto bi = bias.impl();
  return make_op<T>("add_bias", xs, std::move(out), {x, bias},
                    [xi, bi, n](const detail::TensorImpl<T>& o) {
                      if (xi->requires_grad) {
                        auto& g = xi->grad_buffer();
                        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                      }
                      if (bi->requires_grad) {
                        auto& g = bi->grad_buffer();
                        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i % n] += o.grad[i];
                      }
                    });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  std::vector<T> out(x.values().begin(), x.values().end());
  for (auto& v : out) v *= factor;
  auto xi = x.impl();
  return make_op<T>("scale", x.shape(), std::move(out), {x},
                    [xi, factor](const detail::TensorImpl<T>& o) {
                      auto& g = xi->grad_buffer();
                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * o.grad[i];
                    });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (auto* probe = NonsmoothProbe::current()) {
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      word = (word << 1) | (xv[i] > T(0) ? 1u : 0u);
      if (i % 64 == 63) probe->record(word), word = 0;
    }
    probe->record(word);
  }
  auto xi = x.impl();
  return make_op<T>("relu", x.shape(), std::move(out), {x},
                    [xi](const detail::TensorImpl<T>& o) {
                      auto& g = xi->grad_buffer();
                      for (std::size_t i = 0; i < g.size(); ++i)
                        if (xi->values[i] > T(0)) g[i] += o.grad[i];
                    });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
  const auto& xs = x.shape();
  if (axis >= xs.size())
    throw DimensionError("softmax axis " + std::to_string(axis) + " out of range for " +
                         shape_string(xs));
  const auto sp = split_at(xs, axis);
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < sp.extent; ++e) mx = std::max(mx, xv[base + e * sp.inner]);
      T total = T(0);
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const T v = std::exp(xv[base + e * sp.inner] - mx);
        out[base + e * sp.inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < sp.extent; ++e) out[base + e * sp.inner] /= total;
    }
  }
  auto xi = x.impl();
  return make_op<T>("softmax", xs, std::move(out), {x},
                    [xi, sp](const detail::TensorImpl<T>& o) {
                      auto& g = xi->grad_buffer();
                      for (std::size_t ou = 0; ou < sp.outer; ++ou) {
                        for (std::size_t in = 0; in < sp.inner; ++in) {
                          const std::size_t base = ou * sp.extent * sp.inner + in;
                          T dot = T(0);
                          for (std::size_t e = 0; e < sp.extent; ++e) {
                            const std::size_t idx = base + e * sp.inner;
                            dot += o.grad[idx] * o.values[idx];
                          }
                          for (std::size_t e = 0; e < sp.extent; ++e) {
                            const std::size_t idx = base + e * sp.inner;
                            g[idx] += o.values[idx] * (o.grad[idx] - dot);
                          }
                        }
                      }
                    });
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain,
                          const BasicTensor<T>& bias, T eps) {
  const auto& xs = x.shape();
  if (xs.empty()) throw DimensionError("layer_norm on a scalar");
  const std::size_t n = xs.back();
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n})
    throw DimensionError("layer_norm gain/bias " + shape_string(gain.shape()) + "/" +
                         shape_string(bias.shape()) + " do not match last axis of " +
                         shape_string(xs));
  const std::size_t rows = x.size() / n;
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<T> out(xv.size());
  // Normalized activations and per-row inverse std, reused by backward.
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * n;
    T mean = T(0);
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= T(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(n);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (row[j] - mean) * is;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  auto xi = x.impl();
  auto gi = gain.impl();
  auto bi = bias.impl();
  return make_op<T>(
      "layer_norm", xs, std::move(out), {x, gain, bias},
      [xi, gi, bi, xhat, inv_std, rows, n](const detail::TensorImpl<T>& o) {
        if (gi->requires_grad) {
          auto& gg = gi->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gg[j] += o.grad[r * n + j] * (*xhat)[r * n + j];
        }
        if (bi->requires_grad) {
          auto& gb = bi->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gb[j] += o.grad[r * n + j];
        }
        if (xi->requires_grad) {
          auto& gx = xi->grad_buffer();
          for (std::size_t r = 0; r < rows; ++r) {
            T sum_d = T(0), sum_dh = T(0);
            for (std::size_t j = 0; j < n; ++j) {
              const T d = o.grad[r * n + j] * gi->values[j];
              sum_d += d;
              sum_dh += d * (*xhat)[r * n + j];
            }
            const T is = (*inv_std)[r];
            for (std::size_t j = 0; j < n; ++j) {
              const T d = o.grad[r * n + j] * gi->values[j];
              gx[r * n + j] += is / T(n) * (T(n) * d - sum_d - (*xhat)[r * n + j] * sum_dh);
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  if (axis >= first.size())
    throw DimensionError("concat axis " + std::to_string(axis) + " out of range for " +
                         shape_string(first));
  Shape os = first;
  os[axis] = 0;
  for (const auto& p : parts) {
    const auto& ps = p.shape();
    bool ok = ps.size() == first.size();
    for (std::size_t i = 0; ok && i < ps.size(); ++i) ok = i == axis || ps[i] == first[i];
    if (!ok)
      throw DimensionError("concat shape mismatch: " + shape_string(first) + " vs " +
                           shape_string(ps));
    os[axis] += ps[axis];
  }
  const auto sp = split_at(os, axis);
  std::vector<T> out(shape_size(os));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t ext = p.shape()[axis];
    const auto pv = p.values();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pv.data() + o * ext * sp.inner, ext * sp.inner,
                  out.data() + (o * sp.extent + offset) * sp.inner);
    offset += ext;
  }
  std::vector<std::shared_ptr<detail::TensorImpl<T>>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return make_op<T>("concat", std::move(os), std::move(out), parts,
                    [impls, offsets, sp, axis](const detail::TensorImpl<T>& o) {
                      for (std::size_t k = 0; k < impls.size(); ++k) {
                        auto* in = impls[k].get();
                        if (!in->requires_grad) continue;
                        auto& g = in->grad_buffer();
                        const std::size_t ext = in->shape[axis];
                        for (std::size_t ou = 0; ou < sp.outer; ++ou) {
                          const T* src = o.grad.data() + (ou * sp.extent + offsets[k]) * sp.inner;
                          T* dst = g.data() + ou * ext * sp.inner;
                          for (std::size_t i = 0; i < ext * sp.inner; ++i) dst[i] += src[i];
                        }
                      }
                    });
}

template <typename T>
BasicTensor<T> mean_over_axis(const BasicTensor<T>& x, std::size_t axis) {
  const auto& xs = x.shape();
  if (axis >= xs.size())
    throw DimensionError("mean axis " + std::to_string(axis) + " out of range for " +
                         shape_string(xs));
  const auto sp = split_at(xs, axis);
  Shape os = xs;
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<T> out(sp.outer * sp.inner, T(0));
  const auto xv = x.values();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e)
      for (std::size_t in = 0; in < sp.inner; ++in)
        out[o * sp.inner + in] += xv[(o * sp.extent + e) * sp.inner + in];
  for (auto& v : out) v /= T(sp.extent);
  auto xi = x.impl();
  return make_op<T>("mean", std::move(os), std::move(out), {x},
                    [xi, sp](const detail::TensorImpl<T>& o) {
                      auto& g = xi->grad_buffer();
                      const T w = T(1) / T(sp.extent);
                      for (std::size_t ou = 0; ou < sp.outer; ++ou)
                        for (std::size_t e = 0; e < sp.extent; ++e)
                          for (std::size_t in = 0; in < sp.inner; ++in)
                            g[(ou * sp.extent + e) * sp.inner + in] += w * o.grad[ou * sp.inner + in];
                    });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  T total = T(0);
  for (auto v : x.values()) total += v;
  auto xi = x.impl();
  return make_op<T>("sum", {}, {total}, {x}, [xi](const detail::TensorImpl<T>& o) {
    auto& g = xi->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_size(shape) != x.size())
    throw DimensionError("cannot reshape " + shape_string(x.shape()) + " to " +
                         shape_string(shape));
  std::vector<T> out(x.values().begin(), x.values().end());
  auto xi = x.impl();
  return make_op<T>("reshape", std::move(shape), std::move(out), {x},
                    [xi](const detail::TensorImpl<T>& o) {
                      auto& g = xi->grad_buffer();
                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                    });
}

template <typename T>
BasicTensor<T> split_heads(const BasicTensor<T>& x, std::size_t heads) {
  const auto& xs = x.shape();
  if (xs.size() != 3 || heads == 0 || xs[2] % heads != 0)
    throw DimensionError("split_heads: " + shape_string(xs) + " not divisible into " +
                         std::to_string(heads) + " heads");
  const std::size_t b = xs[0], l = xs[1], d = xs[2], k = d / heads;
  std::vector<T> out(x.size());
  const auto xv = x.values();
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t p = 0; p < l; ++p)
        std::copy_n(xv.data() + (s * l + p) * d + h * k, k,
                    out.data() + ((s * heads + h) * l + p) * k);
  auto xi = x.impl();
  return make_op<T>("split_heads", Shape{b * heads, l, k}, std::move(out), {x},
                    [xi, b, l, d, k, heads](const detail::TensorImpl<T>& o) {
                      auto& g = xi->grad_buffer();
                      for (std::size_t s = 0; s < b; ++s)
                        for (std::size_t h = 0; h < heads; ++h)
                          for (std::size_t p = 0; p < l; ++p)
                            for (std::size_t j = 0; j < k; ++j)
                              g[(s * l + p) * d + h * k + j] +=
                                  o.grad[((s * heads + h) * l + p) * k + j];
                    });
}

template <typename T>
BasicTensor<T> merge_heads(const BasicTensor<T>& x, std::size_t heads) {
  const auto& xs = x.shape();
  if (xs.size() != 3 || heads == 0 || xs[0] % heads != 0)
    throw DimensionError("merge_heads: " + shape_string(xs) + " not divisible into " +
                         std::to_string(heads) + " heads");
  const std::size_t b = xs[0] / heads, l = xs[1], k = xs[2], d = k * heads;
  std::vector<T> out(x.size());
  const auto xv = x.values();
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t p = 0; p < l; ++p)
        std::copy_n(xv.data() + ((s * heads + h) * l + p) * k, k,
                    out.data() + (s * l + p) * d + h * k);
  auto xi = x.impl();
  return make_op<T>("merge_heads", Shape{b, l, d}, std::move(out), {x},
                    [xi, b, l, d, k, heads](const detail::TensorImpl<T>& o) {
                      auto& g = xi->grad_buffer();
                      for (std::size_t s = 0; s < b; ++s)
                        for (std::size_t h = 0; h < heads; ++h)
                          for (std::size_t p = 0; p < l; ++p)
                            for (std::size_t j = 0; j < k; ++j)
                              g[((s * heads + h) * l + p) * k + j] +=
                                  o.grad[(s * l + p) * d + h * k + j];
                    });
}

template <typename T>
BasicTensor<T> mask_keys(const BasicTensor<T>& scores, std::span<const std::size_t> key_lengths,
                         std::size_t heads) {
  const auto& ss = scores.shape();
  if (ss.size() != 3 || heads == 0 || ss[0] != key_lengths.size() * heads)
    throw DimensionError("mask_keys: scores " + shape_string(ss) + " vs " +
                         std::to_string(key_lengths.size()) + " lengths x " +
                         std::to_string(heads) + " heads");
  const std::size_t lq = ss[1], lk = ss[2];
  std::vector<std::size_t> lens(key_lengths.begin(), key_lengths.end());
  for (auto len : lens)
    if (len == 0 || len > lk)
      throw DimensionError("mask_keys: key length " + std::to_string(len) + " outside [1, " +
                           std::to_string(lk) + "]");
  std::vector<T> out(scores.values().begin(), scores.values().end());
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (std::size_t s = 0; s < ss[0]; ++s) {
    const std::size_t len = lens[s / heads];
    for (std::size_t q = 0; q < lq; ++q)
      for (std::size_t k = len; k < lk; ++k) out[(s * lq + q) * lk + k] = neg_inf;
  }
  auto si = scores.impl();
  return make_op<T>("mask_keys", ss, std::move(out), {scores},
                    [si, lens, heads, lq, lk](const detail::TensorImpl<T>& o) {
                      auto& g = si->grad_buffer();
                      for (std::size_t s = 0; s < si->shape[0]; ++s) {
                        const std::size_t len = lens[s / heads];
                        for (std::size_t q = 0; q < lq; ++q)
                          for (std::size_t k = 0; k < len; ++k)
                            g[(s * lq + q) * lk + k] += o.grad[(s * lq + q) * lk + k];
                      }
                    });
}

template <typename T>
BasicTensor<T> seq_mean(const BasicTensor<T>& x, std::span<const std::size_t> lengths) {
  check_lengths(x.shape(), lengths, "seq_mean");
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());
  std::vector<T> out(b * d, T(0));
  const auto xv = x.values();
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t p = 0; p < lens[s]; ++p)
      for (std::size_t j = 0; j < d; ++j) out[s * d + j] += xv[(s * l + p) * d + j];
    for (std::size_t j = 0; j < d; ++j) out[s * d + j] /= T(lens[s]);
  }
  auto xi = x.impl();
  return make_op<T>("seq_mean", Shape{b, d}, std::move(out), {x},
                    [xi, lens, l, d](const detail::TensorImpl<T>& o) {
                      auto& g = xi->grad_buffer();
                      for (std::size_t s = 0; s < lens.size(); ++s) {
                        const T w = T(1) / T(lens[s]);
                        for (std::size_t p = 0; p < lens[s]; ++p)
                          for (std::size_t j = 0; j < d; ++j)
                            g[(s * l + p) * d + j] += w * o.grad[s * d + j];
                      }
                    });
}

template <typename T>
BasicTensor<T> seq_max(const BasicTensor<T>& x, std::span<const std::size_t> lengths) {
  check_lengths(x.shape(), lengths, "seq_max");
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  std::vector<T> out(b * d);
  std::vector<std::size_t> argmax(b * d);
  const auto xv = x.values();
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t j = 0; j < d; ++j) {
      std::size_t best = 0;
      for (std::size_t p = 1; p < lengths[s]; ++p)
        if (xv[(s * l + p) * d + j] > xv[(s * l + best) * d + j]) best = p;
      argmax[s * d + j] = best;
      out[s * d + j] = xv[(s * l + best) * d + j];
    }
  if (auto* probe = NonsmoothProbe::current())
    for (auto a : argmax) probe->record(a);
  auto xi = x.impl();
  return make_op<T>("seq_max", Shape{b, d}, std::move(out), {x},
                    [xi, argmax, l, d](const detail::TensorImpl<T>& o) {
                      auto& g = xi->grad_buffer();
                      for (std::size_t i = 0; i < argmax.size(); ++i) {
                        const std::size_t s = i / d, j = i % d;
                        g[(s * l + argmax[i]) * d + j] += o.grad[i];
                      }
                    });
}

template <typename T>
BasicTensor<T> seq_last(const BasicTensor<T>& x, std::span<const std::size_t> lengths) {
  check_lengths(x.shape(), lengths, "seq_last");
  const std::size_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());
  std::vector<T> out(b * d);
  const auto xv = x.values();
  for (std::size_t s = 0; s < b; ++s)
    std::copy_n(xv.data() + (s * l + lens[s] - 1) * d, d, out.data() + s * d);
  auto xi = x.impl();
  return make_op<T>("seq_last", Shape{b, d}, std::move(out), {x},
                    [xi, lens, l, d](const detail::TensorImpl<T>& o) {
                      auto& g = xi->grad_buffer();
                      for (std::size_t s = 0; s < lens.size(); ++s)
                        for (std::size_t j = 0; j < d; ++j)
                          g[(s * l + lens[s] - 1) * d + j] += o.grad[s * d + j];
                    });
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double p, std::uint64_t seed, bool training) {
  if (!(p >= 0.0 && p < 1.0))
    throw ValueError("dropout rate " + std::to_string(p) + " outside [0, 1)");
  if (!training || p == 0.0) return x;
  const T keep_scale = T(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<T>>(x.size());
  for (std::size_t i = 0; i < mask->size(); ++i)
    (*mask)[i] = unit_uniform(mix_seed(seed, i)) < p ? T(0) : keep_scale;
  std::vector<T> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
  auto xi = x.impl();
  return make_op<T>("dropout", x.shape(), std::move(out), {x},
                    [xi, mask](const detail::TensorImpl<T>& o) {
                      auto& g = xi->grad_buffer();
                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*mask)[i] * o.grad[i];
                    });
}

// ---- explicit instantiations -------------------------------------------------

#define COFACT_INSTANTIATE(T)                                                                     \
  template class BasicTensor<T>;                                                                  \
  template BasicTensor<float> BasicTensor<T>::cast<float>() const;                                \
  template BasicTensor<double> BasicTensor<T>::cast<double>() const;                              \
  template BasicTensor<T> make_op<T>(const char*, Shape, std::vector<T>,                          \
                                     const std::vector<BasicTensor<T>>&,                          \
                                     std::function<void(const detail::TensorImpl<T>&)>);          \
  template BasicTensor<T> matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> transpose<T>(const BasicTensor<T>&);                                    \
  template BasicTensor<T> add<T>(const BasicTensor<T>&, const BasicTensor<T>&);                   \
  template BasicTensor<T> add_bias<T>(const BasicTensor<T>&, const BasicTensor<T>&);              \
  template BasicTensor<T> scale<T>(const BasicTensor<T>&, T);                                     \
  template BasicTensor<T> relu<T>(const BasicTensor<T>&);                                         \
  template BasicTensor<T> softmax<T>(const BasicTensor<T>&, std::size_t);                         \
  template BasicTensor<T> layer_norm<T>(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                        const BasicTensor<T>&, T);                                \
  template BasicTensor<T> concat<T>(const std::vector<BasicTensor<T>>&, std::size_t);             \
  template BasicTensor<T> mean_over_axis<T>(const BasicTensor<T>&, std::size_t);                  \
  template BasicTensor<T> sum<T>(const BasicTensor<T>&);                                          \
  template BasicTensor<T> reshape<T>(const BasicTensor<T>&, Shape);                               \
  template BasicTensor<T> split_heads<T>(const BasicTensor<T>&, std::size_t);                     \
  template BasicTensor<T> merge_heads<T>(const BasicTensor<T>&, std::size_t);                     \
  template BasicTensor<T> mask_keys<T>(const BasicTensor<T>&, std::span<const std::size_t>,       \
                                       std::size_t);                                              \
  template BasicTensor<T> seq_mean<T>(const BasicTensor<T>&, std::span<const std::size_t>);       \
  template BasicTensor<T> seq_max<T>(const BasicTensor<T>&, std::span<const std::size_t>);        \
  template BasicTensor<T> seq_last<T>(const BasicTensor<T>&, std::span<const std::size_t>);       \
  template BasicTensor<T> dropout<T>(const BasicTensor<T>&, double, std::uint64_t, bool);

COFACT_INSTANTIATE(float)
COFACT_INSTANTIATE(double)

#undef COFACT_INSTANTIATE

}  // namespace cofact
