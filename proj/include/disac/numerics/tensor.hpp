#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace disac {

/// Shape or operand mismatch inside an operation. The message names the
/// operation and the offending shapes.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid configuration (bad sizes, divisibility, missing fields).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Argument outside the mathematical domain of a formula.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Explicit random stream. Every stochastic operation takes one by reference.
using Rng = std::mt19937_64;

/// Derives an independent stream seed from a base seed and a stream index
/// (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// FNV-1a 64-bit, chainable through `h`.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
  auto* b = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ull;
  return h;
}

}  // namespace disac

namespace disac::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw ContractError(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph construction in the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents.
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Reference-semantics handle to a node in a define-by-run graph. Copies
/// share storage, like a framework tensor; use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (nn::numel(shape) != values.size()) {
      throw ContractError("tensor: shape " + shape_str(shape) + " holds " +
                          std::to_string(nn::numel(shape)) + " values, got " +
                          std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> v(nn::numel(shape), T(0));
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    std::vector<T> v(nn::numel(shape), fill);
    return Tensor(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }

  explicit operator bool() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty() || node_->value.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  T item() const {
    if (numel() != 1) throw ContractError("item: tensor " + shape_str(shape()) + " is not scalar");
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  void zero_grad() { node_->grad.clear(); }

  /// Same values, cut from the graph.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }
  Tensor clone() const { return Tensor(shape(), node_->value, requires_grad()); }

  /// Reverse-mode sweep from a scalar root.
  void backward() {
    if (numel() != 1) throw ContractError("backward: root " + shape_str(shape()) + " is not scalar");
    std::vector<Node<T>*> order;
    {
      std::unordered_set<Node<T>*> seen;
      std::vector<std::pair<Node<T>*, std::size_t>> stack;
      stack.emplace_back(node_.get(), 0);
      seen.insert(node_.get());
      while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
          Node<T>* p = n->parents[next++].get();
          if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
          order.push_back(n);
          stack.pop_back();
        }
      }
    }
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. `backward` receives the result node and must
/// accumulate into the grads of those parents that require them.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(value), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || (in && in.requires_grad());
  if (!any) return out;
  auto& n = out.node();
  n.requires_grad = true;
  for (const auto& in : inputs)
    if (in) n.parents.push_back(in.node_ptr());
  n.backward = std::move(backward);
  return out;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> backward) {
  Tensor<T> out(std::move(shape), std::move(value), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || (in && in.requires_grad());
  if (!any) return out;
  auto& n = out.node();
  n.requires_grad = true;
  for (const auto& in : inputs)
    if (in) n.parents.push_back(in.node_ptr());
  n.backward = std::move(backward);
  return out;
}

/// Converts between scalar types (graph is cut).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> v(t.data().begin(), t.data().end());
  return Tensor<To>(t.shape(), std::move(v), false);
}

}  // namespace disac::nn
