#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "cellmamba/core/check.hpp"

namespace cm {

using i64 = std::int64_t;
using Shape = std::vector<i64>;

inline i64 shape_numel(const Shape& s) {
  i64 n = 1;
  for (i64 d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// Row-major strides.
inline std::vector<i64> shape_strides(const Shape& s) {
  std::vector<i64> st(s.size());
  i64 acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

template <typename S>
struct TensorStorage {
  Shape shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty until the backward pass touches this tensor
  bool requires_grad = false;
};

// Shared-storage handle with value semantics. Data is written once by the op
// that creates it; downstream consumers only read, so handles are safe to
// copy into backward closures.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  explicit Tensor(Shape shape) : impl_(std::make_shared<TensorStorage<S>>()) {
    validate_shape(shape);
    impl_->shape = std::move(shape);
    impl_->data.assign(shape_numel(impl_->shape), S(0));
  }

  Tensor(Shape shape, std::vector<S> values)
      : impl_(std::make_shared<TensorStorage<S>>()) {
    validate_shape(shape);
    CM_CHECK(static_cast<i64>(values.size()) == shape_numel(shape),
             "Tensor: ", values.size(), " values do not fill shape ", shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor scalar(S v) { return Tensor({1}, {v}); }

  static Tensor full(Shape shape, S v) {
    Tensor t(std::move(shape));
    for (auto& x : t.impl_->data) x = v;
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  i64 numel() const { return static_cast<i64>(impl_->data.size()); }

  // Negative indices count from the end.
  i64 dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    CM_CHECK(i >= 0 && i < r, "Tensor::dim: axis ", i, " out of range for ", shape_str(shape()));
    return impl_->shape[i];
  }

  S* data() { return impl_->data.data(); }
  const S* data() const { return impl_->data.data(); }
  std::vector<S>& values() { return impl_->data; }
  const std::vector<S>& values() const { return impl_->data; }

  S item() const {
    CM_CHECK(numel() == 1, "Tensor::item: tensor has ", numel(), " elements");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return !impl_->grad.empty(); }

  void ensure_grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), S(0));
  }

  S* grad() { return impl_->grad.data(); }
  const S* grad() const { return impl_->grad.data(); }
  std::vector<S>& grad_vec() { return impl_->grad; }
  const std::vector<S>& grad_vec() const { return impl_->grad; }

  void zero_grad() {
    for (auto& g : impl_->grad) g = S(0);
  }

  void drop_grad() { impl_->grad.clear(); }

  Tensor clone() const {
    Tensor t;
    t.impl_ = std::make_shared<TensorStorage<S>>();
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  TensorStorage<S>* storage() const { return impl_.get(); }

 private:
  static void validate_shape(const Shape& s) {
    CM_CHECK(!s.empty(), "Tensor: rank-0 shapes are not supported; use shape [1]");
    for (i64 d : s) CM_CHECK(d >= 1, "Tensor: non-positive dimension in ", shape_str(s));
  }

  std::shared_ptr<TensorStorage<S>> impl_;
};

// Dynamic tape, re-recorded every step. Nodes are appended in execution order
// (inputs strictly before consumers), so one reverse sweep visits each node
// exactly once.
template <typename S>
class Tape {
 public:
  struct Node {
    const char* op;
    std::function<void()> backward;
  };

  static Tape*& active() {
    static thread_local Tape* current = nullptr;
    return current;
  }

  void record(const char* op, std::function<void()> fn) {
    nodes_.push_back(Node{op, std::move(fn)});
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(const Tensor<S>& loss) {
    CM_CHECK(loss.defined() && loss.numel() == 1,
             "backward: loss must be a scalar, got shape ",
             loss.defined() ? shape_str(loss.shape()) : "(undefined)");
    loss.ensure_grad();
    loss.storage()->grad[0] += S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
  }

  void clear() { nodes_.clear(); }

  // Installs this tape as the recording target for the current thread.
  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(active()) { active() = &t; }
    // A null scope disables recording for its lifetime.
    explicit Scope(std::nullptr_t) : prev_(active()) { active() = nullptr; }
    ~Scope() { active() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

 private:
  std::vector<Node> nodes_;
};

// True when the op must record a backward node for this set of inputs.
template <typename S, typename... Ts>
bool grad_needed(const Ts&... inputs) {
  if (Tape<S>::active() == nullptr) return false;
  return (... || (inputs.defined() && inputs.requires_grad()));
}

}  // namespace cm
