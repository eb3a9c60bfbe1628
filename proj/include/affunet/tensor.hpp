#pragma once

#include <algorithm>
#include <cstring>
#include <memory>

#include "affunet/common.hpp"

namespace affunet {

namespace detail {
template <typename T>
struct Storage {
  std::vector<T> data;
  std::vector<T> grad;  // empty unless requires_grad
  bool requires_grad = false;
};
}  // namespace detail

// Dense row-major tensor. Handles are cheap to copy and share storage, so a
// gradient written through one handle is visible through all of them; every
// op allocates a fresh output buffer (no views, no aliasing).
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false) : shape_(std::move(shape)) {
    st_ = std::make_shared<detail::Storage<T>>();
    st_->data.assign(static_cast<size_t>(numel_of(shape_)), T(0));
    if (requires_grad) set_requires_grad(true);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.st_->data.begin(), t.st_->data.end(), value);
    return t;
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

  static Tensor from_data(Shape shape, std::vector<T> values) {
    if (numel_of(shape) != static_cast<int64_t>(values.size()))
      throw std::invalid_argument("Tensor::from_data: " + shape_str(shape) + " needs " +
                                  std::to_string(numel_of(shape)) + " values, got " +
                                  std::to_string(values.size()));
    Tensor t;
    t.shape_ = std::move(shape);
    t.st_ = std::make_shared<detail::Storage<T>>();
    t.st_->data = std::move(values);
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.st_->data) v = static_cast<T>(rng.normal() * stddev);
    return t;
  }

  bool defined() const { return static_cast<bool>(st_); }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return defined() ? static_cast<int64_t>(st_->data.size()) : 0; }
  static constexpr Dtype dtype() { return dtype_of<T>(); }

  T* data() { return st_->data.data(); }
  const T* data() const { return st_->data.data(); }
  const std::vector<T>& values() const { return st_->data; }

  bool requires_grad() const { return defined() && st_->requires_grad; }

  void set_requires_grad(bool on) {
    st_->requires_grad = on;
    if (on && st_->grad.size() != st_->data.size()) st_->grad.assign(st_->data.size(), T(0));
    if (!on) st_->grad.clear();
  }

  bool has_grad() const { return defined() && !st_->grad.empty(); }

  T* grad() { return st_->grad.empty() ? nullptr : st_->grad.data(); }
  const T* grad() const { return st_->grad.empty() ? nullptr : st_->grad.data(); }

  void zero_grad() {
    if (!st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), T(0));
  }

  T item() const {
    if (numel() != 1)
      throw std::invalid_argument("Tensor::item: tensor has " + std::to_string(numel()) +
                                  " elements, expected 1");
    return st_->data[0];
  }

  T at(int64_t i) const { return st_->data[static_cast<size_t>(i)]; }
  T& at(int64_t i) { return st_->data[static_cast<size_t>(i)]; }

  // Flat offset for a [B,C,H,W] tensor.
  int64_t off4(int64_t b, int64_t c, int64_t y, int64_t x) const {
    return ((b * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.st_ = std::make_shared<detail::Storage<T>>();
    t.st_->data = st_->data;
    return t;
  }

  // Same values, fresh storage, no gradient tracking.
  Tensor detach() const { return clone(); }

  // Storage identity, used by the tape to recognize recorded tensors.
  const void* id() const { return static_cast<const void*>(st_.get()); }

  bool all_finite() const {
    for (const T v : st_->data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  Shape shape_;
  std::shared_ptr<detail::Storage<T>> st_;
};

template <typename T>
inline void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

template <typename T>
inline void maybe_check_finite(const char* op, const Tensor<T>& t) {
  if (debug_check_finite() && !t.all_finite())
    throw NumericalError(std::string(op) + ": non-finite value in output " +
                         shape_str(t.shape()));
}

}  // namespace affunet
