// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstring>
#include <memory>
#include <span>
#include <vector>

#include "phasor/common.hpp"

namespace phasor {

/// Dense integer grid (byte ids, group indices, argmax results, masks).
/// Not part of the differentiable graph.
struct IdxArray {
  Shape shape;
  std::vector<int64_t> v;

  IdxArray() = default;
  explicit IdxArray(Shape s) : shape(std::move(s)), v(numel_of(shape), 0) {}
  IdxArray(Shape s, std::vector<int64_t> vals) : shape(std::move(s)), v(std::move(vals)) {
    check(numel_of(shape) == static_cast<int64_t>(v.size()),
          "IdxArray: shape " + shape_str(shape) + " does not match value count");
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int64_t& at(int64_t i) { return v[static_cast<size_t>(i)]; }
  int64_t at(int64_t i) const { return v[static_cast<size_t>(i)]; }
};

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
  }
};

/// Shared-ownership handle to a dense floating tensor. Copying a Tensor
/// aliases the underlying storage; clone() deep-copies.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() : d_(std::make_shared<TensorData<T>>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.d_->shape = std::move(shape);
    t.d_->value.assign(static_cast<size_t>(numel_of(t.d_->shape)), T(0));
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor empty(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.d_->shape = std::move(shape);
    t.d_->value.resize(static_cast<size_t>(numel_of(t.d_->shape)));
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    Tensor t = empty(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), fill);
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from_vector({1}, {v}, requires_grad);
  }

  static Tensor from_vector(Shape shape, std::vector<T> vals, bool requires_grad = false) {
    Tensor t;
    check(numel_of(shape) == static_cast<int64_t>(vals.size()),
          "Tensor: shape " + shape_str(shape) + " does not match value count " +
              std::to_string(vals.size()));
    t.d_->shape = std::move(shape);
    t.d_->value = std::move(vals);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  const Shape& shape() const { return d_->shape; }
  int64_t dim(int i) const {
    int r = rank();
    if (i < 0) i += r;
    check(i >= 0 && i < r, "Tensor::dim out of range");
    return d_->shape[static_cast<size_t>(i)];
  }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int64_t numel() const { return d_->numel(); }
  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  std::span<T> data() { return {d_->value.data(), d_->value.size()}; }
  std::span<const T> data() const { return {d_->value.data(), d_->value.size()}; }
  std::span<T> grad() {
    d_->ensure_grad();
    return {d_->grad.data(), d_->grad.size()};
  }
  bool has_grad() const { return !d_->grad.empty(); }
  void zero_grad() { d_->zero_grad(); }

  T item() const {
    check(numel() == 1, "Tensor::item requires a single-element tensor, got " +
                            shape_str(shape()));
    return d_->value[0];
  }

  Tensor clone() const {
    Tensor t;
    *t.d_ = *d_;
    return t;
  }

  /// Detached deep copy (no grad buffer, requires_grad=false).
  Tensor detached_copy() const {
    Tensor t;
    t.d_->shape = d_->shape;
    t.d_->value = d_->value;
    t.d_->requires_grad = false;
    return t;
  }

  bool same_storage(const Tensor& o) const { return d_ == o.d_; }

  std::shared_ptr<TensorData<T>> ptr() const { return d_; }

 private:
  std::shared_ptr<TensorData<T>> d_;
};

}  // namespace phasor
