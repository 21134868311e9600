// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "phasor/tensor.hpp"

namespace phasor {

// Define-by-run reverse-mode tape. Ops append a backward closure as they
// execute; backward() replays them once, in reverse order. A tape and the
// tensors recorded on it belong to one worker; concurrent workers each
// install their own tape via TapeScope (the active pointer is thread-local).

template <typename T>
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }

  /// Seeds d(root)/d(root)=1 and replays all nodes newest-first.
  void backward(Tensor<T>& root) {
    check(root.numel() == 1, "Tape::backward expects a scalar root, got " +
                                 shape_str(root.shape()));
    root.grad()[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

template <typename T>
inline Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

/// RAII: installs a tape as the current thread's recording target.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(active_tape<T>()) {
    active_tape<T>() = &tape;
  }
  ~TapeScope() { active_tape<T>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

}  // namespace phasor
