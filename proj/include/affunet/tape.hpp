#pragma once

#include <unordered_set>

#include "affunet/tensor.hpp"

namespace affunet {

// Reverse-mode tape. Ops append a node per recorded output, so the node list
// is in topological order by construction; backward() replays it in reverse.
// Recording happens through the thread-local active tape installed by a
// Tape::Scope, one tape per training step.
template <typename T>
class Tape {
 public:
  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(active()) { active() = &t; }
    ~Scope() { active() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  void record(const Tensor<T>& out, std::function<void()> backward) {
    nodes_.push_back(std::move(backward));
    if (outputs_.insert(out.id()).second) output_tensors_.push_back(out);
  }

  bool recorded(const Tensor<T>& t) const { return outputs_.count(t.id()) > 0; }
  size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    outputs_.clear();
    output_tensors_.clear();
    consumed_ = false;
  }

  // Seeds root's gradient with 1 and propagates through every recorded node.
  // root must be a scalar produced on this tape.
  void backward(Tensor<T>& root, bool retain = false) {
    if (root.numel() != 1)
      throw std::invalid_argument("backward: root must be scalar, got shape " +
                                  shape_str(root.shape()));
    if (!recorded(root))
      throw std::invalid_argument("backward: root tensor is detached from this tape");
    if (consumed_)
      throw std::logic_error(
          "backward: tape already consumed; re-record the forward pass or pass retain=true");
    // Intermediate grads are scratch space per pass; only leaves accumulate.
    for (auto& t : output_tensors_) t.zero_grad();
    if (!root.has_grad()) root.set_requires_grad(true);
    root.grad()[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    if (!retain) consumed_ = true;
  }

 private:
  std::vector<std::function<void()>> nodes_;
  std::unordered_set<const void*> outputs_;
  std::vector<Tensor<T>> output_tensors_;
  bool consumed_ = false;
};

// True when the active tape should record an op whose inputs include a
// gradient-requiring tensor.
template <typename T>
inline bool recording(std::initializer_list<bool> requires_any) {
  if (Tape<T>::active() == nullptr) return false;
  for (bool r : requires_any)
    if (r) return true;
  return false;
}

template <typename T>
inline T* grad_buffer(Tensor<T>& t) {
  if (!t.has_grad()) t.set_requires_grad(true);
  return t.grad();
}

}  // namespace affunet
