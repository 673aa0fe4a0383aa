#pragma once

// Dense row-major matrices with tape-free reverse-mode differentiation.
//
// Every op returns a Tensor whose node remembers its parents and a backward
// rule. backward(loss) walks the reachable graph in reverse topological order
// and accumulates into every node that requires a gradient. Graphs are owned
// by the tensors that reference them, so independent forward passes on
// different threads never share mutable state; parameters are only read.
//
// Element type is float for training and double for gradient checks; both
// are instantiated in tensor.cpp.

#include <array>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "slm/random.hpp"

namespace slm::ad {

template <typename T>
struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor constant(std::size_t rows, std::size_t cols,
                         std::vector<T> values);
  static Tensor zeros(std::size_t rows, std::size_t cols);
  // A leaf that collects gradients.
  static Tensor parameter(std::size_t rows, std::size_t cols,
                          std::vector<T> values);

  bool defined() const { return node_ != nullptr; }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }
  std::array<std::size_t, 2> shape() const { return {rows(), cols()}; }

  std::span<const T> value() const { return node_->value; }
  std::span<T> mutable_value() { return node_->value; }
  T at(std::size_t r, std::size_t c) const {
    return node_->value[r * node_->cols + c];
  }
  // Value of a 1x1 tensor.
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void clear_grad() { node_->grad.clear(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Contiguous block of rows belonging to one sequence of a packed batch.
struct Segment {
  std::size_t offset = 0;
  std::size_t length = 0;
};

// Populates gradients of everything reachable from a 1x1 loss.
template <typename T>
void backward(const Tensor<T>& loss);

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b,
                 bool transpose_b = false);
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
// a + row, broadcast over rows of a.
template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t begin,
                std::size_t count);
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids);
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis);
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, int axis);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T>
Tensor<T> relu(const Tensor<T>& a);
// Scale-only root-mean-square normalization of each row; gain is 1 x cols.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& a, const Tensor<T>& gain,
                   T eps = T(1e-6));
// Inverted dropout; identity when !training or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double p, bool training, Rng& rng);
template <typename T>
Tensor<T> sum(const Tensor<T>& a);
// Mean token-level cross-entropy of logits rows against target ids.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets);
// Mean elementwise binary cross-entropy of logits against 0/1 labels.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const std::type_identity_t<T>> labels);

// Multi-head scaled dot-product attention over packed sequences. Query
// segment i attends to key segment i; with `causal`, query row t only sees
// key rows <= t of its segment (segments must then have equal lengths).
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k,
                    const Tensor<T>& v, std::span<const Segment> q_segments,
                    std::span<const Segment> k_segments, std::size_t heads,
                    bool causal);

// Per column k of each segment: out^(k) = sum_t softmax_t(v^(k))_t v_t^(k).
// One output row per segment.
template <typename T>
Tensor<T> attention_pool(const Tensor<T>& v,
                         std::span<const Segment> segments);

}  // namespace slm::ad
