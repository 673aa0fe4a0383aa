#include "slm/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "slm/error.hpp"

namespace slm::ad {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const Mat<T>>;
template <typename T>
using Strided = Eigen::Map<Mat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStrided = Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
ConstMapMat<T> view(const Node<T>& n) {
  return ConstMapMat<T>(n.value.data(), static_cast<Eigen::Index>(n.rows),
                        static_cast<Eigen::Index>(n.cols));
}

template <typename T>
MapMat<T> grad_view(Node<T>& n) {
  n.ensure_grad();
  return MapMat<T>(n.grad.data(), static_cast<Eigen::Index>(n.rows),
                   static_cast<Eigen::Index>(n.cols));
}

std::string shape_str(std::size_t r, std::size_t c) {
  return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
}

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
  for (T x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

// Wraps an op result. The backward rule is kept only when recording is on
// and some input wants a gradient.
template <typename T>
Tensor<T> make_result(const char* op, std::size_t rows, std::size_t cols,
                      std::vector<T> value,
                      std::vector<NodePtr<T>> parents,
                      std::function<void(Node<T>&)> backward_fn) {
  check_finite(value, op);
  auto node = std::make_shared<Node<T>>();
  node->rows = rows;
  node->cols = cols;
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.rows(), a.cols()) + " vs " +
                         shape_str(b.rows(), b.cols()));
  }
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

template <typename T>
Tensor<T> Tensor<T>::constant(std::size_t rows, std::size_t cols,
                              std::vector<T> values) {
  if (values.size() != rows * cols) {
    throw DimensionError("constant: " + std::to_string(values.size()) +
                         " values for shape " + shape_str(rows, cols));
  }
  auto node = std::make_shared<Node<T>>();
  node->rows = rows;
  node->cols = cols;
  node->value = std::move(values);
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(std::size_t rows, std::size_t cols) {
  return constant(rows, cols, std::vector<T>(rows * cols, T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::parameter(std::size_t rows, std::size_t cols,
                               std::vector<T> values) {
  Tensor t = constant(rows, cols, std::move(values));
  t.node_->requires_grad = true;
  return t;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) {
    throw DimensionError("item() on tensor of shape " +
                         shape_str(rows(), cols()));
  }
  return node_->value[0];
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw PreconditionError("backward() requires a scalar loss");
  }
  // Iterative post-order DFS for a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    Node<T>* node = stack.back().first;
    const std::size_t next = stack.back().second;
    if (next < node->parents.size()) {
      ++stack.back().second;
      Node<T>* p = node->parents[next].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  Node<T>* root = loss.node().get();
  root->ensure_grad();
  root->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  const std::size_t inner = transpose_b ? b.cols() : b.rows();
  const std::size_t out_cols = transpose_b ? b.rows() : b.cols();
  if (a.cols() != inner) {
    throw DimensionError("matmul: " + shape_str(a.rows(), a.cols()) + " x " +
                         shape_str(b.rows(), b.cols()) +
                         (transpose_b ? "^T" : ""));
  }
  std::vector<T> out(a.rows() * out_cols);
  MapMat<T> c(out.data(), static_cast<Eigen::Index>(a.rows()),
              static_cast<Eigen::Index>(out_cols));
  if (transpose_b) {
    c.noalias() = view(*a.node()) * view(*b.node()).transpose();
  } else {
    c.noalias() = view(*a.node()) * view(*b.node());
  }
  return make_result<T>(
      "matmul", a.rows(), out_cols, std::move(out), {a.node(), b.node()},
      [transpose_b](Node<T>& self) {
        Node<T>& an = *self.parents[0];
        Node<T>& bn = *self.parents[1];
        ConstMapMat<T> dc(self.grad.data(),
                          static_cast<Eigen::Index>(self.rows),
                          static_cast<Eigen::Index>(self.cols));
        if (an.requires_grad) {
          if (transpose_b) {
            grad_view(an).noalias() += dc * view(bn);
          } else {
            grad_view(an).noalias() += dc * view(bn).transpose();
          }
        }
        if (bn.requires_grad) {
          if (transpose_b) {
            grad_view(bn).noalias() += dc.transpose() * view(an);
          } else {
            grad_view(bn).noalias() += view(an).transpose() * dc;
          }
        }
      });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>("add", a.rows(), a.cols(), std::move(out),
                        {a.node(), b.node()}, [](Node<T>& self) {
                          for (auto& p : self.parents) {
                            if (!p->requires_grad) continue;
                            p->ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                              p->grad[i] += self.grad[i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: row " + shape_str(row.rows(), row.cols()) +
                         " for " + shape_str(a.rows(), a.cols()));
  }
  const std::size_t cols = a.cols();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.value()[i] + row.value()[i % cols];
  }
  return make_result<T>("add_row", a.rows(), cols, std::move(out),
                        {a.node(), row.node()}, [cols](Node<T>& self) {
                          Node<T>& an = *self.parents[0];
                          Node<T>& rn = *self.parents[1];
                          if (an.requires_grad) {
                            an.ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                              an.grad[i] += self.grad[i];
                            }
                          }
                          if (rn.requires_grad) {
                            rn.ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                              rn.grad[i % cols] += self.grad[i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * factor;
  return make_result<T>("scale", a.rows(), a.cols(), std::move(out),
                        {a.node()}, [factor](Node<T>& self) {
                          Node<T>& an = *self.parents[0];
                          an.ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) {
                            an.grad[i] += self.grad[i] * factor;
                          }
                        });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>("mul", a.rows(), a.cols(), std::move(out),
                        {a.node(), b.node()}, [](Node<T>& self) {
                          Node<T>& an = *self.parents[0];
                          Node<T>& bn = *self.parents[1];
                          if (an.requires_grad) {
                            an.ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                              an.grad[i] += self.grad[i] * bn.value[i];
                            }
                          }
                          if (bn.requires_grad) {
                            bn.ensure_grad();
                            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                              bn.grad[i] += self.grad[i] * an.value[i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  if (axis != 0 && axis != 1) throw DimensionError("concat: axis must be 0 or 1");
  std::size_t rows = 0;
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      if (cols != 0 && p.cols() != cols) throw DimensionError("concat: column mismatch");
      cols = p.cols();
      rows += p.rows();
    } else {
      if (rows != 0 && p.rows() != rows) throw DimensionError("concat: row mismatch");
      rows = p.rows();
      cols += p.cols();
    }
  }
  std::vector<T> out;
  out.reserve(rows * cols);
  std::vector<NodePtr<T>> parents;
  if (axis == 0) {
    for (const auto& p : parts) {
      out.insert(out.end(), p.value().begin(), p.value().end());
      parents.push_back(p.node());
    }
  } else {
    out.resize(rows * cols);
    std::size_t col0 = 0;
    for (const auto& p : parts) {
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(p.value().begin() + static_cast<std::ptrdiff_t>(r * p.cols()),
                    p.cols(), out.begin() + static_cast<std::ptrdiff_t>(r * cols + col0));
      }
      col0 += p.cols();
      parents.push_back(p.node());
    }
  }
  return make_result<T>(
      "concat", rows, cols, std::move(out), std::move(parents),
      [axis](Node<T>& self) {
        std::size_t offset = 0;
        for (auto& p : self.parents) {
          if (p->requires_grad) {
            p->ensure_grad();
            for (std::size_t r = 0; r < p->rows; ++r) {
              for (std::size_t c = 0; c < p->cols; ++c) {
                const std::size_t src = axis == 0
                                            ? (offset + r) * self.cols + c
                                            : r * self.cols + offset + c;
                p->grad[r * p->cols + c] += self.grad[src];
              }
            }
          }
          offset += axis == 0 ? p->rows : p->cols;
        }
      });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t begin,
                std::size_t count) {
  if (axis != 0 && axis != 1) throw DimensionError("slice: axis must be 0 or 1");
  const std::size_t extent = axis == 0 ? a.rows() : a.cols();
  if (begin + count > extent) {
    throw DimensionError("slice: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " +
                         std::to_string(extent));
  }
  const std::size_t rows = axis == 0 ? count : a.rows();
  const std::size_t cols = axis == 0 ? a.cols() : count;
  const std::size_t src_cols = a.cols();
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = axis == 0 ? a.value()[(begin + r) * src_cols + c]
                                    : a.value()[r * src_cols + begin + c];
    }
  }
  return make_result<T>("slice", rows, cols, std::move(out), {a.node()},
                        [axis, begin, src_cols](Node<T>& self) {
                          Node<T>& an = *self.parents[0];
                          an.ensure_grad();
                          for (std::size_t r = 0; r < self.rows; ++r) {
                            for (std::size_t c = 0; c < self.cols; ++c) {
                              const std::size_t dst =
                                  axis == 0 ? (begin + r) * src_cols + c
                                            : r * src_cols + begin + c;
                              an.grad[dst] += self.grad[r * self.cols + c];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids) {
  const std::size_t cols = table.cols();
  std::vector<T> out(ids.size() * cols);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows()) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) +
                           " outside table of " + std::to_string(table.rows()) +
                           " rows");
    }
    std::copy_n(table.value().begin() + static_cast<std::ptrdiff_t>(ids[i] * cols),
                cols, out.begin() + static_cast<std::ptrdiff_t>(i * cols));
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return make_result<T>("gather_rows", ids.size(), cols, std::move(out),
                        {table.node()},
                        [idx = std::move(idx), cols](Node<T>& self) {
                          Node<T>& tn = *self.parents[0];
                          tn.ensure_grad();
                          for (std::size_t i = 0; i < idx.size(); ++i) {
                            T* dst = tn.grad.data() + static_cast<std::size_t>(idx[i]) * cols;
                            const T* src = self.grad.data() + i * cols;
                            for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
                          }
                        });
}

namespace {

// Calls fn(offset, stride, count) for every 1-D lane along `axis`.
template <typename Fn>
void for_each_lane(std::size_t rows, std::size_t cols, int axis, Fn&& fn) {
  if (axis == 1) {
    for (std::size_t r = 0; r < rows; ++r) fn(r * cols, std::size_t{1}, cols);
  } else {
    for (std::size_t c = 0; c < cols; ++c) fn(c, cols, rows);
  }
}

template <typename T>
void softmax_lane(const T* in, T* out, std::size_t stride, std::size_t n) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, in[i * stride]);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i * stride] = std::exp(in[i * stride] - mx);
    total += out[i * stride];
  }
  for (std::size_t i = 0; i < n; ++i) out[i * stride] /= total;
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  if (axis != 0 && axis != 1) throw DimensionError("softmax: axis must be 0 or 1");
  std::vector<T> out(a.size());
  for_each_lane(a.rows(), a.cols(), axis,
                [&](std::size_t off, std::size_t stride, std::size_t n) {
                  softmax_lane(a.value().data() + off, out.data() + off, stride, n);
                });
  return make_result<T>(
      "softmax", a.rows(), a.cols(), std::move(out), {a.node()},
      [axis](Node<T>& self) {
        Node<T>& an = *self.parents[0];
        an.ensure_grad();
        for_each_lane(self.rows, self.cols, axis,
                      [&](std::size_t off, std::size_t stride, std::size_t n) {
                        T dot = 0;
                        for (std::size_t i = 0; i < n; ++i) {
                          const std::size_t j = off + i * stride;
                          dot += self.grad[j] * self.value[j];
                        }
                        for (std::size_t i = 0; i < n; ++i) {
                          const std::size_t j = off + i * stride;
                          an.grad[j] += self.value[j] * (self.grad[j] - dot);
                        }
                      });
      });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, int axis) {
  if (axis != 0 && axis != 1) throw DimensionError("log_softmax: axis must be 0 or 1");
  std::vector<T> out(a.size());
  for_each_lane(a.rows(), a.cols(), axis,
                [&](std::size_t off, std::size_t stride, std::size_t n) {
                  const T* in = a.value().data() + off;
                  T mx = -std::numeric_limits<T>::infinity();
                  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, in[i * stride]);
                  T total = 0;
                  for (std::size_t i = 0; i < n; ++i) total += std::exp(in[i * stride] - mx);
                  const T lse = mx + std::log(total);
                  for (std::size_t i = 0; i < n; ++i) out[off + i * stride] = in[i * stride] - lse;
                });
  return make_result<T>(
      "log_softmax", a.rows(), a.cols(), std::move(out), {a.node()},
      [axis](Node<T>& self) {
        Node<T>& an = *self.parents[0];
        an.ensure_grad();
        for_each_lane(self.rows, self.cols, axis,
                      [&](std::size_t off, std::size_t stride, std::size_t n) {
                        T total = 0;
                        for (std::size_t i = 0; i < n; ++i) total += self.grad[off + i * stride];
                        for (std::size_t i = 0; i < n; ++i) {
                          const std::size_t j = off + i * stride;
                          an.grad[j] += self.grad[j] - std::exp(self.value[j]) * total;
                        }
                      });
      });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.value()[i];
    out[i] = x >= 0 ? T(1) / (T(1) + std::exp(-x))
                    : std::exp(x) / (T(1) + std::exp(x));
  }
  return make_result<T>("sigmoid", a.rows(), a.cols(), std::move(out),
                        {a.node()}, [](Node<T>& self) {
                          Node<T>& an = *self.parents[0];
                          an.ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) {
                            const T s = self.value[i];
                            an.grad[i] += self.grad[i] * s * (T(1) - s);
                          }
                        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.value()[i], T(0));
  return make_result<T>("relu", a.rows(), a.cols(), std::move(out), {a.node()},
                        [](Node<T>& self) {
                          Node<T>& an = *self.parents[0];
                          an.ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) {
                            if (self.value[i] > 0) an.grad[i] += self.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& a, const Tensor<T>& gain, T eps) {
  if (gain.rows() != 1 || gain.cols() != a.cols()) {
    throw DimensionError("rms_norm: gain " + shape_str(gain.rows(), gain.cols()) +
                         " for " + shape_str(a.rows(), a.cols()));
  }
  const std::size_t rows = a.rows();
  const std::size_t cols = a.cols();
  std::vector<T> out(a.size());
  std::vector<T> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.value().data() + r * cols;
    T ms = 0;
    for (std::size_t c = 0; c < cols; ++c) ms += x[c] * x[c];
    ms /= static_cast<T>(cols);
    inv_rms[r] = T(1) / std::sqrt(ms + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = x[c] * inv_rms[r] * gain.value()[c];
    }
  }
  return make_result<T>(
      "rms_norm", rows, cols, std::move(out), {a.node(), gain.node()},
      [inv_rms = std::move(inv_rms)](Node<T>& self) {
        Node<T>& an = *self.parents[0];
        Node<T>& gn = *self.parents[1];
        const std::size_t cols = self.cols;
        if (gn.requires_grad) gn.ensure_grad();
        if (an.requires_grad) an.ensure_grad();
        for (std::size_t r = 0; r < self.rows; ++r) {
          const T* x = an.value.data() + r * cols;
          const T* dy = self.grad.data() + r * cols;
          const T ir = inv_rms[r];
          T proj = 0;
          for (std::size_t c = 0; c < cols; ++c) {
            const T xhat = x[c] * ir;
            if (gn.requires_grad) gn.grad[c] += dy[c] * xhat;
            proj += dy[c] * gn.value[c] * xhat;
          }
          proj /= static_cast<T>(cols);
          if (an.requires_grad) {
            T* dx = an.grad.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) {
              dx[c] += ir * (dy[c] * gn.value[c] - x[c] * ir * proj);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw PreconditionError("dropout probability must lie in [0, 1)");
  }
  if (!training || p == 0.0) return a;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(a.size());
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = uniform_unit(rng) < p ? T(0) : keep_scale;
    out[i] = a.value()[i] * mask[i];
  }
  return make_result<T>("dropout", a.rows(), a.cols(), std::move(out),
                        {a.node()}, [mask = std::move(mask)](Node<T>& self) {
                          Node<T>& an = *self.parents[0];
                          an.ensure_grad();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) {
                            an.grad[i] += self.grad[i] * mask[i];
                          }
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T x : a.value()) total += x;
  return make_result<T>("sum", 1, 1, {total}, {a.node()}, [](Node<T>& self) {
    Node<T>& an = *self.parents[0];
    an.ensure_grad();
    for (T& g : an.grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  if (targets.size() != logits.rows() || targets.empty()) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(logits.rows()) +
                         " rows");
  }
  const std::size_t rows = logits.rows();
  const std::size_t cols = logits.cols();
  std::vector<T> probs(logits.size());
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= cols) {
      throw DimensionError("cross_entropy: target id " + std::to_string(t) +
                           " outside " + std::to_string(cols) + " classes");
    }
    softmax_lane(logits.value().data() + r * cols, probs.data() + r * cols,
                 1, cols);
    const T* x = logits.value().data() + r * cols;
    const T mx = *std::max_element(x, x + cols);
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(x[c] - mx);
    loss += mx + std::log(total) - x[t];
  }
  loss /= static_cast<T>(rows);
  std::vector<int> tg(targets.begin(), targets.end());
  return make_result<T>(
      "cross_entropy", 1, 1, {loss}, {logits.node()},
      [probs = std::move(probs), tg = std::move(tg), cols](Node<T>& self) {
        Node<T>& ln = *self.parents[0];
        ln.ensure_grad();
        const T g = self.grad[0] / static_cast<T>(tg.size());
        for (std::size_t r = 0; r < tg.size(); ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            const T onehot = static_cast<int>(c) == tg[r] ? T(1) : T(0);
            ln.grad[r * cols + c] += g * (probs[r * cols + c] - onehot);
          }
        }
      });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const std::type_identity_t<T>> labels) {
  if (labels.size() != logits.size() || labels.empty()) {
    throw DimensionError("bce_with_logits: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(logits.size()) +
                         " logits");
  }
  T loss = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const T x = logits.value()[i];
    loss += std::max(x, T(0)) - x * labels[i] + std::log1p(std::exp(-std::abs(x)));
  }
  loss /= static_cast<T>(labels.size());
  std::vector<T> lb(labels.begin(), labels.end());
  return make_result<T>(
      "bce_with_logits", 1, 1, {loss}, {logits.node()},
      [lb = std::move(lb)](Node<T>& self) {
        Node<T>& ln = *self.parents[0];
        ln.ensure_grad();
        const T g = self.grad[0] / static_cast<T>(lb.size());
        for (std::size_t i = 0; i < lb.size(); ++i) {
          const T x = ln.value[i];
          const T s = x >= 0 ? T(1) / (T(1) + std::exp(-x))
                             : std::exp(x) / (T(1) + std::exp(x));
          ln.grad[i] += g * (s - lb[i]);
        }
      });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    std::span<const Segment> q_segments,
                    std::span<const Segment> k_segments, std::size_t heads,
                    bool causal) {
  const std::size_t d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw DimensionError("attention: q/k/v widths differ");
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("attention: width not divisible by head count");
  }
  if (q_segments.size() != k_segments.size()) {
    throw DimensionError("attention: segment count mismatch");
  }
  for (std::size_t s = 0; s < q_segments.size(); ++s) {
    if (q_segments[s].offset + q_segments[s].length > q.rows() ||
        k_segments[s].offset + k_segments[s].length > k.rows() ||
        k_segments[s].length == 0) {
      throw DimensionError("attention: segment outside packed rows");
    }
    if (causal && q_segments[s].length != k_segments[s].length) {
      throw DimensionError("attention: causal segments must match in length");
    }
  }
  const std::size_t dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  const auto di = static_cast<Eigen::Index>(d);
  const auto dhi = static_cast<Eigen::Index>(dh);

  // Attention weights per (segment, head), kept for the backward pass.
  std::vector<std::vector<T>> weights(q_segments.size() * heads);
  std::vector<T> out(q.rows() * d, T(0));
  for (std::size_t s = 0; s < q_segments.size(); ++s) {
    const auto ql = static_cast<Eigen::Index>(q_segments[s].length);
    const auto kl = static_cast<Eigen::Index>(k_segments[s].length);
    for (std::size_t h = 0; h < heads; ++h) {
      ConstStrided<T> qs(q.value().data() + q_segments[s].offset * d + h * dh, ql, dhi,
                         Eigen::OuterStride<>(di));
      ConstStrided<T> ks(k.value().data() + k_segments[s].offset * d + h * dh, kl, dhi,
                         Eigen::OuterStride<>(di));
      ConstStrided<T> vs(v.value().data() + k_segments[s].offset * d + h * dh, kl, dhi,
                         Eigen::OuterStride<>(di));
      auto& w = weights[s * heads + h];
      w.resize(static_cast<std::size_t>(ql * kl));
      MapMat<T> p(w.data(), ql, kl);
      p.noalias() = (qs * ks.transpose()) * inv_sqrt;
      for (Eigen::Index i = 0; i < ql; ++i) {
        const Eigen::Index visible = causal ? i + 1 : kl;
        T* row = w.data() + i * kl;
        softmax_lane(row, row, 1, static_cast<std::size_t>(visible));
        for (Eigen::Index j = visible; j < kl; ++j) row[j] = 0;
      }
      Strided<T> os(out.data() + q_segments[s].offset * d + h * dh, ql, dhi,
                    Eigen::OuterStride<>(di));
      os.noalias() = p * vs;
    }
  }
  std::vector<Segment> qseg(q_segments.begin(), q_segments.end());
  std::vector<Segment> kseg(k_segments.begin(), k_segments.end());
  return make_result<T>(
      "attention", q.rows(), d, std::move(out), {q.node(), k.node(), v.node()},
      [weights = std::move(weights), qseg = std::move(qseg),
       kseg = std::move(kseg), heads, dh, inv_sqrt](Node<T>& self) {
        Node<T>& qn = *self.parents[0];
        Node<T>& kn = *self.parents[1];
        Node<T>& vn = *self.parents[2];
        const std::size_t d = self.cols;
        const auto di = static_cast<Eigen::Index>(d);
        const auto dhi = static_cast<Eigen::Index>(dh);
        for (auto* n : {&qn, &kn, &vn}) {
          if (n->requires_grad) n->ensure_grad();
        }
        std::vector<T> dp;
        for (std::size_t s = 0; s < qseg.size(); ++s) {
          const auto ql = static_cast<Eigen::Index>(qseg[s].length);
          const auto kl = static_cast<Eigen::Index>(kseg[s].length);
          const std::size_t qo = qseg[s].offset * d;
          const std::size_t ko = kseg[s].offset * d;
          for (std::size_t h = 0; h < heads; ++h) {
            ConstMapMat<T> p(weights[s * heads + h].data(), ql, kl);
            ConstStrided<T> dout(self.grad.data() + qo + h * dh, ql, dhi,
                                 Eigen::OuterStride<>(di));
            ConstStrided<T> qs(qn.value.data() + qo + h * dh, ql, dhi,
                               Eigen::OuterStride<>(di));
            ConstStrided<T> ks(kn.value.data() + ko + h * dh, kl, dhi,
                               Eigen::OuterStride<>(di));
            ConstStrided<T> vs(vn.value.data() + ko + h * dh, kl, dhi,
                               Eigen::OuterStride<>(di));
            if (vn.requires_grad) {
              Strided<T> dv(vn.grad.data() + ko + h * dh, kl, dhi,
                            Eigen::OuterStride<>(di));
              dv.noalias() += p.transpose() * dout;
            }
            if (!qn.requires_grad && !kn.requires_grad) continue;
            dp.resize(static_cast<std::size_t>(ql * kl));
            MapMat<T> ds(dp.data(), ql, kl);
            ds.noalias() = dout * vs.transpose();
            for (Eigen::Index i = 0; i < ql; ++i) {
              T dot = 0;
              for (Eigen::Index j = 0; j < kl; ++j) dot += ds(i, j) * p(i, j);
              for (Eigen::Index j = 0; j < kl; ++j) {
                ds(i, j) = p(i, j) * (ds(i, j) - dot) * inv_sqrt;
              }
            }
            if (qn.requires_grad) {
              Strided<T> dq(qn.grad.data() + qo + h * dh, ql, dhi,
                            Eigen::OuterStride<>(di));
              dq.noalias() += ds * ks;
            }
            if (kn.requires_grad) {
              Strided<T> dk(kn.grad.data() + ko + h * dh, kl, dhi,
                            Eigen::OuterStride<>(di));
              dk.noalias() += ds.transpose() * qs;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> attention_pool(const Tensor<T>& v, std::span<const Segment> segments) {
  const std::size_t cols = v.cols();
  std::vector<T> out(segments.size() * cols, T(0));
  std::vector<T> alpha(v.size(), T(0));
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const Segment seg = segments[s];
    if (seg.length == 0 || seg.offset + seg.length > v.rows()) {
      throw DimensionError("attention_pool: segment outside rows");
    }
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t off = seg.offset * cols + c;
      softmax_lane(v.value().data() + off, alpha.data() + off, cols, seg.length);
      T acc = 0;
      for (std::size_t t = 0; t < seg.length; ++t) {
        acc += alpha[off + t * cols] * v.value()[off + t * cols];
      }
      out[s * cols + c] = acc;
    }
  }
  std::vector<Segment> segs(segments.begin(), segments.end());
  return make_result<T>(
      "attention_pool", segments.size(), cols, std::move(out), {v.node()},
      [alpha = std::move(alpha), segs = std::move(segs), cols](Node<T>& self) {
        Node<T>& vn = *self.parents[0];
        vn.ensure_grad();
        // d out / d v_t = alpha_t (1 + v_t - out)
        for (std::size_t s = 0; s < segs.size(); ++s) {
          for (std::size_t c = 0; c < cols; ++c) {
            const T pooled = self.value[s * cols + c];
            const T g = self.grad[s * cols + c];
            for (std::size_t t = 0; t < segs[s].length; ++t) {
              const std::size_t j = (segs[s].offset + t) * cols + c;
              vn.grad[j] += g * alpha[j] * (T(1) + vn.value[j] - pooled);
            }
          }
        }
      });
}

#define SLM_INSTANTIATE(T)                                                     \
  template class Tensor<T>;                                                    \
  template void backward<T>(const Tensor<T>&);                                 \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&, bool);      \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> add_row<T>(const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                            \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);            \
  template Tensor<T> slice<T>(const Tensor<T>&, int, std::size_t, std::size_t); \
  template Tensor<T> gather_rows<T>(const Tensor<T>&, std::span<const int>);   \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);                        \
  template Tensor<T> log_softmax<T>(const Tensor<T>&, int);                    \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                             \
  template Tensor<T> relu<T>(const Tensor<T>&);                                \
  template Tensor<T> rms_norm<T>(const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> dropout<T>(const Tensor<T>&, double, bool, Rng&);         \
  template Tensor<T> sum<T>(const Tensor<T>&);                                 \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, std::span<const int>); \
  template Tensor<T> bce_with_logits<T>(const Tensor<T>&, std::span<const std::type_identity_t<T>>); \
  template Tensor<T> attention<T>(const Tensor<T>&, const Tensor<T>&,          \
                                  const Tensor<T>&, std::span<const Segment>,  \
                                  std::span<const Segment>, std::size_t, bool); \
  template Tensor<T> attention_pool<T>(const Tensor<T>&,                       \
                                       std::span<const Segment>);

SLM_INSTANTIATE(float)
SLM_INSTANTIATE(double)

#undef SLM_INSTANTIATE

}  // namespace slm::ad
