#ifndef LEXNMT_AUTODIFF_HPP
#define LEXNMT_AUTODIFF_HPP

// Minimal reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records every operation as a node holding its value and a closure
// that pushes the node's adjoint back onto its inputs. Nodes are appended in
// evaluation order, so a reverse sweep over the node list is a valid
// topological order. Parameter leaves reference externally owned matrices
// and accumulate their adjoints directly into caller-provided sinks.

#include "lexnmt/numeric.hpp"

#include <Eigen/SparseCore>

#include <cassert>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lexnmt::ad {

template <typename Scalar>
class Tape;

template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  std::size_t index = 0;

  bool valid() const { return tape != nullptr; }
  const MatrixX<Scalar>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <typename Scalar>
class Tape {
 public:
  using MatrixType = MatrixX<Scalar>;
  using Handle = Var<Scalar>;
  using Backward = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Handle constant(MatrixType value) { return push(std::move(value), nullptr); }

  // Leaf bound to an externally owned matrix. The matrix must outlive the
  // tape. When `grad_sink` is non-null, adjoints are added into it.
  Handle parameter(const MatrixType& value, MatrixType* grad_sink) {
    Node node;
    node.external = &value;
    node.sink = record_ ? grad_sink : nullptr;
    nodes_.push_back(std::move(node));
    return Handle{this, nodes_.size() - 1};
  }

  Handle push(MatrixType value, Backward backward) {
    Node node;
    node.value = std::move(value);
    if (record_) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Handle{this, nodes_.size() - 1};
  }

  const MatrixType& value(Handle h) const { return value(h.index); }
  const MatrixType& value(std::size_t i) const {
    const Node& n = nodes_[i];
    return n.external != nullptr ? *n.external : n.value;
  }

  bool has_grad(std::size_t i) const {
    const Node& n = nodes_[i];
    return n.sink != nullptr || n.grad.size() > 0;
  }

  const MatrixType& grad(Handle h) const {
    const Node& n = nodes_[h.index];
    return n.sink != nullptr ? *n.sink : n.grad;
  }

  // Adjoint storage for node i, allocated as zeros on first use.
  MatrixType& grad_ref(std::size_t i) {
    Node& n = nodes_[i];
    if (n.sink != nullptr) return *n.sink;
    if (n.grad.size() == 0) {
      const MatrixType& v = value(i);
      n.grad.setZero(v.rows(), v.cols());
    }
    return n.grad;
  }

  // Whether node i can propagate anything: either a parameter with a sink or
  // an interior node with a backward closure.
  bool wants_grad(std::size_t i) const {
    const Node& n = nodes_[i];
    return n.sink != nullptr || static_cast<bool>(n.backward);
  }

  void backward(Handle output) {
    if (!record_) throw std::logic_error("backward() on a tape that does not record");
    const MatrixType& out = value(output);
    if (out.rows() != 1 || out.cols() != 1)
      throw std::invalid_argument("backward() requires a scalar output");
    grad_ref(output.index).setOnes();
    for (std::size_t i = output.index + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, i);
    }
  }

  // Drops every node recorded after `mark`. Handles into the dropped range
  // become dangling.
  void truncate(std::size_t mark) {
    if (mark < nodes_.size()) nodes_.erase(nodes_.begin() + static_cast<std::ptrdiff_t>(mark), nodes_.end());
  }

 private:
  struct Node {
    MatrixType value;
    const MatrixType* external = nullptr;
    MatrixType grad;
    MatrixType* sink = nullptr;
    Backward backward;
  };

  bool record_;
  std::vector<Node> nodes_;
};

namespace detail {

template <typename Scalar>
void check_same_shape(const MatrixX<Scalar>& a, const MatrixX<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
}

template <typename Scalar>
void add_to(Tape<Scalar>& t, std::size_t target, const auto& delta) {
  if (t.wants_grad(target)) t.grad_ref(target) += delta;
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> product(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>& t = *a.tape;
  if (a.cols() != b.rows())
    throw std::invalid_argument("product: inner dimension mismatch " + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()));
  MatrixX<Scalar> out = a.value() * b.value();
  const std::size_t ia = a.index, ib = b.index;
  return t.push(std::move(out), [ia, ib](Tape<Scalar>& tp, std::size_t self) {
    const MatrixX<Scalar>& g = tp.grad(Var<Scalar>{&tp, self});
    if (tp.wants_grad(ia)) tp.grad_ref(ia).noalias() += g * tp.value(ib).transpose();
    if (tp.wants_grad(ib)) tp.grad_ref(ib).noalias() += tp.value(ia).transpose() * g;
  });
}

// a^T b
template <typename Scalar>
Var<Scalar> transpose_product(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>& t = *a.tape;
  if (a.rows() != b.rows())
    throw std::invalid_argument("transpose_product: dimension mismatch " + std::to_string(a.rows()) + " vs " +
                                std::to_string(b.rows()));
  MatrixX<Scalar> out = a.value().transpose() * b.value();
  const std::size_t ia = a.index, ib = b.index;
  return t.push(std::move(out), [ia, ib](Tape<Scalar>& tp, std::size_t self) {
    const MatrixX<Scalar>& g = tp.grad(Var<Scalar>{&tp, self});
    if (tp.wants_grad(ia)) tp.grad_ref(ia).noalias() += tp.value(ib) * g.transpose();
    if (tp.wants_grad(ib)) tp.grad_ref(ib).noalias() += tp.value(ia) * g;
  });
}

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_shape(a.value(), b.value(), "add");
  const std::size_t ia = a.index, ib = b.index;
  return a.tape->push(a.value() + b.value(), [ia, ib](Tape<Scalar>& tp, std::size_t self) {
    const MatrixX<Scalar>& g = tp.grad(Var<Scalar>{&tp, self});
    detail::add_to(tp, ia, g);
    detail::add_to(tp, ib, g);
  });
}

template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_shape(a.value(), b.value(), "subtract");
  const std::size_t ia = a.index, ib = b.index;
  return a.tape->push(a.value() - b.value(), [ia, ib](Tape<Scalar>& tp, std::size_t self) {
    const MatrixX<Scalar>& g = tp.grad(Var<Scalar>{&tp, self});
    detail::add_to(tp, ia, g);
    if (tp.wants_grad(ib)) tp.grad_ref(ib) -= g;
  });
}

template <typename Scalar>
Var<Scalar> cwise_product(Var<Scalar> a, Var<Scalar> b) {
  detail::check_same_shape(a.value(), b.value(), "cwise_product");
  const std::size_t ia = a.index, ib = b.index;
  MatrixX<Scalar> out = a.value().cwiseProduct(b.value());
  return a.tape->push(std::move(out), [ia, ib](Tape<Scalar>& tp, std::size_t self) {
    const MatrixX<Scalar>& g = tp.grad(Var<Scalar>{&tp, self});
    if (tp.wants_grad(ia)) tp.grad_ref(ia) += g.cwiseProduct(tp.value(ib));
    if (tp.wants_grad(ib)) tp.grad_ref(ib) += g.cwiseProduct(tp.value(ia));
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> a) {
  const std::size_t ia = a.index;
  MatrixX<Scalar> out = (Scalar(1) / (Scalar(1) + (-a.value().array()).exp())).matrix();
  return a.tape->push(std::move(out), [ia](Tape<Scalar>& tp, std::size_t self) {
    if (!tp.wants_grad(ia)) return;
    const auto& y = tp.value(self).array();
    tp.grad_ref(ia).array() += tp.grad(Var<Scalar>{&tp, self}).array() * y * (Scalar(1) - y);
  });
}

template <typename Scalar>
Var<Scalar> tanh(Var<Scalar> a) {
  const std::size_t ia = a.index;
  MatrixX<Scalar> out = a.value().array().tanh().matrix();
  return a.tape->push(std::move(out), [ia](Tape<Scalar>& tp, std::size_t self) {
    if (!tp.wants_grad(ia)) return;
    const auto& y = tp.value(self).array();
    tp.grad_ref(ia).array() += tp.grad(Var<Scalar>{&tp, self}).array() * (Scalar(1) - y.square());
  });
}

template <typename Scalar>
Var<Scalar> one_minus(Var<Scalar> a) {
  const std::size_t ia = a.index;
  MatrixX<Scalar> out = (Scalar(1) - a.value().array()).matrix();
  return a.tape->push(std::move(out), [ia](Tape<Scalar>& tp, std::size_t self) {
    if (tp.wants_grad(ia)) tp.grad_ref(ia) -= tp.grad(Var<Scalar>{&tp, self});
  });
}

template <typename Scalar>
Var<Scalar> log(Var<Scalar> a) {
  const std::size_t ia = a.index;
  MatrixX<Scalar> out = a.value().array().log().matrix();
  return a.tape->push(std::move(out), [ia](Tape<Scalar>& tp, std::size_t self) {
    if (!tp.wants_grad(ia)) return;
    tp.grad_ref(ia).array() += tp.grad(Var<Scalar>{&tp, self}).array() / tp.value(ia).array();
  });
}

template <typename Scalar>
Var<Scalar> exp(Var<Scalar> a) {
  const std::size_t ia = a.index;
  MatrixX<Scalar> out = a.value().array().exp().matrix();
  return a.tape->push(std::move(out), [ia](Tape<Scalar>& tp, std::size_t self) {
    if (!tp.wants_grad(ia)) return;
    tp.grad_ref(ia).array() += tp.grad(Var<Scalar>{&tp, self}).array() * tp.value(self).array();
  });
}

template <typename Scalar>
Var<Scalar> add_scalar(Var<Scalar> a, Scalar s) {
  const std::size_t ia = a.index;
  MatrixX<Scalar> out = (a.value().array() + s).matrix();
  return a.tape->push(std::move(out), [ia](Tape<Scalar>& tp, std::size_t self) {
    detail::add_to(tp, ia, tp.grad(Var<Scalar>{&tp, self}));
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s) {
  const std::size_t ia = a.index;
  return a.tape->push(a.value() * s, [ia, s](Tape<Scalar>& tp, std::size_t self) {
    if (tp.wants_grad(ia)) tp.grad_ref(ia) += s * tp.grad(Var<Scalar>{&tp, self});
  });
}

// Stacks inputs vertically; all inputs must have the same column count.
template <typename Scalar>
Var<Scalar> vconcat(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw std::invalid_argument("vconcat: no inputs");
  Tape<Scalar>& t = *parts.front().tape;
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("vconcat: column count mismatch");
    rows += p.rows();
  }
  MatrixX<Scalar> out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> layout;
  layout.reserve(parts.size());
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    layout.emplace_back(p.index, offset);
    offset += p.rows();
  }
  return t.push(std::move(out), [layout = std::move(layout)](Tape<Scalar>& tp, std::size_t self) {
    const MatrixX<Scalar>& g = tp.grad(Var<Scalar>{&tp, self});
    for (const auto& [idx, off] : layout)
      if (tp.wants_grad(idx)) tp.grad_ref(idx) += g.middleRows(off, tp.value(idx).rows());
  });
}

// Places inputs side by side; all inputs must have the same row count.
template <typename Scalar>
Var<Scalar> hconcat(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw std::invalid_argument("hconcat: no inputs");
  Tape<Scalar>& t = *parts.front().tape;
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("hconcat: row count mismatch");
    cols += p.cols();
  }
  MatrixX<Scalar> out(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> layout;
  layout.reserve(parts.size());
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    layout.emplace_back(p.index, offset);
    offset += p.cols();
  }
  return t.push(std::move(out), [layout = std::move(layout)](Tape<Scalar>& tp, std::size_t self) {
    const MatrixX<Scalar>& g = tp.grad(Var<Scalar>{&tp, self});
    for (const auto& [idx, off] : layout)
      if (tp.wants_grad(idx)) tp.grad_ref(idx) += g.middleCols(off, tp.value(idx).cols());
  });
}

template <typename Scalar>
Var<Scalar> middle_rows(Var<Scalar> a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw std::invalid_argument("middle_rows: out of range");
  const std::size_t ia = a.index;
  MatrixX<Scalar> out = a.value().middleRows(start, count);
  return a.tape->push(std::move(out), [ia, start, count](Tape<Scalar>& tp, std::size_t self) {
    if (tp.wants_grad(ia)) tp.grad_ref(ia).middleRows(start, count) += tp.grad(Var<Scalar>{&tp, self});
  });
}

// Column `j` of `a`; also serves as the embedding lookup.
template <typename Scalar>
Var<Scalar> column(Var<Scalar> a, Eigen::Index j) {
  if (j < 0 || j >= a.cols())
    throw std::out_of_range("column: index " + std::to_string(j) + " outside [0, " + std::to_string(a.cols()) + ")");
  const std::size_t ia = a.index;
  MatrixX<Scalar> out = a.value().col(j);
  return a.tape->push(std::move(out), [ia, j](Tape<Scalar>& tp, std::size_t self) {
    if (tp.wants_grad(ia)) tp.grad_ref(ia).col(j) += tp.grad(Var<Scalar>{&tp, self});
  });
}

template <typename Scalar>
Var<Scalar> replicate_cols(Var<Scalar> a, Eigen::Index n) {
  if (a.cols() != 1) throw std::invalid_argument("replicate_cols: expects a column vector");
  const std::size_t ia = a.index;
  MatrixX<Scalar> out = a.value().replicate(1, n);
  return a.tape->push(std::move(out), [ia](Tape<Scalar>& tp, std::size_t self) {
    if (tp.wants_grad(ia)) tp.grad_ref(ia) += tp.grad(Var<Scalar>{&tp, self}).rowwise().sum();
  });
}

template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> a) {
  if (a.cols() != 1) throw std::invalid_argument("softmax: expects a column vector");
  const std::size_t ia = a.index;
  return a.tape->push(lexnmt::softmax(a.value()), [ia](Tape<Scalar>& tp, std::size_t self) {
    if (!tp.wants_grad(ia)) return;
    const MatrixX<Scalar>& y = tp.value(self);
    const MatrixX<Scalar>& g = tp.grad(Var<Scalar>{&tp, self});
    const Scalar inner = y.cwiseProduct(g).sum();
    tp.grad_ref(ia).array() += y.array() * (g.array() - inner);
  });
}

template <typename Scalar>
Var<Scalar> log_softmax(Var<Scalar> a) {
  if (a.cols() != 1) throw std::invalid_argument("log_softmax: expects a column vector");
  const std::size_t ia = a.index;
  return a.tape->push(lexnmt::log_softmax(a.value()), [ia](Tape<Scalar>& tp, std::size_t self) {
    if (!tp.wants_grad(ia)) return;
    const MatrixX<Scalar>& g = tp.grad(Var<Scalar>{&tp, self});
    const Scalar total = g.sum();
    tp.grad_ref(ia).array() += g.array() - tp.value(self).array().exp() * total;
  });
}

template <typename Scalar>
Var<Scalar> element(Var<Scalar> a, Eigen::Index row, Eigen::Index col = 0) {
  if (row < 0 || row >= a.rows() || col < 0 || col >= a.cols()) throw std::out_of_range("element: index out of range");
  const std::size_t ia = a.index;
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = a.value()(row, col);
  return a.tape->push(std::move(out), [ia, row, col](Tape<Scalar>& tp, std::size_t self) {
    if (tp.wants_grad(ia)) tp.grad_ref(ia)(row, col) += tp.grad(Var<Scalar>{&tp, self})(0, 0);
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  const std::size_t ia = a.index;
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->push(std::move(out), [ia](Tape<Scalar>& tp, std::size_t self) {
    if (tp.wants_grad(ia)) tp.grad_ref(ia).array() += tp.grad(Var<Scalar>{&tp, self})(0, 0);
  });
}

template <typename Scalar>
using SparseMatrixX = Eigen::SparseMatrix<Scalar>;

// Constant sparse matrix times a differentiable dense operand.
template <typename Scalar>
Var<Scalar> sparse_product(std::shared_ptr<const SparseMatrixX<Scalar>> lhs, Var<Scalar> b) {
  if (lhs->cols() != b.rows()) throw std::invalid_argument("sparse_product: inner dimension mismatch");
  const std::size_t ib = b.index;
  MatrixX<Scalar> out = (*lhs) * b.value();
  return b.tape->push(std::move(out), [lhs = std::move(lhs), ib](Tape<Scalar>& tp, std::size_t self) {
    if (tp.wants_grad(ib)) tp.grad_ref(ib) += lhs->transpose() * tp.grad(Var<Scalar>{&tp, self});
  });
}

}  // namespace lexnmt::ad

#endif  // LEXNMT_AUTODIFF_HPP
