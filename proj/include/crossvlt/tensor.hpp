#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "crossvlt/errors.hpp"

namespace crossvlt {

/// Dense row-major matrix. Every activation is stored as (rows, channels),
/// with batches stacked along rows.
template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One byte per key; nonzero marks a padded position that must not be
/// attended to. Length is batch * keys_per_sample.
using KeyPadding = std::vector<std::uint8_t>;

template <class T>
class Tape;

/// Handle to a node on a Tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Matrix<T>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

/// Reverse-mode autodiff record. Nodes are appended in evaluation order and
/// never move (deque storage), so references returned by value() stay valid.
///
/// A tape built with `record = false` keeps values only; use it for
/// inference.
template <class T>
class Tape {
 public:
  /// Called with the node's own value and its accumulated gradient.
  using Backward =
      std::function<void(Tape&, const Matrix<T>& out, const Matrix<T>& grad)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Matrix<T> value) {
    return push(std::move(value), false, nullptr);
  }

  /// Binds a named parameter by reference. Repeated binds of the same path
  /// return the same node so gradients accumulate in one place.
  Var<T> parameter(const std::string& path, const Matrix<T>& value) {
    if (auto it = params_.find(path); it != params_.end()) {
      return {this, it->second};
    }
    Node node;
    node.ref = &value;
    node.needs_grad = record_;
    nodes_.push_back(std::move(node));
    const int id = static_cast<int>(nodes_.size()) - 1;
    params_.emplace(path, id);
    return {this, id};
  }

  /// Appends a computed node. `backward` is dropped unless the tape records
  /// and `needs_grad` holds.
  Var<T> push(Matrix<T> value, bool needs_grad, Backward backward) {
    Node node;
    node.owned = std::move(value);
    node.needs_grad = record_ && needs_grad;
    if (node.needs_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Matrix<T>& value(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    return n.ref ? *n.ref : n.owned;
  }

  bool needs_grad(Var<T> v) const { return nodes_.at(v.id).needs_grad; }

  /// Gradient buffer of `v`, zero-initialised on first access.
  Matrix<T>& grad(Var<T> v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.size() == 0) {
      const auto& val = n.ref ? *n.ref : n.owned;
      n.grad = Matrix<T>::Zero(val.rows(), val.cols());
    }
    return n.grad;
  }

  bool has_grad(Var<T> v) const { return nodes_.at(v.id).grad.size() != 0; }

  /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates.
  void backward(Var<T> root) {
    if (!record_) throw UsageError("backward() on a non-recording tape");
    if (value(root).size() != 1) {
      throw ShapeError("backward() needs a scalar root");
    }
    grad(root).setOnes();
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.backward && n.grad.size() != 0) {
        n.backward(*this, n.ref ? *n.ref : n.owned, n.grad);
      }
    }
  }

  const std::map<std::string, int>& parameters() const { return params_; }

  /// Gradients of every bound parameter; unreached parameters get zeros.
  std::map<std::string, Matrix<T>> parameter_gradients() {
    std::map<std::string, Matrix<T>> out;
    for (const auto& [path, id] : params_) out.emplace(path, grad({this, id}));
    return out;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> owned;
    const Matrix<T>* ref = nullptr;
    Matrix<T> grad;
    bool needs_grad = false;
    Backward backward;
  };

  std::deque<Node> nodes_;
  std::map<std::string, int> params_;
  bool record_;
};

template <class T>
bool any_needs_grad(std::initializer_list<Var<T>> vars) {
  for (const auto& v : vars) {
    if (v.valid() && v.tape->needs_grad(v)) return true;
  }
  return false;
}

template <class T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw UsageError("operands live on different tapes");
}

}  // namespace crossvlt
