#pragma once

// Reverse-mode automatic differentiation over dense 64-bit arrays.
//
// A Tape records every node in creation order, which is a topological order of
// the graph. backward() walks the tape once from the root towards the leaves.
// A node created by stop_gradient() carries grad_blocked = true: it receives an
// adjoint like any other node but never forwards it to its parents.
//
// One tape is meant to live for a single loss evaluation.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace gffm::ad {

using Array = Eigen::MatrixXd;
using NodeId = std::size_t;

enum class OpKind {
  Leaf,
  Add,
  Sub,
  Mul,
  Scale,
  AddScalar,
  MatMul,
  AddBias,
  Gelu,
  Sum,
  Mean,
  SqL2,
  ConcatRows,
  GatherCols,
  WhereCols,
  StopGradient,
};

const char* op_name(OpKind op);

struct DiffNode {
  NodeId id = 0;
  Array value;
  OpKind op = OpKind::Leaf;
  std::vector<NodeId> parents;
  bool grad_blocked = false;

  // Operation payloads.
  double scalar = 0.0;
  std::vector<Eigen::Index> indices;
  std::vector<bool> mask;
};

class Tape;

// Lightweight handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  NodeId id() const noexcept { return id_; }
  Tape& tape() const { return *tape_; }
  const Array& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  // Value of a 1x1 node.
  double scalar() const;

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

using GradientMap = std::unordered_map<NodeId, Array>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaves are parameters, inputs and constants; backward() reports a gradient for each.
  Var leaf(Array value);
  Var leaf(double value);

  const DiffNode& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Gradient of a 1x1 root with respect to every leaf on the tape.
  GradientMap backward(const Var& root) const;

  // Internal: append a node produced by an operation.
  Var record(Array value, OpKind op, std::vector<NodeId> parents);
  DiffNode& mutable_node(NodeId id) { return nodes_.at(id); }

  // Replay mode: the k-th stop_gradient on this tape yields frozen[k] instead of its input.
  // grad_check uses this so finite differences see sg(x) held at the base point.
  void freeze_stop_gradients(std::vector<Array> frozen);
  const Array* next_frozen();

 private:
  std::vector<DiffNode> nodes_;
  std::vector<Array> frozen_;
  std::size_t frozen_next_ = 0;
  bool replay_ = false;
};

// Shapes must match exactly for elementwise operations.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add(const Var& a, double b);
Var scale(const Var& a, double s);
// Matrix product; a matrix times a column vector is a matvec.
Var matmul(const Var& a, const Var& b);
// Adds column vector `bias` to every column of `a`.
Var add_bias(const Var& a, const Var& bias);
// Gaussian-error linear unit, x * Phi(x).
Var gelu(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
// Sum of squared entries.
Var sq_l2(const Var& a);
Var concat_rows(std::span<const Var> parts);
// Output column j is column indices[j] of `table`.
Var gather_cols(const Var& table, std::vector<Eigen::Index> indices);
// Output column j is column j of `a` where mask[j], otherwise of `b`.
Var where_cols(std::vector<bool> mask, const Var& a, const Var& b);
// Identity on values; blocks all adjoint flow into `x` and its ancestors.
Var stop_gradient(const Var& x);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator+(const Var& a, double b) { return add(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }

// Builds a scalar graph from leaves holding `inputs`.
using ScalarGraph = std::function<Var(Tape&, std::span<const Var>)>;

// Max over all input coordinates of |analytic - central difference| / max(1, |analytic|).
double grad_check(const ScalarGraph& f, std::span<const Array> inputs, double eps);
double grad_check(const std::function<Var(Tape&, const Var&)>& f, const Array& x, double eps);

std::string shape_string(const Array& a);

}  // namespace gffm::ad
