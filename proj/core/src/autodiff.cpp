#include "gffm/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "gffm/error.hpp"

namespace gffm::ad {

namespace {

[[noreturn]] void shape_mismatch(const char* op, const Array& a, const Array& b) {
  std::ostringstream os;
  os << op << ": shape mismatch " << shape_string(a) << " vs " << shape_string(b);
  throw ShapeError(os.str());
}

void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw Error("autodiff: operands live on different tapes");
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  require_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) shape_mismatch(op, a.value(), b.value());
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::MatMul: return "matmul";
    case OpKind::AddBias: return "add_bias";
    case OpKind::Gelu: return "gelu";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::SqL2: return "sq_l2";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::GatherCols: return "gather_cols";
    case OpKind::WhereCols: return "where_cols";
    case OpKind::StopGradient: return "stop_gradient";
  }
  return "?";
}

std::string shape_string(const Array& a) {
  std::ostringstream os;
  os << "[" << a.rows() << "x" << a.cols() << "]";
  return os.str();
}

const Array& Var::value() const { return tape_->node(id_).value; }

double Var::scalar() const {
  const Array& v = value();
  if (v.size() != 1) throw ShapeError("scalar(): node has shape " + shape_string(v));
  return v(0, 0);
}

Var Tape::leaf(Array value) { return record(std::move(value), OpKind::Leaf, {}); }

Var Tape::leaf(double value) { return leaf(Array::Constant(1, 1, value)); }

Var Tape::record(Array value, OpKind op, std::vector<NodeId> parents) {
  DiffNode n;
  n.id = nodes_.size();
  n.value = std::move(value);
  n.op = op;
  n.parents = std::move(parents);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.back().id);
}

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  return a.tape().record(a.value() + b.value(), OpKind::Add, {a.id(), b.id()});
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  return a.tape().record(a.value() - b.value(), OpKind::Sub, {a.id(), b.id()});
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  return a.tape().record(a.value().cwiseProduct(b.value()), OpKind::Mul, {a.id(), b.id()});
}

Var add(const Var& a, double b) {
  Var out = a.tape().record(a.value().array() + b, OpKind::AddScalar, {a.id()});
  out.tape().mutable_node(out.id()).scalar = b;
  return out;
}

Var scale(const Var& a, double s) {
  Var out = a.tape().record(s * a.value(), OpKind::Scale, {a.id()});
  out.tape().mutable_node(out.id()).scalar = s;
  return out;
}

Var matmul(const Var& a, const Var& b) {
  require_same_tape(a, b);
  if (a.cols() != b.rows()) shape_mismatch("matmul", a.value(), b.value());
  Array out = a.value() * b.value();
  return a.tape().record(std::move(out), OpKind::MatMul, {a.id(), b.id()});
}

Var add_bias(const Var& a, const Var& bias) {
  require_same_tape(a, bias);
  if (bias.cols() != 1 || bias.rows() != a.rows()) shape_mismatch("add_bias", a.value(), bias.value());
  Array out = a.value().colwise() + bias.value().col(0);
  return a.tape().record(std::move(out), OpKind::AddBias, {a.id(), bias.id()});
}

Var gelu(const Var& a) {
  Array out = a.value().unaryExpr([](double x) { return x * normal_cdf(x); });
  return a.tape().record(std::move(out), OpKind::Gelu, {a.id()});
}

Var sum(const Var& a) {
  return a.tape().record(Array::Constant(1, 1, a.value().sum()), OpKind::Sum, {a.id()});
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw ShapeError("mean: empty array " + shape_string(a.value()));
  return a.tape().record(Array::Constant(1, 1, a.value().mean()), OpKind::Mean, {a.id()});
}

Var sq_l2(const Var& a) {
  return a.tape().record(Array::Constant(1, 1, a.value().squaredNorm()), OpKind::SqL2, {a.id()});
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  std::vector<NodeId> parents;
  parents.reserve(parts.size());
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.cols() != cols) shape_mismatch("concat_rows", parts.front().value(), p.value());
    rows += p.rows();
    parents.push_back(p.id());
  }
  Array out(rows, cols);
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return parts.front().tape().record(std::move(out), OpKind::ConcatRows, std::move(parents));
}

Var gather_cols(const Var& table, std::vector<Eigen::Index> indices) {
  const Array& t = table.value();
  Array out(t.rows(), static_cast<Eigen::Index>(indices.size()));
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const Eigen::Index k = indices[j];
    if (k < 0 || k >= t.cols()) {
      throw ShapeError("gather_cols: index " + std::to_string(k) + " out of range for " + shape_string(t));
    }
    out.col(static_cast<Eigen::Index>(j)) = t.col(k);
  }
  Var v = table.tape().record(std::move(out), OpKind::GatherCols, {table.id()});
  v.tape().mutable_node(v.id()).indices = std::move(indices);
  return v;
}

Var where_cols(std::vector<bool> mask, const Var& a, const Var& b) {
  require_same_shape("where_cols", a, b);
  if (static_cast<Eigen::Index>(mask.size()) != a.cols()) {
    throw ShapeError("where_cols: mask of length " + std::to_string(mask.size()) + " vs " +
                     shape_string(a.value()));
  }
  Array out = b.value();
  for (std::size_t j = 0; j < mask.size(); ++j)
    if (mask[j]) out.col(static_cast<Eigen::Index>(j)) = a.value().col(static_cast<Eigen::Index>(j));
  Var v = a.tape().record(std::move(out), OpKind::WhereCols, {a.id(), b.id()});
  v.tape().mutable_node(v.id()).mask = std::move(mask);
  return v;
}

void Tape::freeze_stop_gradients(std::vector<Array> frozen) {
  frozen_ = std::move(frozen);
  frozen_next_ = 0;
  replay_ = true;
}

const Array* Tape::next_frozen() {
  if (!replay_) return nullptr;
  if (frozen_next_ >= frozen_.size()) throw Error("stop_gradient: replay graph has more stop_gradient nodes than recorded");
  return &frozen_[frozen_next_++];
}

Var stop_gradient(const Var& x) {
  const Array* frozen = x.tape().next_frozen();
  if (frozen != nullptr && (frozen->rows() != x.rows() || frozen->cols() != x.cols())) {
    throw ShapeError("stop_gradient: replayed value has shape " + shape_string(*frozen) + ", input " + shape_string(x.value()));
  }
  Var v = x.tape().record(frozen != nullptr ? *frozen : x.value(), OpKind::StopGradient, {x.id()});
  v.tape().mutable_node(v.id()).grad_blocked = true;
  return v;
}

GradientMap Tape::backward(const Var& root) const {
  if (&root.tape() != this) throw Error("backward: root belongs to another tape");
  const DiffNode& r = nodes_.at(root.id());
  if (r.value.size() != 1) throw ShapeError("backward: root must be scalar, got " + shape_string(r.value));

  std::vector<Array> adj(root.id() + 1);
  auto accumulate = [&](NodeId p, const auto& contribution) {
    if (adj[p].size() == 0) {
      adj[p] = contribution;
    } else {
      adj[p] += contribution;
    }
  };
  adj[root.id()] = Array::Ones(1, 1);

  for (NodeId id = root.id() + 1; id-- > 0;) {
    if (adj[id].size() == 0) continue;
    const DiffNode& n = nodes_[id];
    if (n.grad_blocked) continue;
    const Array& g = adj[id];
    switch (n.op) {
      case OpKind::Leaf:
        break;
      case OpKind::Add:
        accumulate(n.parents[0], g);
        accumulate(n.parents[1], g);
        break;
      case OpKind::Sub:
        accumulate(n.parents[0], g);
        accumulate(n.parents[1], Array(-g));
        break;
      case OpKind::Mul:
        accumulate(n.parents[0], Array(g.cwiseProduct(nodes_[n.parents[1]].value)));
        accumulate(n.parents[1], Array(g.cwiseProduct(nodes_[n.parents[0]].value)));
        break;
      case OpKind::Scale:
        accumulate(n.parents[0], Array(n.scalar * g));
        break;
      case OpKind::AddScalar:
        accumulate(n.parents[0], g);
        break;
      case OpKind::MatMul: {
        const Array& a = nodes_[n.parents[0]].value;
        const Array& b = nodes_[n.parents[1]].value;
        accumulate(n.parents[0], Array(g * b.transpose()));
        accumulate(n.parents[1], Array(a.transpose() * g));
        break;
      }
      case OpKind::AddBias:
        accumulate(n.parents[0], g);
        accumulate(n.parents[1], Array(g.rowwise().sum()));
        break;
      case OpKind::Gelu: {
        const Array& x = nodes_[n.parents[0]].value;
        Array d = x.unaryExpr([](double v) { return normal_cdf(v) + v * normal_pdf(v); });
        accumulate(n.parents[0], Array(g.cwiseProduct(d)));
        break;
      }
      case OpKind::Sum: {
        const Array& x = nodes_[n.parents[0]].value;
        accumulate(n.parents[0], Array::Constant(x.rows(), x.cols(), g(0, 0)));
        break;
      }
      case OpKind::Mean: {
        const Array& x = nodes_[n.parents[0]].value;
        accumulate(n.parents[0], Array::Constant(x.rows(), x.cols(), g(0, 0) / static_cast<double>(x.size())));
        break;
      }
      case OpKind::SqL2: {
        const Array& x = nodes_[n.parents[0]].value;
        accumulate(n.parents[0], Array(2.0 * g(0, 0) * x));
        break;
      }
      case OpKind::ConcatRows: {
        Eigen::Index row = 0;
        for (NodeId p : n.parents) {
          const Eigen::Index rows = nodes_[p].value.rows();
          accumulate(p, Array(g.middleRows(row, rows)));
          row += rows;
        }
        break;
      }
      case OpKind::GatherCols: {
        const Array& t = nodes_[n.parents[0]].value;
        Array d = Array::Zero(t.rows(), t.cols());
        for (std::size_t j = 0; j < n.indices.size(); ++j) d.col(n.indices[j]) += g.col(static_cast<Eigen::Index>(j));
        accumulate(n.parents[0], d);
        break;
      }
      case OpKind::WhereCols: {
        Array da = Array::Zero(g.rows(), g.cols());
        Array db = Array::Zero(g.rows(), g.cols());
        for (std::size_t j = 0; j < n.mask.size(); ++j) {
          const auto c = static_cast<Eigen::Index>(j);
          (n.mask[j] ? da : db).col(c) = g.col(c);
        }
        accumulate(n.parents[0], da);
        accumulate(n.parents[1], db);
        break;
      }
      case OpKind::StopGradient:
        break;  // unreachable: grad_blocked
    }
  }

  GradientMap grads;
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    const DiffNode& n = nodes_[id];
    if (n.op != OpKind::Leaf) continue;
    if (id < adj.size() && adj[id].size() != 0) {
      grads.emplace(id, std::move(adj[id]));
    } else {
      grads.emplace(id, Array::Zero(n.value.rows(), n.value.cols()));
    }
  }
  return grads;
}

double grad_check(const ScalarGraph& f, std::span<const Array> inputs, double eps) {
  if (!(eps > 0.0)) throw NumericError("grad_check: eps must be positive");

  std::vector<Array> frozen;
  auto evaluate = [&](std::span<const Array> xs) {
    Tape tape;
    tape.freeze_stop_gradients(frozen);
    std::vector<Var> leaves;
    leaves.reserve(xs.size());
    for (const Array& x : xs) leaves.push_back(tape.leaf(x));
    const double v = f(tape, leaves).scalar();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
    return v;
  };

  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const Array& x : inputs) leaves.push_back(tape.leaf(x));
  const Var root = f(tape, leaves);
  if (!std::isfinite(root.scalar())) throw NumericError("grad_check: non-finite function value");
  const GradientMap grads = tape.backward(root);
  for (std::size_t id = 0; id < tape.size(); ++id) {
    if (tape.node(id).op == OpKind::StopGradient) frozen.push_back(tape.node(id).value);
  }

  std::vector<Array> probe(inputs.begin(), inputs.end());
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Array& analytic = grads.at(leaves[k].id());
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      const double x0 = inputs[k](i);
      probe[k](i) = x0 + eps;
      const double up = evaluate(probe);
      probe[k](i) = x0 - eps;
      const double down = evaluate(probe);
      probe[k](i) = x0;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic(i);
      if (!std::isfinite(a)) throw NumericError("grad_check: non-finite analytic gradient");
      worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

double grad_check(const std::function<Var(Tape&, const Var&)>& f, const Array& x, double eps) {
  const Array inputs[] = {x};
  return grad_check([&](Tape& t, std::span<const Var> v) { return f(t, v[0]); }, inputs, eps);
}

}  // namespace gffm::ad
