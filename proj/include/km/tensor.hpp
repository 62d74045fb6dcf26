#pragma once

// Reverse-mode autodiff over dense row-major tensors (rank 1 or 2).
//
// Every op allocates a fresh node; nodes carry a globally increasing id, so
// a backward pass can replay the recorded graph in exact reverse creation
// order. Gradient flow through the graph is carried in double precision and
// only materialized into the leaves' grad buffers, which accumulate across
// passes until the owner clears them. Forward kernels also accumulate in
// double before rounding to the storage width.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "km/common.hpp"
#include "km/random.hpp"

namespace km {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Node;
class GradFlow;
using BackwardFn = std::function<void(Node&, GradFlow&)>;

struct Node {
  uint64_t id = 0;
  std::string op;  // empty for leaves
  std::vector<int64_t> shape;
  std::vector<real> data;
  std::vector<real> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward_fn;
  // Reductions keep their exact double result alongside the rounded storage
  // value; scalar reads prefer it so loss values do not inherit a final
  // storage rounding.
  double scalar_hi = 0.0;
  bool has_hi = false;

  double hi() const { return has_hi ? scalar_hi : static_cast<double>(data[0]); }

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
  }
  int64_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  int64_t cols() const { return shape.empty() ? 1 : shape.back(); }
};

inline std::atomic<uint64_t>& node_counter() {
  static std::atomic<uint64_t> counter{0};
  return counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

// Disables graph recording in scope (teacher passes, evaluation).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

inline std::string shape_str(const std::vector<int64_t>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->id = node_counter()++;
    n->shape = std::move(shape);
    n->data.assign(static_cast<size_t>(n->numel()), real(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(std::vector<int64_t> shape, double v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), static_cast<real>(v));
    return t;
  }

  static Tensor from(std::vector<int64_t> shape, std::vector<real> data,
                     bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->id = node_counter()++;
    n->shape = std::move(shape);
    if (static_cast<int64_t>(data.size()) != n->numel())
      throw ShapeError("Tensor::from: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(n->shape));
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return full({1}, v, requires_grad);
  }

  static Tensor gaussian(std::vector<int64_t> shape, double stddev, Rng& rng,
                         bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& x : t.node_->data) x = static_cast<real>(rng.next_gaussian() * stddev);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int64_t>& shape() const { return node_->shape; }
  int64_t numel() const { return node_->numel(); }
  int64_t rows() const { return node_->rows(); }
  int64_t cols() const { return node_->cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  std::vector<real>& data() { return node_->data; }
  const std::vector<real>& data() const { return node_->data; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  std::vector<real>& grad() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), real(0));
    return node_->grad;
  }
  const std::vector<real>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->data.size(), real(0)); }

  real at(int64_t i) const { return node_->data[static_cast<size_t>(i)]; }
  real at(int64_t r, int64_t c) const {
    return node_->data[static_cast<size_t>(r * cols() + c)];
  }
  double value() const {
    if (numel() != 1) throw ShapeError("value(): tensor is not scalar, shape " + shape_str(shape()));
    return node_->hi();
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Per-backward-pass gradient buffers, keyed by node. Double precision so the
// flow does not inherit storage rounding from intermediate tensors.
class GradFlow {
 public:
  std::vector<double>* find(const Node* n) {
    auto it = buf_.find(n);
    return it == buf_.end() ? nullptr : &it->second;
  }
  std::vector<double>& at_or_create(const Node* n) {
    auto& v = buf_[n];
    if (v.empty()) v.assign(static_cast<size_t>(n->numel()), 0.0);
    return v;
  }
  // Push into a parent only when gradient can matter downstream.
  bool wants(const Node* p) const { return p->requires_grad; }

 private:
  std::unordered_map<const Node*, std::vector<double>> buf_;
};

// Collects leaf gradients without touching the leaves' own grad buffers.
// Training uses one sink per batch item so that items can be evaluated on
// worker threads and reduced in a fixed order afterwards.
class GradSink {
 public:
  std::vector<double>& at_or_create(const Node* n) {
    auto& v = buf_[n];
    if (v.empty()) v.assign(static_cast<size_t>(n->numel()), 0.0);
    return v;
  }
  const std::unordered_map<const Node*, std::vector<double>>& entries() const { return buf_; }

 private:
  std::unordered_map<const Node*, std::vector<double>> buf_;
};

namespace detail {

inline Tensor make_op(const char* op, std::vector<int64_t> shape, std::vector<real> data,
                      const std::vector<Tensor>& inputs, BackwardFn fn) {
  auto n = std::make_shared<Node>();
  n->id = node_counter()++;
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool record = grad_mode();
  if (record) {
    record = false;
    for (const auto& t : inputs)
      if (t.requires_grad()) record = true;
  }
  if (record) {
    n->requires_grad = true;
    n->op = op;
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backward_fn = std::move(fn);
  }
  return Tensor(std::move(n));
}

inline Eigen::Map<const Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
map2d(const Node& n) {
  return {n.data.data(), n.rows(), n.cols()};
}

inline MatD to_double(const Node& n) { return map2d(n).cast<double>(); }

inline MatD flow_as_mat(const std::vector<double>& flow, int64_t r, int64_t c) {
  return Eigen::Map<const MatD>(flow.data(), r, c);
}

inline void add_mat(std::vector<double>& dst, const MatD& m) {
  Eigen::Map<MatD>(dst.data(), m.rows(), m.cols()) += m;
}

inline std::vector<real> round_store(const MatD& m) {
  std::vector<real> out(static_cast<size_t>(m.size()));
  Eigen::Map<Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      out.data(), m.rows(), m.cols()) = m.cast<real>();
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.cols() != b.rows())
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  MatD prod = detail::to_double(*a.node()) * detail::to_double(*b.node());
  return detail::make_op(
      "matmul", {a.rows(), b.cols()}, detail::round_store(prod), {a, b},
      [](Node& self, GradFlow& flow) {
        auto* g = flow.find(&self);
        MatD dy = detail::flow_as_mat(*g, self.rows(), self.cols());
        Node* pa = self.parents[0].get();
        Node* pb = self.parents[1].get();
        if (flow.wants(pa))
          detail::add_mat(flow.at_or_create(pa), dy * detail::to_double(*pb).transpose());
        if (flow.wants(pb))
          detail::add_mat(flow.at_or_create(pb), detail::to_double(*pa).transpose() * dy);
      });
}

inline Tensor transpose(const Tensor& a) {
  if (a.shape().size() != 2)
    throw ShapeError("transpose: expected rank-2 tensor, got " + shape_str(a.shape()));
  MatD t = detail::to_double(*a.node()).transpose();
  return detail::make_op("transpose", {a.cols(), a.rows()}, detail::round_store(t), {a},
                         [](Node& self, GradFlow& flow) {
                           auto* g = flow.find(&self);
                           Node* p = self.parents[0].get();
                           if (!flow.wants(p)) return;
                           MatD dy = detail::flow_as_mat(*g, self.rows(), self.cols());
                           detail::add_mat(flow.at_or_create(p), dy.transpose());
                         });
}

namespace detail {

enum class Bcast { Same, Scalar, Row, Col };

inline Bcast bcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Bcast::Same;
  if (b.numel() == 1) return Bcast::Scalar;
  if (a.shape().size() == 2) {
    if ((b.shape().size() == 1 && b.cols() == a.cols()) ||
        (b.shape().size() == 2 && b.rows() == 1 && b.cols() == a.cols()))
      return Bcast::Row;
    if (b.shape().size() == 2 && b.cols() == 1 && b.rows() == a.rows()) return Bcast::Col;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                   shape_str(a.shape()));
}

inline double bval(const Node& b, Bcast k, int64_t r, int64_t c) {
  switch (k) {
    case Bcast::Same: return b.data[static_cast<size_t>(r * b.cols() + c)];
    case Bcast::Scalar: return b.data[0];
    case Bcast::Row: return b.data[static_cast<size_t>(c)];
    case Bcast::Col: return b.data[static_cast<size_t>(r)];
  }
  return 0;
}

template <typename BackA, typename BackB>
void binary_backward(Node& self, GradFlow& flow, Bcast k, BackA da, BackB db);

// Reduce a full-shape gradient onto the (possibly broadcast) rhs.
inline void reduce_into(std::vector<double>& dst, const MatD& dfull, Bcast k) {
  switch (k) {
    case Bcast::Same:
      Eigen::Map<MatD>(dst.data(), dfull.rows(), dfull.cols()) += dfull;
      break;
    case Bcast::Scalar: dst[0] += dfull.sum(); break;
    case Bcast::Row:
      Eigen::Map<Eigen::RowVectorXd>(dst.data(), dfull.cols()) += dfull.colwise().sum();
      break;
    case Bcast::Col:
      Eigen::Map<Eigen::VectorXd>(dst.data(), dfull.rows()) += dfull.rowwise().sum();
      break;
  }
}

template <typename FwdFn, typename BackA, typename BackB>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, FwdFn fwd, BackA da,
                 BackB db) {
  Bcast k = bcast_kind(op, a, b);
  const Node& an = *a.node();
  const Node& bn = *b.node();
  std::vector<real> out(an.data.size());
  const int64_t r = an.rows(), c = an.cols();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) {
      double av = an.data[static_cast<size_t>(i * c + j)];
      out[static_cast<size_t>(i * c + j)] = static_cast<real>(fwd(av, bval(bn, k, i, j)));
    }
  if (an.numel() == 1 && bn.numel() == 1 && (an.has_hi || bn.has_hi)) {
    Tensor t = make_op(op, a.shape(), std::move(out), {a, b},
                       [k, da, db](Node& self, GradFlow& flow) {
                         binary_backward(self, flow, k, da, db);
                       });
    t.node()->scalar_hi = fwd(an.hi(), bn.hi());
    t.node()->has_hi = true;
    return t;
  }
  return make_op(op, a.shape(), std::move(out), {a, b},
                 [k, da, db](Node& self, GradFlow& flow) {
                   binary_backward(self, flow, k, da, db);
                 });
}

template <typename BackA, typename BackB>
void binary_backward(Node& self, GradFlow& flow, Bcast k, BackA da, BackB db) {
  auto* g = flow.find(&self);
  const int64_t r = self.rows(), c = self.cols();
  Node* pa = self.parents[0].get();
  Node* pb = self.parents[1].get();
  if (flow.wants(pa)) {
    auto& acc = flow.at_or_create(pa);
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) {
        size_t idx = static_cast<size_t>(i * c + j);
        acc[idx] += da((*g)[idx], pa->data[idx], bval(*pb, k, i, j));
      }
  }
  if (flow.wants(pb)) {
    MatD dfull(r, c);
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) {
        size_t idx = static_cast<size_t>(i * c + j);
        dfull(i, j) = db((*g)[idx], pa->data[idx], bval(*pb, k, i, j));
      }
    reduce_into(flow.at_or_create(pb), dfull, k);
  }
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

inline Tensor scale(const Tensor& a, double c) {
  const auto& src = a.node()->data;
  std::vector<real> out(src.size());
  for (size_t i = 0; i < src.size(); ++i) out[i] = static_cast<real>(src[i] * c);
  Tensor t = detail::make_op("scale", a.shape(), std::move(out), {a},
                             [c](Node& self, GradFlow& flow) {
                               Node* p = self.parents[0].get();
                               if (!flow.wants(p)) return;
                               auto* g = flow.find(&self);
                               auto& acc = flow.at_or_create(p);
                               for (size_t i = 0; i < acc.size(); ++i) acc[i] += (*g)[i] * c;
                             });
  if (a.numel() == 1 && a.node()->has_hi) {
    t.node()->scalar_hi = a.node()->hi() * c;
    t.node()->has_hi = true;
  }
  return t;
}

// Embedding lookup: rows of `table` selected by token id.
inline Tensor take_rows(const Tensor& table, const std::vector<int>& ids) {
  if (table.shape().size() != 2)
    throw ShapeError("take_rows: table must be rank 2, got " + shape_str(table.shape()));
  const int64_t v = table.rows(), d = table.cols();
  std::vector<real> out(ids.size() * static_cast<size_t>(d));
  for (size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || ids[t] >= v)
      throw ShapeError("take_rows: id " + std::to_string(ids[t]) + " out of range [0," +
                       std::to_string(v) + ")");
    std::memcpy(out.data() + t * d, table.node()->data.data() + ids[t] * d,
                sizeof(real) * static_cast<size_t>(d));
  }
  return detail::make_op(
      "take_rows", {static_cast<int64_t>(ids.size()), d}, std::move(out), {table},
      [ids, d](Node& self, GradFlow& flow) {
        Node* p = self.parents[0].get();
        if (!flow.wants(p)) return;
        auto* g = flow.find(&self);
        auto& acc = flow.at_or_create(p);
        for (size_t t = 0; t < ids.size(); ++t)
          for (int64_t j = 0; j < d; ++j)
            acc[static_cast<size_t>(ids[t] * d + j)] += (*g)[t * d + j];
      });
}

// Per-row element pick: out[i] = x[i, ids[i]]. Used to gather target log-probs.
inline Tensor take_per_row(const Tensor& x, const std::vector<int>& ids) {
  if (x.shape().size() != 2 || static_cast<int64_t>(ids.size()) != x.rows())
    throw ShapeError("take_per_row: need one column id per row of " + shape_str(x.shape()));
  const int64_t c = x.cols();
  std::vector<real> out(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= c)
      throw ShapeError("take_per_row: column " + std::to_string(ids[i]) + " out of range");
    out[i] = x.node()->data[i * c + ids[i]];
  }
  return detail::make_op("take_per_row", {static_cast<int64_t>(ids.size())}, std::move(out),
                         {x}, [ids, c](Node& self, GradFlow& flow) {
                           Node* p = self.parents[0].get();
                           if (!flow.wants(p)) return;
                           auto* g = flow.find(&self);
                           auto& acc = flow.at_or_create(p);
                           for (size_t i = 0; i < ids.size(); ++i)
                             acc[i * c + ids[i]] += (*g)[i];
                         });
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  const int64_t r = x.rows(), c = x.cols();
  if (gain.numel() != c || bias.numel() != c)
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(c) + " entries");
  std::vector<real> out(static_cast<size_t>(r * c));
  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(r * c));
  auto rstd = std::make_shared<std::vector<double>>(static_cast<size_t>(r));
  const auto& xd = x.node()->data;
  const auto& gd = gain.node()->data;
  const auto& bd = bias.node()->data;
  for (int64_t i = 0; i < r; ++i) {
    double mu = 0;
    for (int64_t j = 0; j < c; ++j) mu += xd[static_cast<size_t>(i * c + j)];
    mu /= static_cast<double>(c);
    double var = 0;
    for (int64_t j = 0; j < c; ++j) {
      double dv = xd[static_cast<size_t>(i * c + j)] - mu;
      var += dv * dv;
    }
    var /= static_cast<double>(c);
    double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[static_cast<size_t>(i)] = rs;
    for (int64_t j = 0; j < c; ++j) {
      size_t idx = static_cast<size_t>(i * c + j);
      double xh = (xd[idx] - mu) * rs;
      (*xhat)[idx] = xh;
      out[idx] = static_cast<real>(xh * gd[static_cast<size_t>(j)] + bd[static_cast<size_t>(j)]);
    }
  }
  return detail::make_op(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [xhat, rstd](Node& self, GradFlow& flow) {
        auto* g = flow.find(&self);
        const int64_t r = self.rows(), c = self.cols();
        Node* px = self.parents[0].get();
        Node* pg = self.parents[1].get();
        Node* pb = self.parents[2].get();
        const auto& gd = pg->data;
        if (flow.wants(px)) {
          auto& acc = flow.at_or_create(px);
          for (int64_t i = 0; i < r; ++i) {
            double m1 = 0, m2 = 0;
            for (int64_t j = 0; j < c; ++j) {
              size_t idx = static_cast<size_t>(i * c + j);
              double dxh = (*g)[idx] * gd[static_cast<size_t>(j)];
              m1 += dxh;
              m2 += dxh * (*xhat)[idx];
            }
            m1 /= static_cast<double>(c);
            m2 /= static_cast<double>(c);
            double rs = (*rstd)[static_cast<size_t>(i)];
            for (int64_t j = 0; j < c; ++j) {
              size_t idx = static_cast<size_t>(i * c + j);
              double dxh = (*g)[idx] * gd[static_cast<size_t>(j)];
              acc[idx] += rs * (dxh - m1 - (*xhat)[idx] * m2);
            }
          }
        }
        if (flow.wants(pg)) {
          auto& acc = flow.at_or_create(pg);
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) {
              size_t idx = static_cast<size_t>(i * c + j);
              acc[static_cast<size_t>(j)] += (*g)[idx] * (*xhat)[idx];
            }
        }
        if (flow.wants(pb)) {
          auto& acc = flow.at_or_create(pb);
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j)
              acc[static_cast<size_t>(j)] += (*g)[static_cast<size_t>(i * c + j)];
        }
      });
}

inline Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  const auto& xd = x.node()->data;
  std::vector<real> out(xd.size());
  for (size_t i = 0; i < xd.size(); ++i) {
    double v = xd[i];
    out[i] = static_cast<real>(0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v))));
  }
  return detail::make_op("gelu", x.shape(), std::move(out), {x},
                         [](Node& self, GradFlow& flow) {
                           constexpr double kC = 0.7978845608028654;
                           constexpr double kA = 0.044715;
                           Node* p = self.parents[0].get();
                           if (!flow.wants(p)) return;
                           auto* g = flow.find(&self);
                           auto& acc = flow.at_or_create(p);
                           for (size_t i = 0; i < acc.size(); ++i) {
                             double v = p->data[i];
                             double t = std::tanh(kC * (v + kA * v * v * v));
                             double dt = (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
                             acc[i] += (*g)[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                           }
                         });
}

// Row-wise softmax with teacher temperature. tau == 0 is the exact one-hot
// limit at the row argmax (ties to the lowest index); its gradient is zero.
inline Tensor softmax(const Tensor& x, double tau = 1.0) {
  if (tau < 0) throw std::invalid_argument("softmax: temperature must be >= 0");
  const int64_t r = x.rows(), c = x.cols();
  const auto& xd = x.node()->data;
  std::vector<real> out(xd.size());
  if (tau == 0.0) {
    for (int64_t i = 0; i < r; ++i) {
      int64_t best = 0;
      for (int64_t j = 1; j < c; ++j)
        if (xd[static_cast<size_t>(i * c + j)] > xd[static_cast<size_t>(i * c + best)]) best = j;
      out[static_cast<size_t>(i * c + best)] = real(1);
    }
    return detail::make_op("softmax", x.shape(), std::move(out), {x},
                           [](Node&, GradFlow&) {});
  }
  for (int64_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < c; ++j)
      mx = std::max(mx, static_cast<double>(xd[static_cast<size_t>(i * c + j)]) / tau);
    double z = 0;
    std::vector<double> e(static_cast<size_t>(c));
    for (int64_t j = 0; j < c; ++j) {
      e[static_cast<size_t>(j)] =
          std::exp(static_cast<double>(xd[static_cast<size_t>(i * c + j)]) / tau - mx);
      z += e[static_cast<size_t>(j)];
    }
    for (int64_t j = 0; j < c; ++j)
      out[static_cast<size_t>(i * c + j)] = static_cast<real>(e[static_cast<size_t>(j)] / z);
  }
  return detail::make_op("softmax", x.shape(), std::move(out), {x},
                         [tau](Node& self, GradFlow& flow) {
                           Node* p = self.parents[0].get();
                           if (!flow.wants(p)) return;
                           auto* g = flow.find(&self);
                           const int64_t r = self.rows(), c = self.cols();
                           auto& acc = flow.at_or_create(p);
                           for (int64_t i = 0; i < r; ++i) {
                             double dot = 0;
                             for (int64_t j = 0; j < c; ++j) {
                               size_t idx = static_cast<size_t>(i * c + j);
                               dot += (*g)[idx] * self.data[idx];
                             }
                             for (int64_t j = 0; j < c; ++j) {
                               size_t idx = static_cast<size_t>(i * c + j);
                               acc[idx] += self.data[idx] * ((*g)[idx] - dot) / tau;
                             }
                           }
                         });
}

inline Tensor log_softmax(const Tensor& x) {
  const int64_t r = x.rows(), c = x.cols();
  const auto& xd = x.node()->data;
  std::vector<real> out(xd.size());
  for (int64_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < c; ++j)
      mx = std::max(mx, static_cast<double>(xd[static_cast<size_t>(i * c + j)]));
    double z = 0;
    for (int64_t j = 0; j < c; ++j)
      z += std::exp(static_cast<double>(xd[static_cast<size_t>(i * c + j)]) - mx);
    double lz = mx + std::log(z);
    for (int64_t j = 0; j < c; ++j)
      out[static_cast<size_t>(i * c + j)] =
          static_cast<real>(static_cast<double>(xd[static_cast<size_t>(i * c + j)]) - lz);
  }
  return detail::make_op("log_softmax", x.shape(), std::move(out), {x},
                         [](Node& self, GradFlow& flow) {
                           Node* p = self.parents[0].get();
                           if (!flow.wants(p)) return;
                           auto* g = flow.find(&self);
                           const int64_t r = self.rows(), c = self.cols();
                           auto& acc = flow.at_or_create(p);
                           for (int64_t i = 0; i < r; ++i) {
                             double gsum = 0;
                             for (int64_t j = 0; j < c; ++j)
                               gsum += (*g)[static_cast<size_t>(i * c + j)];
                             for (int64_t j = 0; j < c; ++j) {
                               size_t idx = static_cast<size_t>(i * c + j);
                               acc[idx] += (*g)[idx] - std::exp(static_cast<double>(self.data[idx])) * gsum;
                             }
                           }
                         });
}

// Mean negative log-likelihood of one target id per row, fused so the whole
// reduction happens in double from the stored logits (storing per-token log
// probs at f32 first would put a rounding step right where finite-difference
// checks are most sensitive).
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  const int64_t r = logits.rows(), c = logits.cols();
  if (logits.shape().size() != 2 || static_cast<int64_t>(targets.size()) != r)
    throw ShapeError("cross_entropy: need one target per row of " +
                     shape_str(logits.shape()));
  for (int t : targets)
    if (t < 0 || t >= c)
      fail("cross_entropy: target id " + std::to_string(t) + " outside [0, " +
           std::to_string(c) + ")");
  const auto& xd = logits.node()->data;
  double total = 0;
  for (int64_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < c; ++j)
      mx = std::max(mx, static_cast<double>(xd[static_cast<size_t>(i * c + j)]));
    double z = 0;
    for (int64_t j = 0; j < c; ++j)
      z += std::exp(static_cast<double>(xd[static_cast<size_t>(i * c + j)]) - mx);
    total += mx + std::log(z) - static_cast<double>(xd[static_cast<size_t>(i * c + targets[i])]);
  }
  total /= static_cast<double>(r);
  Tensor t = detail::make_op(
      "cross_entropy", {1}, {static_cast<real>(total)}, {logits},
      [targets](Node& self, GradFlow& flow) {
        Node* p = self.parents[0].get();
        if (!flow.wants(p)) return;
        const double g = (*flow.find(&self))[0];
        const int64_t r = p->rows(), c = p->cols();
        auto& acc = flow.at_or_create(p);
        for (int64_t i = 0; i < r; ++i) {
          double mx = -std::numeric_limits<double>::infinity();
          for (int64_t j = 0; j < c; ++j)
            mx = std::max(mx, static_cast<double>(p->data[static_cast<size_t>(i * c + j)]));
          double z = 0;
          for (int64_t j = 0; j < c; ++j)
            z += std::exp(static_cast<double>(p->data[static_cast<size_t>(i * c + j)]) - mx);
          for (int64_t j = 0; j < c; ++j) {
            size_t idx = static_cast<size_t>(i * c + j);
            double soft = std::exp(static_cast<double>(p->data[idx]) - mx) / z;
            acc[idx] += g * (soft - (j == targets[i] ? 1.0 : 0.0)) / static_cast<double>(r);
          }
        }
      });
  t.node()->scalar_hi = total;
  t.node()->has_hi = true;
  return t;
}

inline Tensor sum(const Tensor& x) {
  double s = 0;
  for (real v : x.node()->data) s += v;
  Tensor t = detail::make_op("sum", {1}, {static_cast<real>(s)}, {x},
                             [](Node& self, GradFlow& flow) {
                               Node* p = self.parents[0].get();
                               if (!flow.wants(p)) return;
                               double g = (*flow.find(&self))[0];
                               auto& acc = flow.at_or_create(p);
                               for (auto& v : acc) v += g;
                             });
  t.node()->scalar_hi = s;
  t.node()->has_hi = true;
  return t;
}

inline Tensor mean(const Tensor& x) {
  double s = 0;
  for (real v : x.node()->data) s += v;
  const double n = static_cast<double>(x.numel());
  Tensor t = detail::make_op("mean", {1}, {static_cast<real>(s / n)}, {x},
                             [n](Node& self, GradFlow& flow) {
                               Node* p = self.parents[0].get();
                               if (!flow.wants(p)) return;
                               double g = (*flow.find(&self))[0] / n;
                               auto& acc = flow.at_or_create(p);
                               for (auto& v : acc) v += g;
                             });
  t.node()->scalar_hi = s / n;
  t.node()->has_hi = true;
  return t;
}

// Flat inner product computed in double with no intermediate storage
// rounding; the workhorse scalarizer for losses.
inline Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("dot: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  double s = 0;
  const auto& ad = a.node()->data;
  const auto& bd = b.node()->data;
  for (size_t i = 0; i < ad.size(); ++i)
    s += static_cast<double>(ad[i]) * static_cast<double>(bd[i]);
  Tensor t = detail::make_op("dot", {1}, {static_cast<real>(s)}, {a, b},
                             [](Node& self, GradFlow& flow) {
                               double g = (*flow.find(&self))[0];
                               Node* pa = self.parents[0].get();
                               Node* pb = self.parents[1].get();
                               if (flow.wants(pa)) {
                                 auto& acc = flow.at_or_create(pa);
                                 for (size_t i = 0; i < acc.size(); ++i)
                                   acc[i] += g * pb->data[i];
                               }
                               if (flow.wants(pb)) {
                                 auto& acc = flow.at_or_create(pb);
                                 for (size_t i = 0; i < acc.size(); ++i)
                                   acc[i] += g * pa->data[i];
                               }
                             });
  t.node()->scalar_hi = s;
  t.node()->has_hi = true;
  return t;
}

inline Tensor abs(const Tensor& x) {
  const auto& xd = x.node()->data;
  std::vector<real> out(xd.size());
  for (size_t i = 0; i < xd.size(); ++i) out[i] = std::fabs(xd[i]);
  return detail::make_op("abs", x.shape(), std::move(out), {x},
                         [](Node& self, GradFlow& flow) {
                           Node* p = self.parents[0].get();
                           if (!flow.wants(p)) return;
                           auto* g = flow.find(&self);
                           auto& acc = flow.at_or_create(p);
                           for (size_t i = 0; i < acc.size(); ++i) {
                             double v = p->data[i];
                             acc[i] += (*g)[i] * (v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0));
                           }
                         });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  require(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
  int64_t rows0 = parts[0].rows(), cols0 = parts[0].cols();
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.shape().size() != 2)
      throw ShapeError("concat: expected rank-2 tensors, got " + shape_str(p.shape()));
    if (axis == 0 && p.cols() != cols0)
      throw ShapeError("concat: column mismatch " + shape_str(p.shape()) + " vs " +
                       shape_str(parts[0].shape()));
    if (axis == 1 && p.rows() != rows0)
      throw ShapeError("concat: row mismatch " + shape_str(p.shape()) + " vs " +
                       shape_str(parts[0].shape()));
    total += (axis == 0 ? p.rows() : p.cols());
  }
  int64_t r = axis == 0 ? total : rows0;
  int64_t c = axis == 0 ? cols0 : total;
  std::vector<real> out(static_cast<size_t>(r * c));
  std::vector<int64_t> sizes;
  int64_t off = 0;
  for (const auto& p : parts) {
    const auto& pd = p.node()->data;
    if (axis == 0) {
      std::memcpy(out.data() + off * c, pd.data(), pd.size() * sizeof(real));
      sizes.push_back(p.rows());
      off += p.rows();
    } else {
      for (int64_t i = 0; i < r; ++i)
        std::memcpy(out.data() + i * c + off, pd.data() + i * p.cols(),
                    static_cast<size_t>(p.cols()) * sizeof(real));
      sizes.push_back(p.cols());
      off += p.cols();
    }
  }
  return detail::make_op("concat", {r, c}, std::move(out), parts,
                         [axis, sizes](Node& self, GradFlow& flow) {
                           auto* g = flow.find(&self);
                           const int64_t c = self.cols();
                           int64_t off = 0;
                           for (size_t k = 0; k < self.parents.size(); ++k) {
                             Node* p = self.parents[k].get();
                             if (flow.wants(p)) {
                               auto& acc = flow.at_or_create(p);
                               if (axis == 0) {
                                 for (int64_t i = 0; i < sizes[k] * c; ++i)
                                   acc[static_cast<size_t>(i)] += (*g)[static_cast<size_t>(off * c + i)];
                               } else {
                                 for (int64_t i = 0; i < p->rows(); ++i)
                                   for (int64_t j = 0; j < sizes[k]; ++j)
                                     acc[static_cast<size_t>(i * sizes[k] + j)] +=
                                         (*g)[static_cast<size_t>(i * c + off + j)];
                               }
                             }
                             off += sizes[k];
                           }
                         });
}

// Rectangular slice [r0, r1) x [c0, c1) of a rank-2 tensor.
inline Tensor slice(const Tensor& x, int64_t r0, int64_t r1, int64_t c0, int64_t c1) {
  if (x.shape().size() != 2 || r0 < 0 || c0 < 0 || r1 > x.rows() || c1 > x.cols() ||
      r0 >= r1 || c0 >= c1)
    throw ShapeError("slice: bounds [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ")x[" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") invalid for " + shape_str(x.shape()));
  const int64_t c = x.cols(), nr = r1 - r0, nc = c1 - c0;
  std::vector<real> out(static_cast<size_t>(nr * nc));
  for (int64_t i = 0; i < nr; ++i)
    std::memcpy(out.data() + i * nc, x.node()->data.data() + (r0 + i) * c + c0,
                static_cast<size_t>(nc) * sizeof(real));
  return detail::make_op("slice", {nr, nc}, std::move(out), {x},
                         [r0, c0, c, nc](Node& self, GradFlow& flow) {
                           Node* p = self.parents[0].get();
                           if (!flow.wants(p)) return;
                           auto* g = flow.find(&self);
                           auto& acc = flow.at_or_create(p);
                           for (int64_t i = 0; i < self.rows(); ++i)
                             for (int64_t j = 0; j < nc; ++j)
                               acc[static_cast<size_t>((r0 + i) * c + c0 + j)] +=
                                   (*g)[static_cast<size_t>(i * nc + j)];
                         });
}

inline Tensor slice_rows(const Tensor& x, int64_t r0, int64_t r1) {
  return slice(x, r0, r1, 0, x.cols());
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

inline void backward(const Tensor& loss, GradSink* sink = nullptr) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, shape " +
                                shape_str(loss.shape()));
  // Collect the reachable subgraph, then replay it in reverse creation order.
  std::vector<Node*> order;
  {
    std::vector<Node*> stack{loss.node().get()};
    std::unordered_map<const Node*, bool> seen;
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      if (seen[n]) continue;
      seen[n] = true;
      order.push_back(n);
      for (auto& p : n->parents) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->id > b->id; });

  GradFlow flow;
  flow.at_or_create(loss.node().get())[0] = 1.0;
  for (Node* n : order) {
    if (n->backward_fn && flow.find(n)) n->backward_fn(*n, flow);
  }
  for (Node* n : order) {
    if (!n->requires_grad || n->backward_fn) continue;  // leaves only
    auto* f = flow.find(n);
    if (sink) {
      auto& dst = sink->at_or_create(n);
      if (f)
        for (size_t i = 0; i < dst.size(); ++i) dst[i] += (*f)[i];
    } else {
      if (n->grad.empty()) n->grad.assign(n->data.size(), real(0));
      if (f)
        for (size_t i = 0; i < n->grad.size(); ++i)
          n->grad[i] = static_cast<real>(n->grad[i] + (*f)[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// finite-difference oracle
// ---------------------------------------------------------------------------

// Central differences against the recorded gradients. Perturbed entries are
// re-read after storage rounding so the divisor is the step that actually
// happened, not the nominal one. Returns the max relative error over all
// input entries; throws on any non-finite value, naming the coordinate.
inline double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         std::vector<Tensor> inputs, double eps) {
  require(eps > 0, "grad_check: eps must be positive");
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor loss = f(inputs);
  if (loss.numel() != 1)
    throw std::invalid_argument("grad_check: f must return a scalar");
  if (!std::isfinite(loss.value())) fail("grad_check: loss is non-finite");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    std::vector<double> g(t.data().size(), 0.0);
    if (t.has_grad())
      for (size_t i = 0; i < g.size(); ++i) g[i] = t.grad()[i];
    analytic.push_back(std::move(g));
  }

  double max_err = 0;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& data = inputs[ti].data();
    for (size_t i = 0; i < data.size(); ++i) {
      const real orig = data[i];
      const real xp = static_cast<real>(static_cast<double>(orig) + eps);
      const real xm = static_cast<real>(static_cast<double>(orig) - eps);
      double fp, fm;
      {
        NoGradGuard ng;
        data[i] = xp;
        fp = f(inputs).value();
        data[i] = xm;
        fm = f(inputs).value();
        data[i] = orig;
      }
      const double denom = static_cast<double>(xp) - static_cast<double>(xm);
      const double cd = (fp - fm) / denom;
      const double an = analytic[ti][i];
      if (!std::isfinite(cd) || !std::isfinite(an))
        fail("grad_check: non-finite gradient at input " + std::to_string(ti) + " entry " +
             std::to_string(i) + " (analytic=" + std::to_string(an) +
             ", central=" + std::to_string(cd) + ")");
      const double err = std::fabs(an - cd) / std::max({std::fabs(an), std::fabs(cd), 1e-8});
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace km
