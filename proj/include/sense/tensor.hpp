// SPDX-License-Identifier: Apache-2.0
//
// Dense float32 tensors with reverse-mode automatic differentiation.
// Values are immutable once they enter a graph; only gradient buffers
// mutate. Reductions accumulate in float64. No global state: the tape
// is the DAG of nodes hanging off each tensor, so concurrent read-only
// inference over shared frozen parameters is safe.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace sense {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

struct TensorImpl;

// One recorded primitive application. `backprop` reads output->grad and
// accumulates into the grads of `inputs`; saved activations live in the
// closure.
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  TensorImpl* output = nullptr;
  std::function<void()> backprop;
  bool backward_done = false;
};

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;  // empty means "no buffer"
  std::shared_ptr<Node> node;
  int64_t id = 0;
};

namespace detail {
inline int64_t next_tensor_id() {
  static std::atomic<int64_t> counter{0};
  return ++counter;
}
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// Disables graph recording in a scope (inference paths).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw std::invalid_argument("tensor: " + shape_str(shape) + " does not hold " +
                                  std::to_string(values.size()) + " values");
    for (int64_t d : shape)
      if (d <= 0) throw std::invalid_argument("tensor: nonpositive extent in " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    impl->id = detail::next_tensor_id();
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<float> v(static_cast<size_t>(shape_numel(shape)), 0.0f);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, float value, bool requires_grad = false) {
    std::vector<float> v(static_cast<size_t>(shape_numel(shape)), value);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(float value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  int64_t dim(size_t i) const { return impl().shape.at(i); }
  size_t ndim() const { return impl().shape.size(); }
  int64_t numel() const { return static_cast<int64_t>(impl().data.size()); }
  int64_t id() const { return impl().id; }
  bool requires_grad() const { return impl().requires_grad; }

  const std::vector<float>& data() const { return impl().data; }
  // In-place access for initialization and optimizer updates. Never call on
  // a tensor that already participates in a recorded graph.
  std::vector<float>& mutable_data() { return impl().data; }

  bool has_grad() const { return !impl().grad.empty(); }
  const std::vector<float>& grad() const {
    if (impl().grad.empty()) throw std::runtime_error("tensor has no gradient buffer");
    return impl().grad;
  }
  void zero_grad() {
    if (!impl().grad.empty()) std::fill(impl().grad.begin(), impl().grad.end(), 0.0f);
  }
  void drop_grad() { impl().grad.clear(); }

  float item() const {
    if (numel() != 1) throw std::runtime_error("item() on non-scalar tensor " + shape_str(shape()));
    return impl().data[0];
  }

  std::shared_ptr<TensorImpl> ptr() const { return impl_; }

  TensorImpl& impl() const {
    if (!impl_) throw std::runtime_error("use of undefined tensor");
    return *impl_;
  }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline void accumulate_grad(TensorImpl* t, const std::vector<double>& contribution) {
  if (!t->requires_grad) return;
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0f);
  for (size_t i = 0; i < contribution.size(); ++i)
    t->grad[i] += static_cast<float>(contribution[i]);
}

// Records `op` applied to `inputs` producing a fresh tensor. `make_backprop`
// is invoked with the output impl only when any input participates in the
// graph and grad mode is on.
inline Tensor make_op_result(
    Shape shape, std::vector<float> values, const char* op,
    std::vector<Tensor> inputs,
    const std::function<std::function<void()>(TensorImpl*)>& make_backprop) {
  bool track = false;
  if (grad_mode())
    for (const auto& in : inputs)
      if (in.requires_grad()) track = true;
  Tensor out = Tensor::from(std::move(shape), std::move(values), track);
  if (track) {
    auto node = std::make_shared<Node>();
    node->op = op;
    node->output = &out.impl();
    for (auto& in : inputs) node->inputs.push_back(in.ptr());
    node->backprop = make_backprop(node->output);
    out.impl().node = std::move(node);
  }
  return out;
}

}  // namespace detail

// Populates gradients of every requires_grad tensor reachable from `loss`.
// Rejects non-scalar losses and a second call on the same loss.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  auto& root = loss.impl();
  if (root.node && root.node->backward_done)
    throw std::runtime_error("backward: already run for this loss; rebuild the graph");

  // Topological order, inputs before consumers.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  if (root.node) stack.push_back({root.node.get(), 0});
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (seen.count(node)) {
      stack.pop_back();
      continue;
    }
    bool descended = false;
    while (next < node->inputs.size()) {
      Node* child = node->inputs[next].get()->node.get();
      ++next;
      if (child && !seen.count(child)) {
        stack.push_back({child, 0});
        descended = true;
        break;
      }
    }
    if (!descended && next >= node->inputs.size()) {
      seen.insert(node);
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.grad.assign(1, 1.0f);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->output->grad.empty())
      node->output->grad.assign(node->output->data.size(), 0.0f);
    node->backprop();
  }
  if (root.node) root.node->backward_done = true;
}

struct TraceEntry {
  std::string op;
  std::vector<int64_t> input_ids;
  int64_t output_id = 0;
};

// Topologically ordered record of the primitive applications below `root`.
inline std::vector<TraceEntry> trace(const Tensor& root) {
  std::vector<TraceEntry> out;
  std::unordered_set<Node*> seen;
  std::function<void(Node*)> visit = [&](Node* node) {
    if (!node || seen.count(node)) return;
    seen.insert(node);
    for (auto& in : node->inputs) visit(in->node.get());
    TraceEntry e;
    e.op = node->op;
    e.output_id = node->output->id;
    for (auto& in : node->inputs) e.input_ids.push_back(in->id);
    out.push_back(std::move(e));
  };
  visit(root.impl().node.get());
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checking against central finite differences.

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  size_t tensor_index = 0;    // which input tensor holds the worst coordinate
  int64_t coord = -1;         // flat index of that coordinate
  double analytic = 0.0;
  double numeric = 0.0;
  int64_t coords_checked = 0;
  bool ok(double tol) const { return max_rel_err < tol; }
};

struct GradCheckOpts {
  double eps = 1e-3;
  int64_t max_coords_per_tensor = 0;  // 0 = every coordinate
  uint64_t seed = 0x5eed;
  // Relative-error denominator floor: coordinates whose gradient magnitude
  // sits below this are compared on that absolute scale instead.
  double denom_floor = 1e-2;
};

// Compares analytic gradients of scalar-valued `f` at `xs` to
// (f(x+eps*e_i) - f(x-eps*e_i)) / 2eps, componentwise.
inline GradCheckReport grad_check(const TensorFn& f, std::vector<Tensor> xs,
                                  GradCheckOpts opts = {}) {
  Tensor y = f(xs);
  if (y.numel() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
  if (!std::isfinite(y.item())) throw std::invalid_argument("grad_check: f(x) is not finite");

  for (auto& x : xs) x.zero_grad();
  backward(y);

  std::vector<std::vector<double>> analytic(xs.size());
  for (size_t t = 0; t < xs.size(); ++t) {
    analytic[t].assign(static_cast<size_t>(xs[t].numel()), 0.0);
    if (xs[t].requires_grad() && xs[t].has_grad())
      for (int64_t i = 0; i < xs[t].numel(); ++i) analytic[t][i] = xs[t].grad()[i];
  }

  std::mt19937_64 rng(opts.seed);
  GradCheckReport report;
  for (size_t t = 0; t < xs.size(); ++t) {
    if (!xs[t].requires_grad()) continue;
    std::vector<int64_t> coords(static_cast<size_t>(xs[t].numel()));
    for (int64_t i = 0; i < xs[t].numel(); ++i) coords[i] = i;
    if (opts.max_coords_per_tensor > 0 &&
        static_cast<int64_t>(coords.size()) > opts.max_coords_per_tensor) {
      for (size_t i = 0; i < coords.size(); ++i)
        std::swap(coords[i], coords[i + rng() % (coords.size() - i)]);
      coords.resize(static_cast<size_t>(opts.max_coords_per_tensor));
    }
    auto& buf = xs[t].mutable_data();
    for (int64_t i : coords) {
      float saved = buf[i];
      double y1, y2;
      {
        NoGradGuard ng;
        buf[i] = static_cast<float>(saved + opts.eps);
        y1 = f(xs).item();
        buf[i] = static_cast<float>(saved - opts.eps);
        y2 = f(xs).item();
        buf[i] = saved;
      }
      double numeric = (y1 - y2) / (2.0 * opts.eps);
      double a = analytic[t][i];
      double rel = std::abs(a - numeric) /
                   std::max({opts.denom_floor, std::abs(a), std::abs(numeric)});
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.tensor_index = t;
        report.coord = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace sense
