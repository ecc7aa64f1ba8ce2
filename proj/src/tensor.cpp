#include "petsynth/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "petsynth/errors.hpp"

namespace petsynth {

namespace {

void check_shape(const std::vector<std::int64_t>& shape) {
  if (shape.empty()) throw ContractViolation("tensor rank must be >= 1");
  for (auto e : shape)
    if (e <= 0) throw ContractViolation("tensor extents must be positive");
}

bool same_shape(const TensorNode& a, const TensorNode& b) { return a.shape == b.shape; }

Tensor make_like(const TensorNode& a, const char* op) {
  auto t = make_tensor(a.shape);
  t->op = op;
  return t;
}

// Resolve elementwise operand pair: equal shapes, or one side scalar.
enum class Broadcast { kNone, kScalarA, kScalarB };

Broadcast ew_broadcast(const TensorNode& a, const TensorNode& b, const char* op) {
  if (same_shape(a, b)) return Broadcast::kNone;
  if (b.is_scalar()) return Broadcast::kScalarB;
  if (a.is_scalar()) return Broadcast::kScalarA;
  throw ContractViolation(std::string(op) + ": shape mismatch and neither operand is scalar");
}

}  // namespace

Tensor make_tensor(std::vector<std::int64_t> shape, bool requires_grad) {
  check_shape(shape);
  auto t = std::make_shared<TensorNode>();
  t->shape = std::move(shape);
  t->value.assign(static_cast<std::size_t>(t->numel()), 0.0);
  t->requires_grad = requires_grad;
  return t;
}

Tensor make_tensor(std::vector<std::int64_t> shape, std::vector<double> values,
                   bool requires_grad) {
  check_shape(shape);
  auto t = std::make_shared<TensorNode>();
  t->shape = std::move(shape);
  if (static_cast<std::int64_t>(values.size()) != t->numel())
    throw ContractViolation("make_tensor: value count does not match shape");
  t->value = std::move(values);
  t->requires_grad = requires_grad;
  return t;
}

Tensor make_scalar(double v, bool requires_grad) {
  return make_tensor({1}, {v}, requires_grad);
}

Tensor make_param(const std::string& name, std::vector<std::int64_t> shape) {
  auto t = make_tensor(std::move(shape), true);
  t->name = name;
  return t;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace {

// Generic binary elementwise with scalar broadcast. fwd(x, y) -> value;
// bwd(x, y, g) -> pair of partials (dx, dy).
template <typename Fwd, typename Bwd>
Tensor binary_ew(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  const Broadcast bc = ew_broadcast(*a, *b, op);
  const TensorNode& big = (bc == Broadcast::kScalarA) ? *b : *a;
  auto out = make_like(big, op);
  const std::int64_t n = out->numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const double x = a->value[bc == Broadcast::kScalarA ? 0 : i];
    const double y = b->value[bc == Broadcast::kScalarB ? 0 : i];
    out->value[i] = fwd(x, y);
  }
  out->requires_grad = a->requires_grad || b->requires_grad;
  if (out->requires_grad) {
    out->parents = {a, b};
    Tensor pa = a, pb = b;
    out->backward_fn = [pa, pb, bc, n, bwd](TensorNode& self) {
      if (pa->requires_grad) pa->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t ia = (bc == Broadcast::kScalarA) ? 0 : i;
        const std::int64_t ib = (bc == Broadcast::kScalarB) ? 0 : i;
        const double g = self.grad[i];
        const auto [dx, dy] = bwd(pa->value[ia], pb->value[ib], g);
        if (pa->requires_grad) pa->grad[ia] += dx;
        if (pb->requires_grad) pb->grad[ib] += dy;
      }
    };
  }
  return out;
}

template <typename Fwd, typename Bwd>
Tensor unary_ew(const char* op, const Tensor& a, Fwd fwd, Bwd bwd) {
  auto out = make_like(*a, op);
  const std::int64_t n = out->numel();
  for (std::int64_t i = 0; i < n; ++i) out->value[i] = fwd(a->value[i]);
  out->requires_grad = a->requires_grad;
  if (out->requires_grad) {
    out->parents = {a};
    Tensor pa = a;
    out->backward_fn = [pa, n, bwd](TensorNode& self) {
      pa->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i)
        pa->grad[i] += bwd(pa->value[i], self.grad[i]);
    };
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_ew("add", a, b, [](double x, double y) { return x + y; },
                   [](double, double, double g) { return std::pair{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_ew("sub", a, b, [](double x, double y) { return x - y; },
                   [](double, double, double g) { return std::pair{g, -g}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_ew("mul", a, b, [](double x, double y) { return x * y; },
                   [](double x, double y, double g) { return std::pair{g * y, g * x}; });
}

Tensor abs_op(const Tensor& a) {
  return unary_ew("abs", a, [](double x) { return std::fabs(x); },
                  [](double x, double g) { return x > 0 ? g : (x < 0 ? -g : 0.0); });
}

Tensor square(const Tensor& a) {
  return unary_ew("square", a, [](double x) { return x * x; },
                  [](double x, double g) { return 2.0 * x * g; });
}

Tensor relu(const Tensor& a) {
  return unary_ew("relu", a, [](double x) { return x > 0 ? x : 0.0; },
                  [](double x, double g) { return x > 0 ? g : 0.0; });
}

Tensor prelu(const Tensor& a, const Tensor& alpha) {
  if (!alpha->is_scalar()) throw ContractViolation("prelu: alpha must be scalar");
  // prelu(x) = x for x > 0, alpha*x otherwise; d/dalpha accumulates over the
  // negative part.
  return binary_ew("prelu", a, alpha,
                   [](double x, double al) { return x > 0 ? x : al * x; },
                   [](double x, double al, double g) {
                     return x > 0 ? std::pair{g, 0.0} : std::pair{al * g, x * g};
                   });
}

Tensor exp_op(const Tensor& a) {
  return unary_ew("exp", a, [](double x) { return std::exp(x); },
                  [](double x, double g) { return std::exp(x) * g; });
}

Tensor min_pair(const Tensor& a, const Tensor& b) {
  return binary_ew("min_pair", a, b,
                   [](double x, double y) { return x <= y ? x : y; },
                   [](double x, double y, double g) {
                     return x <= y ? std::pair{g, 0.0} : std::pair{0.0, g};
                   });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace {

struct AxisSplit {
  std::int64_t outer, len, inner;
};

AxisSplit split_axis(const TensorNode& a, int axis) {
  if (axis == -1) return {1, a.numel(), 1};
  if (axis < 0 || axis >= static_cast<int>(a.shape.size()))
    throw ContractViolation("reduce: axis out of range");
  AxisSplit s{1, a.shape[axis], 1};
  for (int i = 0; i < axis; ++i) s.outer *= a.shape[i];
  for (std::size_t i = axis + 1; i < a.shape.size(); ++i) s.inner *= a.shape[i];
  return s;
}

std::vector<std::int64_t> reduced_shape(const TensorNode& a, int axis) {
  if (axis == -1) return {1};
  std::vector<std::int64_t> shape;
  for (int i = 0; i < static_cast<int>(a.shape.size()); ++i)
    if (i != axis) shape.push_back(a.shape[i]);
  if (shape.empty()) shape = {1};
  return shape;
}

}  // namespace

Tensor reduce_sum(const Tensor& a, int axis) {
  const AxisSplit s = split_axis(*a, axis);
  auto out = make_tensor(reduced_shape(*a, axis));
  out->op = "sum";
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t i = 0; i < s.inner; ++i) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < s.len; ++k)
        acc += a->value[(o * s.len + k) * s.inner + i];
      out->value[o * s.inner + i] = acc;
    }
  out->requires_grad = a->requires_grad;
  if (out->requires_grad) {
    out->parents = {a};
    Tensor pa = a;
    out->backward_fn = [pa, s](TensorNode& self) {
      pa->ensure_grad();
      for (std::int64_t o = 0; o < s.outer; ++o)
        for (std::int64_t i = 0; i < s.inner; ++i) {
          const double g = self.grad[o * s.inner + i];
          for (std::int64_t k = 0; k < s.len; ++k)
            pa->grad[(o * s.len + k) * s.inner + i] += g;
        }
    };
  }
  return out;
}

Tensor reduce_mean(const Tensor& a, int axis) {
  const AxisSplit s = split_axis(*a, axis);
  auto out = reduce_sum(a, axis);
  out->op = "mean";
  const double inv = 1.0 / static_cast<double>(s.len);
  for (auto& v : out->value) v *= inv;
  if (out->requires_grad) {
    Tensor pa = a;
    out->backward_fn = [pa, s, inv](TensorNode& self) {
      pa->ensure_grad();
      for (std::int64_t o = 0; o < s.outer; ++o)
        for (std::int64_t i = 0; i < s.inner; ++i) {
          const double g = self.grad[o * s.inner + i] * inv;
          for (std::int64_t k = 0; k < s.len; ++k)
            pa->grad[(o * s.len + k) * s.inner + i] += g;
        }
    };
  }
  return out;
}

MinResult reduce_min(const Tensor& a, int axis) {
  const AxisSplit s = split_axis(*a, axis);
  if (s.len == 0) throw ContractViolation("reduce_min: empty axis");
  auto out = make_tensor(reduced_shape(*a, axis));
  out->op = "min";
  std::vector<std::int64_t> winners(static_cast<std::size_t>(s.outer * s.inner));
  for (std::int64_t o = 0; o < s.outer; ++o)
    for (std::int64_t i = 0; i < s.inner; ++i) {
      double best = a->value[(o * s.len) * s.inner + i];
      std::int64_t best_k = 0;
      for (std::int64_t k = 1; k < s.len; ++k) {
        const double v = a->value[(o * s.len + k) * s.inner + i];
        if (v < best) {  // strict: ties keep the lowest index
          best = v;
          best_k = k;
        }
      }
      out->value[o * s.inner + i] = best;
      winners[o * s.inner + i] = best_k;
    }
  out->requires_grad = a->requires_grad;
  if (out->requires_grad) {
    out->parents = {a};
    Tensor pa = a;
    auto win = winners;
    out->backward_fn = [pa, s, win](TensorNode& self) {
      pa->ensure_grad();
      for (std::int64_t o = 0; o < s.outer; ++o)
        for (std::int64_t i = 0; i < s.inner; ++i) {
          const std::int64_t k = win[o * s.inner + i];
          pa->grad[(o * s.len + k) * s.inner + i] += self.grad[o * s.inner + i];
        }
    };
  }
  return {out, std::move(winners)};
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

Tensor dropout(const Tensor& a, double rate, Rng& rng, DropoutMode mode) {
  if (rate < 0.0 || rate >= 1.0)
    throw ContractViolation("dropout: rate must be in [0, 1)");
  if (mode == DropoutMode::kOff || rate == 0.0) {
    // Identity pass-through; rng untouched.
    auto out = make_like(*a, "dropout_off");
    out->value = a->value;
    out->requires_grad = a->requires_grad;
    if (out->requires_grad) {
      out->parents = {a};
      Tensor pa = a;
      out->backward_fn = [pa](TensorNode& self) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      };
    }
    return out;
  }
  auto out = make_like(*a, "dropout");
  const std::int64_t n = out->numel();
  const double scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  // Mask drawn sequentially from the stream so results do not depend on any
  // internal parallelism.
  for (std::int64_t i = 0; i < n; ++i)
    (*mask)[i] = (rng.uniform() < rate) ? 0.0 : scale;
  for (std::int64_t i = 0; i < n; ++i) out->value[i] = a->value[i] * (*mask)[i];
  out->requires_grad = a->requires_grad;
  if (out->requires_grad) {
    out->parents = {a};
    Tensor pa = a;
    out->backward_fn = [pa, mask, n](TensorNode& self) {
      pa->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) pa->grad[i] += self.grad[i] * (*mask)[i];
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a->shape.size() != 4 || b->shape.size() != 4)
    throw ContractViolation("concat_channels: expects [N,C,H,W] inputs");
  if (a->shape[0] != b->shape[0] || a->shape[2] != b->shape[2] || a->shape[3] != b->shape[3])
    throw ContractViolation("concat_channels: N/H/W mismatch");
  const std::int64_t n = a->shape[0], ca = a->shape[1], cb = b->shape[1];
  const std::int64_t hw = a->shape[2] * a->shape[3];
  auto out = make_tensor({n, ca + cb, a->shape[2], a->shape[3]});
  out->op = "concat";
  for (std::int64_t s = 0; s < n; ++s) {
    std::copy_n(a->value.data() + s * ca * hw, ca * hw,
                out->value.data() + s * (ca + cb) * hw);
    std::copy_n(b->value.data() + s * cb * hw, cb * hw,
                out->value.data() + (s * (ca + cb) + ca) * hw);
  }
  out->requires_grad = a->requires_grad || b->requires_grad;
  if (out->requires_grad) {
    out->parents = {a, b};
    Tensor pa = a, pb = b;
    out->backward_fn = [pa, pb, n, ca, cb, hw](TensorNode& self) {
      if (pa->requires_grad) pa->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (std::int64_t s = 0; s < n; ++s) {
        if (pa->requires_grad)
          for (std::int64_t i = 0; i < ca * hw; ++i)
            pa->grad[s * ca * hw + i] += self.grad[s * (ca + cb) * hw + i];
        if (pb->requires_grad)
          for (std::int64_t i = 0; i < cb * hw; ++i)
            pb->grad[s * cb * hw + i] += self.grad[(s * (ca + cb) + ca) * hw + i];
      }
    };
  }
  return out;
}

Tensor stack_columns(const std::vector<Tensor>& columns) {
  if (columns.empty()) throw ContractViolation("stack_columns: no inputs");
  const std::int64_t n = columns[0]->numel();
  for (const auto& c : columns) {
    if (c->shape.size() != 1 || c->numel() != n)
      throw ContractViolation("stack_columns: inputs must be equal-length vectors");
  }
  const std::int64_t m = static_cast<std::int64_t>(columns.size());
  auto out = make_tensor({n, m});
  out->op = "stack";
  for (std::int64_t j = 0; j < m; ++j)
    for (std::int64_t i = 0; i < n; ++i)
      out->value[i * m + j] = columns[j]->value[i];
  bool rg = false;
  for (const auto& c : columns) rg = rg || c->requires_grad;
  out->requires_grad = rg;
  if (rg) {
    out->parents = columns;
    auto cols = columns;
    out->backward_fn = [cols, n, m](TensorNode& self) {
      for (std::int64_t j = 0; j < m; ++j) {
        if (!cols[j]->requires_grad) continue;
        cols[j]->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i)
          cols[j]->grad[i] += self.grad[i * m + j];
      }
    };
  }
  return out;
}

Tensor masked_sq_mean(const Tensor& a, const Tensor& b, const Tensor& mask) {
  if (a->shape.size() != 4 || a->shape[1] != 1)
    throw ContractViolation("masked_sq_mean: expects [N,1,H,W]");
  if (b && b->shape != a->shape) throw ContractViolation("masked_sq_mean: b shape mismatch");
  if (mask->shape != a->shape) throw ContractViolation("masked_sq_mean: mask shape mismatch");
  const std::int64_t n = a->shape[0], hw = a->shape[2] * a->shape[3];
  auto out = make_tensor({n});
  out->op = "masked_sq_mean";
  auto inv_count = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  for (std::int64_t s = 0; s < n; ++s) {
    const double* av = a->value.data() + s * hw;
    const double* bv = b ? b->value.data() + s * hw : nullptr;
    const double* mv = mask->value.data() + s * hw;
    double count = 0.0, acc = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) {
      const double d = av[i] - (bv ? bv[i] : 0.0);
      acc += mv[i] * d * d;
      count += mv[i];
    }
    if (count <= 0.0) throw ContractViolation("masked_sq_mean: empty mask");
    (*inv_count)[s] = 1.0 / count;
    out->value[s] = acc / count;
  }
  out->requires_grad = a->requires_grad || (b && b->requires_grad);
  if (out->requires_grad) {
    out->parents = b ? std::vector<Tensor>{a, b, mask} : std::vector<Tensor>{a, mask};
    Tensor pa = a, pb = b, pm = mask;
    out->backward_fn = [pa, pb, pm, inv_count, n, hw](TensorNode& self) {
      if (pa->requires_grad) pa->ensure_grad();
      if (pb && pb->requires_grad) pb->ensure_grad();
      for (std::int64_t s = 0; s < n; ++s) {
        const double g = self.grad[s] * (*inv_count)[s];
        const double* av = pa->value.data() + s * hw;
        const double* bv = pb ? pb->value.data() + s * hw : nullptr;
        const double* mv = pm->value.data() + s * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
          const double d = 2.0 * g * mv[i] * (av[i] - (bv ? bv[i] : 0.0));
          if (pa->requires_grad) pa->grad[s * hw + i] += d;
          if (pb && pb->requires_grad) pb->grad[s * hw + i] -= d;
        }
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

void backward(const Tensor& root) {
  if (!root->is_scalar()) throw ContractViolation("backward: root must be scalar");
  if (!root->requires_grad) return;

  // Iterative post-order DFS; each node is visited exactly once.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

void zero_grads(const std::vector<Tensor>& params) {
  for (const auto& p : params) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

double grad_check(const std::function<Tensor()>& build, const std::vector<Tensor>& leaves,
                  double epsilon, int max_probes_per_leaf, std::uint64_t probe_seed) {
  if (epsilon <= 0.0) throw ContractViolation("grad_check: epsilon must be > 0");

  auto root = build();
  backward(root);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& leaf : leaves) {
    leaf->ensure_grad();
    analytic.push_back(leaf->grad);
    leaf->zero_grad();
  }

  Rng rng(probe_seed);
  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    const std::int64_t n = leaf->numel();
    std::vector<std::int64_t> probes;
    if (max_probes_per_leaf <= 0 || n <= max_probes_per_leaf) {
      probes.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) probes[i] = i;
    } else {
      for (int i = 0; i < max_probes_per_leaf; ++i)
        probes.push_back(static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(n))));
    }
    for (auto idx : probes) {
      const double saved = leaf->value[idx];
      leaf->value[idx] = saved + epsilon;
      const double fp = build()->value[0];
      leaf->value[idx] = saved - epsilon;
      const double fm = build()->value[0];
      leaf->value[idx] = saved;
      const double fd = (fp - fm) / (2.0 * epsilon);
      const double an = analytic[li][idx];
      const double scale = std::max(std::fabs(fd), std::fabs(an));
      if (scale < 1e-10) continue;  // both effectively zero: error 0
      worst = std::max(worst, std::fabs(fd - an) / std::max(scale, 1e-8));
    }
  }
  return worst;
}

}  // namespace petsynth
