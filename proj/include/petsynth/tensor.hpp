#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "petsynth/rng.hpp"

namespace petsynth {

class TensorNode;
using Tensor = std::shared_ptr<TensorNode>;

/// One node of the reverse-mode differentiation graph: a dense double array
/// plus the bookkeeping needed to backpropagate through the operation that
/// produced it. Leaves (inputs, parameters) have no parents.
///
/// Values are double precision in memory; checkpoint files store 32-bit
/// floats (see Container). Gradients are allocated lazily and only for nodes
/// with requires_grad set.
class TensorNode {
 public:
  std::vector<std::int64_t> shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::string name;  // set for parameter leaves, used in diagnostics

  const char* op = "leaf";
  std::vector<Tensor> parents;
  std::function<void(TensorNode&)> backward_fn;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
  }

  bool is_scalar() const { return numel() == 1; }

  /// Allocate the gradient buffer (zero-filled) if absent.
  void ensure_grad() {
    if (grad.empty()) grad.assign(static_cast<std::size_t>(numel()), 0.0);
  }

  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  }
};

Tensor make_tensor(std::vector<std::int64_t> shape, bool requires_grad = false);
Tensor make_tensor(std::vector<std::int64_t> shape, std::vector<double> values,
                   bool requires_grad = false);
Tensor make_scalar(double v, bool requires_grad = false);

/// Named parameter leaf, initialized to zeros.
Tensor make_param(const std::string& name, std::vector<std::int64_t> shape);

// ---------------------------------------------------------------------------
// Operations. Every op builds the backward closure needed for exact
// reverse-mode gradients. Shapes must match exactly unless one operand is
// scalar (numel 1), which broadcasts.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor abs_op(const Tensor& a);     // subgradient 0 at 0
Tensor square(const Tensor& a);
Tensor relu(const Tensor& a);       // derivative 0 at 0
Tensor prelu(const Tensor& a, const Tensor& alpha);  // alpha: learnable scalar
Tensor exp_op(const Tensor& a);
Tensor min_pair(const Tensor& a, const Tensor& b);  // ties take a

/// Reduce over one axis, or over all elements when axis == -1.
Tensor reduce_sum(const Tensor& a, int axis = -1);
Tensor reduce_mean(const Tensor& a, int axis = -1);

/// Minimum with argmin. Gradient flows exclusively to the winning element;
/// ties resolve to the lowest index along the reduced axis.
struct MinResult {
  Tensor value;
  std::vector<std::int64_t> indices;  // one winner index per output element
};
MinResult reduce_min(const Tensor& a, int axis = -1);

/// 2D cross-correlation, zero padded so output spatial size equals input.
/// input [N,C,H,W], kernel [F,C,k,k] with k odd, optional bias [F].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias = nullptr,
              int dilation = 1);

enum class DropoutMode { kTrain, kSample, kOff };

/// Inverted-scaling dropout: surviving elements are scaled by 1/(1-rate) at
/// drop time so kOff is a plain identity. kOff does not consume rng draws.
Tensor dropout(const Tensor& a, double rate, Rng& rng, DropoutMode mode);

/// Concatenate along the channel axis: [N,C1,H,W] + [N,C2,H,W] -> [N,C1+C2,H,W].
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Stack M equal-length vectors [N] into a matrix [N,M] (column m = input m).
Tensor stack_columns(const std::vector<Tensor>& columns);

/// Per-sample masked mean of squared differences:
///   out[n] = sum(mask * (a-b)^2) / sum(mask)   over sample n.
/// a, b: [N,1,H,W]; mask: same shape, entries {0,1}; b may be null (treated
/// as zeros). Throws if any sample's mask is empty.
Tensor masked_sq_mean(const Tensor& a, const Tensor& b, const Tensor& mask);

/// Run the backward pass from a scalar root. Interior gradients are
/// allocated fresh; parameter leaves accumulate, so zero them between steps.
void backward(const Tensor& root);

void zero_grads(const std::vector<Tensor>& params);

/// Central finite-difference check of every (sampled) element of every leaf
/// against the analytic gradient of the scalar built by `build`. Returns the
/// worst relative error; reports only, never throws on mismatch.
/// max_probes_per_leaf = 0 probes every element.
double grad_check(const std::function<Tensor()>& build, const std::vector<Tensor>& leaves,
                  double epsilon, int max_probes_per_leaf = 0, std::uint64_t probe_seed = 7);

}  // namespace petsynth
