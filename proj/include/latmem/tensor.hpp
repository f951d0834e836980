#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "latmem/rng.hpp"

namespace latmem {

// Dense double-precision tensor with reverse-mode gradient tracking.
// A Tensor is a cheap handle onto a shared node; the node owns the value
// buffer, the (lazily allocated) gradient buffer and, for non-leaf nodes,
// the closure that propagates gradients to its parents.
//
// Values are immutable once a node has been consumed by another op; grads
// accumulate until explicitly reset (zero_grad).

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until touched by backward
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> backfn;  // receives *this

  size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

// RAII guard that disables graph recording (pure numeric evaluation).
struct NoGrad {
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;
};
bool grad_enabled();

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor from(std::vector<int> shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value);
  static Tensor randn(std::vector<int> shape, Rng& rng, double scale,
                      bool requires_grad = false);
  static Tensor identity(int n);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int rows() const { return node_->shape[0]; }
  int cols() const { return node_->shape[1]; }
  size_t numel() const { return node_->numel(); }

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }
  double operator()(int i, int j) const {
    return node_->data[static_cast<size_t>(i) * cols() + j];
  }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->numel(), 0.0);
  }

  // Reverse pass from a scalar loss. Visits each reachable node exactly
  // once in reverse topological order; grads accumulate across calls.
  void backward() const;

  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor gelu(const Tensor& a);
Tensor exp_of(const Tensor& a);
// gradient 1 strictly inside [lo, hi], 0 outside
Tensor clamp(const Tensor& a, double lo, double hi);
// elementwise min; gradient follows the smaller input (ties -> a)
Tensor minimum(const Tensor& a, const Tensor& b);

// ---- linear algebra (2-D) ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T
Tensor transpose(const Tensor& a);

// ---- structural (2-D) ----
Tensor narrow(const Tensor& a, int axis, int start, int len);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// broadcast-add a 1 x n row vector to every row of a
Tensor add_rowvec(const Tensor& a, const Tensor& row);
// gather rows of a table by index (gradient scatters back into the table)
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);

// ---- reductions / activations ----
Tensor sum(const Tensor& a);
Tensor mean_all(const Tensor& a);
// row-wise softmax of (logits + mask); -inf mask entries give exactly 0
Tensor softmax_masked(const Tensor& logits, const Tensor& mask);
Tensor log_softmax_rows(const Tensor& logits);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
// scaled inverted dropout; identity when rate == 0
Tensor dropout(const Tensor& x, double rate, Rng& rng);

// log-density of `sampled` under N(mean, sigma^2 I), summed over elements;
// differentiable w.r.t. mean. sigma == 0 returns the zero scalar.
Tensor gaussian_log_density(const Tensor& mean,
                            const std::vector<double>& sampled, double sigma);

}  // namespace latmem
