#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "multiwin/errors.hpp"

namespace multiwin {

/// Reverse-mode autodiff tensor: a shared node holding a row-major value
/// buffer, a lazily allocated gradient accumulator and the backward closure
/// that produced it. Copying a Tensor aliases the node.
class Tensor {
 public:
  struct Node {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
      if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
  };

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double fill, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[size_t(i)]; }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }
  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<double>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  double item() const {
    check(numel() == 1, "item() requires a single-element tensor");
    return node_->value[0];
  }

  /// Backpropagates from this scalar through the recorded graph.
  void backward();

  void zero_grad() {
    node_->grad.assign(node_->value.size(), 0.0);
  }

  bool all_finite() const;

  std::shared_ptr<Node> node() const { return node_; }

  /// Builds an op result; records the backward closure only when gradients
  /// are enabled and some parent requires them.
  static Tensor make(std::vector<int> shape, std::vector<double> value,
                     std::vector<Tensor> parents, std::function<void(Node&)> backward_fn);

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

/// RAII guard disabling graph recording (inference paths).
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  bool prev;
};

/// Opt-in NaN/Inf assertion hook applied to every op output.
void set_finite_checks(bool on);
bool finite_checks();

/// Attention-scoped multiply-accumulate counter (thread-local). Counts the
/// token-by-token products QK^T and PV in forward attention, the terms that
/// scale with the square of the visible token count.
namespace opcount {
void reset_attention_macs();
double attention_macs();
void add_attention_macs(double n);
}  // namespace opcount

// ---- elementwise / linear algebra ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
/// a: [m,n], bias: [n], broadcast over rows.
Tensor add_rowvec(const Tensor& a, const Tensor& bias);
/// Adds a non-learned constant buffer (absolute positional embeddings).
Tensor add_const(const Tensor& a, const std::vector<double>& constant);
Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k]x[k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k]x[n,k]^T -> [m,n]
Tensor gather_rows(const Tensor& a, std::vector<int> rows);
Tensor reshape(const Tensor& a, std::vector<int> new_shape);
Tensor slice_cols(const Tensor& a, int c0, int c1);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor select_scalar(const Tensor& a, int flat_index);
Tensor sum(const Tensor& a);

// ---- nonlinearities / normalization ----

Tensor gelu(const Tensor& a);
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
Tensor row_softmax(const Tensor& a);

// ---- transformer-specific fused ops ----

/// 2D rotary embedding on per-head features [m, d]: the first half of the
/// head dim rotates by angles x * base^(-4j/d), the second half by the same
/// frequencies on y. Requires d % 4 == 0.
Tensor rope_apply(const Tensor& a, const std::vector<std::pair<int, int>>& positions, double base);

/// One attention head: softmax(tau * tau_mult * q k^T / sqrt(d)) v.
/// tau is a differentiable [1] tensor (the calibratable temperature);
/// tau_mult is the uniform sweep multiplier. The [m,n] weight matrix is
/// recomputed in backward instead of stored.
Tensor attention_head(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& tau,
                      double tau_mult = 1.0);

/// 3x3 same-padded convolution over a [h*w, c_in] row-major map.
/// weight: [9*c_in, c_out], bias: [c_out].
Tensor conv3x3(const Tensor& x, int h, int w, const Tensor& weight, const Tensor& bias);

/// [h*w, p*p*c] -> [(h*p)*(w*p), c]; per-token upsampling from channel
/// groups to a pixel block.
Tensor pixel_shuffle(const Tensor& x, int h, int w, int p);

// ---- fused objective kernels ----

/// Sum of per-pixel negative log-softmax over supervised pixels.
/// logits: [npx, k]; labels/supervised: npx entries. n_supervised receives
/// the count.
Tensor cross_entropy_sum(const Tensor& logits, std::span<const int> labels,
                         std::span<const uint8_t> supervised, int64_t* n_supervised);

/// Sum over supervised pixels of (|u-gu| + |v-gv|) * exp(-s) + 2s, where
/// pred rows are (u, v, s).
Tensor laplacian_sum(const Tensor& pred, std::span<const double> gt_u, std::span<const double> gt_v,
                     std::span<const uint8_t> supervised, int64_t* n_supervised);

}  // namespace multiwin
