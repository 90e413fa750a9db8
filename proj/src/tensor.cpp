#include "multiwin/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace multiwin {

namespace {

thread_local bool g_grad_enabled = true;
thread_local bool g_finite_checks = false;
thread_local double g_attention_macs = 0.0;

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

// C[m,n] (+)= A[m,k] * B[k,n]
void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
  CMap A(a, m, k), B(b, k, n);
  MMap C(c, m, n);
  if (accumulate)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n, bool accumulate) {
  CMap A(a, m, k), B(b, n, k);
  MMap C(c, m, n);
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
void gemm_tn(const double* a, const double* b, double* c, int k, int m, int n, bool accumulate) {
  CMap A(a, k, m), B(b, k, n);
  MMap C(c, m, n);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

void check_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) throw std::runtime_error("non-finite value produced by an op");
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks() { return g_finite_checks; }

namespace opcount {
void reset_attention_macs() { g_attention_macs = 0.0; }
double attention_macs() { return g_attention_macs; }
void add_attention_macs(double n) { g_attention_macs += n; }
}  // namespace opcount

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double fill, bool requires_grad) {
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = std::move(shape);
  t.node_->value.assign(shape_numel(t.node_->shape), fill);
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
  check(shape_numel(shape) == static_cast<int64_t>(data.size()),
        "from_data: shape does not match data length");
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = std::move(shape);
  t.node_->value = std::move(data);
  t.node_->requires_grad = requires_grad;
  return t;
}

bool Tensor::all_finite() const {
  for (double x : node_->value)
    if (!std::isfinite(x)) return false;
  return true;
}

Tensor Tensor::make(std::vector<int> shape, std::vector<double> value, std::vector<Tensor> parents,
                    std::function<void(Node&)> backward_fn) {
  check(shape_numel(shape) == static_cast<int64_t>(value.size()),
        "op result: shape does not match value length");
  if (g_finite_checks) check_finite(value);
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = std::move(shape);
  t.node_->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents)
      if (p.defined() && p.requires_grad()) {
        needs = true;
        break;
      }
  }
  if (needs) {
    t.node_->requires_grad = true;
    t.node_->parents.reserve(parents.size());
    for (const auto& p : parents) t.node_->parents.push_back(p.node());
    t.node_->backward_fn = std::move(backward_fn);
  }
  return t;
}

void Tensor::backward() {
  check(numel() == 1, "backward() requires a scalar root");
  check(node_->requires_grad, "backward() on a graph with no gradients required");

  // Post-order DFS; reversed, it yields a valid topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      n->backward_fn(*n);
      if (g_finite_checks) check_finite(n->grad);
    }
  }
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "add: shape mismatch");
  std::vector<double> out(a.data());
  const auto& bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  auto an = a.node(), bn = b.node();
  return Tensor::make(a.shape(), std::move(out), {a, b}, [an, bn](Tensor::Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "sub: shape mismatch");
  std::vector<double> out(a.data());
  const auto& bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  auto an = a.node(), bn = b.node();
  return Tensor::make(a.shape(), std::move(out), {a, b}, [an, bn](Tensor::Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch");
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a.node(), bn = b.node();
  return Tensor::make(a.shape(), std::move(out), {a, b}, [an, bn](Tensor::Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (double& x : out) x *= c;
  auto an = a.node();
  return Tensor::make(a.shape(), std::move(out), {a}, [an, c](Tensor::Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += c * self.grad[i];
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
  check(a.shape().size() == 2 && bias.shape().size() == 1 && a.dim(1) == bias.dim(0),
        "add_rowvec: shapes incompatible");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.data());
  const auto& bv = bias.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[size_t(i) * n + j] += bv[j];
  auto an = a.node(), bn = bias.node();
  return Tensor::make(a.shape(), std::move(out), {a, bias}, [an, bn, m, n](Tensor::Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) bn->grad[j] += self.grad[size_t(i) * n + j];
    }
  });
}

Tensor add_const(const Tensor& a, const std::vector<double>& constant) {
  check(constant.size() == static_cast<size_t>(a.numel()), "add_const: size mismatch");
  std::vector<double> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] += constant[i];
  auto an = a.node();
  return Tensor::make(a.shape(), std::move(out), {a}, [an](Tensor::Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
  });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(0),
        "matmul: shapes incompatible");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(size_t(m) * n);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  auto an = a.node(), bn = b.node();
  return Tensor::make({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](Tensor::Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      gemm_nt(self.grad.data(), bn->value.data(), an->grad.data(), m, n, k, true);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      gemm_tn(an->value.data(), self.grad.data(), bn->grad.data(), m, k, n, true);
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(1),
        "matmul_nt: shapes incompatible");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<double> out(size_t(m) * n);
  gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  auto an = a.node(), bn = b.node();
  return Tensor::make({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](Tensor::Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      gemm_nn(self.grad.data(), bn->value.data(), an->grad.data(), m, n, k, true);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      gemm_tn(self.grad.data(), an->value.data(), bn->grad.data(), m, n, k, true);
    }
  });
}

Tensor gather_rows(const Tensor& a, std::vector<int> rows) {
  check(a.shape().size() == 2, "gather_rows: expects a matrix");
  const int n = a.dim(1);
  const int m_in = a.dim(0);
  std::vector<double> out(rows.size() * size_t(n));
  const auto& av = a.data();
  for (size_t r = 0; r < rows.size(); ++r) {
    check(rows[r] >= 0 && rows[r] < m_in, "gather_rows: index out of range");
    std::copy_n(av.begin() + size_t(rows[r]) * n, n, out.begin() + r * n);
  }
  auto an = a.node();
  auto idx = std::make_shared<std::vector<int>>(std::move(rows));
  return Tensor::make({static_cast<int>(idx->size()), n}, std::move(out), {a},
                      [an, idx, n](Tensor::Node& self) {
                        if (!an->requires_grad) return;
                        an->ensure_grad();
                        for (size_t r = 0; r < idx->size(); ++r) {
                          double* dst = an->grad.data() + size_t((*idx)[r]) * n;
                          const double* src = self.grad.data() + r * n;
                          for (int j = 0; j < n; ++j) dst[j] += src[j];
                        }
                      });
}

Tensor reshape(const Tensor& a, std::vector<int> new_shape) {
  check(shape_numel(new_shape) == a.numel(), "reshape: numel mismatch");
  auto an = a.node();
  return Tensor::make(std::move(new_shape), a.data(), {a}, [an](Tensor::Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  check(a.shape().size() == 2 && c0 >= 0 && c1 <= a.dim(1) && c0 < c1, "slice_cols: bad range");
  const int m = a.dim(0), n = a.dim(1), w = c1 - c0;
  std::vector<double> out(size_t(m) * w);
  const auto& av = a.data();
  for (int i = 0; i < m; ++i)
    std::copy_n(av.begin() + size_t(i) * n + c0, w, out.begin() + size_t(i) * w);
  auto an = a.node();
  return Tensor::make({m, w}, std::move(out), {a}, [an, m, n, w, c0](Tensor::Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int i = 0; i < m; ++i) {
      double* dst = an->grad.data() + size_t(i) * n + c0;
      const double* src = self.grad.data() + size_t(i) * w;
      for (int j = 0; j < w; ++j) dst[j] += src[j];
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_cols: no parts");
  const int m = parts[0].dim(0);
  int total = 0;
  for (const auto& p : parts) {
    check(p.shape().size() == 2 && p.dim(0) == m, "concat_cols: row mismatch");
    total += p.dim(1);
  }
  std::vector<double> out(size_t(m) * total);
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.dim(1);
    const auto& pv = p.data();
    for (int i = 0; i < m; ++i)
      std::copy_n(pv.begin() + size_t(i) * w, w, out.begin() + size_t(i) * total + off);
    off += w;
  }
  std::vector<std::shared_ptr<Tensor::Node>> nodes;
  std::vector<int> widths;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.dim(1));
  }
  return Tensor::make({m, total}, std::move(out), parts,
                      [nodes, widths, m, total](Tensor::Node& self) {
                        int off = 0;
                        for (size_t pi = 0; pi < nodes.size(); ++pi) {
                          const int w = widths[pi];
                          if (nodes[pi]->requires_grad) {
                            nodes[pi]->ensure_grad();
                            for (int i = 0; i < m; ++i) {
                              double* dst = nodes[pi]->grad.data() + size_t(i) * w;
                              const double* src = self.grad.data() + size_t(i) * total + off;
                              for (int j = 0; j < w; ++j) dst[j] += src[j];
                            }
                          }
                          off += w;
                        }
                      });
}

Tensor select_scalar(const Tensor& a, int flat_index) {
  check(flat_index >= 0 && flat_index < a.numel(), "select_scalar: index out of range");
  auto an = a.node();
  return Tensor::make({1}, {a.data()[size_t(flat_index)]}, {a},
                      [an, flat_index](Tensor::Node& self) {
                        if (!an->requires_grad) return;
                        an->ensure_grad();
                        an->grad[size_t(flat_index)] += self.grad[0];
                      });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  auto an = a.node();
  return Tensor::make({1}, {s}, {a}, [an](Tensor::Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (double& g : an->grad) g += self.grad[0];
  });
}

// ---- nonlinearities ----

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  std::vector<double> out(a.numel());
  const auto& av = a.data();
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = av[i] * 0.5 * (1.0 + std::erf(av[i] * inv_sqrt2));
  auto an = a.node();
  return Tensor::make(a.shape(), std::move(out), {a}, [an](Tensor::Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const double x = an->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      an->grad[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
  check(a.shape().size() == 2, "layer_norm: expects a matrix");
  const int m = a.dim(0), n = a.dim(1);
  check(gamma.numel() == n && beta.numel() == n, "layer_norm: parameter size mismatch");
  std::vector<double> out(size_t(m) * n);
  auto xhat = std::make_shared<std::vector<double>>(size_t(m) * n);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  const auto& av = a.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();
  for (int i = 0; i < m; ++i) {
    const double* row = av.data() + size_t(i) * n;
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += row[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (int j = 0; j < n; ++j) {
      const double xh = (row[j] - mean) * is;
      (*xhat)[size_t(i) * n + j] = xh;
      out[size_t(i) * n + j] = xh * gv[j] + bv[j];
    }
  }
  auto an = a.node(), gn = gamma.node(), bn = beta.node();
  return Tensor::make(a.shape(), std::move(out), {a, gamma, beta},
                      [an, gn, bn, xhat, inv_std, m, n](Tensor::Node& self) {
                        for (int i = 0; i < m; ++i) {
                          const double* g = self.grad.data() + size_t(i) * n;
                          const double* xh = xhat->data() + size_t(i) * n;
                          if (gn->requires_grad) {
                            gn->ensure_grad();
                            for (int j = 0; j < n; ++j) gn->grad[j] += g[j] * xh[j];
                          }
                          if (bn->requires_grad) {
                            bn->ensure_grad();
                            for (int j = 0; j < n; ++j) bn->grad[j] += g[j];
                          }
                          if (an->requires_grad) {
                            an->ensure_grad();
                            double sum_gg = 0.0, sum_ggx = 0.0;
                            for (int j = 0; j < n; ++j) {
                              const double gg = g[j] * gn->value[j];
                              sum_gg += gg;
                              sum_ggx += gg * xh[j];
                            }
                            double* da = an->grad.data() + size_t(i) * n;
                            const double is = (*inv_std)[i];
                            for (int j = 0; j < n; ++j) {
                              const double gg = g[j] * gn->value[j];
                              da[j] += is * (gg - (sum_gg + xh[j] * sum_ggx) / n);
                            }
                          }
                        }
                      });
}

namespace {

// Stable row softmax into `out`; both may alias.
void softmax_rows(const double* in, double* out, int m, int n) {
  for (int i = 0; i < m; ++i) {
    const double* row = in + size_t(i) * n;
    double* orow = out + size_t(i) * n;
    double mx = row[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    const double inv = 1.0 / denom;
    for (int j = 0; j < n; ++j) orow[j] *= inv;
  }
}

}  // namespace

Tensor row_softmax(const Tensor& a) {
  check(a.shape().size() == 2, "row_softmax: expects a matrix");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(size_t(m) * n);
  softmax_rows(a.data().data(), out.data(), m, n);
  auto an = a.node();
  return Tensor::make(a.shape(), std::move(out), {a}, [an, m, n](Tensor::Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int i = 0; i < m; ++i) {
      const double* y = self.value.data() + size_t(i) * n;
      const double* g = self.grad.data() + size_t(i) * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += g[j] * y[j];
      double* da = an->grad.data() + size_t(i) * n;
      for (int j = 0; j < n; ++j) da[j] += y[j] * (g[j] - dot);
    }
  });
}

// ---- transformer-specific ----

namespace {

struct RopeTable {
  // cos/sin per (row, pair); pairs cover the x half then the y half.
  std::vector<double> cosv, sinv;
  int n_pairs = 0;
};

RopeTable build_rope_table(const std::vector<std::pair<int, int>>& positions, int d, double base) {
  check(d % 4 == 0, "rope: head dim must be divisible by 4");
  const int quarter = d / 4;  // pairs per axis
  RopeTable t;
  t.n_pairs = d / 2;
  t.cosv.resize(positions.size() * size_t(t.n_pairs));
  t.sinv.resize(positions.size() * size_t(t.n_pairs));
  std::vector<double> freq(quarter);
  for (int j = 0; j < quarter; ++j) freq[j] = std::pow(base, -4.0 * j / d);
  for (size_t i = 0; i < positions.size(); ++i) {
    for (int j = 0; j < quarter; ++j) {
      const double ax = positions[i].first * freq[j];
      const double ay = positions[i].second * freq[j];
      t.cosv[i * t.n_pairs + j] = std::cos(ax);
      t.sinv[i * t.n_pairs + j] = std::sin(ax);
      t.cosv[i * t.n_pairs + quarter + j] = std::cos(ay);
      t.sinv[i * t.n_pairs + quarter + j] = std::sin(ay);
    }
  }
  return t;
}

void rope_rotate_buffer(const double* in, double* out, const RopeTable& t, int m, int d,
                        bool inverse) {
  const int n_pairs = d / 2;
  for (int i = 0; i < m; ++i) {
    const double* row = in + size_t(i) * d;
    double* orow = out + size_t(i) * d;
    for (int j = 0; j < n_pairs; ++j) {
      const double c = t.cosv[size_t(i) * n_pairs + j];
      const double s = inverse ? -t.sinv[size_t(i) * n_pairs + j] : t.sinv[size_t(i) * n_pairs + j];
      const double x = row[2 * j], y = row[2 * j + 1];
      orow[2 * j] = x * c - y * s;
      orow[2 * j + 1] = x * s + y * c;
    }
  }
}

}  // namespace

Tensor rope_apply(const Tensor& a, const std::vector<std::pair<int, int>>& positions, double base) {
  check(a.shape().size() == 2, "rope_apply: expects a matrix");
  const int m = a.dim(0), d = a.dim(1);
  check(positions.size() == static_cast<size_t>(m), "rope_apply: position count mismatch");
  auto table = std::make_shared<RopeTable>(build_rope_table(positions, d, base));
  std::vector<double> out(size_t(m) * d);
  rope_rotate_buffer(a.data().data(), out.data(), *table, m, d, false);
  auto an = a.node();
  return Tensor::make(a.shape(), std::move(out), {a}, [an, table, m, d](Tensor::Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    // Rotation is orthogonal per pair: the adjoint is the inverse rotation.
    std::vector<double> tmp(size_t(m) * d);
    rope_rotate_buffer(self.grad.data(), tmp.data(), *table, m, d, true);
    for (size_t i = 0; i < tmp.size(); ++i) an->grad[i] += tmp[i];
  });
}

Tensor attention_head(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& tau,
                      double tau_mult) {
  check(q.shape().size() == 2 && k.shape().size() == 2 && v.shape().size() == 2,
        "attention_head: expects matrices");
  const int m = q.dim(0), d = q.dim(1), n = k.dim(0);
  check(k.dim(1) == d && v.dim(0) == n && v.dim(1) == d, "attention_head: K/V shape mismatch");
  check(tau.numel() == 1, "attention_head: tau must be a scalar tensor");
  check(tau.item() > 0.0 && tau_mult > 0.0, "attention_head: temperature must be positive");

  const double c = tau.item() * tau_mult / std::sqrt(double(d));
  std::vector<double> weights(size_t(m) * n);
  gemm_nt(q.data().data(), k.data().data(), weights.data(), m, d, n, false);
  for (double& x : weights) x *= c;
  softmax_rows(weights.data(), weights.data(), m, n);
  std::vector<double> out(size_t(m) * d);
  gemm_nn(weights.data(), v.data().data(), out.data(), m, n, d, false);
  opcount::add_attention_macs(2.0 * double(m) * double(n) * double(d));

  auto qn = q.node(), kn = k.node(), vn = v.node(), tn = tau.node();
  return Tensor::make(
      q.shape(), std::move(out), {q, k, v, tau},
      [qn, kn, vn, tn, tau_mult, m, n, d](Tensor::Node& self) {
        // Recompute the [m,n] weight matrix instead of keeping it alive in
        // the graph; at full resolution it dominates memory otherwise.
        const double inv_sqrt_d = 1.0 / std::sqrt(double(d));
        const double c = tn->value[0] * tau_mult * inv_sqrt_d;
        std::vector<double> raw(size_t(m) * n);
        gemm_nt(qn->value.data(), kn->value.data(), raw.data(), m, d, n, false);
        std::vector<double> probs(size_t(m) * n);
        for (size_t i = 0; i < raw.size(); ++i) probs[i] = raw[i] * c;
        softmax_rows(probs.data(), probs.data(), m, n);

        if (vn->requires_grad) {
          vn->ensure_grad();
          gemm_tn(probs.data(), self.grad.data(), vn->grad.data(), m, n, d, true);
        }

        std::vector<double> dprobs(size_t(m) * n);
        gemm_nt(self.grad.data(), vn->value.data(), dprobs.data(), m, d, n, false);
        // Softmax backward, in place over dprobs.
        for (int i = 0; i < m; ++i) {
          double* dp = dprobs.data() + size_t(i) * n;
          const double* p = probs.data() + size_t(i) * n;
          double dot = 0.0;
          for (int j = 0; j < n; ++j) dot += dp[j] * p[j];
          for (int j = 0; j < n; ++j) dp[j] = p[j] * (dp[j] - dot);
        }

        if (tn->requires_grad) {
          tn->ensure_grad();
          double acc = 0.0;
          for (size_t i = 0; i < raw.size(); ++i) acc += dprobs[i] * raw[i];
          tn->grad[0] += acc * tau_mult * inv_sqrt_d;
        }
        if (qn->requires_grad) {
          qn->ensure_grad();
          std::vector<double> dq(size_t(m) * d);
          gemm_nn(dprobs.data(), kn->value.data(), dq.data(), m, n, d, false);
          for (size_t i = 0; i < dq.size(); ++i) qn->grad[i] += c * dq[i];
        }
        if (kn->requires_grad) {
          kn->ensure_grad();
          std::vector<double> dk(size_t(n) * d);
          gemm_tn(dprobs.data(), qn->value.data(), dk.data(), m, n, d, false);
          for (size_t i = 0; i < dk.size(); ++i) kn->grad[i] += c * dk[i];
        }
      });
}

// ---- convolution / upsampling ----

namespace {

// col buffer layout: [h*w, 9*c_in], kernel taps ordered (dy, dx) row-major.
void im2col_3x3(const double* x, double* col, int h, int w, int c_in) {
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      double* dst = col + (size_t(y) * w + xx) * 9 * c_in;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int sy = y + dy, sx = xx + dx;
          if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
            const double* src = x + (size_t(sy) * w + sx) * c_in;
            std::copy_n(src, c_in, dst);
          } else {
            std::fill_n(dst, c_in, 0.0);
          }
          dst += c_in;
        }
      }
    }
  }
}

void col2im_3x3(const double* col, double* x_grad, int h, int w, int c_in) {
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      const double* src = col + (size_t(y) * w + xx) * 9 * c_in;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int sy = y + dy, sx = xx + dx;
          if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
            double* dst = x_grad + (size_t(sy) * w + sx) * c_in;
            for (int c = 0; c < c_in; ++c) dst[c] += src[c];
          }
          src += c_in;
        }
      }
    }
  }
}

}  // namespace

Tensor conv3x3(const Tensor& x, int h, int w, const Tensor& weight, const Tensor& bias) {
  check(x.shape().size() == 2 && x.dim(0) == h * w, "conv3x3: map shape mismatch");
  const int c_in = x.dim(1);
  check(weight.shape().size() == 2 && weight.dim(0) == 9 * c_in, "conv3x3: weight shape mismatch");
  const int c_out = weight.dim(1);
  check(bias.numel() == c_out, "conv3x3: bias size mismatch");
  if (h < 3 || w < 3) throw WindowTooSmall("conv3x3 needs a map of at least 3x3 tokens");

  std::vector<double> col(size_t(h) * w * 9 * c_in);
  im2col_3x3(x.data().data(), col.data(), h, w, c_in);
  std::vector<double> out(size_t(h) * w * c_out);
  gemm_nn(col.data(), weight.data().data(), out.data(), h * w, 9 * c_in, c_out, false);
  const auto& bv = bias.data();
  for (int i = 0; i < h * w; ++i)
    for (int j = 0; j < c_out; ++j) out[size_t(i) * c_out + j] += bv[j];

  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return Tensor::make(
      {h * w, c_out}, std::move(out), {x, weight, bias},
      [xn, wn, bn, h, w, c_in, c_out](Tensor::Node& self) {
        std::vector<double> col(size_t(h) * w * 9 * c_in);
        im2col_3x3(xn->value.data(), col.data(), h, w, c_in);
        if (wn->requires_grad) {
          wn->ensure_grad();
          gemm_tn(col.data(), self.grad.data(), wn->grad.data(), h * w, 9 * c_in, c_out, true);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int i = 0; i < h * w; ++i)
            for (int j = 0; j < c_out; ++j) bn->grad[j] += self.grad[size_t(i) * c_out + j];
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          std::vector<double> dcol(size_t(h) * w * 9 * c_in);
          gemm_nt(self.grad.data(), wn->value.data(), dcol.data(), h * w, c_out, 9 * c_in, false);
          col2im_3x3(dcol.data(), xn->grad.data(), h, w, c_in);
        }
      });
}

Tensor pixel_shuffle(const Tensor& x, int h, int w, int p) {
  check(x.shape().size() == 2 && x.dim(0) == h * w, "pixel_shuffle: map shape mismatch");
  check(x.dim(1) % (p * p) == 0, "pixel_shuffle: channels not divisible by p^2");
  const int c = x.dim(1) / (p * p);
  const int out_w = w * p;
  std::vector<double> out(size_t(h) * w * p * p * c);
  const auto& xv = x.data();
  for (int ty = 0; ty < h; ++ty)
    for (int tx = 0; tx < w; ++tx) {
      const double* src = xv.data() + (size_t(ty) * w + tx) * p * p * c;
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px) {
          double* dst = out.data() + (size_t(ty * p + py) * out_w + (tx * p + px)) * c;
          std::copy_n(src + (size_t(py) * p + px) * c, c, dst);
        }
    }
  auto xn = x.node();
  return Tensor::make({h * p * out_w, c}, std::move(out), {x},
                      [xn, h, w, p, c, out_w](Tensor::Node& self) {
                        if (!xn->requires_grad) return;
                        xn->ensure_grad();
                        for (int ty = 0; ty < h; ++ty)
                          for (int tx = 0; tx < w; ++tx) {
                            double* dst = xn->grad.data() + (size_t(ty) * w + tx) * p * p * c;
                            for (int py = 0; py < p; ++py)
                              for (int px = 0; px < p; ++px) {
                                const double* src =
                                    self.grad.data() +
                                    (size_t(ty * p + py) * out_w + (tx * p + px)) * c;
                                for (int ch = 0; ch < c; ++ch)
                                  dst[(size_t(py) * p + px) * c + ch] += src[ch];
                              }
                          }
                      });
}

// ---- objective kernels ----

Tensor cross_entropy_sum(const Tensor& logits, std::span<const int> labels,
                         std::span<const uint8_t> supervised, int64_t* n_supervised) {
  check(logits.shape().size() == 2, "cross_entropy_sum: expects [npx, k] logits");
  const int npx = logits.dim(0), k = logits.dim(1);
  check(labels.size() == static_cast<size_t>(npx) && supervised.size() == labels.size(),
        "cross_entropy_sum: label/mask size mismatch");
  const auto& lv = logits.data();
  double total = 0.0;
  int64_t count = 0;
  for (int i = 0; i < npx; ++i) {
    if (!supervised[i]) continue;
    check(labels[i] >= 0 && labels[i] < k, "cross_entropy_sum: label out of range");
    const double* row = lv.data() + size_t(i) * k;
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
    total += std::log(denom) + mx - row[labels[i]];
    ++count;
  }
  if (n_supervised) *n_supervised = count;

  auto ln = logits.node();
  auto lab = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  auto sup = std::make_shared<std::vector<uint8_t>>(supervised.begin(), supervised.end());
  return Tensor::make({1}, {total}, {logits}, [ln, lab, sup, npx, k](Tensor::Node& self) {
    if (!ln->requires_grad) return;
    ln->ensure_grad();
    const double g = self.grad[0];
    for (int i = 0; i < npx; ++i) {
      if (!(*sup)[i]) continue;
      const double* row = ln->value.data() + size_t(i) * k;
      double* drow = ln->grad.data() + size_t(i) * k;
      double mx = row[0];
      for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
      double denom = 0.0;
      for (int j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
      for (int j = 0; j < k; ++j) {
        const double p = std::exp(row[j] - mx) / denom;
        drow[j] += g * (p - (j == (*lab)[i] ? 1.0 : 0.0));
      }
    }
  });
}

Tensor laplacian_sum(const Tensor& pred, std::span<const double> gt_u, std::span<const double> gt_v,
                     std::span<const uint8_t> supervised, int64_t* n_supervised) {
  check(pred.shape().size() == 2 && pred.dim(1) == 3,
        "laplacian_sum: expects [npx, 3] (u, v, log-scale)");
  const int npx = pred.dim(0);
  check(gt_u.size() == static_cast<size_t>(npx) && gt_v.size() == gt_u.size() &&
            supervised.size() == gt_u.size(),
        "laplacian_sum: ground-truth size mismatch");
  const auto& pv = pred.data();
  double total = 0.0;
  int64_t count = 0;
  for (int i = 0; i < npx; ++i) {
    if (!supervised[i]) continue;
    const double eu = pv[size_t(i) * 3 + 0] - gt_u[i];
    const double ev = pv[size_t(i) * 3 + 1] - gt_v[i];
    const double s = pv[size_t(i) * 3 + 2];
    total += (std::abs(eu) + std::abs(ev)) * std::exp(-s) + 2.0 * s;
    ++count;
  }
  if (n_supervised) *n_supervised = count;

  auto pn = pred.node();
  auto gu = std::make_shared<std::vector<double>>(gt_u.begin(), gt_u.end());
  auto gv = std::make_shared<std::vector<double>>(gt_v.begin(), gt_v.end());
  auto sup = std::make_shared<std::vector<uint8_t>>(supervised.begin(), supervised.end());
  return Tensor::make({1}, {total}, {pred}, [pn, gu, gv, sup, npx](Tensor::Node& self) {
    if (!pn->requires_grad) return;
    pn->ensure_grad();
    const double g = self.grad[0];
    for (int i = 0; i < npx; ++i) {
      if (!(*sup)[i]) continue;
      const double eu = pn->value[size_t(i) * 3 + 0] - (*gu)[i];
      const double ev = pn->value[size_t(i) * 3 + 1] - (*gv)[i];
      const double s = pn->value[size_t(i) * 3 + 2];
      const double es = std::exp(-s);
      const double sgn_u = (eu > 0.0) - (eu < 0.0);
      const double sgn_v = (ev > 0.0) - (ev < 0.0);
      pn->grad[size_t(i) * 3 + 0] += g * sgn_u * es;
      pn->grad[size_t(i) * 3 + 1] += g * sgn_v * es;
      pn->grad[size_t(i) * 3 + 2] += g * (2.0 - (std::abs(eu) + std::abs(ev)) * es);
    }
  });
}

}  // namespace multiwin
