#include "latmem/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace latmem {

namespace {

thread_local int g_no_grad_depth = 0;

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ")";
  return os.str();
}

size_t shape_numel(const std::vector<int>& s) {
  size_t n = 1;
  for (int d : s) n *= static_cast<size_t>(d);
  return n;
}

bool any_requires(const std::vector<Tensor>& parents) {
  for (const auto& p : parents)
    if (p.requires_grad()) return true;
  return false;
}

// Creates the result node; records the graph edge only when grad mode is on
// and at least one parent requires grad.
Tensor make_result(std::vector<int> shape, std::vector<double> data,
                   const std::vector<Tensor>& parents,
                   std::function<void(TensorNode&)> backfn) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (grad_enabled() && any_requires(parents)) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backfn = std::move(backfn);
  }
  return Tensor(std::move(node));
}

void check_2d(const Tensor& t, const char* op) {
  if (t.shape().size() != 2)
    throw ShapeError(std::string(op) + ": expected 2-D tensor, got " +
                     shape_str(t.shape()));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

NoGrad::NoGrad() { ++g_no_grad_depth; }
NoGrad::~NoGrad() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto node = std::make_shared<TensorNode>();
  node->data.assign(shape_numel(shape), 0.0);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  auto node = std::make_shared<TensorNode>();
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  return Tensor(std::move(node));
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values,
                    bool requires_grad) {
  if (shape_numel(shape) != values.size())
    throw ShapeError("Tensor::from: " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double scale,
                     bool requires_grad) {
  auto t = zeros(std::move(shape), requires_grad);
  for (auto& v : t.data()) v = rng.normal() * scale;
  return t;
}

Tensor Tensor::identity(int n) {
  auto t = zeros({n, n});
  for (int i = 0; i < n; ++i) t.data()[static_cast<size_t>(i) * n + i] = 1.0;
  return t;
}

double Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item(): tensor is not scalar, shape " +
                     shape_str(shape()));
  return node_->data[0];
}

void Tensor::backward() const {
  if (numel() != 1)
    throw ShapeError("backward(): loss must be scalar, shape " +
                     shape_str(shape()));
  // topological order over the requires_grad subgraph
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      TensorNode* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
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
    TensorNode* n = *it;
    if (n->backfn) n->backfn(*n);
  }
}

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto &da = a.data(), &db = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    for (auto& p : n.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto &da = a.data(), &db = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto &da = a.data(), &db = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i)
        pa->grad[i] += n.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i)
        pb->grad[i] += n.grad[i] * pa->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  const auto& da = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] * c;
  return make_result(a.shape(), std::move(out), {a}, [c](TensorNode& n) {
    auto& p = n.parents[0];
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i] * c;
  });
}

Tensor add_scalar(const Tensor& a, double c) {
  std::vector<double> out(a.numel());
  const auto& da = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = da[i] + c;
  return make_result(a.shape(), std::move(out), {a}, [](TensorNode& n) {
    auto& p = n.parents[0];
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
  });
}

Tensor gelu(const Tensor& a) {
  // exact erf form; derivative Phi(x) + x phi(x)
  std::vector<double> out(a.numel());
  const auto& da = a.data();
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = 0.5 * da[i] * (1.0 + std::erf(da[i] * inv_sqrt2));
  return make_result(a.shape(), std::move(out), {a}, [](TensorNode& n) {
    auto& p = n.parents[0];
    p->ensure_grad();
    const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
    const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (size_t i = 0; i < n.grad.size(); ++i) {
      double x = p->data[i];
      double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      p->grad[i] += n.grad[i] * (cdf + x * pdf);
    }
  });
}

Tensor exp_of(const Tensor& a) {
  std::vector<double> out(a.numel());
  const auto& da = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(da[i]);
  return make_result(a.shape(), std::move(out), {a}, [](TensorNode& n) {
    auto& p = n.parents[0];
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      p->grad[i] += n.grad[i] * n.data[i];
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw ShapeError("clamp: lo > hi");
  std::vector<double> out(a.numel());
  const auto& da = a.data();
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = std::min(hi, std::max(lo, da[i]));
  return make_result(a.shape(), std::move(out), {a}, [lo, hi](TensorNode& n) {
    auto& p = n.parents[0];
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      if (p->data[i] > lo && p->data[i] < hi) p->grad[i] += n.grad[i];
  });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "minimum");
  std::vector<double> out(a.numel());
  const auto &da = a.data(), &db = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(da[i], db[i]);
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorNode& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    for (size_t i = 0; i < n.grad.size(); ++i) {
      const bool take_a = pa->data[i] <= pb->data[i];
      auto& p = take_a ? pa : pb;
      if (!p->requires_grad) continue;
      p->ensure_grad();
      p->grad[i] += n.grad[i];
    }
  });
}

// ------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions disagree, " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  const auto &da = a.data(), &db = b.data();
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const double av = da[static_cast<size_t>(i) * k + p];
      const double* brow = &db[static_cast<size_t>(p) * n];
      double* orow = &out[static_cast<size_t>(i) * n];
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  return make_result({m, n}, std::move(out), {a, b},
                     [m, k, n](TensorNode& node) {
                       auto& pa = node.parents[0];
                       auto& pb = node.parents[1];
                       // dA = dY B^T, dB = A^T dY
                       if (pa->requires_grad) {
                         pa->ensure_grad();
                         for (int i = 0; i < m; ++i)
                           for (int j = 0; j < n; ++j) {
                             const double g =
                                 node.grad[static_cast<size_t>(i) * n + j];
                             const double* brow =
                                 &pb->data[0];  // indexed below
                             for (int p = 0; p < k; ++p)
                               pa->grad[static_cast<size_t>(i) * k + p] +=
                                   g * brow[static_cast<size_t>(p) * n + j];
                           }
                       }
                       if (pb->requires_grad) {
                         pb->ensure_grad();
                         for (int i = 0; i < m; ++i)
                           for (int p = 0; p < k; ++p) {
                             const double av =
                                 pa->data[static_cast<size_t>(i) * k + p];
                             const double* grow =
                                 &node.grad[static_cast<size_t>(i) * n];
                             double* bg =
                                 &pb->grad[static_cast<size_t>(p) * n];
                             for (int j = 0; j < n; ++j)
                               bg[j] += av * grow[j];
                           }
                       }
                     });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul_nt");
  check_2d(b, "matmul_nt");
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: inner dimensions disagree, " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                     "^T");
  const int m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  const auto &da = a.data(), &db = b.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      const double* arow = &da[static_cast<size_t>(i) * k];
      const double* brow = &db[static_cast<size_t>(j) * k];
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      out[static_cast<size_t>(i) * n + j] = acc;
    }
  return make_result({m, n}, std::move(out), {a, b},
                     [m, k, n](TensorNode& node) {
                       auto& pa = node.parents[0];
                       auto& pb = node.parents[1];
                       // Y = A B^T: dA = dY B, dB = dY^T A
                       if (pa->requires_grad) {
                         pa->ensure_grad();
                         for (int i = 0; i < m; ++i)
                           for (int j = 0; j < n; ++j) {
                             const double g =
                                 node.grad[static_cast<size_t>(i) * n + j];
                             const double* brow =
                                 &pb->data[static_cast<size_t>(j) * k];
                             double* ag =
                                 &pa->grad[static_cast<size_t>(i) * k];
                             for (int p = 0; p < k; ++p)
                               ag[p] += g * brow[p];
                           }
                       }
                       if (pb->requires_grad) {
                         pb->ensure_grad();
                         for (int i = 0; i < m; ++i)
                           for (int j = 0; j < n; ++j) {
                             const double g =
                                 node.grad[static_cast<size_t>(i) * n + j];
                             const double* arow =
                                 &pa->data[static_cast<size_t>(i) * k];
                             double* bg =
                                 &pb->grad[static_cast<size_t>(j) * k];
                             for (int p = 0; p < k; ++p)
                               bg[p] += g * arow[p];
                           }
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  check_2d(a, "transpose");
  const int m = a.rows(), n = a.cols();
  std::vector<double> out(a.numel());
  const auto& da = a.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(j) * m + i] = da[static_cast<size_t>(i) * n + j];
  return make_result({n, m}, std::move(out), {a}, [m, n](TensorNode& node) {
    auto& p = node.parents[0];
    p->ensure_grad();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        p->grad[static_cast<size_t>(i) * n + j] +=
            node.grad[static_cast<size_t>(j) * m + i];
  });
}

// ------------------------------------------------------------------ structure

Tensor narrow(const Tensor& a, int axis, int start, int len) {
  check_2d(a, "narrow");
  const int m = a.rows(), n = a.cols();
  const int bound = axis == 0 ? m : n;
  if (axis < 0 || axis > 1 || start < 0 || len < 0 || start + len > bound)
    throw ShapeError("narrow: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") out of axis size " +
                     std::to_string(bound));
  std::vector<double> out;
  const auto& da = a.data();
  if (axis == 0) {
    out.assign(da.begin() + static_cast<size_t>(start) * n,
               da.begin() + static_cast<size_t>(start + len) * n);
    return make_result({len, n}, std::move(out), {a},
                       [start, n](TensorNode& node) {
                         auto& p = node.parents[0];
                         p->ensure_grad();
                         const size_t off = static_cast<size_t>(start) * n;
                         for (size_t i = 0; i < node.grad.size(); ++i)
                           p->grad[off + i] += node.grad[i];
                       });
  }
  out.resize(static_cast<size_t>(m) * len);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < len; ++j)
      out[static_cast<size_t>(i) * len + j] =
          da[static_cast<size_t>(i) * n + start + j];
  return make_result({m, len}, std::move(out), {a},
                     [m, n, start, len](TensorNode& node) {
                       auto& p = node.parents[0];
                       p->ensure_grad();
                       for (int i = 0; i < m; ++i)
                         for (int j = 0; j < len; ++j)
                           p->grad[static_cast<size_t>(i) * n + start + j] +=
                               node.grad[static_cast<size_t>(i) * len + j];
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty input");
  const int n = parts[0].cols();
  int m = 0;
  for (const auto& p : parts) {
    check_2d(p, "concat_rows");
    if (p.cols() != n)
      throw ShapeError("concat_rows: column mismatch " +
                       std::to_string(p.cols()) + " vs " + std::to_string(n));
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(m) * n);
  for (const auto& p : parts)
    out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<size_t> sizes;
  for (const auto& p : parts) sizes.push_back(p.numel());
  return make_result({m, n}, std::move(out), parts,
                     [sizes](TensorNode& node) {
                       size_t off = 0;
                       for (size_t k = 0; k < node.parents.size(); ++k) {
                         auto& p = node.parents[k];
                         if (p->requires_grad) {
                           p->ensure_grad();
                           for (size_t i = 0; i < sizes[k]; ++i)
                             p->grad[i] += node.grad[off + i];
                         }
                         off += sizes[k];
                       }
                     });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input");
  const int m = parts[0].rows();
  int n = 0;
  for (const auto& p : parts) {
    check_2d(p, "concat_cols");
    if (p.rows() != m)
      throw ShapeError("concat_cols: row mismatch " +
                       std::to_string(p.rows()) + " vs " + std::to_string(m));
    n += p.cols();
  }
  std::vector<double> out(static_cast<size_t>(m) * n);
  std::vector<int> widths;
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.cols();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        out[static_cast<size_t>(i) * n + off + j] =
            p.data()[static_cast<size_t>(i) * w + j];
    widths.push_back(w);
    off += w;
  }
  return make_result({m, n}, std::move(out), parts,
                     [m, n, widths](TensorNode& node) {
                       int off2 = 0;
                       for (size_t k = 0; k < node.parents.size(); ++k) {
                         auto& p = node.parents[k];
                         const int w = widths[k];
                         if (p->requires_grad) {
                           p->ensure_grad();
                           for (int i = 0; i < m; ++i)
                             for (int j = 0; j < w; ++j)
                               p->grad[static_cast<size_t>(i) * w + j] +=
                                   node.grad[static_cast<size_t>(i) * n +
                                             off2 + j];
                         }
                         off2 += w;
                       }
                     });
}

Tensor add_rowvec(const Tensor& a, const Tensor& row) {
  check_2d(a, "add_rowvec");
  if (row.numel() != static_cast<size_t>(a.cols()))
    throw ShapeError("add_rowvec: row width " + std::to_string(row.numel()) +
                     " vs matrix cols " + std::to_string(a.cols()));
  const int m = a.rows(), n = a.cols();
  std::vector<double> out(a.numel());
  const auto &da = a.data(), &dr = row.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(i) * n + j] =
          da[static_cast<size_t>(i) * n + j] + dr[j];
  return make_result(a.shape(), std::move(out), {a, row},
                     [m, n](TensorNode& node) {
                       auto& pa = node.parents[0];
                       auto& pr = node.parents[1];
                       if (pa->requires_grad) {
                         pa->ensure_grad();
                         for (size_t i = 0; i < node.grad.size(); ++i)
                           pa->grad[i] += node.grad[i];
                       }
                       if (pr->requires_grad) {
                         pr->ensure_grad();
                         for (int i = 0; i < m; ++i)
                           for (int j = 0; j < n; ++j)
                             pr->grad[j] +=
                                 node.grad[static_cast<size_t>(i) * n + j];
                       }
                     });
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
  check_2d(table, "embedding_rows");
  const int n = table.cols(), rows = table.rows();
  for (int id : ids)
    if (id < 0 || id >= rows)
      throw ShapeError("embedding_rows: id " + std::to_string(id) +
                       " out of table rows " + std::to_string(rows));
  std::vector<double> out;
  out.reserve(ids.size() * static_cast<size_t>(n));
  const auto& dt = table.data();
  for (int id : ids)
    out.insert(out.end(), dt.begin() + static_cast<size_t>(id) * n,
               dt.begin() + static_cast<size_t>(id + 1) * n);
  return make_result({static_cast<int>(ids.size()), n}, std::move(out),
                     {table}, [ids, n](TensorNode& node) {
                       auto& p = node.parents[0];
                       p->ensure_grad();
                       for (size_t r = 0; r < ids.size(); ++r) {
                         double* dst =
                             &p->grad[static_cast<size_t>(ids[r]) * n];
                         const double* src = &node.grad[r * n];
                         for (int j = 0; j < n; ++j) dst[j] += src[j];
                       }
                     });
}

// ---------------------------------------------------------------- reductions

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return make_result({1}, {acc}, {a}, [](TensorNode& node) {
    auto& p = node.parents[0];
    p->ensure_grad();
    for (auto& g : p->grad) g += node.grad[0];
  });
}

Tensor mean_all(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor softmax_masked(const Tensor& logits, const Tensor& mask) {
  check_2d(logits, "softmax_masked");
  check_same_shape(logits, mask, "softmax_masked");
  const int m = logits.rows(), n = logits.cols();
  std::vector<double> out(logits.numel());
  const auto &dl = logits.data(), &dm = mask.data();
  for (int i = 0; i < m; ++i) {
    const size_t off = static_cast<size_t>(i) * n;
    double mx = -std::numeric_limits<double>::infinity();
    int live = 0;
    for (int j = 0; j < n; ++j) {
      const double z = dl[off + j] + dm[off + j];
      if (std::isfinite(z)) {
        ++live;
        mx = std::max(mx, z);
      }
    }
    if (live == 0)
      throw ShapeError("softmax_masked: fully masked row " +
                       std::to_string(i));
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
      const double z = dl[off + j] + dm[off + j];
      out[off + j] = std::isfinite(z) ? std::exp(z - mx) : 0.0;
      denom += out[off + j];
    }
    for (int j = 0; j < n; ++j) out[off + j] /= denom;
  }
  return make_result(logits.shape(), std::move(out), {logits, mask},
                     [m, n](TensorNode& node) {
                       auto& p = node.parents[0];
                       if (!p->requires_grad) return;
                       p->ensure_grad();
                       for (int i = 0; i < m; ++i) {
                         const size_t off = static_cast<size_t>(i) * n;
                         double dot = 0.0;
                         for (int j = 0; j < n; ++j)
                           dot += node.grad[off + j] * node.data[off + j];
                         for (int j = 0; j < n; ++j)
                           p->grad[off + j] += node.data[off + j] *
                                               (node.grad[off + j] - dot);
                       }
                     });
}

Tensor log_softmax_rows(const Tensor& logits) {
  check_2d(logits, "log_softmax_rows");
  const int m = logits.rows(), n = logits.cols();
  std::vector<double> out(logits.numel());
  const auto& dl = logits.data();
  for (int i = 0; i < m; ++i) {
    const size_t off = static_cast<size_t>(i) * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j)
      if (dl[off + j] > mx) mx = dl[off + j];
    double denom = 0.0;
    for (int j = 0; j < n; ++j)
      if (std::isfinite(dl[off + j])) denom += std::exp(dl[off + j] - mx);
    const double lse = mx + std::log(denom);
    for (int j = 0; j < n; ++j) out[off + j] = dl[off + j] - lse;
  }
  return make_result(logits.shape(), std::move(out), {logits},
                     [m, n](TensorNode& node) {
                       auto& p = node.parents[0];
                       p->ensure_grad();
                       for (int i = 0; i < m; ++i) {
                         const size_t off = static_cast<size_t>(i) * n;
                         double gsum = 0.0;
                         for (int j = 0; j < n; ++j)
                           gsum += node.grad[off + j];
                         for (int j = 0; j < n; ++j) {
                           const double sm = std::exp(node.data[off + j]);
                           p->grad[off + j] +=
                               node.grad[off + j] - gsum * sm;
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  check_2d(x, "layer_norm");
  const int m = x.rows(), n = x.cols();
  if (gain.numel() != static_cast<size_t>(n) ||
      bias.numel() != static_cast<size_t>(n))
    throw ShapeError("layer_norm: gain/bias width mismatch");
  std::vector<double> out(x.numel());
  std::vector<double> mu(m), rstd(m);
  const auto &dx = x.data(), &dg = gain.data(), &db = bias.data();
  for (int i = 0; i < m; ++i) {
    const size_t off = static_cast<size_t>(i) * n;
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += dx[off + j];
    mu[i] = s / n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double c = dx[off + j] - mu[i];
      var += c * c;
    }
    var /= n;
    rstd[i] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j)
      out[off + j] = (dx[off + j] - mu[i]) * rstd[i] * dg[j] + db[j];
  }
  return make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [m, n, mu, rstd](TensorNode& node) {
        auto& px = node.parents[0];
        auto& pg = node.parents[1];
        auto& pb = node.parents[2];
        for (int i = 0; i < m; ++i) {
          const size_t off = static_cast<size_t>(i) * n;
          // xhat_j recomputed from cached mu/rstd
          if (pg->requires_grad) {
            pg->ensure_grad();
            for (int j = 0; j < n; ++j)
              pg->grad[j] += node.grad[off + j] *
                             (px->data[off + j] - mu[i]) * rstd[i];
          }
          if (pb->requires_grad) {
            pb->ensure_grad();
            for (int j = 0; j < n; ++j) pb->grad[j] += node.grad[off + j];
          }
          if (px->requires_grad) {
            px->ensure_grad();
            double sum_gy = 0.0, sum_gy_xhat = 0.0;
            for (int j = 0; j < n; ++j) {
              const double xhat = (px->data[off + j] - mu[i]) * rstd[i];
              const double gy = node.grad[off + j] * pg->data[j];
              sum_gy += gy;
              sum_gy_xhat += gy * xhat;
            }
            for (int j = 0; j < n; ++j) {
              const double xhat = (px->data[off + j] - mu[i]) * rstd[i];
              const double gy = node.grad[off + j] * pg->data[j];
              px->grad[off + j] +=
                  rstd[i] * (gy - sum_gy / n - xhat * sum_gy_xhat / n);
            }
          }
        }
      });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ShapeError("dropout: rate must be < 1");
  const double keep = 1.0 - rate;
  std::vector<double> mask(x.numel());
  for (auto& v : mask) v = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  std::vector<double> out(x.numel());
  const auto& dx = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = dx[i] * mask[i];
  return make_result(x.shape(), std::move(out), {x},
                     [mask](TensorNode& node) {
                       auto& p = node.parents[0];
                       p->ensure_grad();
                       for (size_t i = 0; i < node.grad.size(); ++i)
                         p->grad[i] += node.grad[i] * mask[i];
                     });
}

Tensor gaussian_log_density(const Tensor& mean,
                            const std::vector<double>& sampled, double sigma) {
  if (sigma < 0.0) throw ShapeError("gaussian_log_density: sigma < 0");
  if (sigma == 0.0) return Tensor::scalar(0.0);
  if (sampled.size() != mean.numel())
    throw ShapeError("gaussian_log_density: sample size mismatch");
  const double inv_var = 1.0 / (sigma * sigma);
  const double log_norm =
      -0.5 * std::log(2.0 * std::numbers::pi * sigma * sigma);
  double acc = 0.0;
  const auto& dm = mean.data();
  for (size_t i = 0; i < sampled.size(); ++i) {
    const double diff = sampled[i] - dm[i];
    acc += log_norm - 0.5 * diff * diff * inv_var;
  }
  return make_result({1}, {acc}, {mean},
                     [sampled, inv_var](TensorNode& node) {
                       auto& p = node.parents[0];
                       p->ensure_grad();
                       for (size_t i = 0; i < sampled.size(); ++i)
                         p->grad[i] += node.grad[0] *
                                       (sampled[i] - p->data[i]) * inv_var;
                     });
}

}  // namespace latmem
