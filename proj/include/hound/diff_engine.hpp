#pragma once

// Dense row-major matrices with tape-free reverse-mode differentiation.
//
// Every Tensor is a handle to a node of a computation graph. Results of
// operations remember their inputs and a backward closure; backward() walks
// the graph from a scalar loss in reverse topological order. Leaves created
// with Tensor::parameter() are the trainable state.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "hound/errors.hpp"

namespace hound {

// Norm guard. Normalization and cosine add its square under the root, so
// unit vectors stay exact while gradients exist at zero.
inline constexpr double kNormEpsilon = 1e-12;

struct Node;
using GradMap = std::unordered_map<const Node*, std::vector<double>>;
using BackwardFn = std::function<void(std::span<const double>, GradMap&)>;

struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(std::size_t rows, std::size_t cols, std::vector<double> values,
         bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (values.size() != rows * cols) {
      throw ShapeError("tensor value count " + std::to_string(values.size()) +
                       " does not match shape [" + std::to_string(rows) + "," +
                       std::to_string(cols) + "]");
    }
    node_->rows = rows;
    node_->cols = cols;
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return Tensor(rows, cols, std::vector<double>(rows * cols, 0.0));
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(1, 1, {v}, requires_grad);
  }
  static Tensor parameter(std::size_t rows, std::size_t cols,
                          std::vector<double> values) {
    return Tensor(rows, cols, std::move(values), true);
  }
  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(1, n, std::move(values));
  }

  bool defined() const { return node_ != nullptr; }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> values() const { return node_->value; }
  // Direct write access; meant for leaves (parameters, probes).
  std::vector<double>& mutable_values() { return node_->value; }

  double operator()(std::size_t r, std::size_t c) const {
    return node_->value[r * node_->cols + c];
  }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor " + shape_string());
    return node_->value[0];
  }
  std::vector<double> row_values(std::size_t r) const {
    auto first = node_->value.begin() + static_cast<std::ptrdiff_t>(r * cols());
    return {first, first + static_cast<std::ptrdiff_t>(cols())};
  }

  std::string shape_string() const {
    return "[" + std::to_string(rows()) + "," + std::to_string(cols()) + "]";
  }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Detached copy: same values, no graph linkage, no gradient.
inline Tensor detach(const Tensor& t) {
  return Tensor(t.rows(), t.cols(),
                std::vector<double>(t.values().begin(), t.values().end()));
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

namespace detail {

inline std::vector<double>& grad_slot(GradMap& grads, const Tensor& t) {
  auto [it, inserted] = grads.try_emplace(t.node().get());
  if (inserted) it->second.assign(t.size(), 0.0);
  return it->second;
}

inline Tensor make_result(std::size_t rows, std::size_t cols,
                          std::vector<double> values,
                          std::initializer_list<Tensor> inputs, BackwardFn fn) {
  Tensor out(rows, cols, std::move(values));
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto& in : inputs) {
      if (in.requires_grad()) node.parents.push_back(in.node());
    }
    node.backward = std::move(fn);
  }
  return out;
}

inline Tensor make_result(std::size_t rows, std::size_t cols,
                          std::vector<double> values,
                          const std::vector<Tensor>& inputs, BackwardFn fn) {
  Tensor out(rows, cols, std::move(values));
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto& in : inputs) {
      if (in.requires_grad()) node.parents.push_back(in.node());
    }
    node.backward = std::move(fn);
  }
  return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() +
                     " vs " + b.shape_string());
  }
}

inline void require_scalar(const Tensor& s, const char* op) {
  if (s.rows() != 1 || s.cols() != 1) {
    throw ShapeError(std::string(op) + ": expected scalar [1,1], got " +
                     s.shape_string());
  }
}

template <class F>
Tensor unary(const Tensor& a, F&& f,
             std::function<double(double x, double y)> dfdx) {
  std::vector<double> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  auto y = std::make_shared<std::vector<double>>(out);
  return make_result(a.rows(), a.cols(), std::move(out), {a},
                     [a, y, dfdx](std::span<const double> g, GradMap& grads) {
                       auto& ga = grad_slot(grads, a);
                       auto av = a.values();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         ga[i] += g[i] * dfdx(av[i], (*y)[i]);
                       }
                     });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and elementwise ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + a.shape_string() +
                     " vs " + b.shape_string());
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return detail::make_result(
      m, n, std::move(out), {a, b},
      [a, b, m, k, n](std::span<const double> g, GradMap& grads) {
        auto av = a.values();
        auto bv = b.values();
        if (a.requires_grad()) {
          auto& ga = detail::grad_slot(grads, a);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
              ga[i * k + p] += acc;
            }
          }
        }
        if (b.requires_grad()) {
          auto& gb = detail::grad_slot(grads, b);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = av[i * k + p];
              if (aip == 0.0) continue;
              for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
            }
          }
        }
      });
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return detail::make_result(n, m, std::move(out), {a},
                             [a, m, n](std::span<const double> g, GradMap& grads) {
                               auto& ga = detail::grad_slot(grads, a);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j)
                                   ga[i * n + j] += g[j * m + i];
                             });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return detail::make_result(a.rows(), a.cols(), std::move(out), {a, b},
                             [a, b](std::span<const double> g, GradMap& grads) {
                               for (const Tensor* t : {&a, &b}) {
                                 if (!t->requires_grad()) continue;
                                 auto& gt = detail::grad_slot(grads, *t);
                                 for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
                               }
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return detail::make_result(a.rows(), a.cols(), std::move(out), {a, b},
                             [a, b](std::span<const double> g, GradMap& grads) {
                               if (a.requires_grad()) {
                                 auto& ga = detail::grad_slot(grads, a);
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                               }
                               if (b.requires_grad()) {
                                 auto& gb = detail::grad_slot(grads, b);
                                 for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                               }
                             });
}

// a[m,n] + bias[1,n] broadcast over rows.
inline Tensor add_row(const Tensor& a, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw ShapeError("add_row: cannot broadcast " + bias.shape_string() +
                     " over " + a.shape_string());
  }
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.values()[i * n + j] + bias.values()[j];
  return detail::make_result(m, n, std::move(out), {a, bias},
                             [a, bias, m, n](std::span<const double> g, GradMap& grads) {
                               if (a.requires_grad()) {
                                 auto& ga = detail::grad_slot(grads, a);
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                               }
                               if (bias.requires_grad()) {
                                 auto& gb = detail::grad_slot(grads, bias);
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                               }
                             });
}

inline Tensor add_const(const Tensor& a, double c) {
  return detail::unary(a, [c](double x) { return x + c; },
                       [](double, double) { return 1.0; });
}

inline Tensor scale(const Tensor& a, double c) {
  return detail::unary(a, [c](double x) { return c * x; },
                       [c](double, double) { return c; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return detail::make_result(a.rows(), a.cols(), std::move(out), {a, b},
                             [a, b](std::span<const double> g, GradMap& grads) {
                               if (a.requires_grad()) {
                                 auto& ga = detail::grad_slot(grads, a);
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.values()[i];
                               }
                               if (b.requires_grad()) {
                                 auto& gb = detail::grad_slot(grads, b);
                                 for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.values()[i];
                               }
                             });
}

// a / s with s a [1,1] tensor.
inline Tensor div_scalar(const Tensor& a, const Tensor& s) {
  detail::require_scalar(s, "div_scalar");
  const double sv = s.item();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] / sv;
  return detail::make_result(a.rows(), a.cols(), std::move(out), {a, s},
                             [a, s](std::span<const double> g, GradMap& grads) {
                               const double sv = s.item();
                               if (a.requires_grad()) {
                                 auto& ga = detail::grad_slot(grads, a);
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / sv;
                               }
                               if (s.requires_grad()) {
                                 double acc = 0.0;
                                 for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * a.values()[i];
                                 detail::grad_slot(grads, s)[0] -= acc / (sv * sv);
                               }
                             });
}

// a * s with s a [1,1] tensor.
inline Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  detail::require_scalar(s, "mul_scalar");
  const double sv = s.item();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * sv;
  return detail::make_result(a.rows(), a.cols(), std::move(out), {a, s},
                             [a, s](std::span<const double> g, GradMap& grads) {
                               if (a.requires_grad()) {
                                 auto& ga = detail::grad_slot(grads, a);
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s.item();
                               }
                               if (s.requires_grad()) {
                                 double acc = 0.0;
                                 for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * a.values()[i];
                                 detail::grad_slot(grads, s)[0] += acc;
                               }
                             });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(a, [](double x) { return std::exp(x); },
                       [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  for (double x : a.values()) {
    if (!(x > 0.0)) throw NumericError("log: non-positive input " + std::to_string(x));
  }
  return detail::unary(a, [](double x) { return std::log(x); },
                       [](double x, double) { return 1.0 / x; });
}

// max(x, 0); subgradient 0 at the kink.
inline Tensor relu(const Tensor& a) {
  return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  return detail::make_result(1, 1, {s}, {a},
                             [a](std::span<const double> g, GradMap& grads) {
                               auto& ga = detail::grad_slot(grads, a);
                               for (double& x : ga) x += g[0];
                             });
}

inline Tensor mean_all(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(a.size()));
}

// Mean over the batch (row) axis: [m,n] -> [1,n].
inline Tensor mean_rows(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  if (m == 0) throw ShapeError("mean_rows: no rows");
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a.values()[i * n + j];
  for (double& x : out) x /= static_cast<double>(m);
  return detail::make_result(1, n, std::move(out), {a},
                             [a, m, n](std::span<const double> g, GradMap& grads) {
                               auto& ga = detail::grad_slot(grads, a);
                               const double inv = 1.0 / static_cast<double>(m);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j] * inv;
                             });
}

// Mean over the rows whose mask entry is set: [m,n] -> [1,n].
inline Tensor masked_mean_rows(const Tensor& a, const std::vector<bool>& mask) {
  if (mask.size() != a.rows()) {
    throw ShapeError("masked_mean_rows: mask length " + std::to_string(mask.size()) +
                     " vs " + a.shape_string());
  }
  const std::size_t m = a.rows(), n = a.cols();
  const auto count = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  if (count == 0) throw ShapeError("masked_mean_rows: mask selects no rows");
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    if (!mask[i]) continue;
    for (std::size_t j = 0; j < n; ++j) out[j] += a.values()[i * n + j];
  }
  for (double& x : out) x /= static_cast<double>(count);
  return detail::make_result(
      1, n, std::move(out), {a},
      [a, mask, count, m, n](std::span<const double> g, GradMap& grads) {
        auto& ga = detail::grad_slot(grads, a);
        const double inv = 1.0 / static_cast<double>(count);
        for (std::size_t i = 0; i < m; ++i) {
          if (!mask[i]) continue;
          for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j] * inv;
        }
      });
}

// Row-wise log-sum-exp over entries whose mask is set: [m,n] -> [m,1].
// An empty mask means every entry participates.
inline Tensor logsumexp_rows(const Tensor& a, const std::vector<bool>& mask = {}) {
  const std::size_t m = a.rows(), n = a.cols();
  if (!mask.empty() && mask.size() != a.size()) {
    throw ShapeError("logsumexp_rows: mask size " + std::to_string(mask.size()) +
                     " vs " + a.shape_string());
  }
  auto on = [&mask](std::size_t idx) { return mask.empty() || mask[idx]; };
  std::vector<double> out(m);
  auto weights = std::make_shared<std::vector<double>>(a.size(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -INFINITY;
    std::size_t active = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!on(i * n + j)) continue;
      ++active;
      const double v = a.values()[i * n + j];
      if (std::isnan(v) || std::isnan(mx)) {
        mx = NAN;  // propagate rather than let max() skip it
      } else {
        mx = std::max(mx, v);
      }
    }
    if (active == 0) throw ShapeError("logsumexp_rows: row " + std::to_string(i) + " is empty");
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (on(i * n + j)) s += std::exp(a.values()[i * n + j] - mx);
    out[i] = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j)
      if (on(i * n + j)) (*weights)[i * n + j] = std::exp(a.values()[i * n + j] - out[i]);
  }
  return detail::make_result(m, 1, std::move(out), {a},
                             [a, weights, m, n](std::span<const double> g, GradMap& grads) {
#ifdef HOUND_INJECT_WRONG_SIGN_GRADIENT
                               const double sign = -1.0;  // test builds only
#else
                               const double sign = 1.0;
#endif
                               auto& ga = detail::grad_slot(grads, a);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j)
                                   ga[i * n + j] += sign * g[i] * (*weights)[i * n + j];
                             });
}

inline Tensor softmax_rows(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, a.values()[i * n + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(a.values()[i * n + j] - mx);
      s += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= s;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return detail::make_result(m, n, std::move(out), {a},
                             [a, y, m, n](std::span<const double> g, GradMap& grads) {
                               auto& ga = detail::grad_slot(grads, a);
                               for (std::size_t i = 0; i < m; ++i) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * (*y)[i * n + j];
                                 for (std::size_t j = 0; j < n; ++j)
                                   ga[i * n + j] += (*y)[i * n + j] * (g[i * n + j] - dot);
                               }
                             });
}

// ---------------------------------------------------------------------------
// Norms and similarities

// L2 norm of each row, [m,n] -> [m,1]. The gradient divides by
// max(norm, eps), so it is zero at the origin.
inline Tensor row_norm(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += a.values()[i * n + j] * a.values()[i * n + j];
    out[i] = std::sqrt(s);
  }
  auto norms = std::make_shared<std::vector<double>>(out);
  return detail::make_result(m, 1, std::move(out), {a},
                             [a, norms, m, n](std::span<const double> g, GradMap& grads) {
                               auto& ga = detail::grad_slot(grads, a);
                               for (std::size_t i = 0; i < m; ++i) {
                                 const double denom = std::max((*norms)[i], kNormEpsilon);
                                 for (std::size_t j = 0; j < n; ++j)
                                   ga[i * n + j] += g[i] * a.values()[i * n + j] / denom;
                               }
                             });
}

// Each row divided by its guarded L2 norm.
inline Tensor normalize_rows(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(a.size());
  auto norms = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = kNormEpsilon * kNormEpsilon;
    for (std::size_t j = 0; j < n; ++j) s += a.values()[i * n + j] * a.values()[i * n + j];
    (*norms)[i] = std::sqrt(s);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.values()[i * n + j] / (*norms)[i];
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return detail::make_result(m, n, std::move(out), {a},
                             [a, y, norms, m, n](std::span<const double> g, GradMap& grads) {
                               auto& ga = detail::grad_slot(grads, a);
                               for (std::size_t i = 0; i < m; ++i) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * (*y)[i * n + j];
                                 for (std::size_t j = 0; j < n; ++j)
                                   ga[i * n + j] += (g[i * n + j] - (*y)[i * n + j] * dot) / (*norms)[i];
                               }
                             });
}

// Cosine similarity of row pairs: [m,n] x [m,n] -> [m,1].
inline Tensor cosine_rows(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "cosine_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m);
  auto na = std::make_shared<std::vector<double>>(m);
  auto nb = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    double saa = kNormEpsilon * kNormEpsilon, sbb = saa, sab = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double x = a.values()[i * n + j], y = b.values()[i * n + j];
      saa += x * x;
      sbb += y * y;
      sab += x * y;
    }
    (*na)[i] = std::sqrt(saa);
    (*nb)[i] = std::sqrt(sbb);
    out[i] = sab / ((*na)[i] * (*nb)[i]);
  }
  auto c = std::make_shared<std::vector<double>>(out);
  return detail::make_result(
      m, 1, std::move(out), {a, b},
      [a, b, na, nb, c, m, n](std::span<const double> g, GradMap& grads) {
        for (int side = 0; side < 2; ++side) {
          const Tensor& self = side == 0 ? a : b;
          const Tensor& other = side == 0 ? b : a;
          const auto& ns = side == 0 ? *na : *nb;
          const auto& no = side == 0 ? *nb : *na;
          if (!self.requires_grad()) continue;
          auto& gs = detail::grad_slot(grads, self);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              const double d = other.values()[i * n + j] / (ns[i] * no[i]) -
                               (*c)[i] * self.values()[i * n + j] / (ns[i] * ns[i]);
              gs[i * n + j] += g[i] * d;
            }
          }
        }
      });
}

// Pairwise cosine similarities: [m,d] x [k,d] -> [m,k].
inline Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
  return matmul(normalize_rows(a), transpose(normalize_rows(b)));
}

// Layer normalization over each row followed by a per-column affine map.
inline Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  const std::size_t m = a.rows(), n = a.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw ShapeError("layer_norm: gain " + gain.shape_string() + " / bias " +
                     bias.shape_string() + " do not fit " + a.shape_string());
  }
  auto xhat = std::make_shared<std::vector<double>>(a.size());
  auto inv_std = std::make_shared<std::vector<double>>(m);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += a.values()[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = a.values()[i * n + j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(n);
    (*inv_std)[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (a.values()[i * n + j] - mu) * (*inv_std)[i];
      (*xhat)[i * n + j] = xh;
      out[i * n + j] = xh * gain.values()[j] + bias.values()[j];
    }
  }
  return detail::make_result(
      m, n, std::move(out), {a, gain, bias},
      [a, gain, bias, xhat, inv_std, m, n](std::span<const double> g, GradMap& grads) {
        if (gain.requires_grad()) {
          auto& gg = detail::grad_slot(grads, gain);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * (*xhat)[i * n + j];
        }
        if (bias.requires_grad()) {
          auto& gb = detail::grad_slot(grads, bias);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
        if (a.requires_grad()) {
          auto& ga = detail::grad_slot(grads, a);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[i * n + j] * gain.values()[j];
              mean_d += d;
              mean_dx += d * (*xhat)[i * n + j];
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = g[i * n + j] * gain.values()[j];
              ga[i * n + j] += (*inv_std)[i] * (d - mean_d - (*xhat)[i * n + j] * mean_dx);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Indexing and assembly

inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& index) {
  const std::size_t n = a.cols();
  std::vector<double> out(index.size() * n);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= a.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(index[r]) +
                       " out of range for " + a.shape_string());
    }
    std::copy_n(a.values().begin() + static_cast<std::ptrdiff_t>(index[r] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  return detail::make_result(index.size(), n, std::move(out), {a},
                             [a, index, n](std::span<const double> g, GradMap& grads) {
                               auto& ga = detail::grad_slot(grads, a);
                               for (std::size_t r = 0; r < index.size(); ++r)
                                 for (std::size_t j = 0; j < n; ++j) ga[index[r] * n + j] += g[r * n + j];
                             });
}

inline Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  if (start + count > a.rows()) {
    throw ShapeError("slice_rows: [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") outside " + a.shape_string());
  }
  const std::size_t n = a.cols();
  auto first = a.values().begin() + static_cast<std::ptrdiff_t>(start * n);
  std::vector<double> out(first, first + static_cast<std::ptrdiff_t>(count * n));
  return detail::make_result(count, n, std::move(out), {a},
                             [a, start, n](std::span<const double> g, GradMap& grads) {
                               auto& ga = detail::grad_slot(grads, a);
                               for (std::size_t i = 0; i < g.size(); ++i) ga[start * n + i] += g[i];
                             });
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t count) {
  if (start + count > a.cols()) {
    throw ShapeError("slice_cols: [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") outside " + a.shape_string());
  }
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a.values()[i * n + start + j];
  return detail::make_result(m, count, std::move(out), {a},
                             [a, start, count, m, n](std::span<const double> g, GradMap& grads) {
                               auto& ga = detail::grad_slot(grads, a);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < count; ++j)
                                   ga[i * n + start + j] += g[i * count + j];
                             });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) {
      throw ShapeError("concat_rows: column mismatch " + parts.front().shape_string() +
                       " vs " + p.shape_string());
    }
    m += p.rows();
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return detail::make_result(m, n, std::move(out), parts,
                             [parts](std::span<const double> g, GradMap& grads) {
                               std::size_t offset = 0;
                               for (const auto& p : parts) {
                                 if (p.requires_grad()) {
                                   auto& gp = detail::grad_slot(grads, p);
                                   for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g[offset + i];
                                 }
                                 offset += p.size();
                               }
                             });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) {
      throw ShapeError("concat_cols: row mismatch " + parts.front().shape_string() +
                       " vs " + p.shape_string());
    }
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::size_t col = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out[i * n + col + j] = p(i, j);
    col += p.cols();
  }
  return detail::make_result(m, n, std::move(out), parts,
                             [parts, m, n](std::span<const double> g, GradMap& grads) {
                               std::size_t col = 0;
                               for (const auto& p : parts) {
                                 if (p.requires_grad()) {
                                   auto& gp = detail::grad_slot(grads, p);
                                   for (std::size_t i = 0; i < m; ++i)
                                     for (std::size_t j = 0; j < p.cols(); ++j)
                                       gp[i * p.cols() + j] += g[i * n + col + j];
                                 }
                                 col += p.cols();
                               }
                             });
}

// Compressed sparse row matrix; only used as a constant left operand.
struct SparseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> row_start;  // rows + 1 entries
  std::vector<std::size_t> col_index;
  std::vector<double> value;
};

inline Tensor spmm(const SparseMatrix& s, const Tensor& a) {
  if (s.cols != a.rows()) {
    throw ShapeError("spmm: sparse [" + std::to_string(s.rows) + "," +
                     std::to_string(s.cols) + "] vs " + a.shape_string());
  }
  const std::size_t n = a.cols();
  std::vector<double> out(s.rows * n, 0.0);
  for (std::size_t i = 0; i < s.rows; ++i) {
    for (std::size_t e = s.row_start[i]; e < s.row_start[i + 1]; ++e) {
      const double w = s.value[e];
      const std::size_t k = s.col_index[e];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += w * a.values()[k * n + j];
    }
  }
  auto sp = std::make_shared<SparseMatrix>(s);
  return detail::make_result(s.rows, n, std::move(out), {a},
                             [a, sp, n](std::span<const double> g, GradMap& grads) {
                               auto& ga = detail::grad_slot(grads, a);
                               for (std::size_t i = 0; i < sp->rows; ++i) {
                                 for (std::size_t e = sp->row_start[i]; e < sp->row_start[i + 1]; ++e) {
                                   const double w = sp->value[e];
                                   const std::size_t k = sp->col_index[e];
                                   for (std::size_t j = 0; j < n; ++j) ga[k * n + j] += w * g[i * n + j];
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Parameters, gradients, checkpoints

// Named trainable tensors, iterated in name order.
class ParamSet {
 public:
  void add(const std::string& name, const Tensor& t) {
    if (!t.requires_grad()) throw ValidationError("parameter " + name + " does not require grad");
    if (!entries_.emplace(name, t).second) throw ValidationError("duplicate parameter " + name);
  }
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Tensor& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ValidationError("unknown parameter " + name);
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ValidationError("unknown parameter " + name);
    return it->second;
  }
  std::size_t size() const { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  // Subset whose names start with any of the given prefixes.
  ParamSet select(const std::vector<std::string>& prefixes) const {
    ParamSet out;
    for (const auto& [name, t] : entries_) {
      for (const auto& p : prefixes) {
        if (name.rfind(p, 0) == 0) {
          out.entries_.emplace(name, t);
          break;
        }
      }
    }
    return out;
  }

  // Deep copy of values into fresh leaves.
  ParamSet clone() const {
    ParamSet out;
    for (const auto& [name, t] : entries_) {
      out.entries_.emplace(name, Tensor::parameter(t.rows(), t.cols(),
                                                   {t.values().begin(), t.values().end()}));
    }
    return out;
  }

 private:
  std::map<std::string, Tensor> entries_;
};

using Gradients = std::map<std::string, std::vector<double>>;

// Reverse-mode sweep from a scalar loss. Every parameter gets an entry;
// parameters the loss does not reach get zeros.
inline Gradients backward(const Tensor& loss, const ParamSet& params) {
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + loss.shape_string());
  }
  GradMap grads;
  if (loss.requires_grad()) {
    // Post-order DFS gives a topological order (inputs before outputs).
    std::vector<const Node*> order;
    std::unordered_set<const Node*> seen;
    std::vector<std::pair<const Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        const Node* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    grads[loss.node().get()] = {1.0};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const Node* node = *it;
      if (!node->backward) continue;
      auto g = grads.find(node);
      if (g == grads.end()) continue;
      // Copy: the callback may grow the map and invalidate references.
      const std::vector<double> upstream = g->second;
      node->backward(upstream, grads);
    }
  }
  Gradients out;
  for (const auto& [name, t] : params) {
    auto it = grads.find(t.node().get());
    out[name] = it != grads.end() ? it->second : std::vector<double>(t.size(), 0.0);
  }
  return out;
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
};

using LossFn = std::function<Tensor(const ParamSet&)>;
// Returns the arguments of every hinge in the loss; a coordinate whose
// perturbation flips the sign of any of them sits on a kink.
using KinkProbe = std::function<std::vector<double>(const ParamSet&)>;

// Central-difference check of backward() over every parameter coordinate.
inline GradCheckResult grad_check(const LossFn& loss_fn, ParamSet& params, double eps,
                                  const KinkProbe& kink_probe = {}) {
  if (!(eps > 0.0)) throw ValidationError("grad_check: eps must be positive");
  const Gradients analytic = backward(loss_fn(params), params);
  auto evaluate = [&]() {
    const double v = loss_fn(params).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss while probing");
    return v;
  };
  GradCheckResult result;
  for (auto& [name, t] : params) {
    auto& vals = t.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + eps;
      const double plus = evaluate();
      std::vector<double> hinge_plus = kink_probe ? kink_probe(params) : std::vector<double>{};
      vals[i] = saved - eps;
      const double minus = evaluate();
      std::vector<double> hinge_minus = kink_probe ? kink_probe(params) : std::vector<double>{};
      vals[i] = saved;
      bool near_kink = false;
      for (std::size_t h = 0; h < hinge_plus.size(); ++h) {
        if ((hinge_plus[h] > 0.0) != (hinge_minus[h] > 0.0)) near_kink = true;
      }
      if (near_kink) {
        ++result.excluded;
        continue;
      }
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic.at(name)[i];
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      ++result.checked;
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_parameter = name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

// Checkpoint container: per tensor a header line `name rows cols` followed by
// one line of decimal values per row. Values print with 17 significant digits
// so a save/load cycle is exact and equal values give equal bytes.
inline void write_tensor_block(std::ostream& os, const std::string& name, const Tensor& t) {
  os << name << ' ' << t.rows() << ' ' << t.cols() << '\n';
  char buf[40];
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", t(i, j));
      if (j) os << ' ';
      os << buf;
    }
    os << '\n';
  }
}

inline void save_checkpoint(const ParamSet& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path);
  for (const auto& [name, t] : params) write_tensor_block(os, name, t);
  if (!os) throw IoError("write failed for checkpoint " + path);
}

inline std::map<std::string, Tensor> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  std::map<std::string, Tensor> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream header(line);
    std::string name;
    std::size_t rows = 0, cols = 0;
    if (!(header >> name >> rows >> cols)) {
      throw IoError(path + ":" + std::to_string(line_no) + ": malformed tensor header");
    }
    std::vector<double> values;
    values.reserve(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
      if (!std::getline(is, line)) throw IoError(path + ": truncated tensor " + name);
      ++line_no;
      std::istringstream row(line);
      double v;
      std::size_t count = 0;
      while (row >> v) {
        values.push_back(v);
        ++count;
      }
      if (count != cols) {
        throw IoError(path + ":" + std::to_string(line_no) + ": expected " +
                      std::to_string(cols) + " values for " + name);
      }
    }
    if (!out.emplace(name, Tensor(rows, cols, std::move(values))).second) {
      throw IoError(path + ": duplicate tensor " + name);
    }
  }
  return out;
}

// Overwrite parameter values from a checkpoint; names and shapes must match.
inline void load_checkpoint_into(ParamSet& params, const std::string& path) {
  const auto stored = read_checkpoint(path);
  for (const auto& [name, t] : stored) {
    if (!params.contains(name)) throw IoError(path + ": unexpected tensor " + name);
  }
  for (auto& [name, t] : params) {
    auto it = stored.find(name);
    if (it == stored.end()) throw IoError(path + ": missing tensor " + name);
    if (it->second.rows() != t.rows() || it->second.cols() != t.cols()) {
      throw IoError(path + ": tensor " + name + " has shape " + it->second.shape_string() +
                    ", expected " + t.shape_string());
    }
    auto src = it->second.values();
    std::copy(src.begin(), src.end(), t.mutable_values().begin());
  }
}

// Order-sensitive FNV-1a over the raw bytes of every parameter value.
inline std::uint64_t checksum(const ParamSet& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : params) {
    feed(name.data(), name.size());
    feed(t.values().data(), t.size() * sizeof(double));
  }
  return h;
}

}  // namespace hound
