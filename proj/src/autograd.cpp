// Copyright 2025 USEMamba Contributors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "usemamba/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace usemamba::ag {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kTwoPi = 2.0 * kPi;

thread_local int g_no_grad_depth = 0;
thread_local long long g_flops = 0;

long long next_id() {
  static std::atomic<long long> counter{0};
  return ++counter;
}

using EMap = Eigen::Map<Eigen::ArrayXd>;
using CEMap = Eigen::Map<const Eigen::ArrayXd>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MMap = Eigen::Map<RowMat>;
using CMMap = Eigen::Map<const RowMat>;

EMap emap(NdArray& a) { return EMap(a.v.data(), static_cast<Eigen::Index>(a.v.size())); }
CEMap cemap(const NdArray& a) {
  return CEMap(a.v.data(), static_cast<Eigen::Index>(a.v.size()));
}

Tensor make(NdArray val, std::vector<Tensor> parents, std::function<void(Node&)> bw,
            long long extra_flops = 0) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->id = next_id();
  g_flops += static_cast<long long>(n->val.size()) + extra_flops;
  if (grad_enabled()) {
    bool req = false;
    for (const auto& p : parents) req = req || p->requires_grad;
    if (req) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backward_fn = std::move(bw);
    }
  }
  return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a->val.shape == b->val.shape,
          std::string(op) + ": shape mismatch " + a->val.shape_str() + " vs " + b->val.shape_str());
}

std::size_t leading_rows(const NdArray& a) {
  require(a.ndim() >= 1, "op needs at least 1 dim");
  const int last = a.shape.back();
  require(last > 0, "empty last dim");
  return a.size() / static_cast<std::size_t>(last);
}

// Generic elementwise unary helper: f(value), df(value, out_value) -> local grad.
template <typename F, typename DF>
Tensor unary(const Tensor& a, F f, DF df) {
  NdArray out(a->val.shape);
  for (std::size_t i = 0; i < out.size(); ++i) out.v[i] = f(a->val.v[i]);
  Tensor pa = a;
  return make(std::move(out), {a}, [pa, df](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.val.size(); ++i) {
      pa->grad.v[i] += n.grad.v[i] * df(pa->val.v[i], n.val.v[i]);
    }
  });
}

}  // namespace

bool grad_enabled() { return g_no_grad_depth == 0; }
NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

long long flop_count() { return g_flops; }
void reset_flop_count() { g_flops = 0; }

Tensor constant(NdArray v) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->id = next_id();
  return n;
}

Tensor scalar(double v) { return constant(NdArray({1}, std::vector<double>{v})); }

Tensor param(NdArray v) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->id = next_id();
  n->requires_grad = true;
  return n;
}

void backward(const Tensor& root) {
  require(root->val.size() == 1, "backward: root must be scalar");
  if (!root->requires_grad) return;
  root->ensure_grad();
  root->grad.v[0] = 1.0;

  // Reverse creation order is a valid topological order for this tape.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Tensor> stack{root};
  while (!stack.empty()) {
    Tensor t = stack.back();
    stack.pop_back();
    if (!t->requires_grad || !seen.insert(t.get()).second) continue;
    order.push_back(t.get());
    for (const auto& p : t->parents) stack.push_back(p);
  }
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
  for (Node* n : order) {
    if (!n->backward_fn) continue;
    n->ensure_grad();
    n->backward_fn(*n);
  }
}

// ---------------- elementwise ----------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  NdArray out(a->val.shape);
  emap(out) = cemap(a->val) + cemap(b->val);
  Tensor pa = a, pb = b;
  return make(std::move(out), {a, b}, [pa, pb](Node& n) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      emap(pa->grad) += cemap(n.grad);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      emap(pb->grad) += cemap(n.grad);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  NdArray out(a->val.shape);
  emap(out) = cemap(a->val) - cemap(b->val);
  Tensor pa = a, pb = b;
  return make(std::move(out), {a, b}, [pa, pb](Node& n) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      emap(pa->grad) += cemap(n.grad);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      emap(pb->grad) -= cemap(n.grad);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  NdArray out(a->val.shape);
  emap(out) = cemap(a->val) * cemap(b->val);
  Tensor pa = a, pb = b;
  return make(std::move(out), {a, b}, [pa, pb](Node& n) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      emap(pa->grad) += cemap(n.grad) * cemap(pb->val);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      emap(pb->grad) += cemap(n.grad) * cemap(pa->val);
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  NdArray out(a->val.shape);
  emap(out) = cemap(a->val) / cemap(b->val);
  Tensor pa = a, pb = b;
  return make(std::move(out), {a, b}, [pa, pb](Node& n) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      emap(pa->grad) += cemap(n.grad) / cemap(pb->val);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      emap(pb->grad) -= cemap(n.grad) * cemap(n.val) / cemap(pb->val);
    }
  });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor add_scalar(const Tensor& a, double s) {
  NdArray out(a->val.shape);
  emap(out) = cemap(a->val) + s;
  Tensor pa = a;
  return make(std::move(out), {a}, [pa](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    emap(pa->grad) += cemap(n.grad);
  });
}

Tensor mul_scalar(const Tensor& a, double s) {
  NdArray out(a->val.shape);
  emap(out) = cemap(a->val) * s;
  Tensor pa = a;
  return make(std::move(out), {a}, [pa, s](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    emap(pa->grad) += cemap(n.grad) * s;
  });
}

Tensor exp_t(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log_t(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt_t(const Tensor& a) {
  return unary(a, [](double x) { return std::sqrt(x); },
               [](double, double y) { return y > 0 ? 0.5 / y : 0.0; });
}

Tensor abs_t(const Tensor& a) {
  return unary(a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor sin_t(const Tensor& a) {
  return unary(a, [](double x) { return std::sin(x); },
               [](double x, double) { return std::cos(x); });
}

Tensor cos_t(const Tensor& a) {
  return unary(a, [](double x) { return std::cos(x); },
               [](double x, double) { return -std::sin(x); });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor pow_const(const Tensor& a, double p) {
  if (p == 1.0) return a;
  return unary(a, [p](double x) { return std::pow(x, p); },
               [p](double x, double) {
                 if (x == 0.0) return p > 1.0 ? 0.0 : 0.0;  // flat subgradient at 0
                 return p * std::pow(x, p - 1.0);
               });
}

namespace {
double sigmoid_s(double x) {
  if (x >= 0) {
    const double z = std::exp(-x);
    return 1.0 / (1.0 + z);
  }
  const double z = std::exp(x);
  return z / (1.0 + z);
}
double softplus_s(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}
}  // namespace

Tensor sigmoid(const Tensor& a) {
  return unary(a, [](double x) { return sigmoid_s(x); },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
  return unary(a, [](double x) { return x * sigmoid_s(x); },
               [](double x, double) {
                 const double s = sigmoid_s(x);
                 return s * (1.0 + x * (1.0 - s));
               });
}

Tensor softplus(const Tensor& a) {
  return unary(a, [](double x) { return softplus_s(x); },
               [](double x, double) { return sigmoid_s(x); });
}

Tensor tanh_t(const Tensor& a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor atan2_t(const Tensor& y, const Tensor& x) {
  check_same_shape(y, x, "atan2");
  NdArray out(y->val.shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.v[i] = std::atan2(y->val.v[i], x->val.v[i]);
  }
  Tensor py = y, px = x;
  return make(std::move(out), {y, x}, [py, px](Node& n) {
    for (std::size_t i = 0; i < n.val.size(); ++i) {
      const double yy = py->val.v[i], xx = px->val.v[i];
      const double r2 = std::max(xx * xx + yy * yy, 1e-300);
      if (py->requires_grad) {
        py->ensure_grad();
        py->grad.v[i] += n.grad.v[i] * xx / r2;
      }
      if (px->requires_grad) {
        px->ensure_grad();
        px->grad.v[i] -= n.grad.v[i] * yy / r2;
      }
    }
  });
}

Tensor hypot_t(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "hypot");
  NdArray out(a->val.shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.v[i] = std::hypot(a->val.v[i], b->val.v[i]);
  }
  Tensor pa = a, pb = b;
  return make(std::move(out), {a, b}, [pa, pb](Node& n) {
    for (std::size_t i = 0; i < n.val.size(); ++i) {
      const double m = std::max(n.val.v[i], 1e-300);
      if (pa->requires_grad) {
        pa->ensure_grad();
        pa->grad.v[i] += n.grad.v[i] * pa->val.v[i] / m;
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        pb->grad.v[i] += n.grad.v[i] * pb->val.v[i] / m;
      }
    }
  });
}

Tensor anti_wrap_t(const Tensor& a) {
  return unary(a,
               [](double x) { return std::abs(x - kTwoPi * std::round(x / kTwoPi)); },
               [](double x, double) {
                 const double w = x - kTwoPi * std::round(x / kTwoPi);
                 return w > 0 ? 1.0 : (w < 0 ? -1.0 : 0.0);
               });
}

// ---------------- reductions ----------------

Tensor sum(const Tensor& a) {
  require(a->val.size() >= 1, "sum: empty tensor");
  NdArray out({1}, std::vector<double>{cemap(a->val).sum()});
  Tensor pa = a;
  return make(std::move(out), {a}, [pa](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    emap(pa->grad) += n.grad.v[0];
  });
}

Tensor mean(const Tensor& a) {
  require(a->val.size() >= 1, "mean: empty tensor");
  const double inv = 1.0 / static_cast<double>(a->val.size());
  NdArray out({1}, std::vector<double>{cemap(a->val).sum() * inv});
  Tensor pa = a;
  return make(std::move(out), {a}, [pa, inv](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    emap(pa->grad) += n.grad.v[0] * inv;
  });
}

// ---------------- structure ----------------

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  require(NdArray::count(shape) == a->val.size(), "reshape: element count mismatch");
  NdArray out(std::move(shape), a->val.v);
  Tensor pa = a;
  return make(std::move(out), {a}, [pa](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    emap(pa->grad) += cemap(n.grad);
  });
}

namespace {
// Swap the first two axes of a 2-d or 3-d array.
NdArray transpose01_val(const NdArray& a) {
  require(a.ndim() == 2 || a.ndim() == 3, "transpose01: needs 2-d or 3-d");
  const int d0 = a.shape[0], d1 = a.shape[1];
  const int d2 = a.ndim() == 3 ? a.shape[2] : 1;
  std::vector<int> shape = a.ndim() == 3 ? std::vector<int>{d1, d0, d2} : std::vector<int>{d1, d0};
  NdArray out(std::move(shape));
  for (int i = 0; i < d0; ++i) {
    for (int j = 0; j < d1; ++j) {
      const double* src = &a.v[(static_cast<std::size_t>(i) * d1 + j) * d2];
      double* dst = &out.v[(static_cast<std::size_t>(j) * d0 + i) * d2];
      std::copy(src, src + d2, dst);
    }
  }
  return out;
}
}  // namespace

Tensor transpose01(const Tensor& a) {
  NdArray out = transpose01_val(a->val);
  Tensor pa = a;
  return make(std::move(out), {a}, [pa](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    NdArray g = transpose01_val(n.grad);
    emap(pa->grad) += cemap(g);
  });
}

namespace {
NdArray reverse_axis_val(const NdArray& a, int axis) {
  require(axis >= 0 && axis < a.ndim(), "reverse_axis: bad axis");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(a.shape[i]);
  for (int i = axis + 1; i < a.ndim(); ++i) inner *= static_cast<std::size_t>(a.shape[i]);
  const std::size_t n = static_cast<std::size_t>(a.shape[axis]);
  NdArray out(a.shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      const double* src = &a.v[(o * n + k) * inner];
      double* dst = &out.v[(o * n + (n - 1 - k)) * inner];
      std::copy(src, src + inner, dst);
    }
  }
  return out;
}
}  // namespace

Tensor reverse_axis(const Tensor& a, int axis) {
  NdArray out = reverse_axis_val(a->val, axis);
  Tensor pa = a;
  return make(std::move(out), {a}, [pa, axis](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    NdArray g = reverse_axis_val(n.grad, axis);
    emap(pa->grad) += cemap(g);
  });
}

Tensor slice_last(const Tensor& a, int from, int to) {
  const int last = a->val.shape.back();
  require(0 <= from && from < to && to <= last, "slice_last: bad range");
  const std::size_t rows = leading_rows(a->val);
  const int width = to - from;
  std::vector<int> shape = a->val.shape;
  shape.back() = width;
  NdArray out(std::move(shape));
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = &a->val.v[r * last + from];
    std::copy(src, src + width, &out.v[r * width]);
  }
  Tensor pa = a;
  return make(std::move(out), {a}, [pa, from, width, rows, last](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      for (int j = 0; j < width; ++j) {
        pa->grad.v[r * last + from + j] += n.grad.v[r * width + j];
      }
    }
  });
}

Tensor concat_last(const std::vector<Tensor>& xs) {
  require(!xs.empty(), "concat_last: empty list");
  std::vector<int> lead(xs[0]->val.shape.begin(), xs[0]->val.shape.end() - 1);
  int total = 0;
  for (const auto& x : xs) {
    std::vector<int> l(x->val.shape.begin(), x->val.shape.end() - 1);
    require(l == lead, "concat_last: leading dims mismatch");
    total += x->val.shape.back();
  }
  std::vector<int> shape = lead;
  shape.push_back(total);
  NdArray out(std::move(shape));
  const std::size_t rows = leading_rows(out);
  std::size_t off = 0;
  for (const auto& x : xs) {
    const int w = x->val.shape.back();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(&x->val.v[r * w], &x->val.v[r * w] + w, &out.v[r * total + off]);
    }
    off += static_cast<std::size_t>(w);
  }
  std::vector<Tensor> parents = xs;
  return make(std::move(out), parents, [parents, rows, total](Node& n) {
    std::size_t off = 0;
    for (const auto& x : parents) {
      const int w = x->val.shape.back();
      if (x->requires_grad) {
        x->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (int j = 0; j < w; ++j) x->grad.v[r * w + j] += n.grad.v[r * total + off + j];
        }
      }
      off += static_cast<std::size_t>(w);
    }
  });
}

Tensor slice_axis0(const Tensor& a, int from, int to) {
  require(a->val.ndim() >= 1, "slice_axis0: scalar input");
  const int d0 = a->val.shape[0];
  require(0 <= from && from < to && to <= d0, "slice_axis0: bad range");
  const std::size_t inner = a->val.size() / static_cast<std::size_t>(d0);
  std::vector<int> shape = a->val.shape;
  shape[0] = to - from;
  NdArray out(std::move(shape));
  std::copy(&a->val.v[from * inner], &a->val.v[from * inner] + out.size(), out.v.data());
  Tensor pa = a;
  return make(std::move(out), {a}, [pa, from, inner](Node& n) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      pa->grad.v[from * inner + i] += n.grad.v[i];
    }
  });
}

// ---------------- row-vector broadcasting ----------------

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  const int c = x->val.shape.back();
  require(v->val.ndim() == 1 && v->val.shape[0] == c, "add_rowvec: vector size mismatch");
  const std::size_t rows = leading_rows(x->val);
  NdArray out(x->val.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    for (int j = 0; j < c; ++j) out.v[r * c + j] = x->val.v[r * c + j] + v->val.v[j];
  }
  Tensor px = x, pv = v;
  return make(std::move(out), {x, v}, [px, pv, rows, c](Node& n) {
    if (px->requires_grad) {
      px->ensure_grad();
      emap(px->grad) += cemap(n.grad);
    }
    if (pv->requires_grad) {
      pv->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (int j = 0; j < c; ++j) pv->grad.v[j] += n.grad.v[r * c + j];
      }
    }
  });
}

Tensor mul_rowvec(const Tensor& x, const Tensor& v) {
  const int c = x->val.shape.back();
  require(v->val.ndim() == 1 && v->val.shape[0] == c, "mul_rowvec: vector size mismatch");
  const std::size_t rows = leading_rows(x->val);
  NdArray out(x->val.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    for (int j = 0; j < c; ++j) out.v[r * c + j] = x->val.v[r * c + j] * v->val.v[j];
  }
  Tensor px = x, pv = v;
  return make(std::move(out), {x, v}, [px, pv, rows, c](Node& n) {
    if (px->requires_grad) {
      px->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (int j = 0; j < c; ++j) px->grad.v[r * c + j] += n.grad.v[r * c + j] * pv->val.v[j];
      }
    }
    if (pv->requires_grad) {
      pv->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (int j = 0; j < c; ++j) pv->grad.v[j] += n.grad.v[r * c + j] * px->val.v[r * c + j];
      }
    }
  });
}

// ---------------- neural building blocks ----------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a->val.ndim() == 2 && b->val.ndim() == 2, "matmul: needs 2-d inputs");
  const int m = a->val.shape[0], k = a->val.shape[1], n_cols = b->val.shape[1];
  require(b->val.shape[0] == k, "matmul: inner dim mismatch");
  NdArray out({m, n_cols});
  MMap(out.data(), m, n_cols) = CMMap(a->val.data(), m, k) * CMMap(b->val.data(), k, n_cols);
  Tensor pa = a, pb = b;
  return make(std::move(out), {a, b},
              [pa, pb, m, k, n_cols](Node& n) {
                CMMap dz(n.grad.data(), m, n_cols);
                if (pa->requires_grad) {
                  pa->ensure_grad();
                  MMap(pa->grad.data(), m, k) += dz * CMMap(pb->val.data(), k, n_cols).transpose();
                }
                if (pb->requires_grad) {
                  pb->ensure_grad();
                  MMap(pb->grad.data(), k, n_cols) +=
                      CMMap(pa->val.data(), m, k).transpose() * dz;
                }
              },
              static_cast<long long>(m) * k * n_cols);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const int k = x->val.shape.back();
  require(w->val.ndim() == 2 && w->val.shape[0] == k, "linear: weight shape mismatch");
  const int n_out = w->val.shape[1];
  const std::size_t rows = leading_rows(x->val);
  if (b) {
    require(b->val.ndim() == 1 && b->val.shape[0] == n_out, "linear: bias shape mismatch");
  }
  std::vector<int> shape = x->val.shape;
  shape.back() = n_out;
  NdArray out(std::move(shape));
  const Eigen::Index r = static_cast<Eigen::Index>(rows);
  MMap(out.data(), r, n_out) = CMMap(x->val.data(), r, k) * CMMap(w->val.data(), k, n_out);
  if (b) {
    MMap o(out.data(), r, n_out);
    o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b->val.data(), n_out);
  }
  Tensor px = x, pw = w, pb = b;
  std::vector<Tensor> parents = b ? std::vector<Tensor>{x, w, b} : std::vector<Tensor>{x, w};
  return make(std::move(out), std::move(parents),
              [px, pw, pb, r, k, n_out](Node& n) {
                CMMap dz(n.grad.data(), r, n_out);
                if (px->requires_grad) {
                  px->ensure_grad();
                  MMap(px->grad.data(), r, k) += dz * CMMap(pw->val.data(), k, n_out).transpose();
                }
                if (pw->requires_grad) {
                  pw->ensure_grad();
                  MMap(pw->grad.data(), k, n_out) +=
                      CMMap(px->val.data(), r, k).transpose() * dz;
                }
                if (pb && pb->requires_grad) {
                  pb->ensure_grad();
                  Eigen::Map<Eigen::RowVectorXd>(pb->grad.data(), n_out) += dz.colwise().sum();
                }
              },
              static_cast<long long>(rows) * k * n_out);
}

Tensor layer_norm(const Tensor& x, double eps) {
  const int c = x->val.shape.back();
  require(c >= 1, "layer_norm: empty feature dim");
  const std::size_t rows = leading_rows(x->val);
  NdArray out(x->val.shape);
  auto sigma = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &x->val.v[r * c];
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += xr[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= c;
    const double s = std::sqrt(var + eps);
    (*sigma)[r] = s;
    for (int j = 0; j < c; ++j) out.v[r * c + j] = (xr[j] - mu) / s;
  }
  Tensor px = x;
  return make(std::move(out), {x}, [px, sigma, rows, c](Node& n) {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* dy = &n.grad.v[r * c];
      const double* xh = &n.val.v[r * c];
      double mdy = 0.0, mdyxh = 0.0;
      for (int j = 0; j < c; ++j) {
        mdy += dy[j];
        mdyxh += dy[j] * xh[j];
      }
      mdy /= c;
      mdyxh /= c;
      const double inv_s = 1.0 / (*sigma)[r];
      for (int j = 0; j < c; ++j) {
        px->grad.v[r * c + j] += inv_s * (dy[j] - mdy - xh[j] * mdyxh);
      }
    }
  });
}

Tensor conv1d_depthwise(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x->val.ndim() == 3, "conv1d_depthwise: input must be (B,T,C)");
  const int bsz = x->val.shape[0], t_len = x->val.shape[1], c = x->val.shape[2];
  require(w->val.ndim() == 2 && w->val.shape[0] == c, "conv1d_depthwise: weight must be (C,W)");
  const int width = w->val.shape[1];
  require(b->val.ndim() == 1 && b->val.shape[0] == c, "conv1d_depthwise: bias must be (C)");
  NdArray out(x->val.shape);
  for (int bb = 0; bb < bsz; ++bb) {
    for (int t = 0; t < t_len; ++t) {
      double* o = &out.v[(static_cast<std::size_t>(bb) * t_len + t) * c];
      for (int j = 0; j < c; ++j) o[j] = b->val.v[j];
      for (int kk = 0; kk < width; ++kk) {
        const int src = t - (width - 1) + kk;
        if (src < 0) continue;
        const double* xr = &x->val.v[(static_cast<std::size_t>(bb) * t_len + src) * c];
        const double* wr = &w->val.v[0];
        for (int j = 0; j < c; ++j) o[j] += wr[static_cast<std::size_t>(j) * width + kk] * xr[j];
      }
    }
  }
  Tensor px = x, pw = w, pb = b;
  return make(std::move(out), {x, w, b},
              [px, pw, pb, bsz, t_len, c, width](Node& n) {
                if (px->requires_grad) px->ensure_grad();
                if (pw->requires_grad) pw->ensure_grad();
                if (pb->requires_grad) pb->ensure_grad();
                for (int bb = 0; bb < bsz; ++bb) {
                  for (int t = 0; t < t_len; ++t) {
                    const double* dy = &n.grad.v[(static_cast<std::size_t>(bb) * t_len + t) * c];
                    if (pb->requires_grad) {
                      for (int j = 0; j < c; ++j) pb->grad.v[j] += dy[j];
                    }
                    for (int kk = 0; kk < width; ++kk) {
                      const int src = t - (width - 1) + kk;
                      if (src < 0) continue;
                      const std::size_t xoff = (static_cast<std::size_t>(bb) * t_len + src) * c;
                      for (int j = 0; j < c; ++j) {
                        const std::size_t widx = static_cast<std::size_t>(j) * width + kk;
                        if (px->requires_grad) px->grad.v[xoff + j] += dy[j] * pw->val.v[widx];
                        if (pw->requires_grad) pw->grad.v[widx] += dy[j] * px->val.v[xoff + j];
                      }
                    }
                  }
                }
              },
              static_cast<long long>(bsz) * t_len * c * width);
}

Tensor conv2d_3x3(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x->val.ndim() == 3, "conv2d_3x3: input must be (T,F,Ci)");
  const int t_len = x->val.shape[0], f_len = x->val.shape[1], ci = x->val.shape[2];
  require(w->val.ndim() == 4 && w->val.shape[1] == ci && w->val.shape[2] == 3 &&
              w->val.shape[3] == 3,
          "conv2d_3x3: weight must be (Co,Ci,3,3)");
  const int co = w->val.shape[0];
  require(b->val.ndim() == 1 && b->val.shape[0] == co, "conv2d_3x3: bias must be (Co)");
  NdArray out({t_len, f_len, co});
  for (int t = 0; t < t_len; ++t) {
    for (int f = 0; f < f_len; ++f) {
      double* o = &out.v[(static_cast<std::size_t>(t) * f_len + f) * co];
      for (int oc = 0; oc < co; ++oc) o[oc] = b->val.v[oc];
      for (int dt = 0; dt < 3; ++dt) {
        const int ts = t + dt - 1;
        if (ts < 0 || ts >= t_len) continue;
        for (int df = 0; df < 3; ++df) {
          const int fs = f + df - 1;
          if (fs < 0 || fs >= f_len) continue;
          const double* xr = &x->val.v[(static_cast<std::size_t>(ts) * f_len + fs) * ci];
          for (int oc = 0; oc < co; ++oc) {
            const double* wr = &w->val.v[((static_cast<std::size_t>(oc) * ci) * 3 + dt) * 3 + df];
            double acc = 0.0;
            for (int icd = 0; icd < ci; ++icd) acc += wr[static_cast<std::size_t>(icd) * 9] * xr[icd];
            o[oc] += acc;
          }
        }
      }
    }
  }
  Tensor px = x, pw = w, pb = b;
  return make(std::move(out), {x, w, b},
              [px, pw, pb, t_len, f_len, ci, co](Node& n) {
                if (px->requires_grad) px->ensure_grad();
                if (pw->requires_grad) pw->ensure_grad();
                if (pb->requires_grad) pb->ensure_grad();
                for (int t = 0; t < t_len; ++t) {
                  for (int f = 0; f < f_len; ++f) {
                    const double* dy = &n.grad.v[(static_cast<std::size_t>(t) * f_len + f) * co];
                    if (pb->requires_grad) {
                      for (int oc = 0; oc < co; ++oc) pb->grad.v[oc] += dy[oc];
                    }
                    for (int dt = 0; dt < 3; ++dt) {
                      const int ts = t + dt - 1;
                      if (ts < 0 || ts >= t_len) continue;
                      for (int df = 0; df < 3; ++df) {
                        const int fs = f + df - 1;
                        if (fs < 0 || fs >= f_len) continue;
                        const std::size_t xoff = (static_cast<std::size_t>(ts) * f_len + fs) * ci;
                        for (int oc = 0; oc < co; ++oc) {
                          const std::size_t woff =
                              ((static_cast<std::size_t>(oc) * ci) * 3 + dt) * 3 + df;
                          for (int icd = 0; icd < ci; ++icd) {
                            const std::size_t widx = woff + static_cast<std::size_t>(icd) * 9;
                            if (px->requires_grad) {
                              px->grad.v[xoff + icd] += dy[oc] * pw->val.v[widx];
                            }
                            if (pw->requires_grad) {
                              pw->grad.v[widx] += dy[oc] * px->val.v[xoff + icd];
                            }
                          }
                        }
                      }
                    }
                  }
                }
              },
              static_cast<long long>(t_len) * f_len * ci * co * 9);
}

Tensor selective_scan(const Tensor& u, const Tensor& delta, const Tensor& a, const Tensor& bm,
                      const Tensor& cm, const Tensor& d_skip) {
  require(u->val.ndim() == 3, "selective_scan: u must be (B,T,D)");
  const int bsz = u->val.shape[0], t_len = u->val.shape[1], d = u->val.shape[2];
  require(delta->val.shape == u->val.shape, "selective_scan: delta shape mismatch");
  require(a->val.ndim() == 2 && a->val.shape[0] == d, "selective_scan: A must be (D,N)");
  const int ns = a->val.shape[1];
  require(bm->val.ndim() == 3 && bm->val.shape[0] == bsz && bm->val.shape[1] == t_len &&
              bm->val.shape[2] == ns,
          "selective_scan: B must be (B,T,N)");
  require(cm->val.shape == bm->val.shape, "selective_scan: C must be (B,T,N)");
  require(d_skip->val.ndim() == 1 && d_skip->val.shape[0] == d,
          "selective_scan: D must be (D)");

  NdArray out({bsz, t_len, d});
  // States after each update; kept for the backward pass.
  auto states = std::make_shared<NdArray>(std::vector<int>{bsz, t_len, d, ns});

  const double* av = a->val.data();
  for (int bb = 0; bb < bsz; ++bb) {
    std::vector<double> h(static_cast<std::size_t>(d) * ns, 0.0);
    for (int t = 0; t < t_len; ++t) {
      const std::size_t bt = static_cast<std::size_t>(bb) * t_len + t;
      const double* uv = &u->val.v[bt * d];
      const double* dv = &delta->val.v[bt * d];
      const double* bv = &bm->val.v[bt * ns];
      const double* cv = &cm->val.v[bt * ns];
      double* hs = &states->v[bt * d * ns];
      double* yo = &out.v[bt * d];
      for (int j = 0; j < d; ++j) {
        const double dt = dv[j];
        const double du = dt * uv[j];
        double acc = 0.0;
        double* hj = &h[static_cast<std::size_t>(j) * ns];
        const double* aj = &av[static_cast<std::size_t>(j) * ns];
        for (int nn = 0; nn < ns; ++nn) {
          const double abar = std::exp(dt * aj[nn]);
          const double hv = abar * hj[nn] + du * bv[nn];
          hj[nn] = hv;
          acc += cv[nn] * hv;
        }
        std::copy(hj, hj + ns, &hs[static_cast<std::size_t>(j) * ns]);
        yo[j] = acc + d_skip->val.v[j] * uv[j];
      }
    }
  }

  Tensor pu = u, pd = delta, pa = a, pb = bm, pc = cm, pk = d_skip;
  return make(
      std::move(out), {u, delta, a, bm, cm, d_skip},
      [pu, pd, pa, pb, pc, pk, states, bsz, t_len, d, ns](Node& n) {
        if (pu->requires_grad) pu->ensure_grad();
        if (pd->requires_grad) pd->ensure_grad();
        if (pa->requires_grad) pa->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        if (pc->requires_grad) pc->ensure_grad();
        if (pk->requires_grad) pk->ensure_grad();
        const double* av = pa->val.data();
        for (int bb = 0; bb < bsz; ++bb) {
          // g = dL/ds_t carried backwards through the recurrence.
          std::vector<double> g(static_cast<std::size_t>(d) * ns, 0.0);
          for (int t = t_len - 1; t >= 0; --t) {
            const std::size_t bt = static_cast<std::size_t>(bb) * t_len + t;
            const double* dy = &n.grad.v[bt * d];
            const double* uv = &pu->val.v[bt * d];
            const double* dv = &pd->val.v[bt * d];
            const double* bv = &pb->val.v[bt * ns];
            const double* cv = &pc->val.v[bt * ns];
            const double* hs = &states->v[bt * d * ns];
            const double* hprev =
                t > 0 ? &states->v[(bt - 1) * d * ns] : nullptr;
            for (int j = 0; j < d; ++j) {
              const double dt = dv[j];
              const double* aj = &av[static_cast<std::size_t>(j) * ns];
              double* gj = &g[static_cast<std::size_t>(j) * ns];
              const double* hj = &hs[static_cast<std::size_t>(j) * ns];
              const double dyj = dy[j];
              double d_delta = 0.0, d_u = 0.0;
              for (int nn = 0; nn < ns; ++nn) {
                // Output contribution: y = sum_n c*h (+ skip).
                const double gn = gj[nn] + cv[nn] * dyj;
                if (pc->requires_grad) pc->grad.v[bt * ns + nn] += dyj * hj[nn];
                const double hp = hprev ? hprev[static_cast<std::size_t>(j) * ns + nn] : 0.0;
                const double abar = std::exp(dt * aj[nn]);
                // s_t = abar*hp + dt*b*u
                d_delta += gn * (aj[nn] * abar * hp + bv[nn] * uv[j]);
                d_u += gn * dt * bv[nn];
                if (pa->requires_grad) {
                  pa->grad.v[static_cast<std::size_t>(j) * ns + nn] += gn * dt * abar * hp;
                }
                if (pb->requires_grad) pb->grad.v[bt * ns + nn] += gn * dt * uv[j];
                gj[nn] = gn * abar;  // propagate to s_{t-1}
              }
              if (pd->requires_grad) pd->grad.v[bt * d + j] += d_delta;
              if (pu->requires_grad) {
                pu->grad.v[bt * d + j] += d_u + pk->val.v[j] * dyj;
              }
              if (pk->requires_grad) pk->grad.v[j] += dyj * uv[j];
            }
          }
        }
      },
      static_cast<long long>(bsz) * t_len * d * ns * 4);
}

// ---------------- bookkeeping ----------------

Tensor ParamStore::add(const std::string& name, NdArray init) {
  require(params.find(name) == params.end(), "ParamStore: duplicate parameter " + name);
  Tensor t = param(std::move(init));
  params.emplace(name, t);
  return t;
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = params.find(name);
  require(it != params.end(), "ParamStore: unknown parameter " + name);
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : params) {
    if (t->grad.v.size() == t->val.v.size()) {
      std::fill(t->grad.v.begin(), t->grad.v.end(), 0.0);
    }
  }
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t->val.size();
  return n;
}

std::string Rng::state() const {
  std::ostringstream os;
  os << eng;
  return os.str();
}

void Rng::set_state(const std::string& s) {
  std::istringstream is(s);
  is >> eng;
  if (is.fail()) throw std::runtime_error("Rng: failed to restore state");
}

Adam::Adam(ParamStore& store, AdamConfig cfg) : store_(store), cfg_(cfg) {
  for (auto& [name, t] : store_.params) {
    m_.emplace(name, NdArray(t->val.shape));
    v_.emplace(name, NdArray(t->val.shape));
  }
}

void Adam::step(double lr_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const double lr = cfg_.lr * lr_scale;
  for (auto& [name, t] : store_.params) {
    if (t->grad.v.size() != t->val.v.size()) continue;  // unused parameter this step
    auto& m = m_.at(name);
    auto& v = v_.at(name);
    for (std::size_t i = 0; i < t->val.size(); ++i) {
      const double gi = t->grad.v[i];
      m.v[i] = cfg_.beta1 * m.v[i] + (1.0 - cfg_.beta1) * gi;
      v.v[i] = cfg_.beta2 * v.v[i] + (1.0 - cfg_.beta2) * gi * gi;
      const double mhat = m.v[i] / bc1;
      const double vhat = v.v[i] / bc2;
      t->val.v[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

}  // namespace usemamba::ag
