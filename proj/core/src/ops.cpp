#include "gcalab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "gcalab/error.hpp"

namespace gcalab {

using detail::TensorImpl;

namespace {

TensorImpl* raw(const Tensor& t) { return t.impl().get(); }

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor operand");
}

// Broadcast result shape of two shapes (right-aligned, numpy rules).
Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// For every flat index of `to`, the flat index of the broadcast source.
std::vector<std::size_t> broadcast_map(const Shape& from, const Shape& to) {
  const std::size_t r = to.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = 0; i < from.size(); ++i) {
    const std::size_t axis = from.size() - 1 - i;
    const std::size_t out_axis = r - 1 - i;
    stride[out_axis] = from[axis] == 1 ? 0 : s;
    s *= from[axis];
  }
  const std::size_t n = shape_numel(to);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = offset;
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      offset += stride[k];
      if (idx[k] < to[k]) break;
      offset -= stride[k] * idx[k];
      idx[k] = 0;
    }
  }
  return map;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

// How operand `x` maps onto the output of a binary op.
struct OperandMap {
  enum class Kind { kSame, kCyclic, kGeneral } kind = Kind::kSame;
  std::size_t period = 0;
  std::vector<std::size_t> map;

  std::size_t operator()(std::size_t i) const {
    switch (kind) {
      case Kind::kSame: return i;
      case Kind::kCyclic: return i % period;
      default: return map[i];
    }
  }
};

OperandMap make_operand_map(const Shape& from, const Shape& out) {
  OperandMap m;
  if (from == out) return m;
  if (is_suffix(from, out)) {
    m.kind = OperandMap::Kind::kCyclic;
    m.period = std::max<std::size_t>(1, shape_numel(from));
    return m;
  }
  m.kind = OperandMap::Kind::kGeneral;
  m.map = broadcast_map(from, out);
  return m;
}

template <class Fwd, class Dfda, class Dfdb>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Fwd f, Dfda dfa, Dfdb dfb) {
  require_defined(a, name);
  require_defined(b, name);
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  auto ma = make_operand_map(a.shape(), out_shape);
  auto mb = make_operand_map(b.shape(), out_shape);
  const auto n = shape_numel(out_shape);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[ma(i)], bd[mb(i)]);
  auto* pa = raw(a);
  auto* pb = raw(b);
  return detail::make_result(std::move(out_shape), std::move(out), {a, b},
                             [pa, pb, ma = std::move(ma), mb = std::move(mb), dfa, dfb](TensorImpl& self) {
                               double* ga = pa->grad_buffer();
                               double* gb = pb->grad_buffer();
                               const std::size_t n = self.grad.size();
                               for (std::size_t i = 0; i < n; ++i) {
                                 const double g = self.grad[i];
                                 const double x = pa->data[ma(i)];
                                 const double y = pb->data[mb(i)];
                                 if (ga) ga[ma(i)] += g * dfa(x, y);
                                 if (gb) gb[mb(i)] += g * dfb(x, y);
                               }
                             });
}

// Unary op whose derivative is expressed through input x and output y.
template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& a, Fwd f, Deriv df) {
  require_defined(a, name);
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = f(ad[i]);
  auto* pa = raw(a);
  return detail::make_result(a.shape(), std::move(out), {a}, [pa, df](TensorImpl& self) {
    double* ga = pa->grad_buffer();
    if (!ga) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * df(pa->data[i], self.data[i]);
  });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void require_rank3(const Tensor& x, const char* op) {
  if (x.rank() != 3) throw DimensionError(std::string(op) + ": expected [B,l,d], got " + shape_str(x.shape()));
}

}  // namespace

Tensor elementwise(Elementwise op, const Tensor& a, const Tensor& b) {
  switch (op) {
    case Elementwise::kAdd: return add(a, b);
    case Elementwise::kSub: return sub(a, b);
    case Elementwise::kMul: return mul(a, b);
    case Elementwise::kSigmoid: return sigmoid(a);
    case Elementwise::kTanh: return tanh(a);
    case Elementwise::kRelu: return relu(a);
  }
  throw ContractError("elementwise: unknown op");
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& a) {
  return unary(
      "softplus", a, [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) { return stable_sigmoid(x); });
}

Tensor scale(const Tensor& a, double factor) {
  return unary("scale", a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

namespace {

// C[m,n] += A[m,k] @ B[k,n], all row-major.
void gemm_acc(double* __restrict C, const double* __restrict A, const double* __restrict B, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  }
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = broadcast_shape(batch_a, batch_b, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul: batch dimensions of " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " are not broadcastable");
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);

  // A shared right operand (a weight matrix) lets the whole batch run as one
  // tall product.
  std::vector<std::size_t> map_a, map_b;
  std::size_t nb = shape_numel(batch), rows = m;
  if (shape_numel(batch_b) == 1 && batch_a == batch) {
    rows = nb * m;
    nb = 1;
    map_a = {0};
    map_b = {0};
  } else {
    map_a = broadcast_map(batch_a, batch);
    map_b = broadcast_map(batch_b, batch);
  }

  std::vector<double> out(nb * rows * n, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t t = 0; t < nb; ++t) {
    gemm_acc(out.data() + t * rows * n, A + map_a[t] * rows * k, B + map_b[t] * k * n, rows, k, n);
  }

  auto* pa = raw(a);
  auto* pb = raw(b);
  return detail::make_result(std::move(out_shape), std::move(out), {a, b},
                             [pa, pb, map_a, map_b, nb, rows, k, n](TensorImpl& self) {
                               double* ga = pa->grad_buffer();
                               double* gb = pb->grad_buffer();
                               const double* A = pa->data.data();
                               const double* B = pb->data.data();
                               std::vector<double> bt;
                               for (std::size_t t = 0; t < nb; ++t) {
                                 const double* G = self.grad.data() + t * rows * n;
                                 if (ga) {
                                   // dA = G @ B^T
                                   const double* Bt = B + map_b[t] * k * n;
                                   bt.resize(k * n);
                                   for (std::size_t p = 0; p < k; ++p)
                                     for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = Bt[p * n + j];
                                   gemm_acc(ga + map_a[t] * rows * k, G, bt.data(), rows, n, k);
                                 }
                                 if (gb) {
                                   // dB = A^T @ G
                                   const double* At = A + map_a[t] * rows * k;
                                   double* GBt = gb + map_b[t] * k * n;
                                   for (std::size_t i = 0; i < rows; ++i) {
                                     const double* grow = G + i * n;
                                     for (std::size_t p = 0; p < k; ++p) {
                                       const double aip = At[i * k + p];
                                       double* gbrow = GBt + p * n;
                                       for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                                     }
                                   }
                                 }
                               }
                             });
}

Tensor transpose_last2(const Tensor& a) {
  require_defined(a, "transpose_last2");
  if (a.rank() < 2) throw DimensionError("transpose_last2: rank < 2 for " + shape_str(a.shape()));
  const std::size_t m = a.dim(-2), n = a.dim(-1);
  const std::size_t nb = a.numel() / std::max<std::size_t>(1, m * n);
  std::vector<double> out(a.numel());
  const auto ad = a.data();
  for (std::size_t t = 0; t < nb; ++t)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[t * m * n + j * m + i] = ad[t * m * n + i * n + j];
  Shape s = a.shape();
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  auto* pa = raw(a);
  return detail::make_result(std::move(s), std::move(out), {a}, [pa, nb, m, n](TensorImpl& self) {
    double* ga = pa->grad_buffer();
    if (!ga) return;
    for (std::size_t t = 0; t < nb; ++t)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[t * m * n + i * n + j] += self.grad[t * m * n + j * m + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto* pa = raw(a);
  return detail::make_result(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), {a},
                             [pa](TensorImpl& self) {
                               double* ga = pa->grad_buffer();
                               if (!ga) return;
                               for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
                             });
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto* pa = raw(a);
  return detail::make_result({}, {s}, {a}, [pa](TensorImpl& self) {
    double* ga = pa->grad_buffer();
    if (!ga) return;
    const double g = self.grad[0];
    for (std::size_t i = 0; i < pa->data.size(); ++i) ga[i] += g;
  });
}

Tensor mean(const Tensor& a) {
  require_defined(a, "mean");
  if (a.numel() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor softmax_lastdim(const Tensor& x, const Mask* mask, EmptyRowPolicy empty) {
  require_defined(x, "softmax_lastdim");
  if (x.rank() < 1) throw DimensionError("softmax_lastdim: scalar input");
  const std::size_t n = x.dim(-1);
  const std::size_t rows = n == 0 ? 0 : x.numel() / n;

  std::vector<std::size_t> mask_row;
  if (mask) {
    if (mask->shape.empty() || mask->shape.back() != n) {
      throw DimensionError("softmax_lastdim: mask " + shape_str(mask->shape) + " does not match last dim of " +
                           shape_str(x.shape()));
    }
    const Shape lead_x(x.shape().begin(), x.shape().end() - 1);
    const Shape lead_m(mask->shape.begin(), mask->shape.end() - 1);
    if (broadcast_shape(lead_m, lead_x, "softmax_lastdim mask") != lead_x) {
      throw DimensionError("softmax_lastdim: mask " + shape_str(mask->shape) + " does not broadcast to " +
                           shape_str(x.shape()));
    }
    mask_row = broadcast_map(lead_m, lead_x);
  }

  const auto xd = x.data();
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * n;
    const std::uint8_t* mr = mask ? mask->values.data() + mask_row[r] * n : nullptr;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j)
      if (!mr || mr[j]) mx = std::max(mx, xr[j]);
    if (mx == -INFINITY) {
      if (empty == EmptyRowPolicy::kThrow) {
        throw DegenerateSliceError("softmax_lastdim: slice " + std::to_string(r) + " has no unmasked entries");
      }
      continue;
    }
    double z = 0.0;
    double* yr = out.data() + r * n;
    for (std::size_t j = 0; j < n; ++j) {
      if (!mr || mr[j]) {
        yr[j] = std::exp(xr[j] - mx);
        z += yr[j];
      }
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= z;
  }

  auto* px = raw(x);
  return detail::make_result(x.shape(), std::move(out), {x}, [px, rows, n](TensorImpl& self) {
    double* gx = px->grad_buffer();
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.data.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_defined(x, "layernorm");
  if (x.rank() < 1) throw DimensionError("layernorm: scalar input");
  const std::size_t d = x.dim(-1);
  if (d < 2) throw DimensionError("layernorm: last dimension must be >= 2, got " + shape_str(x.shape()));
  if (!(eps > 0)) throw ContractError("layernorm: eps must be positive");
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layernorm: gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                         " must be [" + std::to_string(d) + "]");
  }
  const std::size_t rows = x.numel() / d;
  const auto xd = x.data();
  const auto gd = gain.data();
  const auto bd = bias.data();
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = gd[j] * h + bd[j];
    }
  }
  auto* px = raw(x);
  auto* pg = raw(gain);
  auto* pb = raw(bias);
  return detail::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [px, pg, pb, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorImpl& self) {
        double* gx = px->grad_buffer();
        double* gg = pg->grad_buffer();
        double* gb = pb->grad_buffer();
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * d;
          const double* h = xhat.data() + r * d;
          double mean_dx = 0.0, mean_dxh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            if (gg) gg[j] += g[j] * h[j];
            if (gb) gb[j] += g[j];
            dxhat[j] = g[j] * pg->data[j];
            mean_dx += dxhat[j];
            mean_dxh += dxhat[j] * h[j];
          }
          if (!gx) continue;
          mean_dx /= static_cast<double>(d);
          mean_dxh /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += inv_std[r] * (dxhat[j] - mean_dx - h[j] * mean_dxh);
        }
      });
}

Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
  require_defined(a, "concat_lastdim");
  require_defined(b, "concat_lastdim");
  if (a.rank() < 1 || a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin())) {
    throw DimensionError("concat_lastdim: leading shapes differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  const std::size_t d1 = a.dim(-1), d2 = b.dim(-1), d = d1 + d2;
  const std::size_t rows = d1 + d2 == 0 ? 0 : (d1 ? a.numel() / d1 : b.numel() / d2);
  std::vector<double> out(rows * d);
  const auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(ad.data() + r * d1, d1, out.data() + r * d);
    std::copy_n(bd.data() + r * d2, d2, out.data() + r * d + d1);
  }
  Shape s = a.shape();
  s.back() = d;
  auto* pa = raw(a);
  auto* pb = raw(b);
  return detail::make_result(std::move(s), std::move(out), {a, b}, [pa, pb, rows, d1, d2](TensorImpl& self) {
    double* ga = pa->grad_buffer();
    double* gb = pb->grad_buffer();
    const std::size_t d = d1 + d2;
    for (std::size_t r = 0; r < rows; ++r) {
      if (ga)
        for (std::size_t j = 0; j < d1; ++j) ga[r * d1 + j] += self.grad[r * d + j];
      if (gb)
        for (std::size_t j = 0; j < d2; ++j) gb[r * d2 + j] += self.grad[r * d + d1 + j];
    }
  });
}

Tensor slice_lastdim(const Tensor& a, std::size_t start, std::size_t length) {
  require_defined(a, "slice_lastdim");
  const std::size_t d = a.dim(-1);
  if (start + length > d) {
    throw DimensionError("slice_lastdim: [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") exceeds " + shape_str(a.shape()));
  }
  const std::size_t rows = d ? a.numel() / d : 0;
  std::vector<double> out(rows * length);
  const auto ad = a.data();
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(ad.data() + r * d + start, length, out.data() + r * length);
  Shape s = a.shape();
  s.back() = length;
  auto* pa = raw(a);
  return detail::make_result(std::move(s), std::move(out), {a}, [pa, rows, d, start, length](TensorImpl& self) {
    double* ga = pa->grad_buffer();
    if (!ga) return;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < length; ++j) ga[r * d + start + j] += self.grad[r * length + j];
  });
}

Tensor embedding_gather(const Tensor& table, const IndexTensor& ids) {
  require_defined(table, "embedding_gather");
  if (table.rank() != 2) throw DimensionError("embedding_gather: table must be [V,d], got " + shape_str(table.shape()));
  const std::size_t V = table.dim(0), d = table.dim(1);
  for (auto id : ids.values) {
    if (id < 0 || static_cast<std::size_t>(id) >= V) {
      throw IndexError("embedding_gather: id " + std::to_string(id) + " outside [0," + std::to_string(V) + ")");
    }
  }
  std::vector<double> out(ids.numel() * d);
  const auto td = table.data();
  for (std::size_t i = 0; i < ids.numel(); ++i)
    std::copy_n(td.data() + static_cast<std::size_t>(ids.values[i]) * d, d, out.data() + i * d);
  Shape s = ids.shape;
  s.push_back(d);
  auto* pt = raw(table);
  return detail::make_result(std::move(s), std::move(out), {table}, [pt, ids = ids.values, d](TensorImpl& self) {
    double* gt = pt->grad_buffer();
    if (!gt) return;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* row = gt + static_cast<std::size_t>(ids[i]) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += self.grad[i * d + j];
    }
  });
}

Tensor slice_rows(const Tensor& table, std::size_t start, std::size_t length) {
  require_defined(table, "slice_rows");
  if (table.rank() != 2) throw DimensionError("slice_rows: table must be [V,d], got " + shape_str(table.shape()));
  const std::size_t V = table.dim(0), d = table.dim(1);
  if (start + length > V) {
    throw DimensionError("slice_rows: rows [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") exceed table " + shape_str(table.shape()));
  }
  const auto td = table.data();
  std::vector<double> out(td.begin() + static_cast<std::ptrdiff_t>(start * d),
                          td.begin() + static_cast<std::ptrdiff_t>((start + length) * d));
  auto* pt = raw(table);
  return detail::make_result({length, d}, std::move(out), {table}, [pt, start, d](TensorImpl& self) {
    double* gt = pt->grad_buffer();
    if (!gt) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) gt[start * d + i] += self.grad[i];
  });
}

Tensor pad_seq(const Tensor& x, std::size_t length) {
  require_defined(x, "pad_seq");
  require_rank3(x, "pad_seq");
  const std::size_t B = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (length < l) throw DimensionError("pad_seq: target length shorter than " + shape_str(x.shape()));
  if (length == l) return x;
  std::vector<double> out(B * length * d, 0.0);
  const auto xd = x.data();
  for (std::size_t b = 0; b < B; ++b) std::copy_n(xd.data() + b * l * d, l * d, out.data() + b * length * d);
  auto* px = raw(x);
  return detail::make_result({B, length, d}, std::move(out), {x}, [px, B, l, d, length](TensorImpl& self) {
    double* gx = px->grad_buffer();
    if (!gx) return;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < l * d; ++i) gx[b * l * d + i] += self.grad[b * length * d + i];
  });
}

Tensor slice_seq(const Tensor& x, std::size_t start, std::size_t length) {
  require_defined(x, "slice_seq");
  require_rank3(x, "slice_seq");
  const std::size_t B = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (start + length > l) throw DimensionError("slice_seq: range exceeds " + shape_str(x.shape()));
  if (start == 0 && length == l) return x;
  std::vector<double> out(B * length * d);
  const auto xd = x.data();
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(xd.data() + (b * l + start) * d, length * d, out.data() + b * length * d);
  auto* px = raw(x);
  return detail::make_result({B, length, d}, std::move(out), {x}, [px, B, l, d, start, length](TensorImpl& self) {
    double* gx = px->grad_buffer();
    if (!gx) return;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < length * d; ++i) gx[(b * l + start) * d + i] += self.grad[b * length * d + i];
  });
}

Tensor gather_positions(const Tensor& x, const IndexTensor& index) {
  require_defined(x, "gather_positions");
  require_rank3(x, "gather_positions");
  const std::size_t B = x.dim(0), L = x.dim(1), d = x.dim(2);
  if (index.shape.size() != 2 || index.shape[0] != B) {
    throw DimensionError("gather_positions: index " + shape_str(index.shape) + " does not match " +
                         shape_str(x.shape()));
  }
  const std::size_t l = index.shape[1];
  for (auto p : index.values) {
    if (p >= static_cast<std::int64_t>(L)) throw IndexError("gather_positions: position " + std::to_string(p) + " >= " + std::to_string(L));
  }
  std::vector<double> out(B * l * d, 0.0);
  const auto xd = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < l; ++i) {
      const auto p = index.values[b * l + i];
      if (p >= 0) std::copy_n(xd.data() + (b * L + static_cast<std::size_t>(p)) * d, d, out.data() + (b * l + i) * d);
    }
  auto* px = raw(x);
  return detail::make_result({B, l, d}, std::move(out), {x}, [px, B, L, l, d, idx = index.values](TensorImpl& self) {
    double* gx = px->grad_buffer();
    if (!gx) return;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < l; ++i) {
        const auto p = idx[b * l + i];
        if (p < 0) continue;
        double* row = gx + (b * L + static_cast<std::size_t>(p)) * d;
        const double* g = self.grad.data() + (b * l + i) * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += g[j];
      }
  });
}

Tensor mask_rows(const Tensor& x, const Mask& mask) {
  require_defined(x, "mask_rows");
  require_rank3(x, "mask_rows");
  const std::size_t B = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (mask.shape != Shape{B, l}) {
    throw DimensionError("mask_rows: mask " + shape_str(mask.shape) + " does not match " + shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < B * l; ++r)
    if (!mask.values[r]) std::fill_n(out.data() + r * d, d, 0.0);
  auto* px = raw(x);
  return detail::make_result(x.shape(), std::move(out), {x}, [px, m = mask.values, d](TensorImpl& self) {
    double* gx = px->grad_buffer();
    if (!gx) return;
    for (std::size_t r = 0; r < m.size(); ++r) {
      if (!m[r]) continue;
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += self.grad[r * d + j];
    }
  });
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  require_defined(x, "split_heads");
  require_rank3(x, "split_heads");
  const std::size_t B = x.dim(0), l = x.dim(1), d = x.dim(2);
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("split_heads: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                         " heads");
  }
  const std::size_t dh = d / heads;
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(xd.data() + (b * l + i) * d + h * dh, dh, out.data() + ((b * heads + h) * l + i) * dh);
  auto* px = raw(x);
  return detail::make_result({B, heads, l, dh}, std::move(out), {x}, [px, B, l, heads, dh](TensorImpl& self) {
    double* gx = px->grad_buffer();
    if (!gx) return;
    const std::size_t d = heads * dh;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < l; ++i)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t j = 0; j < dh; ++j)
            gx[(b * l + i) * d + h * dh + j] += self.grad[((b * heads + h) * l + i) * dh + j];
  });
}

Tensor merge_heads(const Tensor& x) {
  require_defined(x, "merge_heads");
  if (x.rank() != 4) throw DimensionError("merge_heads: expected [B,h,l,dh], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), heads = x.dim(1), l = x.dim(2), dh = x.dim(3), d = heads * dh;
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < l; ++i)
        std::copy_n(xd.data() + ((b * heads + h) * l + i) * dh, dh, out.data() + (b * l + i) * d + h * dh);
  auto* px = raw(x);
  return detail::make_result({B, l, d}, std::move(out), {x}, [px, B, l, heads, dh](TensorImpl& self) {
    double* gx = px->grad_buffer();
    if (!gx) return;
    const std::size_t d = heads * dh;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < l; ++i)
          for (std::size_t j = 0; j < dh; ++j)
            gx[((b * heads + h) * l + i) * dh + j] += self.grad[(b * l + i) * d + h * dh + j];
  });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  require_defined(x, "dropout");
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout: probability must be in [0,1)");
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> factor(x.numel());
  for (auto& f : factor) f = rng.uniform() < p ? 0.0 : keep_scale;
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor[i];
  auto* px = raw(x);
  return detail::make_result(x.shape(), std::move(out), {x}, [px, factor = std::move(factor)](TensorImpl& self) {
    double* gx = px->grad_buffer();
    if (!gx) return;
    for (std::size_t i = 0; i < factor.size(); ++i) gx[i] += self.grad[i] * factor[i];
  });
}

}  // namespace gcalab
