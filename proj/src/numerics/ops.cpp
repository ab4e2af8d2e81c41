#include "ovseg/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "ovseg/errors.hpp"
#include "ovseg/numerics/kernels.hpp"

namespace ovseg::ops {
namespace {

namespace k = ovseg::kernels;

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t != nullptr && t->requires_grad()) return true;
  return false;
}

template <typename Fn>
void record(Tensor& out, Fn&& fn) {
  out.set_requires_grad(true);
  active_tape()->record(out, std::forward<Fn>(fn));
}

std::vector<double>& grad_of(const Tensor& t) { return t.impl().ensure_grad(); }
const std::vector<double>& out_grad(const Tensor& t) { return t.impl().grad; }

struct AxisSplit {
  std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
}

void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(t.shape()));
}

template <typename F>
Tensor map_unary(const Tensor& x, const char* name, F&& f) {
  std::vector<double> out(x.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xd[i]);
  Tensor y(x.shape(), std::move(out));
  check_finite(y, name);
  return y;
}

// Elementwise op whose derivative is expressed through (x, y).
template <typename F, typename D>
Tensor unary(const Tensor& x, const char* name, F&& f, D&& deriv) {
  Tensor y = map_unary(x, name, f);
  if (tracking({&x})) {
    record(y, [x, y, deriv] {
      const auto& gy = out_grad(y);
      auto& gx = grad_of(x);
      const auto xd = x.data();
      const auto yd = y.data();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(xd[i], yd[i]);
    });
  }
  return y;
}

struct Bilerp {
  std::size_t i0, i1;
  double t;
};

std::vector<Bilerp> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Bilerp> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = scale * (static_cast<double>(d) + 0.5) - 0.5;
    if (src < 0.0) src = 0.0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = i0 < in - 1 ? i0 + 1 : i0;
    taps[d] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

void check_finite(const Tensor& t, const char* where) {
  for (double v : t.data())
    if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value produced by ") + where);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), kk = a.dim(1), n = b.dim(1);
  if (b.dim(0) != kk)
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor y({m, n});
  k::gemm_nn(m, n, kk, a.data().data(), b.data().data(), y.mutable_data().data());
  check_finite(y, "matmul");
  if (tracking({&a, &b})) {
    record(y, [a, b, y, m, n, kk] {
      const double* gy = out_grad(y).data();
      if (a.requires_grad()) k::gemm_nt(m, kk, n, gy, b.data().data(), grad_of(a).data(), true);
      if (b.requires_grad()) k::gemm_tn(kk, n, m, a.data().data(), gy, grad_of(b).data(), true);
    });
  }
  return y;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), kk = a.dim(1), n = b.dim(0);
  if (b.dim(1) != kk)
    throw DimensionError("matmul_nt: inner extents differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  Tensor y({m, n});
  k::gemm_nt(m, n, kk, a.data().data(), b.data().data(), y.mutable_data().data());
  check_finite(y, "matmul_nt");
  if (tracking({&a, &b})) {
    record(y, [a, b, y, m, n, kk] {
      const double* gy = out_grad(y).data();
      if (a.requires_grad()) k::gemm_nn(m, kk, n, gy, b.data().data(), grad_of(a).data(), true);
      if (b.requires_grad()) k::gemm_tn(n, kk, m, gy, a.data().data(), grad_of(b).data(), true);
    });
  }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias) {
  require_rank(weight, 2, "linear");
  const std::size_t in = weight.dim(1), outc = weight.dim(0);
  if (x.rank() == 0 || x.shape().back() != in)
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  if (bias && bias->size() != outc) throw DimensionError("linear: bias size " + std::to_string(bias->size()));
  const std::size_t m = x.size() / in;
  Shape oshape = x.shape();
  oshape.back() = outc;
  Tensor y(oshape);
  double* yd = y.mutable_data().data();
  k::gemm_nt(m, outc, in, x.data().data(), weight.data().data(), yd);
  if (bias) {
    const double* bd = bias->data().data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < outc; ++j) yd[i * outc + j] += bd[j];
  }
  check_finite(y, "linear");
  if (tracking({&x, &weight, bias})) {
    Tensor b = bias ? *bias : Tensor();
    const bool has_bias = bias != nullptr;
    record(y, [x, weight, b, has_bias, y, m, in, outc] {
      const double* gy = out_grad(y).data();
      if (x.requires_grad()) k::gemm_nn(m, in, outc, gy, weight.data().data(), grad_of(x).data(), true);
      if (weight.requires_grad()) k::gemm_tn(outc, in, m, gy, x.data().data(), grad_of(weight).data(), true);
      if (has_bias && b.requires_grad()) {
        auto& gb = grad_of(b);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < outc; ++j) gb[j] += gy[i * outc + j];
      }
    });
  }
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor y(a.shape(), std::move(out));
  check_finite(y, "add");
  if (tracking({&a, &b})) {
    record(y, [a, b, y] {
      const auto& gy = out_grad(y);
      if (a.requires_grad()) k::axpy(1.0, gy.data(), grad_of(a).data(), gy.size());
      if (b.requires_grad()) k::axpy(1.0, gy.data(), grad_of(b).data(), gy.size());
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tensor y(a.shape(), std::move(out));
  check_finite(y, "sub");
  if (tracking({&a, &b})) {
    record(y, [a, b, y] {
      const auto& gy = out_grad(y);
      if (a.requires_grad()) k::axpy(1.0, gy.data(), grad_of(a).data(), gy.size());
      if (b.requires_grad()) k::axpy(-1.0, gy.data(), grad_of(b).data(), gy.size());
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor y(a.shape(), std::move(out));
  check_finite(y, "mul");
  if (tracking({&a, &b})) {
    record(y, [a, b, y] {
      const auto& gy = out_grad(y);
      if (a.requires_grad()) {
        auto& ga = grad_of(a);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * b[i];
      }
      if (b.requires_grad()) {
        auto& gb = grad_of(b);
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * a[i];
      }
    });
  }
  return y;
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  Tensor y(a.shape(), std::move(out));
  check_finite(y, "div");
  if (tracking({&a, &b})) {
    record(y, [a, b, y] {
      const auto& gy = out_grad(y);
      if (a.requires_grad()) {
        auto& ga = grad_of(a);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] / b[i];
      }
      if (b.requires_grad()) {
        auto& gb = grad_of(b);
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i] * a[i] / (b[i] * b[i]);
      }
    });
  }
  return y;
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  if (x.rank() == 0 || x.shape().back() != row.size())
    throw DimensionError("add_row: " + shape_str(x.shape()) + " + row " + shape_str(row.shape()));
  const std::size_t n = row.size(), m = x.size() / n;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + row[j];
  Tensor y(x.shape(), std::move(out));
  check_finite(y, "add_row");
  if (tracking({&x, &row})) {
    record(y, [x, row, y, m, n] {
      const auto& gy = out_grad(y);
      if (x.requires_grad()) k::axpy(1.0, gy.data(), grad_of(x).data(), gy.size());
      if (row.requires_grad()) {
        auto& gr = grad_of(row);
        for (std::size_t i = 0; i < m; ++i) k::axpy(1.0, gy.data() + i * n, gr.data(), n);
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& x, double s) {
  return unary(x, "scale", [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor y = Tensor::scalar(s);
  check_finite(y, "sum");
  if (tracking({&x})) {
    record(y, [x, y] {
      const double g = out_grad(y)[0];
      for (double& v : grad_of(x)) v += g;
    });
  }
  return y;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape oshape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) oshape.push_back(x.shape()[i]);
  if (oshape.empty()) oshape.push_back(1);
  std::vector<double> out(s.outer * s.inner, 0.0);
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xd[(o * s.len + l) * s.inner + i];
  Tensor y(oshape, std::move(out));
  check_finite(y, "sum_axis");
  if (tracking({&x})) {
    record(y, [x, y, s] {
      const auto& gy = out_grad(y);
      auto& gx = grad_of(x);
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t l = 0; l < s.len; ++l)
          for (std::size_t i = 0; i < s.inner; ++i) gx[(o * s.len + l) * s.inner + i] += gy[o * s.inner + i];
    });
  }
  return y;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<double> out(x.size());
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = xd[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, xd[base + l * s.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double e = std::exp(xd[base + l * s.inner] - mx);
        out[base + l * s.inner] = e;
        z += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= z;
    }
  }
  Tensor y(x.shape(), std::move(out));
  check_finite(y, "softmax");
  if (tracking({&x})) {
    record(y, [x, y, s] {
      const auto& gy = out_grad(y);
      auto& gx = grad_of(x);
      const auto yd = y.data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.len * s.inner + i;
          double d = 0.0;
          for (std::size_t l = 0; l < s.len; ++l) d += gy[base + l * s.inner] * yd[base + l * s.inner];
          for (std::size_t l = 0; l < s.len; ++l) {
            const std::size_t at = base + l * s.inner;
            gx[at] += yd[at] * (gy[at] - d);
          }
        }
      }
    });
  }
  return y;
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<double> out(x.size());
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = xd[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, xd[base + l * s.inner]);
      double z = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) z += std::exp(xd[base + l * s.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] = xd[base + l * s.inner] - lz;
    }
  }
  Tensor y(x.shape(), std::move(out));
  check_finite(y, "log_softmax");
  if (tracking({&x})) {
    record(y, [x, y, s] {
      const auto& gy = out_grad(y);
      auto& gx = grad_of(x);
      const auto yd = y.data();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.len * s.inner + i;
          double total = 0.0;
          for (std::size_t l = 0; l < s.len; ++l) total += gy[base + l * s.inner];
          for (std::size_t l = 0; l < s.len; ++l) {
            const std::size_t at = base + l * s.inner;
            gx[at] += gy[at] - std::exp(yd[at]) * total;
          }
        }
      }
    });
  }
  return y;
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(x, "relu", [](double v) { return v > 0 ? v : 0.0; },
               [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) { return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v); });
}

Tensor softplus(const Tensor& x) {
  return unary(
      x, "softplus", [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); });
}

Tensor abs(const Tensor& x) {
  return unary(x, "abs", [](double v) { return std::abs(v); },
               [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm on scalar");
  const std::size_t c = x.shape().back(), rows = x.size() / c;
  if (gamma.size() != c || beta.size() != c)
    throw DimensionError("layer_norm: affine size mismatch for " + shape_str(x.shape()));
  std::vector<double> out(x.size()), xhat(x.size()), rstd(rows);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[r * c + j] = (row[j] - mu) * rstd[r];
      out[r * c + j] = xhat[r * c + j] * gamma[j] + beta[j];
    }
  }
  Tensor y(x.shape(), std::move(out));
  check_finite(y, "layer_norm");
  if (tracking({&x, &gamma, &beta})) {
    record(y, [x, gamma, beta, y, xhat = std::move(xhat), rstd = std::move(rstd), rows, c] {
      const auto& gy = out_grad(y);
      if (gamma.requires_grad() || beta.requires_grad()) {
        std::vector<double> gg(c, 0.0), gb(c, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            gg[j] += gy[r * c + j] * xhat[r * c + j];
            gb[j] += gy[r * c + j];
          }
        if (gamma.requires_grad()) k::axpy(1.0, gg.data(), grad_of(gamma).data(), c);
        if (beta.requires_grad()) k::axpy(1.0, gb.data(), grad_of(beta).data(), c);
      }
      if (x.requires_grad()) {
        auto& gx = grad_of(x);
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double dxh = gy[r * c + j] * gamma[j];
            m1 += dxh;
            m2 += dxh * xhat[r * c + j];
          }
          m1 *= inv_c;
          m2 *= inv_c;
          for (std::size_t j = 0; j < c; ++j) {
            const double dxh = gy[r * c + j] * gamma[j];
            gx[r * c + j] += rstd[r] * (dxh - m1 - xhat[r * c + j] * m2);
          }
        }
      }
    });
  }
  return y;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of no tensors");
  const Shape& s0 = parts.front().shape();
  if (axis >= s0.size()) throw DimensionError("concat: axis out of range");
  Shape oshape = s0;
  oshape[axis] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != s0.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s0.size(); ++i)
      if (i != axis && p.shape()[i] != s0[i])
        throw DimensionError("concat: " + shape_str(p.shape()) + " vs " + shape_str(s0));
    oshape[axis] += p.shape()[axis];
  }
  const AxisSplit so = split_axis(oshape, axis);
  std::vector<double> out(shape_numel(oshape));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.shape()[axis];
    const auto pd = p.data();
    for (std::size_t o = 0; o < so.outer; ++o)
      std::copy_n(pd.data() + o * len * so.inner, len * so.inner,
                  out.data() + (o * so.len + offset) * so.inner);
    offset += len;
  }
  Tensor y(oshape, std::move(out));
  bool any = false;
  if (active_tape())
    for (const Tensor& p : parts) any = any || p.requires_grad();
  if (any) {
    record(y, [parts, offsets, y, so, axis] {
      const auto& gy = out_grad(y);
      for (std::size_t n = 0; n < parts.size(); ++n) {
        const Tensor& p = parts[n];
        if (!p.requires_grad()) continue;
        auto& gp = grad_of(p);
        const std::size_t len = p.shape()[axis];
        for (std::size_t o = 0; o < so.outer; ++o)
          k::axpy(1.0, gy.data() + (o * so.len + offsets[n]) * so.inner, gp.data() + o * len * so.inner,
                  len * so.inner);
      }
    });
  }
  return y;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (begin >= end || end > s.len)
    throw DimensionError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " + shape_str(x.shape()));
  const std::size_t len = end - begin;
  Shape oshape = x.shape();
  oshape[axis] = len;
  std::vector<double> out(s.outer * len * s.inner);
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xd.data() + (o * s.len + begin) * s.inner, len * s.inner, out.data() + o * len * s.inner);
  Tensor y(oshape, std::move(out));
  if (tracking({&x})) {
    record(y, [x, y, s, begin, len] {
      const auto& gy = out_grad(y);
      auto& gx = grad_of(x);
      for (std::size_t o = 0; o < s.outer; ++o)
        k::axpy(1.0, gy.data() + o * len * s.inner, gx.data() + (o * s.len + begin) * s.inner, len * s.inner);
    });
  }
  return y;
}

Tensor index_select(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& index) {
  const AxisSplit s = split_axis(x.shape(), axis);
  if (index.empty()) throw DimensionError("index_select with empty index");
  for (std::size_t i : index)
    if (i >= s.len) throw DimensionError("index_select: index " + std::to_string(i) + " out of range");
  Shape oshape = x.shape();
  oshape[axis] = index.size();
  const std::size_t n = index.size();
  std::vector<double> out(s.outer * n * s.inner);
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(xd.data() + (o * s.len + index[r]) * s.inner, s.inner, out.data() + (o * n + r) * s.inner);
  Tensor y(oshape, std::move(out));
  if (tracking({&x})) {
    record(y, [x, y, s, index, n] {
      const auto& gy = out_grad(y);
      auto& gx = grad_of(x);
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t r = 0; r < n; ++r)
          k::axpy(1.0, gy.data() + (o * n + r) * s.inner, gx.data() + (o * s.len + index[r]) * s.inner, s.inner);
    });
  }
  return y;
}

Tensor gather_elements(const Tensor& x, const std::vector<std::size_t>& cols) {
  require_rank(x, 2, "gather_elements");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (cols.size() != m) throw DimensionError("gather_elements: need one column per row");
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (cols[i] >= n) throw DimensionError("gather_elements: column out of range");
    out[i] = x[i * n + cols[i]];
  }
  Tensor y({m}, std::move(out));
  if (tracking({&x})) {
    record(y, [x, y, cols, n] {
      const auto& gy = out_grad(y);
      auto& gx = grad_of(x);
      for (std::size_t i = 0; i < cols.size(); ++i) gx[i * n + cols[i]] += gy[i];
    });
  }
  return y;
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  Tensor y({n, m}, std::move(out));
  if (tracking({&x})) {
    record(y, [x, y, m, n] {
      const auto& gy = out_grad(y);
      auto& gx = grad_of(x);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += gy[j * m + i];
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor y(std::move(shape), x.values());
  if (tracking({&x})) {
    record(y, [x, y] {
      const auto& gy = out_grad(y);
      k::axpy(1.0, gy.data(), grad_of(x).data(), gy.size());
    });
  }
  return y;
}

Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x, 3, "bilinear_resize");
  if (out_h == 0 || out_w == 0) throw DimensionError("bilinear_resize to empty extent");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  std::vector<double> out(out_h * out_w * c);
  const auto xd = x.data();
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const Bilerp& by = ty[oy];
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const Bilerp& bx = tx[ox];
      const double* a = xd.data() + (by.i0 * w + bx.i0) * c;
      const double* b = xd.data() + (by.i0 * w + bx.i1) * c;
      const double* cc = xd.data() + (by.i1 * w + bx.i0) * c;
      const double* d = xd.data() + (by.i1 * w + bx.i1) * c;
      double* o = out.data() + (oy * out_w + ox) * c;
      for (std::size_t ch = 0; ch < c; ++ch) {
        // Difference form keeps constant maps and unit-scale resizes exact.
        const double top = a[ch] + bx.t * (b[ch] - a[ch]);
        const double bot = cc[ch] + bx.t * (d[ch] - cc[ch]);
        o[ch] = top + by.t * (bot - top);
      }
    }
  }
  Tensor y({out_h, out_w, c}, std::move(out));
  check_finite(y, "bilinear_resize");
  if (tracking({&x})) {
    record(y, [x, y, ty, tx, w, c, out_w] {
      const auto& gy = out_grad(y);
      auto& gx = grad_of(x);
      for (std::size_t oy = 0; oy < ty.size(); ++oy) {
        const Bilerp& by = ty[oy];
        for (std::size_t ox = 0; ox < tx.size(); ++ox) {
          const Bilerp& bx = tx[ox];
          const double* g = gy.data() + (oy * out_w + ox) * c;
          const double wa = (1 - by.t) * (1 - bx.t), wb = (1 - by.t) * bx.t;
          const double wc = by.t * (1 - bx.t), wd = by.t * bx.t;
          k::axpy(wa, g, gx.data() + (by.i0 * w + bx.i0) * c, c);
          k::axpy(wb, g, gx.data() + (by.i0 * w + bx.i1) * c, c);
          k::axpy(wc, g, gx.data() + (by.i1 * w + bx.i0) * c, c);
          k::axpy(wd, g, gx.data() + (by.i1 * w + bx.i1) * c, c);
        }
      }
    });
  }
  return y;
}

Tensor nearest_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x, 3, "nearest_resize");
  if (out_h == 0 || out_w == 0) throw DimensionError("nearest_resize to empty extent");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  std::vector<std::size_t> src(out_h * out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const std::size_t sy = std::min(h - 1, oy * h / out_h);
    for (std::size_t ox = 0; ox < out_w; ++ox) src[oy * out_w + ox] = sy * w + std::min(w - 1, ox * w / out_w);
  }
  std::vector<double> out(out_h * out_w * c);
  const auto xd = x.data();
  for (std::size_t p = 0; p < src.size(); ++p) std::copy_n(xd.data() + src[p] * c, c, out.data() + p * c);
  Tensor y({out_h, out_w, c}, std::move(out));
  if (tracking({&x})) {
    record(y, [x, y, src, c] {
      const auto& gy = out_grad(y);
      auto& gx = grad_of(x);
      for (std::size_t p = 0; p < src.size(); ++p) k::axpy(1.0, gy.data() + p * c, gx.data() + src[p] * c, c);
    });
  }
  return y;
}

Tensor im2col3x3(const Tensor& x) {
  require_rank(x, 3, "im2col3x3");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const std::size_t cols = 9 * c;
  std::vector<double> out(h * w * cols, 0.0);
  const auto xd = x.data();
  for (std::size_t yy = 0; yy < h; ++yy)
    for (std::size_t xx = 0; xx < w; ++xx)
      for (std::size_t ky = 0; ky < 3; ++ky) {
        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(yy + ky) - 1;
        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
          if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
          std::copy_n(xd.data() + (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c, c,
                      out.data() + (yy * w + xx) * cols + (ky * 3 + kx) * c);
        }
      }
  Tensor y({h * w, cols}, std::move(out));
  if (tracking({&x})) {
    record(y, [x, y, h, w, c, cols] {
      const auto& gy = out_grad(y);
      auto& gx = grad_of(x);
      for (std::size_t yy = 0; yy < h; ++yy)
        for (std::size_t xx = 0; xx < w; ++xx)
          for (std::size_t ky = 0; ky < 3; ++ky) {
            const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(yy + ky) - 1;
            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + kx) - 1;
              if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
              k::axpy(1.0, gy.data() + (yy * w + xx) * cols + (ky * 3 + kx) * c,
                      gx.data() + (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c, c);
            }
          }
    });
  }
  return y;
}

Tensor l2_normalize_rows(const Tensor& x, double min_norm) {
  if (x.rank() == 0) throw DimensionError("l2_normalize_rows on scalar");
  const std::size_t c = x.shape().back(), rows = x.size() / c;
  std::vector<double> out(x.size()), norms(rows);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double n = std::sqrt(k::dot(xd.data() + r * c, xd.data() + r * c, c));
    if (!(n >= min_norm)) throw DegenerateVectorError("row " + std::to_string(r) + " has norm below threshold");
    norms[r] = n;
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = xd[r * c + j] / n;
  }
  Tensor y(x.shape(), std::move(out));
  check_finite(y, "l2_normalize_rows");
  if (tracking({&x})) {
    record(y, [x, y, norms = std::move(norms), rows, c] {
      const auto& gy = out_grad(y);
      auto& gx = grad_of(x);
      const auto yd = y.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double d = k::dot(yd.data() + r * c, gy.data() + r * c, c);
        for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += (gy[r * c + j] - yd[r * c + j] * d) / norms[r];
      }
    });
  }
  return y;
}

Tensor multi_head_attention(const Tensor& q, const Tensor& kt, const Tensor& v, std::size_t heads,
                            const AttentionBias& bias) {
  require_rank(q, 2, "multi_head_attention");
  require_rank(kt, 2, "multi_head_attention");
  require_same_shape(kt, v, "multi_head_attention");
  const std::size_t lq = q.dim(0), lk = kt.dim(0), c = q.dim(1);
  if (kt.dim(1) != c) throw DimensionError("multi_head_attention: channel mismatch");
  if (heads == 0 || c % heads != 0) throw DimensionError("multi_head_attention: channels not divisible by heads");
  if (bias && bias->size() != heads * lq * lk) throw DimensionError("multi_head_attention: bias size");
  const std::size_t d = c / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));

  auto pack = [](const Tensor& t, std::size_t rows, std::size_t cols, std::size_t h, std::size_t d) {
    std::vector<double> out(rows * d);
    const auto td = t.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(td.data() + r * cols + h * d, d, out.data() + r * d);
    return out;
  };

  std::vector<double> probs(heads * lq * lk);
  std::vector<double> out(lq * c);
  std::vector<double> oh(lq * d);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = pack(q, lq, c, h, d);
    const auto kh = pack(kt, lk, c, h, d);
    const auto vh = pack(v, lk, c, h, d);
    double* p = probs.data() + h * lq * lk;
    k::gemm_nt(lq, lk, d, qh.data(), kh.data(), p);
    for (std::size_t i = 0; i < lq; ++i) {
      double* row = p + i * lk;
      const double* brow = bias ? bias->data() + (h * lq + i) * lk : nullptr;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < lk; ++j) {
        row[j] = row[j] * inv + (brow ? brow[j] : 0.0);
        mx = std::max(mx, row[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < lk; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      for (std::size_t j = 0; j < lk; ++j) row[j] /= z;
    }
    k::gemm_nn(lq, d, lk, p, vh.data(), oh.data());
    for (std::size_t r = 0; r < lq; ++r) std::copy_n(oh.data() + r * d, d, out.data() + r * c + h * d);
  }
  Tensor y({lq, c}, std::move(out));
  check_finite(y, "multi_head_attention");
  if (tracking({&q, &kt, &v})) {
    record(y, [q, kt, v, y, probs = std::move(probs), heads, lq, lk, c, d, inv, pack] {
      const auto& gy = out_grad(y);
      std::vector<double> dO(lq * d), dP(lq * lk), tmp_q(lq * d), tmp_k(lk * d), tmp_v(lk * d);
      for (std::size_t h = 0; h < heads; ++h) {
        const double* p = probs.data() + h * lq * lk;
        for (std::size_t r = 0; r < lq; ++r) std::copy_n(gy.data() + r * c + h * d, d, dO.data() + r * d);
        const auto vh = pack(v, lk, c, h, d);
        if (v.requires_grad()) {
          k::gemm_tn(lk, d, lq, p, dO.data(), tmp_v.data());
          auto& gv = grad_of(v);
          for (std::size_t r = 0; r < lk; ++r) k::axpy(1.0, tmp_v.data() + r * d, gv.data() + r * c + h * d, d);
        }
        if (!q.requires_grad() && !kt.requires_grad()) continue;
        k::gemm_nt(lq, lk, d, dO.data(), vh.data(), dP.data());
        for (std::size_t i = 0; i < lq; ++i) {
          double* row = dP.data() + i * lk;
          const double* prow = p + i * lk;
          const double dd = k::dot(row, prow, lk);
          for (std::size_t j = 0; j < lk; ++j) row[j] = prow[j] * (row[j] - dd) * inv;
        }
        if (q.requires_grad()) {
          const auto kh = pack(kt, lk, c, h, d);
          k::gemm_nn(lq, d, lk, dP.data(), kh.data(), tmp_q.data());
          auto& gq = grad_of(q);
          for (std::size_t r = 0; r < lq; ++r) k::axpy(1.0, tmp_q.data() + r * d, gq.data() + r * c + h * d, d);
        }
        if (kt.requires_grad()) {
          const auto qh = pack(q, lq, c, h, d);
          k::gemm_tn(lk, d, lq, dP.data(), qh.data(), tmp_k.data());
          auto& gk = grad_of(kt);
          for (std::size_t r = 0; r < lk; ++r) k::axpy(1.0, tmp_k.data() + r * d, gk.data() + r * c + h * d, d);
        }
      }
    });
  }
  return y;
}

double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw DimensionError("cosine_similarity: length mismatch");
  const double nu = std::sqrt(k::dot(u.data(), u.data(), u.size()));
  const double nv = std::sqrt(k::dot(v.data(), v.data(), v.size()));
  if (nu < 1e-12 || nv < 1e-12) throw DegenerateVectorError("cosine_similarity of a near-zero vector");
  return std::clamp(k::dot(u.data(), v.data(), u.size()) / (nu * nv), -1.0, 1.0);
}

}  // namespace ovseg::ops
