#pragma once

// Differentiable tensor operations.
//
// Every op checks its output for NaN/Inf (NonFiniteError) and, when a tape is
// active and any operand requires grad, records its gradient rule. Spatial
// maps are [h x w x c]; token sequences and embedding sets are [rows x cols].

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "ovseg/numerics/tensor.hpp"

namespace ovseg::ops {

Tensor matmul(const Tensor& a, const Tensor& b);
/// a * b^T for a [m x k], b [n x k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);
/// x [.. x in] * weight[out x in]^T + bias[out]. Leading axes are flattened.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias = nullptr);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
/// Adds a length-n vector to every trailing row of x (x.shape().back() == n).
Tensor add_row(const Tensor& x, const Tensor& row);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Reduces one axis away.
Tensor sum_axis(const Tensor& x, std::size_t axis);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
/// log(1 + exp(x)), stable for large |x|.
Tensor softplus(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

/// Normalizes over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor index_select(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& index);
/// out[i] = x[i, cols[i]] for x [m x n].
Tensor gather_elements(const Tensor& x, const std::vector<std::size_t>& cols);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

/// Bilinear sampling of an [h x w x c] map, half-pixel centers (align_corners=false).
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);
Tensor nearest_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);
/// [h x w x c] -> [(h*w) x 9c] zero-padded 3x3 neighbourhoods, (ky, kx, c) order.
Tensor im2col3x3(const Tensor& x);

/// Rows scaled to unit L2 norm. Throws DegenerateVectorError below min_norm.
Tensor l2_normalize_rows(const Tensor& x, double min_norm = 1e-12);

/// Additive attention bias, laid out [heads x q_len x k_len].
using AttentionBias = std::shared_ptr<const std::vector<double>>;

/// Scaled dot-product attention over column-chunked heads.
/// q [Lq x C], k/v [Lk x C]; head h uses columns [h*C/heads, (h+1)*C/heads).
/// The bias is a constant (no gradient).
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            const AttentionBias& bias = nullptr);

/// Plain cosine of two vectors; throws DegenerateVectorError if either norm < 1e-12.
double cosine_similarity(std::span<const double> u, std::span<const double> v);

/// Throws NonFiniteError naming `where` if any value is NaN or Inf.
void check_finite(const Tensor& t, const char* where);

}  // namespace ovseg::ops
