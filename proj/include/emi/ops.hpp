#pragma once

#include <vector>

#include "emi/tensor.hpp"

// Differentiable primitives. Every function records a backward rule on the
// active GradTape when at least one input requires grad.
//
// Elementwise binaries accept equal shapes, or a rank<=2 operand broadcast
// along rows (1xn), columns (mx1), or as a single element.

namespace emi {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor pow(const Tensor& a, double exponent);

Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Concatenates rank-2 tensors along axis 0 (rows) or 1 (columns).
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
/// Half-open range [begin, end) of a rank-2 tensor along axis.
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Reduction over one axis of a rank-2 tensor; the reduced axis is kept with size 1.
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);

/// Softmax over the trailing axis, max-subtracted.
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

/// Causal dilated convolution. x is [T x C_in], kernel is [k x C_in x C_out];
/// output row t sums kernel tap j applied to input row t - j*dilation, with
/// rows before 0 treated as zeros.
Tensor dilated_conv1d(const Tensor& x, const Tensor& kernel, std::size_t dilation);

/// LSTM recurrence over precomputed input terms. x_terms is [T x 4H] holding
/// x_t W_x + b with gate blocks input, forget, cell, output; w_h is [H x 4H].
/// Zero initial state; with reverse set the sequence is consumed from the end.
/// Returns the hidden states [T x H] in original time order.
Tensor lstm_recurrence(const Tensor& x_terms, const Tensor& w_h, bool reverse);

// Composites built from the primitives above.

Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-24);
Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor mse(const Tensor& pred, const Tensor& target);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

} // namespace emi
