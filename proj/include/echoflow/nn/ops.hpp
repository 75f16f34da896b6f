#pragma once

#include <vector>

#include "echoflow/nn/tensor.hpp"

// Differentiable operations. Layout is NCHW for maps and [N, T, D] for
// token sequences.
namespace echoflow::nn {

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int pad);
// y = x W^T + b over the last dimension; weight is [out, in].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
// x: [N, ...], p: [...] broadcast over the leading dimension.
Tensor add_broadcast(const Tensor& x, const Tensor& p);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Scalar eps = 1e-5);

// qkv: [N, T, 3D] packed as (q | k | v); returns [N, T, D].
Tensor multi_head_attention(const Tensor& qkv, int heads);

Tensor map_to_tokens(const Tensor& x);                          // [N,C,H,W] -> [N,HW,C]
Tensor tokens_to_map(const Tensor& t, int height, int width);  // [N,HW,C] -> [N,C,H,W]

// Bilinear x2 upsampling, half-pixel centers with edge clamping.
Tensor upsample2x(const Tensor& x);
Tensor concat_channels(const std::vector<Tensor>& parts);
Tensor global_avg_pool(const Tensor& x);  // [N,C,H,W] -> [N,C]
// (x - shift) * scale per column: [N,C], [C], [C] -> [N,C].
Tensor scale_shift(const Tensor& x, const Tensor& scale, const Tensor& shift);
// Softmax(logits) over positions, then weighted sum of x: [N,C,H,W], [N,1,H,W] -> [N,C].
Tensor attention_pool(const Tensor& x, const Tensor& logits);

// Constant [N, 2, H, W] map of normalized (x, y) pixel-center coordinates.
Tensor coord_channels(int n, int height, int width);

}  // namespace echoflow::nn
