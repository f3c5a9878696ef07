#pragma once

#include "nsi/tensor.hpp"

namespace nsi {

enum class Mode { train, eval };

// Valid (no-padding) cross-correlation.
// input [B,C,H,W], kernel [O,C,kh,kw] -> [B,O,H-kh+1,W-kw+1]
Tensor conv2d(Graph& g, const Tensor& input, const Tensor& kernel);

// Per-channel batch normalization state. gamma/beta are learnable; running
// stats are updated by EMA in train mode and consumed in eval mode.
struct BatchNorm {
    Tensor gamma, beta;
    Tensor running_mean, running_var;
    bool initialized = false;
    double eps = 1e-5;
    double momentum = 0.1;

    BatchNorm() = default;
    explicit BatchNorm(std::int64_t channels);
};

Tensor batchnorm(Graph& g, const Tensor& x, BatchNorm& bn, Mode mode);

// out[b,n] = sum_{i,j,k} c[b,k,i,j] * masks[n,i,j] * weights[n,k]
// c [B,K,Ho,Wo], masks [N,Ho,Wo], weights [N,K] -> [B,N]
Tensor readout_factorized(Graph& g, const Tensor& c, const Tensor& masks,
                          const Tensor& weights);

// lambda * sum of squared entries of each spatial kernel slice convolved
// (SAME, zero padding) with the discrete Laplacian stencil.
Tensor laplace_penalty(Graph& g, const Tensor& kernel, double lambda);

enum class GroupAxes { spatial, channel };

// Group-sparsity penalty on a [O,C,kh,kw] kernel stack. `spatial` groups one
// norm per spatial position (i,j) over all channel pairs; `channel` groups
// one norm per channel pair over all spatial positions. Subgradient is zero
// on zero-norm groups.
Tensor group_sparsity(Graph& g, const Tensor& kernel, double lambda,
                      GroupAxes axes = GroupAxes::spatial);

}  // namespace nsi
