#pragma once

#include <string>
#include <utility>
#include <vector>

#include "psp/rng.hpp"
#include "psp/tensor.hpp"

namespace psp {

// Spatial-attention + temporal-convolution feature encoder. Turns coordinate
// batches [M, 3, T, N] into feature maps [M, C, T, N].
struct EncoderConfig {
    int64_t in_channels = 3;
    int64_t hidden_channels = 16;  // C
    int64_t blocks = 2;            // L
    int64_t heads = 2;
    int64_t temporal_kernel = 3;   // odd
    int64_t n_nodes = 25;          // N, fixes the node identity embedding
    double dropout_rate = 0.0;

    void validate() const;
};

struct EncoderBlockParams {
    Tensor wq, bq, wk, bk, wv, bv;  // [C,C] / [C]
    Tensor conv_w, conv_b;          // [C,k] / [C]
    Tensor bn_gamma, bn_beta;       // [C]
    BatchNormState bn_state;
};

struct EncoderParams {
    EncoderConfig config;
    Tensor embed_w, embed_b;  // [3,C] / [C]
    Tensor node_embed;        // [N,C], learned per-node identity
    std::vector<EncoderBlockParams> blocks;

    std::vector<std::pair<std::string, Tensor>> named_parameters(const std::string& prefix) const;
    std::vector<std::pair<std::string, Tensor>> named_buffers(const std::string& prefix) const;
};

// Fan-in-scaled uniform init, deterministic per seed.
EncoderParams init_encoder(const EncoderConfig& config, RngState& rng);

// Each block: per-frame multi-head tanh self-attention over nodes + residual,
// then depthwise temporal conv + batch norm + leaky ReLU + residual.
// rng is only consumed when training with dropout_rate > 0.
Tensor encode(const Tensor& x, EncoderParams& params, bool train, RngState* rng = nullptr);

}  // namespace psp
