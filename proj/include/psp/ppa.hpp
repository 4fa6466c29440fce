#pragma once

#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "psp/rng.hpp"
#include "psp/skeleton.hpp"
#include "psp/tensor.hpp"

namespace psp {

// Pyramid Polymerizing Attention: per-level tanh node attention over the
// skeleton hierarchy, with coarse maps lifted onto finer levels through the
// affiliation maps and added with weights lambda (body->part) and alpha/beta
// (part->joint, body->joint).

struct LevelFeatures {
    Tensor body;   // [M,C,T,B]
    Tensor part;   // [M,C,T,P]
    Tensor joint;  // [M,C,T,N]
};

struct AttentionMaps {
    Tensor body;                    // [M,S,B,B]
    Tensor part;                    // [M,S,P,P]
    Tensor joint;                   // [M,S,N,N]
    Tensor lifted_part;             // body lifted to part grid, [M,S,P,P]
    Tensor lifted_joint_from_part;  // part lifted to joint grid, [M,S,N,N]
    Tensor lifted_joint_from_body;  // body lifted to joint grid, [M,S,N,N]
};

struct PpaConfig {
    int64_t channels = 16;  // C
    int64_t frames = 50;    // T
    int64_t heads = 4;      // S; C_e = C/S
    double lambda = 0.2;
    double alpha = 0.12;
    double beta = 0.24;
    double leaky_slope = 0.01;

    void validate() const;
    int64_t head_channels() const { return channels / heads; }
};

struct PpaLevelParams {
    Tensor wq, wk, wv;      // [T*C, S*T*Ce] = [T*C, T*C]
    Tensor ffn_w, ffn_b;    // [T*C, T*C] / [T*C]
    Tensor bn_gamma, bn_beta;  // [T*C]
    BatchNormState bn_state;
};

struct PpaParams {
    PpaConfig config;
    PpaLevelParams body, part, joint;

    std::vector<std::pair<std::string, Tensor>> named_parameters(const std::string& prefix) const;
    std::vector<std::pair<std::string, Tensor>> named_buffers(const std::string& prefix) const;
};

PpaParams init_ppa(const PpaConfig& config, RngState& rng);

// Lambda(f): joint level passes through; part and body levels average their
// member nodes.
LevelFeatures pyramid_transform(const Tensor& f, const PyramidSpec& spec);

// Rearranges [M,C,T,n] to node-major [M,n,T*C], projects with the level's
// weights, and splits heads: each of Q,K,V is [M,S,n,T*Ce].
std::tuple<Tensor, Tensor, Tensor> qkv_project(const Tensor& level_feat,
                                               const PpaLevelParams& params, int64_t heads);

// tanh(Q K^T / sqrt(T*Ce)), rows deliberately unnormalized.
Tensor attention_map(const Tensor& q, const Tensor& k);

// Index expansion out[...,i,j] = src[...,phi(i),phi(j)].
Tensor lift_attention(const Tensor& src, const std::vector<int64_t>& phi);

// part map + lambda * (body map lifted through part_to_body)
Tensor polymerize_part(const Tensor& a_body, const Tensor& a_part, double lambda,
                       const PyramidSpec& spec);

// joint map + alpha * lifted part map + beta * lifted body map
Tensor polymerize_joint(const Tensor& a_body, const Tensor& a_part, const Tensor& a_joint,
                        double alpha, double beta, const PyramidSpec& spec);

// attention x V, heads concatenated, FFN (linear + batch norm), residual to
// the level features, leaky ReLU. V must come from the same level.
Tensor ppa_block(const Tensor& level_feat, const Tensor& poly_attn, const Tensor& v,
                 PpaLevelParams& params, const PpaConfig& config, bool train);

struct PpaOutput {
    LevelFeatures features;  // polymerizing features per level
    AttentionMaps maps;
};

PpaOutput ppa_forward(const Tensor& f, const PyramidSpec& spec, PpaParams& params, bool train);

}  // namespace psp
