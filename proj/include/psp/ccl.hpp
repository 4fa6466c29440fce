#pragma once

#include <string>
#include <utility>
#include <vector>

#include "psp/ppa.hpp"
#include "psp/rng.hpp"
#include "psp/tensor.hpp"

namespace psp {

// Coarse-to-fine contrastive loss: per-level projection into the contrastive
// space and NT-Xent between the joint- and motion-modality embeddings.

struct ProjectionParams {
    Tensor w1, b1;  // [C,C] / [C]
    Tensor w2, b2;  // [C,C'] / [C']
};

struct ProjectorSet {
    ProjectionParams body, part, joint;

    std::vector<std::pair<std::string, Tensor>> named_parameters(const std::string& prefix) const;
};

struct ContrastConfig {
    double tau = 0.07;
    bool body_level = true;
    bool part_level = true;
    bool joint_level = true;

    void validate() const;
    bool any_enabled() const { return body_level || part_level || joint_level; }
};

ProjectorSet init_projectors(int64_t channels, int64_t contrast_dim, RngState& rng);

// Global average pool over time and nodes, then linear -> leaky ReLU -> linear.
Tensor project(const Tensor& poly_feat, const ProjectionParams& params,
               double leaky_slope = 0.01);

// NT-Xent over 2M rows where row i and row i+M are the positive pair. The
// denominator runs over every k != i, positives included; cosine similarity
// at temperature tau. Rows must have nonzero norm.
Tensor ntxent(const Tensor& u, double tau);

struct CclResult {
    Tensor total;              // scalar
    Tensor body, part, joint;  // per-level losses; undefined when disabled
};

// Sum of the enabled per-level NT-Xent losses between the two modalities.
CclResult ccl_total(const LevelFeatures& feats_joint_modality,
                    const LevelFeatures& feats_motion_modality, const ProjectorSet& projectors,
                    const ContrastConfig& config);

struct RecognitionParams {
    Tensor w_joint, b_joint;   // [C,classes] / [classes]
    Tensor w_motion, b_motion;

    std::vector<std::pair<std::string, Tensor>> named_parameters(const std::string& prefix) const;
};

RecognitionParams init_recognition(int64_t channels, int64_t classes, RngState& rng);

struct RecognitionOutput {
    Tensor probs;  // [M, classes]
    Tensor loss;   // scalar cross entropy
};

// Average-pool both modality features, apply the per-modality FC, sum the
// logits, softmax + cross entropy against the one-hot labels.
RecognitionOutput recognition_head(const Tensor& f_joint, const Tensor& f_motion,
                                   const RecognitionParams& params, const Tensor& y);

// L = L_con + L_reg; an undefined term contributes zero.
Tensor total_loss(const Tensor& l_con, const Tensor& l_reg);

}  // namespace psp
