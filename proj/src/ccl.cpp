#include "psp/ccl.hpp"

#include <cmath>
#include <stdexcept>

namespace psp {

void ContrastConfig::validate() const {
    if (!(tau > 0.0)) throw std::invalid_argument("ContrastConfig: tau must be > 0");
}

namespace {

Tensor uniform_fan_in(Shape shape, int64_t fan_in, RngState& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    return Tensor::rand_uniform(std::move(shape), rng, -bound, bound, true);
}

ProjectionParams init_projection(int64_t c, int64_t cp, RngState& rng) {
    ProjectionParams p;
    p.w1 = uniform_fan_in({c, c}, c, rng);
    p.b1 = Tensor::zeros({c}, true);
    p.w2 = uniform_fan_in({c, cp}, c, rng);
    p.b2 = Tensor::zeros({cp}, true);
    return p;
}

}  // namespace

ProjectorSet init_projectors(int64_t channels, int64_t contrast_dim, RngState& rng) {
    if (channels < 1 || contrast_dim < 1) {
        throw std::invalid_argument("init_projectors: channels and contrast_dim must be >= 1");
    }
    ProjectorSet set;
    set.body = init_projection(channels, contrast_dim, rng);
    set.part = init_projection(channels, contrast_dim, rng);
    set.joint = init_projection(channels, contrast_dim, rng);
    return set;
}

std::vector<std::pair<std::string, Tensor>> ProjectorSet::named_parameters(
    const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto collect = [&](const std::string& level, const ProjectionParams& p) {
        out.emplace_back(prefix + "." + level + ".w1", p.w1);
        out.emplace_back(prefix + "." + level + ".b1", p.b1);
        out.emplace_back(prefix + "." + level + ".w2", p.w2);
        out.emplace_back(prefix + "." + level + ".b2", p.b2);
    };
    collect("body", body);
    collect("part", part);
    collect("joint", joint);
    return out;
}

Tensor project(const Tensor& poly_feat, const ProjectionParams& params, double leaky_slope) {
    const Shape& s = poly_feat.shape();
    if (s.size() != 4) {
        throw std::invalid_argument("project: expected [M,C,T,n], got " + shape_str(s));
    }
    if (s[1] != params.w1.shape()[0]) {
        throw std::invalid_argument("project: feature channels " + std::to_string(s[1]) +
                                    " do not match projector " + shape_str(params.w1.shape()));
    }
    Tensor pooled = reduce_mean(poly_feat, {2, 3});  // [M,C]
    Tensor hidden = leaky_relu(linear(pooled, params.w1, params.b1), leaky_slope);
    return linear(hidden, params.w2, params.b2);  // [M,C']
}

Tensor ntxent(const Tensor& u, double tau) {
    const Shape& s = u.shape();
    if (s.size() != 2 || s[0] < 2 || s[0] % 2 != 0) {
        throw std::invalid_argument("ntxent: expected [2M,C'] with M >= 1, got " + shape_str(s));
    }
    if (!(tau > 0.0)) throw std::invalid_argument("ntxent: tau must be > 0");
    const int64_t rows = s[0];
    const int64_t m = rows / 2;

    Tensor sq_norms = reduce_sum(mul(u, u), {1});  // [2M]
    for (int64_t i = 0; i < rows; ++i) {
        if (sq_norms.data()[i] == 0.0) {
            throw std::invalid_argument("ntxent: embedding row " + std::to_string(i) +
                                        " has zero norm, cosine undefined");
        }
    }
    Tensor normed = div(u, reshape(sqrt(sq_norms), {rows, 1}));
    Tensor sims = matmul(normed, permute(normed, {1, 0}));  // [2M,2M] cosine similarities
    Tensor e = exp(scale(sims, 1.0 / tau));

    std::vector<double> pos_mask(rows * rows, 0.0), offdiag(rows * rows, 1.0);
    for (int64_t i = 0; i < rows; ++i) {
        pos_mask[i * rows + (i + m) % rows] = 1.0;
        offdiag[i * rows + i] = 0.0;
    }
    Tensor numer = reduce_sum(mul(e, Tensor::from_data({rows, rows}, std::move(pos_mask))), {1});
    Tensor denom = reduce_sum(mul(e, Tensor::from_data({rows, rows}, std::move(offdiag))), {1});
    return reduce_mean(sub(log(denom), log(numer)), {0});
}

CclResult ccl_total(const LevelFeatures& feats_joint_modality,
                    const LevelFeatures& feats_motion_modality, const ProjectorSet& projectors,
                    const ContrastConfig& config) {
    config.validate();
    if (!config.any_enabled()) {
        throw std::invalid_argument("ccl_total: no contrast level enabled");
    }
    CclResult out;
    auto level_loss = [&](const Tensor& fj, const Tensor& fm, const ProjectionParams& proj) {
        Tensor embeddings = concat0(project(fj, proj), project(fm, proj));
        return ntxent(embeddings, config.tau);
    };
    if (config.body_level) {
        out.body = level_loss(feats_joint_modality.body, feats_motion_modality.body,
                              projectors.body);
        out.total = out.body;
    }
    if (config.part_level) {
        out.part = level_loss(feats_joint_modality.part, feats_motion_modality.part,
                              projectors.part);
        out.total = out.total.defined() ? add(out.total, out.part) : out.part;
    }
    if (config.joint_level) {
        out.joint = level_loss(feats_joint_modality.joint, feats_motion_modality.joint,
                               projectors.joint);
        out.total = out.total.defined() ? add(out.total, out.joint) : out.joint;
    }
    return out;
}

RecognitionParams init_recognition(int64_t channels, int64_t classes, RngState& rng) {
    if (classes < 2) throw std::invalid_argument("init_recognition: need >= 2 classes");
    RecognitionParams p;
    p.w_joint = uniform_fan_in({channels, classes}, channels, rng);
    p.b_joint = Tensor::zeros({classes}, true);
    p.w_motion = uniform_fan_in({channels, classes}, channels, rng);
    p.b_motion = Tensor::zeros({classes}, true);
    return p;
}

std::vector<std::pair<std::string, Tensor>> RecognitionParams::named_parameters(
    const std::string& prefix) const {
    return {{prefix + ".w_joint", w_joint},
            {prefix + ".b_joint", b_joint},
            {prefix + ".w_motion", w_motion},
            {prefix + ".b_motion", b_motion}};
}

RecognitionOutput recognition_head(const Tensor& f_joint, const Tensor& f_motion,
                                   const RecognitionParams& params, const Tensor& y) {
    if (f_joint.dim() != 4 || f_motion.dim() != 4) {
        throw std::invalid_argument("recognition_head: features must be [M,C,T,N]");
    }
    Tensor pooled_j = reduce_mean(f_joint, {2, 3});
    Tensor pooled_m = reduce_mean(f_motion, {2, 3});
    Tensor logits = add(linear(pooled_j, params.w_joint, params.b_joint),
                        linear(pooled_m, params.w_motion, params.b_motion));
    RecognitionOutput out;
    out.probs = softmax_rows(logits);
    out.loss = softmax_cross_entropy(logits, y);
    return out;
}

Tensor total_loss(const Tensor& l_con, const Tensor& l_reg) {
    if (!l_con.defined() && !l_reg.defined()) {
        throw std::invalid_argument("total_loss: both terms absent");
    }
    if (!l_con.defined()) return l_reg;
    if (!l_reg.defined()) return l_con;
    return add(l_con, l_reg);
}

}  // namespace psp
