#include "psp/ppa.hpp"

#include <cmath>
#include <stdexcept>

namespace psp {

void PpaConfig::validate() const {
    if (channels < 1 || heads < 1 || channels % heads != 0) {
        throw std::invalid_argument("PpaConfig: channels must be divisible by heads");
    }
    if (frames < 1) throw std::invalid_argument("PpaConfig: frames must be >= 1");
    if (lambda < 0.0 || alpha < 0.0 || beta < 0.0) {
        throw std::invalid_argument("PpaConfig: polymerization coefficients must be >= 0");
    }
}

namespace {

PpaLevelParams init_level(int64_t tc, RngState& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(tc));
    PpaLevelParams p;
    p.wq = Tensor::rand_uniform({tc, tc}, rng, -bound, bound, true);
    p.wk = Tensor::rand_uniform({tc, tc}, rng, -bound, bound, true);
    p.wv = Tensor::rand_uniform({tc, tc}, rng, -bound, bound, true);
    p.ffn_w = Tensor::rand_uniform({tc, tc}, rng, -bound, bound, true);
    p.ffn_b = Tensor::zeros({tc}, true);
    p.bn_gamma = Tensor::full({tc}, 1.0, true);
    p.bn_beta = Tensor::zeros({tc}, true);
    p.bn_state = BatchNormState::init({tc});
    return p;
}

void collect_level(const std::string& prefix, const PpaLevelParams& p,
                   std::vector<std::pair<std::string, Tensor>>& out) {
    out.emplace_back(prefix + ".wq", p.wq);
    out.emplace_back(prefix + ".wk", p.wk);
    out.emplace_back(prefix + ".wv", p.wv);
    out.emplace_back(prefix + ".ffn_w", p.ffn_w);
    out.emplace_back(prefix + ".ffn_b", p.ffn_b);
    out.emplace_back(prefix + ".bn_gamma", p.bn_gamma);
    out.emplace_back(prefix + ".bn_beta", p.bn_beta);
}

}  // namespace

PpaParams init_ppa(const PpaConfig& config, RngState& rng) {
    config.validate();
    const int64_t tc = config.frames * config.channels;
    PpaParams p;
    p.config = config;
    p.body = init_level(tc, rng);
    p.part = init_level(tc, rng);
    p.joint = init_level(tc, rng);
    return p;
}

std::vector<std::pair<std::string, Tensor>> PpaParams::named_parameters(
    const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    collect_level(prefix + ".body", body, out);
    collect_level(prefix + ".part", part, out);
    collect_level(prefix + ".joint", joint, out);
    return out;
}

std::vector<std::pair<std::string, Tensor>> PpaParams::named_buffers(
    const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back(prefix + ".body.bn_mean", body.bn_state.running_mean);
    out.emplace_back(prefix + ".body.bn_var", body.bn_state.running_var);
    out.emplace_back(prefix + ".part.bn_mean", part.bn_state.running_mean);
    out.emplace_back(prefix + ".part.bn_var", part.bn_state.running_var);
    out.emplace_back(prefix + ".joint.bn_mean", joint.bn_state.running_mean);
    out.emplace_back(prefix + ".joint.bn_var", joint.bn_state.running_var);
    return out;
}

LevelFeatures pyramid_transform(const Tensor& f, const PyramidSpec& spec) {
    const Shape& s = f.shape();
    if (s.size() != 4) {
        throw std::invalid_argument("pyramid_transform: expected [M,C,T,N], got " + shape_str(s));
    }
    if (s[3] != spec.n_joints()) {
        throw std::invalid_argument("pyramid_transform: feature has " + std::to_string(s[3]) +
                                    " nodes but the spec maps " +
                                    std::to_string(spec.n_joints()) + " joints");
    }
    LevelFeatures out;
    out.joint = f;  // joint level passes through untouched
    out.part = segment_mean(f, spec.joint_to_part, spec.n_parts());
    out.body = segment_mean(out.part, spec.part_to_body, spec.n_bodies());
    return out;
}

std::tuple<Tensor, Tensor, Tensor> qkv_project(const Tensor& level_feat,
                                               const PpaLevelParams& params, int64_t heads) {
    const Shape& s = level_feat.shape();
    if (s.size() != 4) {
        throw std::invalid_argument("qkv_project: expected [M,C,T,n], got " + shape_str(s));
    }
    const int64_t m = s[0], c = s[1], t = s[2], n = s[3];
    if (c % heads != 0) {
        throw std::invalid_argument("qkv_project: channels " + std::to_string(c) +
                                    " not divisible by " + std::to_string(heads) + " heads");
    }
    const int64_t tc = t * c;
    if (params.wq.shape() != Shape{tc, tc}) {
        throw std::invalid_argument("qkv_project: weights " + shape_str(params.wq.shape()) +
                                    " do not match features " + shape_str(s));
    }
    const int64_t tce = tc / heads;

    // [M,C,T,n] -> [M,n,T,C] -> [M,n,T*C]
    Tensor flat = reshape(permute(level_feat, {0, 3, 2, 1}), {m, n, tc});
    auto project = [&](const Tensor& w) {
        // [M,n,S*T*Ce] -> [M,n,S,T*Ce] -> [M,S,n,T*Ce]
        return permute(reshape(matmul(flat, w), {m, n, heads, tce}), {0, 2, 1, 3});
    };
    return {project(params.wq), project(params.wk), project(params.wv)};
}

Tensor attention_map(const Tensor& q, const Tensor& k) {
    if (q.shape() != k.shape()) {
        throw std::invalid_argument("attention_map: Q " + shape_str(q.shape()) + " and K " +
                                    shape_str(k.shape()) + " must match");
    }
    const Shape& s = q.shape();
    if (s.size() != 4) {
        throw std::invalid_argument("attention_map: expected [M,S,n,d], got " + shape_str(s));
    }
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(s[3]));
    return tanh(scale(matmul(q, permute(k, {0, 1, 3, 2})), inv_scale));
}

Tensor lift_attention(const Tensor& src, const std::vector<int64_t>& phi) {
    const Shape& s = src.shape();
    if (s.size() < 2 || s[s.size() - 1] != s[s.size() - 2]) {
        throw std::invalid_argument("lift_attention: source must be [..., m, m], got " +
                                    shape_str(s));
    }
    return gather_grid(src, phi, phi);
}

Tensor polymerize_part(const Tensor& a_body, const Tensor& a_part, double lambda,
                       const PyramidSpec& spec) {
    if (lambda == 0.0) return a_part;
    return add(a_part, scale(lift_attention(a_body, spec.part_to_body), lambda));
}

Tensor polymerize_joint(const Tensor& a_body, const Tensor& a_part, const Tensor& a_joint,
                        double alpha, double beta, const PyramidSpec& spec) {
    Tensor out = a_joint;
    if (alpha != 0.0) {
        out = add(out, scale(lift_attention(a_part, spec.joint_to_part), alpha));
    }
    if (beta != 0.0) {
        out = add(out, scale(lift_attention(a_body, spec.joint_to_body()), beta));
    }
    return out;
}

Tensor ppa_block(const Tensor& level_feat, const Tensor& poly_attn, const Tensor& v,
                 PpaLevelParams& params, const PpaConfig& config, bool train) {
    const Shape& fs = level_feat.shape();
    const Shape& as = poly_attn.shape();
    const Shape& vs = v.shape();
    if (fs.size() != 4 || as.size() != 4 || vs.size() != 4) {
        throw std::invalid_argument("ppa_block: rank-4 inputs required");
    }
    const int64_t m = fs[0], c = fs[1], t = fs[2], n = fs[3];
    if (as[2] != n || as[3] != n || vs[2] != n) {
        throw std::invalid_argument("ppa_block: attention " + shape_str(as) + " / V " +
                                    shape_str(vs) + " node counts do not match features " +
                                    shape_str(fs));
    }
    const int64_t tc = t * c;

    // heads applied to V, concatenated back to [M,n,T*C]
    Tensor mixed = matmul(poly_attn, v);                              // [M,S,n,T*Ce]
    Tensor concat = reshape(permute(mixed, {0, 2, 1, 3}), {m, n, tc});
    Tensor ffn = linear(concat, params.ffn_w, params.ffn_b);
    ffn = batch_norm(ffn, 2, params.bn_gamma, params.bn_beta, params.bn_state, train);
    // back to [M,C,T,n]
    Tensor restored = permute(reshape(ffn, {m, n, t, c}), {0, 3, 2, 1});
    return leaky_relu(add(restored, level_feat), config.leaky_slope);
}

PpaOutput ppa_forward(const Tensor& f, const PyramidSpec& spec, PpaParams& params, bool train) {
    params.config.validate();
    const int64_t heads = params.config.heads;

    LevelFeatures levels = pyramid_transform(f, spec);

    auto [qz, kz, vz] = qkv_project(levels.body, params.body, heads);
    auto [qh, kh, vh] = qkv_project(levels.part, params.part, heads);
    auto [qg, kg, vg] = qkv_project(levels.joint, params.joint, heads);

    AttentionMaps maps;
    maps.body = attention_map(qz, kz);
    maps.part = attention_map(qh, kh);
    maps.joint = attention_map(qg, kg);
    maps.lifted_part = lift_attention(maps.body, spec.part_to_body);
    maps.lifted_joint_from_part = lift_attention(maps.part, spec.joint_to_part);
    maps.lifted_joint_from_body = lift_attention(maps.body, spec.joint_to_body());

    const double lambda = params.config.lambda;
    const double alpha = params.config.alpha;
    const double beta = params.config.beta;
    Tensor att_part = polymerize_part(maps.body, maps.part, lambda, spec);
    Tensor att_joint = polymerize_joint(maps.body, maps.part, maps.joint, alpha, beta, spec);

    PpaOutput out;
    out.maps = maps;
    out.features.body = ppa_block(levels.body, maps.body, vz, params.body, params.config, train);
    out.features.part = ppa_block(levels.part, att_part, vh, params.part, params.config, train);
    out.features.joint =
        ppa_block(levels.joint, att_joint, vg, params.joint, params.config, train);
    return out;
}

}  // namespace psp
