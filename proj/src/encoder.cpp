#include "psp/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace psp {

void EncoderConfig::validate() const {
    if (in_channels != 3) {
        throw std::invalid_argument("EncoderConfig: in_channels must be 3");
    }
    if (hidden_channels < 1 || heads < 1 || hidden_channels % heads != 0) {
        throw std::invalid_argument("EncoderConfig: hidden_channels must be divisible by heads");
    }
    if (blocks < 0) throw std::invalid_argument("EncoderConfig: blocks must be >= 0");
    if (temporal_kernel < 1 || temporal_kernel % 2 == 0) {
        throw std::invalid_argument("EncoderConfig: temporal_kernel must be odd");
    }
    if (n_nodes < 1) throw std::invalid_argument("EncoderConfig: n_nodes must be >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
        throw std::invalid_argument("EncoderConfig: dropout_rate must be in [0,1)");
    }
}

namespace {

Tensor uniform_fan_in(Shape shape, int64_t fan_in, RngState& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    return Tensor::rand_uniform(std::move(shape), rng, -bound, bound, /*requires_grad=*/true);
}

}  // namespace

EncoderParams init_encoder(const EncoderConfig& config, RngState& rng) {
    config.validate();
    const int64_t c = config.hidden_channels;
    EncoderParams p;
    p.config = config;
    p.embed_w = uniform_fan_in({3, c}, 3, rng);
    p.embed_b = Tensor::zeros({c}, true);
    p.node_embed = uniform_fan_in({config.n_nodes, c}, c, rng);
    p.blocks.resize(config.blocks);
    for (auto& blk : p.blocks) {
        blk.wq = uniform_fan_in({c, c}, c, rng);
        blk.bq = Tensor::zeros({c}, true);
        blk.wk = uniform_fan_in({c, c}, c, rng);
        blk.bk = Tensor::zeros({c}, true);
        blk.wv = uniform_fan_in({c, c}, c, rng);
        blk.bv = Tensor::zeros({c}, true);
        blk.conv_w = uniform_fan_in({c, config.temporal_kernel}, config.temporal_kernel, rng);
        blk.conv_b = Tensor::zeros({c}, true);
        blk.bn_gamma = Tensor::full({c}, 1.0, true);
        blk.bn_beta = Tensor::zeros({c}, true);
        blk.bn_state = BatchNormState::init({c});
    }
    return p;
}

std::vector<std::pair<std::string, Tensor>> EncoderParams::named_parameters(
    const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back(prefix + ".embed_w", embed_w);
    out.emplace_back(prefix + ".embed_b", embed_b);
    out.emplace_back(prefix + ".node_embed", node_embed);
    for (size_t i = 0; i < blocks.size(); ++i) {
        const std::string b = prefix + ".block" + std::to_string(i);
        out.emplace_back(b + ".wq", blocks[i].wq);
        out.emplace_back(b + ".bq", blocks[i].bq);
        out.emplace_back(b + ".wk", blocks[i].wk);
        out.emplace_back(b + ".bk", blocks[i].bk);
        out.emplace_back(b + ".wv", blocks[i].wv);
        out.emplace_back(b + ".bv", blocks[i].bv);
        out.emplace_back(b + ".conv_w", blocks[i].conv_w);
        out.emplace_back(b + ".conv_b", blocks[i].conv_b);
        out.emplace_back(b + ".bn_gamma", blocks[i].bn_gamma);
        out.emplace_back(b + ".bn_beta", blocks[i].bn_beta);
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> EncoderParams::named_buffers(
    const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (size_t i = 0; i < blocks.size(); ++i) {
        const std::string b = prefix + ".block" + std::to_string(i);
        out.emplace_back(b + ".bn_mean", blocks[i].bn_state.running_mean);
        out.emplace_back(b + ".bn_var", blocks[i].bn_state.running_var);
    }
    return out;
}

Tensor encode(const Tensor& x, EncoderParams& params, bool train, RngState* rng) {
    const EncoderConfig& cfg = params.config;
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != cfg.in_channels || s[3] != cfg.n_nodes) {
        throw std::invalid_argument("encode: expected [M," + std::to_string(cfg.in_channels) +
                                    ",T," + std::to_string(cfg.n_nodes) + "], got " +
                                    shape_str(s));
    }
    for (double v : x.data()) {
        if (!std::isfinite(v)) throw std::invalid_argument("encode: non-finite input coordinate");
    }
    const bool use_dropout = train && cfg.dropout_rate > 0.0;
    if (use_dropout && rng == nullptr) {
        throw std::invalid_argument("encode: dropout in train mode needs an rng");
    }

    const int64_t m = s[0], t = s[2], n = s[3];
    const int64_t c = cfg.hidden_channels;
    const int64_t heads = cfg.heads, ch = c / heads;

    Tensor h = permute(x, {0, 2, 3, 1});                  // [M,T,N,3]
    h = linear(h, params.embed_w, params.embed_b);        // [M,T,N,C]
    h = add(h, params.node_embed);                        // node identity, broadcast over M,T

    for (auto& blk : params.blocks) {
        auto split_heads = [&](const Tensor& z) {
            return permute(reshape(z, {m, t, n, heads, ch}), {0, 1, 3, 2, 4});  // [M,T,S,N,Ch]
        };
        Tensor q = split_heads(linear(h, blk.wq, blk.bq));
        Tensor k = split_heads(linear(h, blk.wk, blk.bk));
        Tensor v = split_heads(linear(h, blk.wv, blk.bv));

        Tensor att = tanh(scale(matmul(q, permute(k, {0, 1, 2, 4, 3})),
                                1.0 / std::sqrt(static_cast<double>(ch))));  // [M,T,S,N,N]
        Tensor mixed = reshape(permute(matmul(att, v), {0, 1, 3, 2, 4}), {m, t, n, c});
        if (use_dropout) mixed = dropout(mixed, cfg.dropout_rate, *rng);
        Tensor a = add(h, mixed);

        Tensor branch = temporal_conv_depthwise(a, blk.conv_w, blk.conv_b);
        branch = batch_norm(branch, 3, blk.bn_gamma, blk.bn_beta, blk.bn_state, train);
        branch = leaky_relu(branch, 0.01);
        if (use_dropout) branch = dropout(branch, cfg.dropout_rate, *rng);
        h = add(a, branch);
    }

    Tensor out = permute(h, {0, 3, 1, 2});  // [M,C,T,N]
    for (double v : out.data()) {
        if (!std::isfinite(v)) throw std::runtime_error("encode: non-finite activation");
    }
    return out;
}

}  // namespace psp
