#include <chrono>
#include <cmath>

#include "psp/trainer.hpp"

namespace psp {

// Full-pipeline gradient check on a deliberately small configuration:
// M=2, C=8 (Ce=4, S=2), T=4, N=6, P=4, B=2, 3 classes. The loss is the full
// objective: recognition cross-entropy on a labeled batch plus the three-level
// contrastive loss on an unlabeled batch, both in train mode.
GradCheckReport full_pipeline_gradcheck(uint64_t seed) {
    const auto started = std::chrono::steady_clock::now();

    TrainConfig config;
    config.model.channels = 8;
    config.model.encoder_blocks = 1;
    config.model.encoder_heads = 2;
    config.model.temporal_kernel = 3;
    config.model.ppa_heads = 2;  // Ce = 4
    config.model.contrast_dim = 8;
    config.model.dropout_rate = 0.0;
    config.target_frames = 4;
    config.hyper = HyperConfig{};  // lambda 0.2, alpha 0.12, beta 0.24, tau 0.07

    PyramidSpec spec = PyramidSpec::uniform(6, 4, 2);
    RngState rng(seed);
    ModelParams model = init_model(config, spec, /*classes=*/3, rng);

    Tensor labeled_joint = Tensor::rand_normal({2, 3, 4, 6}, rng, 0.0, 1.0);
    Tensor labeled_motion = to_motion(labeled_joint);
    Tensor labels = Tensor::from_data({2, 3}, {1, 0, 0, 0, 0, 1});
    Tensor unlabeled_joint = Tensor::rand_normal({2, 3, 4, 6}, rng, 0.0, 1.0);
    Tensor unlabeled_motion = to_motion(unlabeled_joint);

    ContrastConfig ccfg;
    ccfg.tau = config.hyper.tau;

    auto forward = [&]() -> Tensor {
        Tensor fj = encode(labeled_joint, model.encoder, /*train=*/true);
        Tensor fm = encode(labeled_motion, model.encoder, true);
        Tensor l_reg = recognition_head(fj, fm, model.recognition, labels).loss;

        Tensor uj = encode(unlabeled_joint, model.encoder, true);
        Tensor um = encode(unlabeled_motion, model.encoder, true);
        LevelFeatures lj = ppa_forward(uj, spec, model.ppa, true).features;
        LevelFeatures lm = ppa_forward(um, spec, model.ppa, true).features;
        Tensor l_con = ccl_total(lj, lm, model.projectors, ccfg).total;
        return total_loss(l_con, l_reg);
    };

    Tape::active().clear();
    auto named = model.named_parameters();
    for (auto& [name, t] : named) {
        Tensor tensor = t;
        tensor.zero_grad();
    }
    backward(forward());
    std::vector<std::vector<double>> analytic;
    for (auto& [name, t] : named) {
        analytic.push_back(t.has_grad() ? t.grad() : std::vector<double>(t.numel(), 0.0));
    }
    Tape::active().clear();

    auto loss_value = [&]() {
        NoGradGuard ng;
        return forward().item();
    };

    const double step = 1e-6;
    GradCheckReport report;
    for (size_t p = 0; p < named.size(); ++p) {
        Tensor tensor = named[p].second;
        auto& data = tensor.raw_data();
        double tensor_worst = 0.0;
        for (size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + step;
            const double up = loss_value();
            data[i] = saved - step;
            const double down = loss_value();
            data[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double a = analytic[p][i];
            const double abs_diff = std::abs(a - numeric);
            // guarded relative error: a 1e-3 floor keeps finite-difference
            // noise on near-zero entries from dominating the report
            const double rel = abs_diff / std::max({std::abs(a), std::abs(numeric), 1e-3});
            report.max_abs_diff = std::max(report.max_abs_diff, abs_diff);
            tensor_worst = std::max(tensor_worst, rel);
            ++report.n_params;
        }
        report.per_tensor.emplace_back(named[p].first, tensor_worst);
        report.max_rel_error = std::max(report.max_rel_error, tensor_worst);
    }
    report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return report;
}

}  // namespace psp
