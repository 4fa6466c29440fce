#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "psp/ppa.hpp"
#include "test_support.hpp"

using namespace psp;
using psp::testing::check_gradient;

namespace {

PpaConfig tiny_config() {
    PpaConfig cfg;
    cfg.channels = 4;
    cfg.frames = 3;
    cfg.heads = 2;
    cfg.lambda = 0.2;
    cfg.alpha = 0.12;
    cfg.beta = 0.24;
    return cfg;
}

PyramidSpec tiny_spec() { return PyramidSpec::uniform(6, 4, 2); }

}  // namespace

TEST_CASE("pyramid transform averages groups") {
    Tape::active().clear();
    // N=4, parts {0,1} and {2,3}, one body
    PyramidSpec spec;
    spec.joint_to_part = {0, 0, 1, 1};
    spec.part_to_body = {0, 0};
    Tensor f = Tensor::from_data({1, 1, 1, 4}, {1, 3, 5, 7});
    LevelFeatures levels = pyramid_transform(f, spec);
    CHECK(levels.joint.data() == std::vector<double>{1, 3, 5, 7});
    CHECK(levels.part.data() == std::vector<double>{2, 6});
    CHECK(levels.body.data() == std::vector<double>{4});

    Tensor c = Tensor::full({2, 3, 4, 4}, -1.5);
    LevelFeatures lc = pyramid_transform(c, spec);
    for (double v : lc.part.data()) CHECK(v == -1.5);
    for (double v : lc.body.data()) CHECK(v == -1.5);

    CHECK_THROWS_WITH_AS(pyramid_transform(Tensor::zeros({1, 1, 1, 5}), spec),
                         doctest::Contains("nodes"), std::invalid_argument);
}

TEST_CASE("pyramid transform ignores within-part joint order") {
    Tape::active().clear();
    PyramidSpec spec;
    spec.joint_to_part = {0, 0, 0, 1, 1};
    spec.part_to_body = {0, 1};
    RngState rng(5);
    Tensor f = Tensor::rand_normal({2, 3, 2, 5}, rng, 0, 1);
    LevelFeatures a = pyramid_transform(f, spec);

    // swap joints 0 and 2 (both in part 0)
    std::vector<double> swapped = f.data();
    const int64_t n = 5, lead = f.numel() / n;
    for (int64_t l = 0; l < lead; ++l) std::swap(swapped[l * n + 0], swapped[l * n + 2]);
    LevelFeatures b = pyramid_transform(Tensor::from_data(f.shape(), std::move(swapped)), spec);
    for (int64_t i = 0; i < a.part.numel(); ++i) {
        CHECK(a.part.data()[i] == doctest::Approx(b.part.data()[i]).epsilon(1e-12));
    }
}

TEST_CASE("qkv projection") {
    Tape::active().clear();
    SUBCASE("identity weights with one head reproduces the rearranged input") {
        PpaConfig cfg;
        cfg.channels = 2;
        cfg.frames = 2;
        cfg.heads = 1;
        RngState rng(1);
        PpaParams params = init_ppa(cfg, rng);
        const int64_t tc = 4;
        std::vector<double> eye(tc * tc, 0.0);
        for (int64_t i = 0; i < tc; ++i) eye[i * tc + i] = 1.0;
        params.body.wq = Tensor::from_data({tc, tc}, eye);
        Tensor feat = Tensor::rand_normal({2, 2, 2, 3}, rng, 0, 1);
        auto [q, k, v] = qkv_project(feat, params.body, 1);
        Tensor rearranged = reshape(permute(feat, {0, 3, 2, 1}), {2, 3, 1, tc});
        Tensor expected = permute(rearranged, {0, 2, 1, 3});
        CHECK(q.shape() == Shape{2, 1, 3, 4});
        CHECK(q.data() == expected.data());
    }
    SUBCASE("zero weights give zero Q,K,V") {
        PpaConfig cfg = tiny_config();
        RngState rng(2);
        PpaParams params = init_ppa(cfg, rng);
        params.joint.wq = Tensor::zeros({12, 12}, true);
        params.joint.wk = Tensor::zeros({12, 12}, true);
        params.joint.wv = Tensor::zeros({12, 12}, true);
        Tensor feat = Tensor::rand_normal({1, 4, 3, 6}, rng, 0, 1);
        auto [q, k, v] = qkv_project(feat, params.joint, 2);
        for (double x : q.data()) CHECK(x == 0.0);
        for (double x : v.data()) CHECK(x == 0.0);
    }
    SUBCASE("output shape arithmetic") {
        // M=2, S=2, n=5, T=4, Ce=4 -> C=8, TC=32, per-head dim T*Ce=16
        PpaConfig cfg;
        cfg.channels = 8;
        cfg.frames = 4;
        cfg.heads = 2;
        RngState rng(3);
        PpaParams params = init_ppa(cfg, rng);
        Tensor feat = Tensor::rand_normal({2, 8, 4, 5}, rng, 0, 1);
        auto [q, k, v] = qkv_project(feat, params.body, 2);
        CHECK(q.shape() == Shape{2, 2, 5, 16});
        CHECK(k.shape() == Shape{2, 2, 5, 16});
        CHECK(v.shape() == Shape{2, 2, 5, 16});
    }
}

TEST_CASE("attention map") {
    Tape::active().clear();
    SUBCASE("zero queries and keys give the zero map") {
        Tensor q = Tensor::zeros({1, 1, 3, 4});
        Tensor a = attention_map(q, q);
        for (double v : a.data()) CHECK(v == 0.0);
    }
    SUBCASE("scalar case evaluates tanh(1)") {
        Tensor q = Tensor::from_data({1, 1, 1, 1}, {1.0});
        Tensor a = attention_map(q, q);
        CHECK(a.data()[0] == doctest::Approx(0.7615941559557649).epsilon(1e-12));
    }
    SUBCASE("entries stay inside (-1,1)") {
        RngState rng(7);
        Tensor q = Tensor::rand_normal({2, 2, 5, 6}, rng, 0, 10);
        Tensor k = Tensor::rand_normal({2, 2, 5, 6}, rng, 0, 10);
        Tensor a = attention_map(q, k);
        for (double v : a.data()) {
            CHECK(v > -1.0);
            CHECK(v < 1.0);
        }
    }
}

TEST_CASE("lift attention") {
    Tape::active().clear();
    SUBCASE("block expansion example") {
        Tensor src = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
        Tensor out = lift_attention(src, {0, 0, 1, 1});
        CHECK(out.shape() == Shape{1, 1, 4, 4});
        CHECK(out.data() ==
              std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
    }
    SUBCASE("identity affiliation is a no-op") {
        RngState rng(1);
        Tensor src = Tensor::rand_normal({2, 2, 3, 3}, rng, 0, 1);
        Tensor out = lift_attention(src, {0, 1, 2});
        CHECK(out.data() == src.data());
    }
    SUBCASE("gradient counts group sizes") {
        Tensor src = Tensor::zeros({2, 2}, true);
        const std::vector<int64_t> phi{0, 0, 0, 1, 1};  // |phi^-1(0)|=3, |phi^-1(1)|=2
        Tensor lifted = lift_attention(src, phi);
        backward(reduce_sum(lifted, {0, 1}));
        CHECK(src.grad() == std::vector<double>{9, 6, 6, 4});
        Tape::active().clear();
    }
    SUBCASE("out-of-range affiliation") {
        Tensor src = Tensor::zeros({2, 2});
        CHECK_THROWS_WITH_AS(lift_attention(src, {0, 2}), doctest::Contains("out of range"),
                             std::invalid_argument);
    }
    SUBCASE("matches the exhaustive double loop on random maps") {
        RngState rng(23);
        for (int trial = 0; trial < 20; ++trial) {
            const int64_t m = 2 + static_cast<int64_t>(rng.uniform_int(6));
            const int64_t n = m + static_cast<int64_t>(rng.uniform_int(25 - m));
            std::vector<int64_t> phi(n);
            for (int64_t i = 0; i < n; ++i) phi[i] = static_cast<int64_t>(rng.uniform_int(m));
            Tensor src = Tensor::rand_normal({2, m, m}, rng, 0, 1);
            Tensor out = lift_attention(src, phi);
            for (int64_t lead = 0; lead < 2; ++lead) {
                for (int64_t i = 0; i < n; ++i) {
                    for (int64_t j = 0; j < n; ++j) {
                        const double expect = src.data()[lead * m * m + phi[i] * m + phi[j]];
                        CHECK(out.data()[lead * n * n + i * n + j] == expect);
                    }
                }
            }
        }
    }
}

TEST_CASE("composed lifting equals direct body-to-joint lift") {
    Tape::active().clear();
    RngState rng(31);
    for (int64_t joints : {25, 20}) {
        PyramidSpec spec = PyramidSpec::default_for(joints);
        Tensor body = Tensor::rand_normal({2, 4, 5, 5}, rng, 0, 1);
        Tensor two_step = lift_attention(lift_attention(body, spec.part_to_body),
                                         spec.joint_to_part);
        Tensor direct = lift_attention(body, spec.joint_to_body());
        CHECK(two_step.data() == direct.data());
    }
}

TEST_CASE("polymerization") {
    Tape::active().clear();
    PyramidSpec spec;
    spec.joint_to_part = {0, 0, 1, 1};
    spec.part_to_body = {0, 0, 1, 1};  // P=4 parts onto B=2 bodies
    Tensor a_body = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor a_part = Tensor::full({1, 1, 4, 4}, 1.0);

    SUBCASE("lambda zero returns the part map untouched") {
        Tensor out = polymerize_part(a_body, a_part, 0.0, spec);
        CHECK(out.id() == a_part.id());
    }
    SUBCASE("zero part map with lambda one is the lifted body map") {
        Tensor zero_part = Tensor::zeros({1, 1, 4, 4});
        Tensor out = polymerize_part(a_body, zero_part, 1.0, spec);
        CHECK(out.data() == lift_attention(a_body, spec.part_to_body).data());
    }
    SUBCASE("lambda 0.2 on ones") {
        Tensor out = polymerize_part(a_body, a_part, 0.2, spec);
        Tensor lifted = lift_attention(a_body, spec.part_to_body);
        for (int64_t i = 0; i < 16; ++i) {
            CHECK(out.data()[i] == doctest::Approx(1.0 + 0.2 * lifted.data()[i]).epsilon(1e-12));
        }
    }
    SUBCASE("alpha and beta zero return the joint map") {
        Tensor a_joint = Tensor::from_data({1, 1, 4, 4}, std::vector<double>(16, 0.5));
        Tensor out = polymerize_joint(a_body, a_part, a_joint, 0.0, 0.0, spec);
        CHECK(out.id() == a_joint.id());
    }
    SUBCASE("beta-only path lifts the body map through the composed affiliation") {
        Tensor zero_joint = Tensor::zeros({1, 1, 4, 4});
        Tensor zero_part4 = Tensor::zeros({1, 1, 4, 4});
        Tensor out = polymerize_joint(a_body, zero_part4, zero_joint, 0.0, 1.0, spec);
        CHECK(out.data() == lift_attention(a_body, spec.joint_to_body()).data());
    }
    SUBCASE("unit maps with the published coefficients") {
        Tensor ones_b = Tensor::full({1, 1, 2, 2}, 1.0);
        Tensor ones_p = Tensor::full({1, 1, 4, 4}, 1.0);
        Tensor ones_j = Tensor::full({1, 1, 4, 4}, 1.0);
        Tensor out = polymerize_joint(ones_b, ones_p, ones_j, 0.12, 0.24, spec);
        for (double v : out.data()) CHECK(v == doctest::Approx(1.36).epsilon(1e-12));
    }
}

TEST_CASE("ppa block") {
    Tape::active().clear();
    PpaConfig cfg = tiny_config();
    RngState rng(3);
    PpaParams params = init_ppa(cfg, rng);

    SUBCASE("zero attention with zero FFN bias is the residual path") {
        Tensor feat = Tensor::rand_normal({2, 4, 3, 6}, rng, 0, 1);
        Tensor att = Tensor::zeros({2, 2, 6, 6});
        Tensor v = Tensor::rand_normal({2, 2, 6, 6}, rng, 0, 1);
        Tensor out = ppa_block(feat, att, v, params.joint, cfg, /*train=*/false);
        Tensor expect = leaky_relu(feat, cfg.leaky_slope);
        for (int64_t i = 0; i < out.numel(); ++i) {
            CHECK(out.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-9));
        }
    }
    SUBCASE("output shape equals the level shape") {
        PyramidSpec spec = tiny_spec();
        Tensor f = Tensor::rand_normal({2, 4, 3, 6}, rng, 0, 1);
        PpaOutput out = ppa_forward(f, spec, params, false);
        CHECK(out.features.joint.shape() == Shape{2, 4, 3, 6});
        CHECK(out.features.part.shape() == Shape{2, 4, 3, 4});
        CHECK(out.features.body.shape() == Shape{2, 4, 3, 2});
        CHECK(out.maps.body.shape() == Shape{2, 2, 2, 2});
        CHECK(out.maps.part.shape() == Shape{2, 2, 4, 4});
        CHECK(out.maps.joint.shape() == Shape{2, 2, 6, 6});
        CHECK(out.maps.lifted_part.shape() == Shape{2, 2, 4, 4});
        CHECK(out.maps.lifted_joint_from_part.shape() == Shape{2, 2, 6, 6});
        CHECK(out.maps.lifted_joint_from_body.shape() == Shape{2, 2, 6, 6});
    }
    SUBCASE("attention/value node mismatch raises") {
        Tensor feat = Tensor::rand_normal({2, 4, 3, 6}, rng, 0, 1);
        Tensor att = Tensor::zeros({2, 2, 4, 4});
        Tensor v = Tensor::zeros({2, 2, 4, 6});
        CHECK_THROWS_WITH_AS(ppa_block(feat, att, v, params.joint, cfg, false),
                             doctest::Contains("node counts"), std::invalid_argument);
    }
}

TEST_CASE("ppa forward wiring") {
    Tape::active().clear();
    PyramidSpec spec = tiny_spec();
    RngState rng(41);

    SUBCASE("zero coefficients decouple the levels") {
        PpaConfig cfg = tiny_config();
        cfg.lambda = cfg.alpha = cfg.beta = 0.0;
        PpaParams params = init_ppa(cfg, rng);
        Tensor f = Tensor::rand_normal({2, 4, 3, 6}, rng, 0, 1);
        PpaOutput out = ppa_forward(f, spec, params, false);

        LevelFeatures levels = pyramid_transform(f, spec);
        auto [qh, kh, vh] = qkv_project(levels.part, params.part, cfg.heads);
        Tensor plain_part =
            ppa_block(levels.part, attention_map(qh, kh), vh, params.part, cfg, false);
        CHECK(out.features.part.data() == plain_part.data());

        auto [qg, kg, vg] = qkv_project(levels.joint, params.joint, cfg.heads);
        Tensor plain_joint =
            ppa_block(levels.joint, attention_map(qg, kg), vg, params.joint, cfg, false);
        CHECK(out.features.joint.data() == plain_joint.data());
    }
    SUBCASE("eval mode is deterministic") {
        PpaParams params = init_ppa(tiny_config(), rng);
        Tensor f = Tensor::rand_normal({2, 4, 3, 6}, rng, 0, 1);
        PpaOutput a = ppa_forward(f, spec, params, false);
        PpaOutput b = ppa_forward(f, spec, params, false);
        CHECK(std::memcmp(a.features.joint.data().data(), b.features.joint.data().data(),
                          a.features.joint.numel() * sizeof(double)) == 0);
    }
    SUBCASE("returned maps match recomputation from the same Q,K") {
        PpaParams params = init_ppa(tiny_config(), rng);
        Tensor f = Tensor::rand_normal({2, 4, 3, 6}, rng, 0, 1);
        PpaOutput out = ppa_forward(f, spec, params, false);
        LevelFeatures levels = pyramid_transform(f, spec);
        auto [qz, kz, vz] = qkv_project(levels.body, params.body, params.config.heads);
        CHECK(out.maps.body.data() == attention_map(qz, kz).data());
        CHECK(out.maps.lifted_part.data() ==
              lift_attention(out.maps.body, spec.part_to_body).data());
    }
    SUBCASE("all tanh maps inside the open interval") {
        PpaParams params = init_ppa(tiny_config(), rng);
        Tensor f = Tensor::rand_normal({2, 4, 3, 6}, rng, 0, 3);
        PpaOutput out = ppa_forward(f, spec, params, false);
        for (const Tensor* t : {&out.maps.body, &out.maps.part, &out.maps.joint}) {
            for (double v : t->data()) {
                CHECK(v > -1.0);
                CHECK(v < 1.0);
            }
        }
    }
}

TEST_CASE("ppa gradients match finite differences") {
    PyramidSpec spec = tiny_spec();
    RngState rng(53);
    PpaParams params = init_ppa(tiny_config(), rng);
    Tensor f = Tensor::rand_normal({2, 4, 3, 6}, rng, 0, 1);
    auto build = [&](const Tensor&) {
        PpaOutput out = ppa_forward(f, spec, params, /*train=*/true);
        Tensor s = add(reduce_mean(out.features.joint, {0, 1, 2, 3}),
                       add(reduce_mean(out.features.part, {0, 1, 2, 3}),
                           reduce_mean(out.features.body, {0, 1, 2, 3})));
        return s;
    };
    for (auto& [name, tensor] : params.named_parameters("ppa")) {
        Tensor t = tensor;
        INFO("parameter ", name);
        CHECK(check_gradient(build, t, rng) < 1e-4);
    }
    // and through the input features
    Tensor fin = Tensor::rand_normal({2, 4, 3, 6}, rng, 0, 1, true);
    auto build_in = [&](const Tensor&) {
        PpaOutput out = ppa_forward(fin, spec, params, true);
        return add(reduce_mean(out.features.joint, {0, 1, 2, 3}),
                   add(reduce_mean(out.features.part, {0, 1, 2, 3}),
                       reduce_mean(out.features.body, {0, 1, 2, 3})));
    };
    CHECK(check_gradient(build_in, fin, rng) < 1e-4);
}
