#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "psp/ccl.hpp"
#include "test_support.hpp"

using namespace psp;
using psp::testing::check_gradient;

namespace {

// Independent double-loop NT-Xent reference over raw rows.
double ntxent_reference(const std::vector<std::vector<double>>& rows, double tau) {
    const int n = static_cast<int>(rows.size());
    const int m = n / 2;
    auto cos_sim = [](const std::vector<double>& a, const std::vector<double>& b) {
        double dot = 0, na = 0, nb = 0;
        for (size_t i = 0; i < a.size(); ++i) {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        return dot / (std::sqrt(na) * std::sqrt(nb));
    };
    double total = 0;
    for (int i = 0; i < n; ++i) {
        const int pos = (i + m) % n;
        const double numer = std::exp(cos_sim(rows[i], rows[pos]) / tau);
        double denom = 0;
        for (int k = 0; k < n; ++k) {
            if (k != i) denom += std::exp(cos_sim(rows[i], rows[k]) / tau);
        }
        total += -std::log(numer / denom);
    }
    return total / n;
}

Tensor rows_to_tensor(const std::vector<std::vector<double>>& rows) {
    std::vector<double> flat;
    for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    return Tensor::from_data({static_cast<int64_t>(rows.size()),
                              static_cast<int64_t>(rows[0].size())},
                             std::move(flat));
}

}  // namespace

TEST_CASE("ntxent basics") {
    Tape::active().clear();
    SUBCASE("M=1 is exactly zero") {
        RngState rng(1);
        for (int trial = 0; trial < 5; ++trial) {
            Tensor u = Tensor::rand_normal({2, 6}, rng, 0, 2);
            CHECK(ntxent(u, 0.07).item() == 0.0);
        }
    }
    SUBCASE("M=2 duplicated basis rows match the closed form and the reference") {
        std::vector<std::vector<double>> rows{{1, 0}, {0, 1}, {1, 0}, {0, 1}};
        const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
        const double got = ntxent(rows_to_tensor(rows), 1.0).item();
        CHECK(got == doctest::Approx(expect).epsilon(1e-12));
        CHECK(std::abs(got - ntxent_reference(rows, 1.0)) < 1e-10);
    }
    SUBCASE("matches the brute-force reference on random instances") {
        RngState rng(7);
        for (double tau : {0.07, 0.5, 1.0}) {
            for (int trial = 0; trial < 10; ++trial) {
                const int64_t m = 2 + static_cast<int64_t>(rng.uniform_int(7));
                const int64_t dim = 2 + static_cast<int64_t>(rng.uniform_int(15));
                std::vector<std::vector<double>> rows(2 * m, std::vector<double>(dim));
                for (auto& r : rows) {
                    for (double& v : r) v = rng.normal(0, 1);
                }
                const double got = ntxent(rows_to_tensor(rows), tau).item();
                CHECK(std::abs(got - ntxent_reference(rows, tau)) < 1e-10);
            }
        }
    }
    SUBCASE("cosine similarity makes the loss scale invariant") {
        RngState rng(3);
        Tensor u = Tensor::rand_normal({6, 5}, rng, 0, 1);
        const double base = ntxent(u, 0.07).item();
        const double scaled = ntxent(scale(u, 5.0), 0.07).item();
        CHECK(scaled == doctest::Approx(base).epsilon(1e-12));
    }
    SUBCASE("raising positive similarity with fixed negatives lowers the loss") {
        // u0=e0, u1=e1, u2=cos(t)e0+sin(t)e2, u3=cos(t)e1+sin(t)e3:
        // every negative similarity is exactly 0 for any t.
        auto instance = [](double theta) {
            const double c = std::cos(theta), s = std::sin(theta);
            return rows_to_tensor({{1, 0, 0, 0}, {0, 1, 0, 0}, {c, 0, s, 0}, {0, c, 0, s}});
        };
        double prev = ntxent(instance(1.2), 0.5).item();
        for (double theta : {0.9, 0.6, 0.3, 0.05}) {
            const double cur = ntxent(instance(theta), 0.5).item();
            CHECK(cur < prev);
            prev = cur;
        }
    }
    SUBCASE("zero-norm row raises") {
        Tensor u = Tensor::from_data({2, 2}, {1, 0, 0, 0});
        CHECK_THROWS_WITH_AS(ntxent(u, 0.07), doctest::Contains("zero norm"),
                             std::invalid_argument);
    }
    SUBCASE("gradient matches finite differences") {
        RngState rng(11);
        Tensor u = Tensor::rand_normal({6, 4}, rng, 0, 1, true);
        auto build = [&](const Tensor&) { return ntxent(u, 0.07); };
        CHECK(check_gradient(build, u, rng) < 1e-4);
    }
}

TEST_CASE("projection head") {
    Tape::active().clear();
    const int64_t c = 3;
    std::vector<double> eye(c * c, 0.0);
    for (int64_t i = 0; i < c; ++i) eye[i * c + i] = 1.0;

    SUBCASE("zero second layer passes only its bias") {
        ProjectionParams p;
        p.w1 = Tensor::from_data({c, c}, eye);
        p.b1 = Tensor::zeros({c});
        p.w2 = Tensor::zeros({c, 2});
        p.b2 = Tensor::from_data({2}, {0.25, -4.0});
        Tensor feat = Tensor::full({2, c, 4, 5}, 1.7);
        Tensor out = project(feat, p);
        CHECK(out.shape() == Shape{2, 2});
        CHECK(out.data() == std::vector<double>{0.25, -4.0, 0.25, -4.0});
    }
    SUBCASE("pooling a node-constant feature keeps the constant") {
        ProjectionParams p;
        p.w1 = Tensor::from_data({c, c}, eye);
        p.b1 = Tensor::zeros({c});
        p.w2 = Tensor::from_data({c, c}, eye);
        p.b2 = Tensor::zeros({c});
        const double value = 0.85;  // positive, leaky relu passes it through
        Tensor feat = Tensor::full({1, c, 2, 3}, value);
        Tensor out = project(feat, p);
        for (double v : out.data()) CHECK(v == doctest::Approx(value).epsilon(1e-12));
    }
    SUBCASE("gradients match finite differences") {
        RngState rng(5);
        ProjectorSet set = init_projectors(4, 6, rng);
        Tensor feat = Tensor::rand_normal({3, 4, 2, 5}, rng, 0, 1);
        auto build = [&](const Tensor&) { return project(feat, set.joint); };
        for (auto& [name, tensor] : set.named_parameters("proj")) {
            if (name.find("joint") == std::string::npos) continue;
            Tensor t = tensor;
            INFO("parameter ", name);
            CHECK(check_gradient(build, t, rng) < 1e-4);
        }
    }
}

TEST_CASE("ccl_total composition") {
    Tape::active().clear();
    RngState rng(13);
    const int64_t m = 3, c = 4;

    // identical features and shared projector parameters at every level
    Tensor f = Tensor::rand_normal({m, c, 2, 5}, rng, 0, 1);
    Tensor g = Tensor::rand_normal({m, c, 2, 5}, rng, 0, 1);
    LevelFeatures fj{f, f, f};
    LevelFeatures fm{g, g, g};
    ProjectorSet set = init_projectors(c, 6, rng);
    set.part = set.body;
    set.joint = set.body;

    SUBCASE("three symmetric levels add to 3x the single loss") {
        ContrastConfig cfg;
        CclResult r = ccl_total(fj, fm, set, cfg);
        const double single = r.body.item();
        CHECK(r.part.item() == doctest::Approx(single).epsilon(1e-12));
        CHECK(r.total.item() == doctest::Approx(3 * single).epsilon(1e-12));
    }
    SUBCASE("a single enabled level is that level's loss exactly") {
        ContrastConfig cfg;
        cfg.body_level = cfg.part_level = false;
        CclResult r = ccl_total(fj, fm, set, cfg);
        CHECK(r.total.id() == r.joint.id());
        CHECK_FALSE(r.body.defined());
        CHECK_FALSE(r.part.defined());
    }
    SUBCASE("M=1 gives zero total") {
        Tensor f1 = Tensor::rand_normal({1, c, 2, 5}, rng, 0, 1);
        Tensor g1 = Tensor::rand_normal({1, c, 2, 5}, rng, 0, 1);
        LevelFeatures fj1{f1, f1, f1}, fm1{g1, g1, g1};
        ContrastConfig cfg;
        CclResult r = ccl_total(fj1, fm1, set, cfg);
        CHECK(r.total.item() == 0.0);
    }
    SUBCASE("an empty enabled set raises") {
        ContrastConfig cfg;
        cfg.body_level = cfg.part_level = cfg.joint_level = false;
        CHECK_THROWS_WITH_AS(ccl_total(fj, fm, set, cfg), doctest::Contains("enabled"),
                             std::invalid_argument);
    }
}

TEST_CASE("recognition head") {
    Tape::active().clear();
    const int64_t classes = 4, c = 4, m = 4;

    SUBCASE("zero FC weights give uniform predictions and ln(classes) loss") {
        RngState rng(17);
        RecognitionParams p = init_recognition(c, classes, rng);
        p.w_joint = Tensor::zeros({c, classes}, true);
        p.b_joint = Tensor::zeros({classes}, true);
        p.w_motion = Tensor::zeros({c, classes}, true);
        p.b_motion = Tensor::zeros({classes}, true);
        Tensor fj = Tensor::rand_normal({m, c, 2, 3}, rng, 0, 1);
        Tensor fm = Tensor::rand_normal({m, c, 2, 3}, rng, 0, 1);
        std::vector<double> onehot(m * classes, 0.0);
        for (int64_t i = 0; i < m; ++i) onehot[i * classes + i % classes] = 1.0;
        Tensor y = Tensor::from_data({m, classes}, onehot);
        RecognitionOutput out = recognition_head(fj, fm, p, y);
        for (double v : out.probs.data()) CHECK(v == doctest::Approx(0.25));
        CHECK(out.loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }
    SUBCASE("dominant true-class features drive the loss to zero") {
        RngState rng(19);
        RecognitionParams p = init_recognition(c, classes, rng);
        std::vector<double> eye(c * classes, 0.0);
        for (int64_t i = 0; i < c; ++i) eye[i * classes + i] = 1.0;
        p.w_joint = Tensor::from_data({c, classes}, eye, true);
        p.b_joint = Tensor::zeros({classes}, true);
        p.w_motion = Tensor::zeros({c, classes}, true);
        p.b_motion = Tensor::zeros({classes}, true);
        std::vector<double> feat(m * c * 1 * 1, 0.0);
        std::vector<double> onehot(m * classes, 0.0);
        for (int64_t i = 0; i < m; ++i) {
            feat[i * c + i % c] = 50.0;
            onehot[i * classes + i % classes] = 1.0;
        }
        Tensor fj = Tensor::from_data({m, c, 1, 1}, feat);
        Tensor fm = Tensor::zeros({m, c, 1, 1});
        RecognitionOutput out = recognition_head(fj, fm, p, Tensor::from_data({m, classes}, onehot));
        CHECK(out.loss.item() < 1e-9);
    }
    SUBCASE("modalities contribute additively") {
        RngState rng(23);
        RecognitionParams p = init_recognition(c, classes, rng);
        Tensor fj = Tensor::rand_normal({m, c, 2, 3}, rng, 0, 1);
        Tensor fm = Tensor::rand_normal({m, c, 2, 3}, rng, 0, 1);
        std::vector<double> onehot(m * classes, 0.0);
        for (int64_t i = 0; i < m; ++i) onehot[i * classes + i % classes] = 1.0;
        Tensor y = Tensor::from_data({m, classes}, onehot);

        RecognitionParams joint_only = p;
        joint_only.w_motion = Tensor::zeros({c, classes}, true);
        joint_only.b_motion = Tensor::zeros({classes}, true);
        RecognitionOutput both = recognition_head(fj, fm, joint_only, y);

        Tensor pooled = reduce_mean(fj, {2, 3});
        Tensor single_logits = linear(pooled, p.w_joint, p.b_joint);
        Tensor single_loss = softmax_cross_entropy(single_logits, y);
        CHECK(both.loss.item() == doctest::Approx(single_loss.item()).epsilon(1e-12));
    }
    SUBCASE("malformed one-hot raises") {
        RngState rng(29);
        RecognitionParams p = init_recognition(c, classes, rng);
        Tensor fj = Tensor::zeros({1, c, 1, 1});
        Tensor y = Tensor::from_data({1, classes}, {0.5, 0.5, 0, 0});
        CHECK_THROWS_WITH_AS(recognition_head(fj, fj, p, y), doctest::Contains("one-hot"),
                             std::invalid_argument);
    }
    SUBCASE("gradients match finite differences") {
        RngState rng(31);
        RecognitionParams p = init_recognition(c, classes, rng);
        Tensor fj = Tensor::rand_normal({m, c, 2, 3}, rng, 0, 1);
        Tensor fm = Tensor::rand_normal({m, c, 2, 3}, rng, 0, 1);
        std::vector<double> onehot(m * classes, 0.0);
        for (int64_t i = 0; i < m; ++i) onehot[i * classes + i % classes] = 1.0;
        Tensor y = Tensor::from_data({m, classes}, onehot);
        auto build = [&](const Tensor&) { return recognition_head(fj, fm, p, y).loss; };
        for (auto& [name, tensor] : p.named_parameters("fc")) {
            Tensor t = tensor;
            INFO("parameter ", name);
            CHECK(check_gradient(build, t, rng) < 1e-4);
        }
    }
}

TEST_CASE("total loss") {
    Tape::active().clear();
    CHECK(total_loss(Tensor::scalar(0.5), Tensor::scalar(1.0)).item() == doctest::Approx(1.5));
    CHECK(total_loss(Tensor(), Tensor::scalar(2.0)).item() == doctest::Approx(2.0));
    CHECK(total_loss(Tensor::scalar(0.25), Tensor()).item() == doctest::Approx(0.25));
    CHECK_THROWS_AS(total_loss(Tensor(), Tensor()), std::invalid_argument);
}
