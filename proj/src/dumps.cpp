#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "psp/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace psp {

namespace {

std::vector<std::string> node_names(const std::vector<std::string>& names, int64_t count,
                                    const char* fallback) {
    if (static_cast<int64_t>(names.size()) == count) return names;
    std::vector<std::string> out;
    for (int64_t i = 0; i < count; ++i) out.push_back(fallback + std::to_string(i));
    return out;
}

std::string sanitize(const std::string& id) {
    std::string out;
    for (char c : id) out.push_back(std::isalnum(static_cast<unsigned char>(c)) ? c : '_');
    return out;
}

void write_map_csv(const std::string& path, const Tensor& maps, int64_t sample, int64_t head,
                   const std::vector<std::string>& rows, const std::vector<std::string>& cols) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("dump_artifacts: cannot write " + path);
    const int64_t nr = maps.shape()[2], nc = maps.shape()[3];
    const int64_t heads = maps.shape()[1];
    const double* base = maps.data().data() + ((sample * heads + head) * nr) * nc;
    f << "node";
    for (const auto& c : cols) f << ',' << c;
    f << '\n';
    f.precision(17);
    for (int64_t i = 0; i < nr; ++i) {
        f << rows[i];
        for (int64_t j = 0; j < nc; ++j) f << ',' << base[i * nc + j];
        f << '\n';
    }
}

}  // namespace

void dump_artifacts(TrainState& state, const Batch& batch, const TrainConfig& config,
                    const std::string& out_dir, const DumpKinds& kinds) {
    fs::create_directories(out_dir);
    NoGradGuard ng;

    if (kinds.metrics) {
        json history = json::array();
        for (const auto& m : state.history) history.push_back(m.to_json());
        std::ofstream f(fs::path(out_dir) / "metrics.json");
        if (!f) throw std::runtime_error("dump_artifacts: cannot write metrics.json");
        f << history.dump(2) << '\n';
    }
    if (!kinds.attention && !kinds.embeddings) return;

    const PyramidSpec& spec = state.model.spec;
    Tensor fj = encode(batch.joint, state.model.encoder, /*train=*/false);
    Tensor fm = encode(batch.motion, state.model.encoder, /*train=*/false);

    if (kinds.attention) {
        // Joint-modality maps: raw body map, then the polymerized part and
        // joint maps actually used by the blocks.
        PpaOutput out = ppa_forward(fj, spec, state.model.ppa, /*train=*/false);
        Tensor poly_part = polymerize_part(out.maps.body, out.maps.part, config.hyper.lambda,
                                           spec);
        Tensor poly_joint = polymerize_joint(out.maps.body, out.maps.part, out.maps.joint,
                                             config.hyper.alpha, config.hyper.beta, spec);
        const auto jn = node_names(spec.joint_names, spec.n_joints(), "j");
        const auto pn = node_names(spec.part_names, spec.n_parts(), "p");
        const auto bn = node_names(spec.body_names, spec.n_bodies(), "b");

        json manifest = json::array();
        const int64_t m = batch.joint.shape()[0];
        const int64_t heads = out.maps.body.shape()[1];
        struct LevelDump {
            const char* level;
            const Tensor* maps;
            const std::vector<std::string>* names;
        };
        const LevelDump dumps[] = {{"body", &out.maps.body, &bn},
                                   {"part", &poly_part, &pn},
                                   {"joint", &poly_joint, &jn}};
        for (int64_t s = 0; s < m; ++s) {
            for (int64_t h = 0; h < heads; ++h) {
                for (const auto& d : dumps) {
                    const std::string file = "attn_" + sanitize(batch.ids[s]) + "_h" +
                                             std::to_string(h) + "_" + d.level + ".csv";
                    write_map_csv((fs::path(out_dir) / file).string(), *d.maps, s, h, *d.names,
                                  *d.names);
                    manifest.push_back({{"file", file},
                                        {"sample", batch.ids[s]},
                                        {"head", h},
                                        {"level", d.level},
                                        {"rows", d.maps->shape()[2]},
                                        {"cols", d.maps->shape()[3]}});
                }
            }
        }
        std::ofstream f(fs::path(out_dir) / "attention_manifest.json");
        if (!f) throw std::runtime_error("dump_artifacts: cannot write attention_manifest.json");
        f << manifest.dump(2) << '\n';
    }

    if (kinds.embeddings) {
        LevelFeatures lj, lm;
        if (config.ablation.use_ppa) {
            lj = ppa_forward(fj, spec, state.model.ppa, false).features;
            lm = ppa_forward(fm, spec, state.model.ppa, false).features;
        } else {
            lj = pyramid_transform(fj, spec);
            lm = pyramid_transform(fm, spec);
        }
        std::ofstream f(fs::path(out_dir) / "embeddings.csv");
        if (!f) throw std::runtime_error("dump_artifacts: cannot write embeddings.csv");
        f.precision(17);
        f << "id,level,modality,values...\n";
        auto write_rows = [&](const Tensor& feat, const char* level, const char* modality,
                              const ProjectionParams& proj) {
            Tensor emb = project(feat, proj);
            const int64_t m = emb.shape()[0], d = emb.shape()[1];
            for (int64_t i = 0; i < m; ++i) {
                f << batch.ids[i] << ',' << level << ',' << modality;
                for (int64_t k = 0; k < d; ++k) f << ',' << emb.data()[i * d + k];
                f << '\n';
            }
        };
        write_rows(lj.body, "body", "joint", state.model.projectors.body);
        write_rows(lm.body, "body", "motion", state.model.projectors.body);
        write_rows(lj.part, "part", "joint", state.model.projectors.part);
        write_rows(lm.part, "part", "motion", state.model.projectors.part);
        write_rows(lj.joint, "joint", "joint", state.model.projectors.joint);
        write_rows(lm.joint, "joint", "motion", state.model.projectors.joint);
    }
}

}  // namespace psp
