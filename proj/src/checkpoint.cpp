#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "psp/tensor_io.hpp"
#include "psp/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace psp {

// Checkpoint layout: <dir>/manifest.json plus one PSPTENS1 file per parameter,
// buffer, and optimizer velocity under <dir>/tensors/.

void save_checkpoint(const TrainState& state, const TrainConfig& config, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "tensors");

    json manifest;
    manifest["epoch"] = state.epoch;
    manifest["step"] = state.step;
    manifest["rng"] = state.rng.serialize();
    manifest["classes"] = state.model.classes;
    manifest["config"] = config.to_json();
    json spec;
    spec["joint_to_part"] = state.model.spec.joint_to_part;
    spec["part_to_body"] = state.model.spec.part_to_body;
    spec["names"] = {{"joints", state.model.spec.joint_names},
                     {"parts", state.model.spec.part_names},
                     {"bodies", state.model.spec.body_names}};
    manifest["pyramid"] = spec;

    json history = json::array();
    for (const auto& m : state.history) history.push_back(m.to_json());
    manifest["history"] = history;

    json params = json::array(), buffers = json::array(), velocities = json::array();
    for (const auto& [name, tensor] : state.model.named_parameters()) {
        params.push_back(name);
        save_tensor_file(tensor, (fs::path(dir) / "tensors" / (name + ".pspt")).string());
        // velocity, when this parameter has one
        for (const auto& [node, vel] : state.opt.velocity) {
            if (node.get() == tensor.id()) {
                velocities.push_back(name);
                Tensor v = Tensor::from_data({static_cast<int64_t>(vel.size())},
                                             std::vector<double>(vel));
                save_tensor_file(v, (fs::path(dir) / "tensors" / ("vel." + name + ".pspt"))
                                        .string());
                break;
            }
        }
    }
    for (const auto& [name, tensor] : state.model.named_buffers()) {
        buffers.push_back(name);
        save_tensor_file(tensor, (fs::path(dir) / "tensors" / (name + ".pspt")).string());
    }
    manifest["parameters"] = params;
    manifest["buffers"] = buffers;
    manifest["velocities"] = velocities;

    std::ofstream f(fs::path(dir) / "manifest.json");
    if (!f) throw std::runtime_error("save_checkpoint: cannot write manifest in " + dir);
    f << manifest.dump(2) << '\n';
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
    std::ifstream f(fs::path(dir) / "manifest.json");
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + dir + "/manifest.json");
    json manifest = json::parse(f);

    LoadedCheckpoint out;
    out.config = TrainConfig::from_json(manifest.at("config"));

    PyramidSpec spec;
    const json& js = manifest.at("pyramid");
    spec.joint_to_part = js.at("joint_to_part").get<std::vector<int64_t>>();
    spec.part_to_body = js.at("part_to_body").get<std::vector<int64_t>>();
    spec.joint_names = js.at("names").at("joints").get<std::vector<std::string>>();
    spec.part_names = js.at("names").at("parts").get<std::vector<std::string>>();
    spec.body_names = js.at("names").at("bodies").get<std::vector<std::string>>();
    spec.validate();

    TrainState& state = out.state;
    state.epoch = manifest.at("epoch").get<int64_t>();
    state.step = manifest.at("step").get<int64_t>();
    state.rng = RngState::deserialize(manifest.at("rng").get<std::string>());
    for (const auto& m : manifest.at("history")) {
        state.history.push_back(EpochMetrics::from_json(m));
    }

    // Materialize the model structure, then overwrite every tensor in place.
    RngState scratch(0);
    state.model = init_model(out.config, spec, manifest.at("classes").get<int64_t>(), scratch);

    auto restore = [&](const std::pair<std::string, Tensor>& entry) {
        const auto& [name, tensor] = entry;
        Tensor loaded = load_tensor_file((fs::path(dir) / "tensors" / (name + ".pspt")).string());
        if (loaded.shape() != tensor.shape()) {
            throw std::runtime_error("load_checkpoint: tensor '" + name + "' has shape " +
                                     shape_str(loaded.shape()) + ", expected " +
                                     shape_str(tensor.shape()));
        }
        Tensor dst = tensor;
        dst.raw_data() = loaded.data();
    };
    for (const auto& entry : state.model.named_parameters()) restore(entry);
    for (const auto& entry : state.model.named_buffers()) restore(entry);

    for (const auto& vname : manifest.at("velocities")) {
        const std::string name = vname.get<std::string>();
        Tensor loaded =
            load_tensor_file((fs::path(dir) / "tensors" / ("vel." + name + ".pspt")).string());
        bool found = false;
        for (const auto& [pname, tensor] : state.model.named_parameters()) {
            if (pname == name) {
                Tensor t = tensor;
                state.opt.velocity_for(t) = loaded.data();
                found = true;
                break;
            }
        }
        if (!found) {
            throw std::runtime_error("load_checkpoint: velocity for unknown parameter '" + name +
                                     "'");
        }
    }
    return out;
}

}  // namespace psp
