#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "psp/trainer.hpp"

namespace fs = std::filesystem;

namespace {

psp::PyramidSpec resolve_pyramid(const std::string& pyramid_file, int64_t n_joints) {
    if (!pyramid_file.empty()) return psp::PyramidSpec::load_file(pyramid_file);
    return psp::PyramidSpec::default_for(n_joints);
}

psp::DatasetSplit resolve_split(const std::string& split_file,
                                const std::vector<psp::SkeletonSequence>& dataset,
                                const psp::TrainConfig& config) {
    if (!split_file.empty()) return psp::DatasetSplit::load_file(split_file);
    std::vector<std::pair<std::string, int>> ids;
    for (const auto& seq : dataset) {
        if (seq.label) ids.emplace_back(seq.id, *seq.label);
    }
    psp::RngState rng(config.seed);
    return psp::make_split(ids, config.label_fraction, /*test_fraction=*/0.2, rng,
                           /*stratified=*/true);
}

int run_train(const std::string& config_file, const std::string& data_dir,
              const std::string& out_dir, const std::string& split_file,
              const std::string& pyramid_file, const std::string& resume_dir) {
    auto dataset = psp::load_dataset(data_dir);
    if (dataset.empty()) {
        std::cerr << "train: no sequences in " << data_dir << "\n";
        return 1;
    }
    fs::create_directories(out_dir);
    if (!resume_dir.empty()) {
        psp::LoadedCheckpoint loaded = psp::load_checkpoint(resume_dir);
        psp::DatasetSplit split = resolve_split(split_file, dataset, loaded.config);
        psp::PreparedData prep = psp::PreparedData::build(dataset, split, loaded.config);
        psp::train_epochs(loaded.state, prep, loaded.config, out_dir);
        std::cout << "resumed to epoch " << loaded.state.epoch << "\n";
        return 0;
    }
    psp::TrainConfig config = psp::TrainConfig::load_file(config_file);
    psp::DatasetSplit split = resolve_split(split_file, dataset, config);
    split.save_file(out_dir + "/split.json");
    psp::PyramidSpec spec = resolve_pyramid(pyramid_file, dataset[0].n_joints);
    psp::TrainState state = psp::run_training(dataset, split, config, spec, out_dir);
    const auto& last = state.history.back();
    std::cout << "trained " << state.epoch << " epochs; final L_reg " << last.l_reg
              << ", L_con " << last.l_con;
    if (last.test_acc >= 0) std::cout << ", test accuracy " << last.test_acc;
    std::cout << "\n";
    return 0;
}

int run_eval(const std::string& checkpoint_dir, const std::string& data_dir,
             const std::string& split_file) {
    psp::LoadedCheckpoint loaded = psp::load_checkpoint(checkpoint_dir);
    auto dataset = psp::load_dataset(data_dir);
    std::vector<psp::SkeletonSequence> sampled;
    sampled.reserve(dataset.size());
    if (!split_file.empty()) {
        psp::DatasetSplit split = psp::DatasetSplit::load_file(split_file);
        psp::PreparedData prep = psp::PreparedData::build(dataset, split, loaded.config);
        for (const auto& id : prep.test_ids) sampled.push_back(prep.by_id(id));
    } else {
        for (const auto& seq : dataset) {
            if (seq.label) sampled.push_back(psp::sample_frames(seq, loaded.config.target_frames));
        }
    }
    std::vector<const psp::SkeletonSequence*> test;
    for (const auto& seq : sampled) test.push_back(&seq);
    if (test.empty()) {
        std::cerr << "eval: no labeled test sequences\n";
        return 1;
    }
    psp::EvalResult result = psp::evaluate(test, loaded.state, loaded.config);
    std::printf("accuracy %.4f over %zu sequences\n", result.accuracy, result.predictions.size());
    for (size_t c = 0; c < result.per_class_accuracy.size(); ++c) {
        std::printf("  class %zu: %.4f\n", c, result.per_class_accuracy[c]);
    }
    return 0;
}

int run_synth(int64_t classes, int64_t per_class, const std::string& out_dir, int64_t frames,
              int64_t joints, double noise, uint64_t seed) {
    psp::PyramidSpec spec = psp::PyramidSpec::default_for(joints);
    psp::RngState rng(seed);
    auto seqs = psp::synth_generate(classes, per_class, frames, spec, rng, noise);
    fs::create_directories(out_dir);
    for (const auto& seq : seqs) {
        psp::save_sequence_file(seq, out_dir + "/" + seq.id + ".json");
    }
    std::cout << "wrote " << seqs.size() << " sequences to " << out_dir << "\n";
    return 0;
}

int run_split(const std::string& data_dir, double fraction, double test_fraction,
              const std::string& out_file, uint64_t seed, bool stratified) {
    auto dataset = psp::load_dataset(data_dir);
    std::vector<std::pair<std::string, int>> ids;
    for (const auto& seq : dataset) {
        if (seq.label) ids.emplace_back(seq.id, *seq.label);
    }
    if (ids.empty()) {
        std::cerr << "split: no labeled sequences in " << data_dir << "\n";
        return 1;
    }
    psp::RngState rng(seed);
    psp::DatasetSplit split = psp::make_split(ids, fraction, test_fraction, rng, stratified);
    split.save_file(out_file);
    std::cout << "labeled " << split.labeled.size() << ", unlabeled " << split.unlabeled.size()
              << ", test " << split.test.size() << " -> " << out_file << "\n";
    return 0;
}

int run_gradcheck(uint64_t seed, double threshold) {
    psp::GradCheckReport report = psp::full_pipeline_gradcheck(seed);
    std::printf("checked %lld parameters in %.1fs\n",
                static_cast<long long>(report.n_params), report.seconds);
    std::printf("max relative error %.3e (max abs diff %.3e)\n", report.max_rel_error,
                report.max_abs_diff);
    if (report.max_rel_error < threshold) {
        std::printf("PASS (threshold %.1e)\n", threshold);
        return 0;
    }
    for (const auto& [name, err] : report.per_tensor) {
        if (err >= threshold) std::printf("  FAIL %s: %.3e\n", name.c_str(), err);
    }
    std::printf("FAIL (threshold %.1e)\n", threshold);
    return 1;
}

int run_dump(const std::string& checkpoint_dir, const std::string& data_dir,
             const std::string& out_dir, const std::string& kinds_csv, int64_t samples,
             const std::string& split_file) {
    psp::LoadedCheckpoint loaded = psp::load_checkpoint(checkpoint_dir);
    psp::DumpKinds kinds;
    std::stringstream ss(kinds_csv);
    std::string kind;
    while (std::getline(ss, kind, ',')) {
        if (kind == "attention") {
            kinds.attention = true;
        } else if (kind == "embeddings") {
            kinds.embeddings = true;
        } else if (kind == "metrics") {
            kinds.metrics = true;
        } else {
            std::cerr << "dump: unknown kind '" << kind << "'\n";
            return 2;
        }
    }

    if (kinds.attention || kinds.embeddings) {
        if (data_dir.empty()) {
            std::cerr << "dump: --data is required for attention/embedding dumps\n";
            return 2;
        }
        auto dataset = psp::load_dataset(data_dir);
        std::vector<psp::SkeletonSequence> sampled;
        if (!split_file.empty()) {
            psp::DatasetSplit split = psp::DatasetSplit::load_file(split_file);
            for (const auto& id : split.test) {
                for (const auto& seq : dataset) {
                    if (seq.id == id) {
                        sampled.push_back(psp::sample_frames(seq, loaded.config.target_frames));
                        break;
                    }
                }
                if (static_cast<int64_t>(sampled.size()) >= samples) break;
            }
        } else {
            for (const auto& seq : dataset) {
                sampled.push_back(psp::sample_frames(seq, loaded.config.target_frames));
                if (static_cast<int64_t>(sampled.size()) >= samples) break;
            }
        }
        if (sampled.empty()) {
            std::cerr << "dump: no sequences selected\n";
            return 1;
        }
        std::vector<const psp::SkeletonSequence*> chosen;
        for (const auto& seq : sampled) chosen.push_back(&seq);
        psp::Batch batch = psp::make_batch(chosen, loaded.state.model.classes);
        psp::dump_artifacts(loaded.state, batch, loaded.config, out_dir, kinds);
    } else if (kinds.metrics) {
        psp::Batch empty;
        psp::dump_artifacts(loaded.state, empty, loaded.config, out_dir, kinds);
    }
    std::cout << "artifacts written to " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PSP Learning: pyramid self-attention polymerization training tools"};
    app.require_subcommand(1);

    std::string config_file, data_dir, out_dir, split_file, pyramid_file, resume_dir;
    auto* train = app.add_subcommand("train", "train a model on a psp-json corpus");
    train->add_option("--config", config_file, "training config JSON");
    train->add_option("--data", data_dir, "corpus directory")->required();
    train->add_option("--out", out_dir, "output directory")->required();
    train->add_option("--split", split_file, "split file (otherwise derived from config)");
    train->add_option("--pyramid", pyramid_file, "pyramid spec file (default by joint count)");
    train->add_option("--resume", resume_dir, "checkpoint directory to resume from");

    std::string eval_checkpoint, eval_data, eval_split;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--checkpoint", eval_checkpoint, "checkpoint directory")->required();
    eval->add_option("--data", eval_data, "corpus directory")->required();
    eval->add_option("--split", eval_split, "split file; evaluates its test ids");

    int64_t classes = 4, per_class = 50, frames = 60, joints = 25;
    double noise = 0.05;
    uint64_t seed = 1;
    std::string synth_out;
    auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
    synth->add_option("--classes", classes, "number of classes");
    synth->add_option("--per-class", per_class, "sequences per class");
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--frames", frames, "frames per sequence");
    synth->add_option("--joints", joints, "skeleton joints (25 or 20)");
    synth->add_option("--noise", noise, "coordinate noise sigma");
    synth->add_option("--seed", seed, "generator seed");

    std::string split_data, split_out;
    double fraction = 0.1, test_fraction = 0.2;
    uint64_t split_seed = 1;
    bool stratified = false;
    auto* split = app.add_subcommand("split", "create a labeled/unlabeled/test split");
    split->add_option("--data", split_data, "corpus directory")->required();
    split->add_option("--fraction", fraction, "labeled fraction of the training pool");
    split->add_option("--test-fraction", test_fraction, "held-out test fraction");
    split->add_option("--out", split_out, "output split file")->required();
    split->add_option("--seed", split_seed, "shuffle seed");
    split->add_flag("--stratified", stratified, "per-class allocation");

    uint64_t gc_seed = 1;
    double gc_threshold = 1e-4;
    auto* gradcheck =
        app.add_subcommand("gradcheck", "finite-difference check of the full pipeline");
    gradcheck->add_option("--seed", gc_seed, "parameter/batch seed");
    gradcheck->add_option("--threshold", gc_threshold, "max relative error to accept");

    std::string dump_checkpoint, dump_data, dump_out, dump_split;
    std::string dump_kinds = "attention,embeddings,metrics";
    int64_t dump_samples = 4;
    auto* dump = app.add_subcommand("dump", "write attention/embedding/metrics artifacts");
    dump->add_option("--checkpoint", dump_checkpoint, "checkpoint directory")->required();
    dump->add_option("--data", dump_data, "corpus directory");
    dump->add_option("--out", dump_out, "output directory")->required();
    dump->add_option("--kinds", dump_kinds, "comma list: attention,embeddings,metrics");
    dump->add_option("--samples", dump_samples, "sequences to dump");
    dump->add_option("--split", dump_split, "restrict samples to this split's test ids");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 2;
    }

    try {
        if (train->parsed()) {
            if (resume_dir.empty() && config_file.empty()) {
                std::cerr << "train: --config is required unless --resume is given\n";
                return 2;
            }
            return run_train(config_file, data_dir, out_dir, split_file, pyramid_file,
                             resume_dir);
        }
        if (eval->parsed()) return run_eval(eval_checkpoint, eval_data, eval_split);
        if (synth->parsed()) {
            return run_synth(classes, per_class, synth_out, frames, joints, noise, seed);
        }
        if (split->parsed()) {
            return run_split(split_data, fraction, test_fraction, split_out, split_seed,
                             stratified);
        }
        if (gradcheck->parsed()) return run_gradcheck(gc_seed, gc_threshold);
        if (dump->parsed()) {
            return run_dump(dump_checkpoint, dump_data, dump_out, dump_kinds, dump_samples,
                            dump_split);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
