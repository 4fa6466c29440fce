#include "psp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

using nlohmann::json;

namespace psp {

// --- config ------------------------------------------------------------------

void TrainConfig::validate() const {
    if (batch_size_labeled < 1 || batch_size_unlabeled < 1) {
        throw std::invalid_argument("TrainConfig: batch sizes must be >= 1");
    }
    if (!(lr >= 0.0)) throw std::invalid_argument("TrainConfig: lr must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0) {
        throw std::invalid_argument("TrainConfig: momentum must be in [0,1)");
    }
    if (weight_decay < 0.0) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
    if (warmup_epochs < 0 || total_epochs < 1) {
        throw std::invalid_argument("TrainConfig: bad epoch budget");
    }
    for (size_t i = 0; i < lr_drop_epochs.size(); ++i) {
        if (lr_drop_epochs[i] >= total_epochs ||
            (i > 0 && lr_drop_epochs[i] <= lr_drop_epochs[i - 1])) {
            throw std::invalid_argument(
                "TrainConfig: lr_drop_epochs must be strictly increasing and < total_epochs");
        }
    }
    if (!(label_fraction > 0.0) || label_fraction > 1.0) {
        throw std::invalid_argument("TrainConfig: label_fraction must be in (0,1]");
    }
    if (target_frames < 2) throw std::invalid_argument("TrainConfig: target_frames must be >= 2");
    if (!(hyper.tau > 0.0)) throw std::invalid_argument("TrainConfig: tau must be > 0");
    if (hyper.lambda < 0 || hyper.alpha < 0 || hyper.beta < 0) {
        throw std::invalid_argument("TrainConfig: polymerization coefficients must be >= 0");
    }
    if (!ablation.supervised_only &&
        !(ablation.joint_level || ablation.part_level || ablation.body_level)) {
        throw std::invalid_argument(
            "TrainConfig: contrastive training enabled but no level is selected");
    }
    if (model.channels < 1 || model.channels % model.encoder_heads != 0 ||
        model.channels % model.ppa_heads != 0) {
        throw std::invalid_argument(
            "TrainConfig: channels must be divisible by encoder_heads and ppa_heads");
    }
}

namespace {

void check_known_keys(const json& j, const std::set<std::string>& known,
                      const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) {
            throw std::invalid_argument("TrainConfig: unknown key '" + it.key() + "' in " +
                                        where);
        }
    }
}

template <typename T>
void read_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

json TrainConfig::to_json() const {
    json j;
    j["batch_size_labeled"] = batch_size_labeled;
    j["batch_size_unlabeled"] = batch_size_unlabeled;
    j["lr"] = lr;
    j["momentum"] = momentum;
    j["weight_decay"] = weight_decay;
    j["warmup_epochs"] = warmup_epochs;
    j["total_epochs"] = total_epochs;
    j["lr_drop_epochs"] = lr_drop_epochs;
    j["seed"] = seed;
    j["label_fraction"] = label_fraction;
    j["target_T"] = target_frames;
    j["checkpoint_every"] = checkpoint_every;
    j["eval_batch"] = eval_batch;
    std::vector<std::string> levels;
    if (ablation.joint_level) levels.push_back("joint");
    if (ablation.part_level) levels.push_back("part");
    if (ablation.body_level) levels.push_back("body");
    j["ablation"] = {{"use_ppa", ablation.use_ppa},
                     {"supervised_only", ablation.supervised_only},
                     {"enabled_levels", levels},
                     {"ccl_on_labeled", ablation.ccl_on_labeled}};
    j["hyper"] = {{"lambda", hyper.lambda},
                  {"alpha", hyper.alpha},
                  {"beta", hyper.beta},
                  {"tau", hyper.tau}};
    j["model"] = {{"channels", model.channels},
                  {"encoder_blocks", model.encoder_blocks},
                  {"encoder_heads", model.encoder_heads},
                  {"temporal_kernel", model.temporal_kernel},
                  {"ppa_heads", model.ppa_heads},
                  {"contrast_dim", model.contrast_dim},
                  {"dropout_rate", model.dropout_rate}};
    return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
    check_known_keys(j, {"batch_size_labeled", "batch_size_unlabeled", "lr", "momentum",
                         "weight_decay", "warmup_epochs", "total_epochs", "lr_drop_epochs",
                         "seed", "label_fraction", "target_T", "checkpoint_every", "eval_batch",
                         "ablation", "hyper", "model"},
                     "config");
    TrainConfig c;
    read_if(j, "batch_size_labeled", c.batch_size_labeled);
    read_if(j, "batch_size_unlabeled", c.batch_size_unlabeled);
    read_if(j, "lr", c.lr);
    read_if(j, "momentum", c.momentum);
    read_if(j, "weight_decay", c.weight_decay);
    read_if(j, "warmup_epochs", c.warmup_epochs);
    read_if(j, "total_epochs", c.total_epochs);
    read_if(j, "lr_drop_epochs", c.lr_drop_epochs);
    read_if(j, "seed", c.seed);
    read_if(j, "label_fraction", c.label_fraction);
    read_if(j, "target_T", c.target_frames);
    read_if(j, "checkpoint_every", c.checkpoint_every);
    read_if(j, "eval_batch", c.eval_batch);
    if (j.contains("ablation")) {
        const json& a = j.at("ablation");
        check_known_keys(a, {"use_ppa", "supervised_only", "enabled_levels", "ccl_on_labeled"},
                         "ablation");
        read_if(a, "use_ppa", c.ablation.use_ppa);
        read_if(a, "supervised_only", c.ablation.supervised_only);
        read_if(a, "ccl_on_labeled", c.ablation.ccl_on_labeled);
        if (a.contains("enabled_levels")) {
            c.ablation.joint_level = c.ablation.part_level = c.ablation.body_level = false;
            for (const auto& lvl : a.at("enabled_levels")) {
                const std::string name = lvl.get<std::string>();
                if (name == "joint") {
                    c.ablation.joint_level = true;
                } else if (name == "part") {
                    c.ablation.part_level = true;
                } else if (name == "body") {
                    c.ablation.body_level = true;
                } else {
                    throw std::invalid_argument("TrainConfig: unknown contrast level '" + name +
                                                "'");
                }
            }
        }
    }
    if (j.contains("hyper")) {
        const json& h = j.at("hyper");
        check_known_keys(h, {"lambda", "alpha", "beta", "tau"}, "hyper");
        read_if(h, "lambda", c.hyper.lambda);
        read_if(h, "alpha", c.hyper.alpha);
        read_if(h, "beta", c.hyper.beta);
        read_if(h, "tau", c.hyper.tau);
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        check_known_keys(m,
                         {"channels", "encoder_blocks", "encoder_heads", "temporal_kernel",
                          "ppa_heads", "contrast_dim", "dropout_rate"},
                         "model");
        read_if(m, "channels", c.model.channels);
        read_if(m, "encoder_blocks", c.model.encoder_blocks);
        read_if(m, "encoder_heads", c.model.encoder_heads);
        read_if(m, "temporal_kernel", c.model.temporal_kernel);
        read_if(m, "ppa_heads", c.model.ppa_heads);
        read_if(m, "contrast_dim", c.model.contrast_dim);
        read_if(m, "dropout_rate", c.model.dropout_rate);
    }
    c.validate();
    return c;
}

TrainConfig TrainConfig::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("TrainConfig: cannot open " + path);
    TrainConfig c = from_json(json::parse(f));
    if (const char* env = std::getenv("PSP_SEED")) {
        c.seed = std::strtoull(env, nullptr, 10);
    }
    return c;
}

double lr_schedule(int64_t epoch, int64_t step_in_epoch, int64_t steps_per_epoch,
                   const TrainConfig& config) {
    if (epoch >= config.total_epochs) {
        throw std::invalid_argument("lr_schedule: epoch beyond the training budget");
    }
    if (config.warmup_epochs > 0 && epoch < config.warmup_epochs) {
        const double done = static_cast<double>(epoch * steps_per_epoch + step_in_epoch);
        const double span = static_cast<double>(config.warmup_epochs * steps_per_epoch);
        return config.lr * (done / span);
    }
    double lr = config.lr;
    for (int64_t drop : config.lr_drop_epochs) {
        if (epoch >= drop) lr /= 10.0;
    }
    return lr;
}

// --- model -------------------------------------------------------------------

ModelParams init_model(const TrainConfig& config, const PyramidSpec& spec, int64_t classes,
                       RngState& rng) {
    config.validate();
    spec.validate();
    if (classes < 2) throw std::invalid_argument("init_model: need >= 2 classes");

    EncoderConfig enc;
    enc.hidden_channels = config.model.channels;
    enc.blocks = config.model.encoder_blocks;
    enc.heads = config.model.encoder_heads;
    enc.temporal_kernel = config.model.temporal_kernel;
    enc.n_nodes = spec.n_joints();
    enc.dropout_rate = config.model.dropout_rate;

    PpaConfig ppa;
    ppa.channels = config.model.channels;
    ppa.frames = config.target_frames;
    ppa.heads = config.model.ppa_heads;
    ppa.lambda = config.hyper.lambda;
    ppa.alpha = config.hyper.alpha;
    ppa.beta = config.hyper.beta;

    ModelParams m;
    m.encoder = init_encoder(enc, rng);
    m.ppa = init_ppa(ppa, rng);
    m.projectors = init_projectors(config.model.channels, config.model.contrast_dim, rng);
    m.recognition = init_recognition(config.model.channels, classes, rng);
    m.spec = spec;
    m.classes = classes;
    return m;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_parameters() const {
    auto out = encoder.named_parameters("encoder");
    for (auto& p : ppa.named_parameters("ppa")) out.push_back(p);
    for (auto& p : projectors.named_parameters("proj")) out.push_back(p);
    for (auto& p : recognition.named_parameters("fc")) out.push_back(p);
    return out;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_buffers() const {
    auto out = encoder.named_buffers("encoder");
    for (auto& p : ppa.named_buffers("ppa")) out.push_back(p);
    return out;
}

std::vector<Tensor> ModelParams::all_parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

// --- metrics -----------------------------------------------------------------

json EpochMetrics::to_json() const {
    json j;
    j["epoch"] = epoch;
    j["lr"] = lr;
    j["L_reg"] = l_reg;
    j["L_con"] = l_con;
    j["L_z"] = l_z;
    j["L_h"] = l_h;
    j["L_g"] = l_g;
    if (test_acc >= 0.0) {
        j["test_acc"] = test_acc;
    } else {
        j["test_acc"] = nullptr;
    }
    return j;
}

EpochMetrics EpochMetrics::from_json(const json& j) {
    EpochMetrics m;
    m.epoch = j.at("epoch").get<int64_t>();
    m.lr = j.at("lr").get<double>();
    m.l_reg = j.at("L_reg").get<double>();
    m.l_con = j.at("L_con").get<double>();
    m.l_z = j.at("L_z").get<double>();
    m.l_h = j.at("L_h").get<double>();
    m.l_g = j.at("L_g").get<double>();
    m.test_acc = j.at("test_acc").is_null() ? -1.0 : j.at("test_acc").get<double>();
    return m;
}

// --- data preparation ----------------------------------------------------------

PreparedData PreparedData::build(const std::vector<SkeletonSequence>& dataset,
                                 const DatasetSplit& split, const TrainConfig& config) {
    split.validate();
    PreparedData prep;
    prep.sampled.reserve(dataset.size());
    int max_label = -1;
    for (const auto& seq : dataset) {
        prep.sampled.push_back(sample_frames(seq, config.target_frames));
        prep.index[seq.id] = static_cast<int64_t>(prep.sampled.size()) - 1;
        if (seq.label) max_label = std::max(max_label, *seq.label);
    }
    prep.classes = max_label + 1;
    auto check_ids = [&](const std::vector<std::string>& ids, const char* which) {
        for (const auto& id : ids) {
            if (!prep.index.count(id)) {
                throw std::invalid_argument("run_training: split " + std::string(which) +
                                            " id '" + id + "' not present in the dataset");
            }
        }
    };
    check_ids(split.labeled, "labeled");
    check_ids(split.unlabeled, "unlabeled");
    check_ids(split.test, "test");
    prep.labeled_ids = split.labeled;
    prep.unlabeled_ids = split.unlabeled;
    prep.test_ids = split.test;
    for (const auto& id : prep.labeled_ids) {
        if (!prep.by_id(id).label) {
            throw std::invalid_argument("run_training: labeled id '" + id + "' has no label");
        }
    }
    for (const auto& id : prep.test_ids) {
        if (!prep.by_id(id).label) {
            throw std::invalid_argument("run_training: test id '" + id + "' has no label");
        }
    }
    if (prep.classes < 2) {
        throw std::invalid_argument("run_training: dataset labels span fewer than 2 classes");
    }
    return prep;
}

const SkeletonSequence& PreparedData::by_id(const std::string& id) const {
    return sampled[index.at(id)];
}

// --- training step ----------------------------------------------------------------

namespace {

ContrastConfig contrast_config(const TrainConfig& config) {
    ContrastConfig c;
    c.tau = config.hyper.tau;
    c.joint_level = config.ablation.joint_level;
    c.part_level = config.ablation.part_level;
    c.body_level = config.ablation.body_level;
    return c;
}

struct ContrastTerms {
    Tensor total, body, part, joint;
};

// Encoder + (PPA or plain pyramid) + CCL for one batch.
ContrastTerms contrastive_forward(const Batch& batch, TrainState& state,
                                  const TrainConfig& config) {
    Tensor fj = encode(batch.joint, state.model.encoder, /*train=*/true, &state.rng);
    Tensor fm = encode(batch.motion, state.model.encoder, /*train=*/true, &state.rng);
    LevelFeatures lj, lm;
    if (config.ablation.use_ppa) {
        lj = ppa_forward(fj, state.model.spec, state.model.ppa, /*train=*/true).features;
        lm = ppa_forward(fm, state.model.spec, state.model.ppa, /*train=*/true).features;
    } else {
        lj = pyramid_transform(fj, state.model.spec);
        lm = pyramid_transform(fm, state.model.spec);
    }
    CclResult ccl = ccl_total(lj, lm, state.model.projectors, contrast_config(config));
    return {ccl.total, ccl.body, ccl.part, ccl.joint};
}

double item_or_zero(const Tensor& t) { return t.defined() ? t.item() : 0.0; }

}  // namespace

StepResult train_step(const Batch* labeled, const Batch* unlabeled, TrainState& state,
                      const TrainConfig& config, double lr) {
    if (labeled == nullptr && unlabeled == nullptr) {
        throw std::invalid_argument("train_step: both batches absent");
    }
    Tape::active().clear();
    for (auto& [name, t] : state.model.named_parameters()) {
        Tensor tensor = t;
        tensor.zero_grad();
    }

    Tensor l_reg, l_con;
    StepResult result;
    if (labeled != nullptr) {
        if (!labeled->labels.defined()) {
            throw std::invalid_argument("train_step: labeled batch has no labels");
        }
        Tensor fj = encode(labeled->joint, state.model.encoder, /*train=*/true, &state.rng);
        Tensor fm = encode(labeled->motion, state.model.encoder, /*train=*/true, &state.rng);
        l_reg = recognition_head(fj, fm, state.model.recognition, labeled->labels).loss;
    }
    if (!config.ablation.supervised_only) {
        auto accumulate = [&](const ContrastTerms& terms) {
            l_con = l_con.defined() ? add(l_con, terms.total) : terms.total;
            result.l_z += item_or_zero(terms.body);
            result.l_h += item_or_zero(terms.part);
            result.l_g += item_or_zero(terms.joint);
        };
        if (unlabeled != nullptr) accumulate(contrastive_forward(*unlabeled, state, config));
        if (labeled != nullptr && config.ablation.ccl_on_labeled) {
            accumulate(contrastive_forward(*labeled, state, config));
        }
    }

    Tensor total = total_loss(l_con, l_reg);
    backward(total);
    auto params = state.model.all_parameters();
    sgd_nesterov_step(params, lr, config.momentum, config.weight_decay, state.opt);
    Tape::active().clear();

    result.total = total.item();
    result.l_reg = item_or_zero(l_reg);
    result.l_con = item_or_zero(l_con);
    ++state.step;
    return result;
}

// --- evaluation ---------------------------------------------------------------------

EvalResult evaluate(const std::vector<const SkeletonSequence*>& test, TrainState& state,
                    const TrainConfig& config) {
    if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
    NoGradGuard ng;
    EvalResult out;
    out.per_class_accuracy.assign(state.model.classes, 0.0);
    std::vector<int64_t> per_class_total(state.model.classes, 0);
    std::vector<int64_t> per_class_correct(state.model.classes, 0);

    const int64_t bs = std::max<int64_t>(1, config.eval_batch);
    for (size_t start = 0; start < test.size(); start += bs) {
        std::vector<const SkeletonSequence*> chunk(
            test.begin() + start,
            test.begin() + std::min(test.size(), start + static_cast<size_t>(bs)));
        Batch batch = make_batch(chunk, state.model.classes);
        Tensor fj = encode(batch.joint, state.model.encoder, /*train=*/false);
        Tensor fm = encode(batch.motion, state.model.encoder, /*train=*/false);
        Tensor pooled_j = reduce_mean(fj, {2, 3});
        Tensor pooled_m = reduce_mean(fm, {2, 3});
        Tensor logits = add(linear(pooled_j, state.model.recognition.w_joint,
                                   state.model.recognition.b_joint),
                            linear(pooled_m, state.model.recognition.w_motion,
                                   state.model.recognition.b_motion));
        const int64_t m = logits.shape()[0];
        const int64_t classes = logits.shape()[1];
        for (int64_t i = 0; i < m; ++i) {
            int best = 0;  // ties go to the lowest class index
            for (int64_t c = 1; c < classes; ++c) {
                if (logits.data()[i * classes + c] > logits.data()[i * classes + best]) {
                    best = static_cast<int>(c);
                }
            }
            const int truth = *chunk[i]->label;
            out.predictions.push_back(best);
            out.labels.push_back(truth);
            out.ids.push_back(chunk[i]->id);
            ++per_class_total[truth];
            if (best == truth) ++per_class_correct[truth];
        }
    }
    int64_t correct = 0;
    for (size_t c = 0; c < per_class_total.size(); ++c) {
        correct += per_class_correct[c];
        out.per_class_accuracy[c] =
            per_class_total[c] > 0
                ? static_cast<double>(per_class_correct[c]) / per_class_total[c]
                : 0.0;
    }
    out.accuracy = static_cast<double>(correct) / static_cast<double>(out.predictions.size());
    return out;
}

// --- training loop --------------------------------------------------------------------

void train_epochs(TrainState& state, const PreparedData& prep, const TrainConfig& config,
                  const std::string& out_dir) {
    config.validate();
    if (prep.labeled_ids.empty()) {
        throw std::invalid_argument("run_training: labeled set is empty");
    }
    const bool contrastive = !config.ablation.supervised_only;
    std::ofstream metrics_file;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        metrics_file.open(out_dir + "/metrics.jsonl",
                          state.epoch > 0 ? std::ios::app : std::ios::trunc);
    }

    auto batches_of = [&](const std::vector<std::string>& ids, int64_t bs) {
        std::vector<std::vector<const SkeletonSequence*>> out;
        for (size_t start = 0; start < ids.size(); start += bs) {
            std::vector<const SkeletonSequence*> chunk;
            for (size_t i = start; i < std::min(ids.size(), start + static_cast<size_t>(bs));
                 ++i) {
                chunk.push_back(&prep.by_id(ids[i]));
            }
            out.push_back(std::move(chunk));
        }
        return out;
    };

    for (int64_t epoch = state.epoch; epoch < config.total_epochs; ++epoch) {
        std::vector<std::string> lab = prep.labeled_ids;
        state.rng.shuffle(lab);
        std::vector<std::string> unl;
        if (contrastive) {
            unl = prep.unlabeled_ids;
            state.rng.shuffle(unl);
        }
        auto lab_batches = batches_of(lab, config.batch_size_labeled);
        auto unl_batches = batches_of(unl, config.batch_size_unlabeled);
        const int64_t n_steps = std::max<int64_t>(
            static_cast<int64_t>(lab_batches.size()), static_cast<int64_t>(unl_batches.size()));

        EpochMetrics metrics;
        metrics.epoch = epoch;
        int64_t reg_steps = 0, con_steps = 0;
        for (int64_t s = 0; s < n_steps; ++s) {
            Batch labeled_batch, unlabeled_batch;
            const Batch* lab_ptr = nullptr;
            const Batch* unl_ptr = nullptr;
            if (s < static_cast<int64_t>(lab_batches.size())) {
                labeled_batch = make_batch(lab_batches[s], prep.classes);
                lab_ptr = &labeled_batch;
            }
            if (s < static_cast<int64_t>(unl_batches.size())) {
                unlabeled_batch = make_batch(unl_batches[s], prep.classes);
                unl_ptr = &unlabeled_batch;
            }
            const double lr = lr_schedule(epoch, s, n_steps, config);
            metrics.lr = lr;
            StepResult r = train_step(lab_ptr, unl_ptr, state, config, lr);
            if (lab_ptr != nullptr) {
                metrics.l_reg += r.l_reg;
                ++reg_steps;
            }
            if (unl_ptr != nullptr || (lab_ptr != nullptr && config.ablation.ccl_on_labeled)) {
                metrics.l_con += r.l_con;
                metrics.l_z += r.l_z;
                metrics.l_h += r.l_h;
                metrics.l_g += r.l_g;
                ++con_steps;
            }
        }
        if (reg_steps > 0) metrics.l_reg /= static_cast<double>(reg_steps);
        if (con_steps > 0 && contrastive) {
            metrics.l_con /= static_cast<double>(con_steps);
            metrics.l_z /= static_cast<double>(con_steps);
            metrics.l_h /= static_cast<double>(con_steps);
            metrics.l_g /= static_cast<double>(con_steps);
        }

        if (!prep.test_ids.empty()) {
            std::vector<const SkeletonSequence*> test;
            for (const auto& id : prep.test_ids) test.push_back(&prep.by_id(id));
            metrics.test_acc = evaluate(test, state, config).accuracy;
        }
        state.history.push_back(metrics);
        state.epoch = epoch + 1;
        if (metrics_file.is_open()) {
            metrics_file << metrics.to_json().dump() << '\n';
            metrics_file.flush();
        }
        if (!out_dir.empty() && config.checkpoint_every > 0 &&
            (epoch + 1) % config.checkpoint_every == 0) {
            save_checkpoint(state, config, out_dir + "/checkpoint");
        }
    }
    if (!out_dir.empty()) save_checkpoint(state, config, out_dir + "/checkpoint");
}

TrainState run_training(const std::vector<SkeletonSequence>& dataset, const DatasetSplit& split,
                        const TrainConfig& config, const PyramidSpec& spec,
                        const std::string& out_dir) {
    config.validate();
    PreparedData prep = PreparedData::build(dataset, split, config);
    TrainState state;
    state.rng = RngState(config.seed);
    state.model = init_model(config, spec, prep.classes, state.rng);
    train_epochs(state, prep, config, out_dir);
    return state;
}

}  // namespace psp
