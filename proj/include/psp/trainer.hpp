#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "psp/ccl.hpp"
#include "psp/encoder.hpp"
#include "psp/ppa.hpp"
#include "psp/rng.hpp"
#include "psp/skeleton.hpp"
#include "psp/tensor.hpp"

namespace psp {

struct AblationConfig {
    bool use_ppa = true;
    bool supervised_only = false;  // disables the contrastive path entirely
    bool joint_level = true;
    bool part_level = true;
    bool body_level = true;
    bool ccl_on_labeled = false;  // also feed labeled batches into CCL
};

struct HyperConfig {
    double lambda = 0.2;
    double alpha = 0.12;
    double beta = 0.24;
    double tau = 0.07;
};

struct ModelConfig {
    int64_t channels = 16;       // C
    int64_t encoder_blocks = 2;  // L
    int64_t encoder_heads = 2;
    int64_t temporal_kernel = 3;
    int64_t ppa_heads = 4;     // S
    int64_t contrast_dim = 32;  // C'
    double dropout_rate = 0.0;
};

struct TrainConfig {
    int64_t batch_size_labeled = 8;
    int64_t batch_size_unlabeled = 8;
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int64_t warmup_epochs = 5;
    int64_t total_epochs = 100;
    std::vector<int64_t> lr_drop_epochs{60, 90};
    uint64_t seed = 1;
    double label_fraction = 0.1;
    int64_t target_frames = 50;  // fixed-length sampling target
    int64_t checkpoint_every = 0;  // epochs; 0 disables
    int64_t eval_batch = 32;
    AblationConfig ablation;
    HyperConfig hyper;
    ModelConfig model;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);  // unknown keys rejected
    // Reads a config file; the PSP_SEED environment variable overrides seed.
    static TrainConfig load_file(const std::string& path);
};

double lr_schedule(int64_t epoch, int64_t step_in_epoch, int64_t steps_per_epoch,
                   const TrainConfig& config);

struct ModelParams {
    EncoderParams encoder;  // shared by the joint and motion streams
    PpaParams ppa;
    ProjectorSet projectors;
    RecognitionParams recognition;
    PyramidSpec spec;
    int64_t classes = 0;

    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    std::vector<std::pair<std::string, Tensor>> named_buffers() const;
    std::vector<Tensor> all_parameters() const;
};

ModelParams init_model(const TrainConfig& config, const PyramidSpec& spec, int64_t classes,
                       RngState& rng);

struct EpochMetrics {
    int64_t epoch = 0;
    double lr = 0.0;
    double l_reg = 0.0;
    double l_con = 0.0;
    double l_z = 0.0;  // body-level contrast loss
    double l_h = 0.0;  // part-level
    double l_g = 0.0;  // joint-level
    double test_acc = -1.0;  // -1 when no test set

    nlohmann::json to_json() const;
    static EpochMetrics from_json(const nlohmann::json& j);
};

struct TrainState {
    int64_t epoch = 0;
    int64_t step = 0;
    ModelParams model;
    SgdState opt;
    RngState rng;
    std::vector<EpochMetrics> history;
};

struct StepResult {
    double total = 0, l_reg = 0, l_con = 0, l_z = 0, l_h = 0, l_g = 0;
};

// One optimization step: recognition loss from the labeled batch, contrastive
// loss from the unlabeled batch, summed, one Nesterov SGD step. Either batch
// may be null; parameters outside the active graphs stay untouched.
StepResult train_step(const Batch* labeled, const Batch* unlabeled, TrainState& state,
                      const TrainConfig& config, double lr);

// Dataset resampled to target_frames and indexed by id.
struct PreparedData {
    std::vector<SkeletonSequence> sampled;
    std::unordered_map<std::string, int64_t> index;
    std::vector<std::string> labeled_ids, unlabeled_ids, test_ids;
    int64_t classes = 0;

    static PreparedData build(const std::vector<SkeletonSequence>& dataset,
                              const DatasetSplit& split, const TrainConfig& config);
    const SkeletonSequence& by_id(const std::string& id) const;
};

struct EvalResult {
    double accuracy = 0.0;
    std::vector<double> per_class_accuracy;
    std::vector<int> predictions;
    std::vector<int> labels;
    std::vector<std::string> ids;
};

EvalResult evaluate(const std::vector<const SkeletonSequence*>& test, TrainState& state,
                    const TrainConfig& config);

// Full training loop. out_dir (optional) receives metrics.jsonl and periodic
// checkpoints. A state with epoch > 0 resumes from that epoch.
TrainState run_training(const std::vector<SkeletonSequence>& dataset, const DatasetSplit& split,
                        const TrainConfig& config, const PyramidSpec& spec,
                        const std::string& out_dir = "");
void train_epochs(TrainState& state, const PreparedData& prep, const TrainConfig& config,
                  const std::string& out_dir);

// --- checkpoints -------------------------------------------------------------

void save_checkpoint(const TrainState& state, const TrainConfig& config, const std::string& dir);
struct LoadedCheckpoint {
    TrainState state;
    TrainConfig config;
};
LoadedCheckpoint load_checkpoint(const std::string& dir);

// --- artifact dumps ----------------------------------------------------------

struct DumpKinds {
    bool attention = false;
    bool embeddings = false;
    bool metrics = false;
};

// Attention CSVs (per sample/head/level, polymerized at part and joint level),
// contrastive-embedding CSV, and the metrics history.
void dump_artifacts(TrainState& state, const Batch& batch, const TrainConfig& config,
                    const std::string& out_dir, const DumpKinds& kinds);

// --- gradient checking ---------------------------------------------------------

struct GradCheckReport {
    double max_rel_error = 0.0;
    double max_abs_diff = 0.0;
    int64_t n_params = 0;
    double seconds = 0.0;
    std::vector<std::pair<std::string, double>> per_tensor;  // max rel error per tensor
};

// Central finite differences (step 1e-6) over every parameter of the
// encoder -> PPA -> CCL -> recognition pipeline on a small configuration.
GradCheckReport full_pipeline_gradcheck(uint64_t seed);

}  // namespace psp
