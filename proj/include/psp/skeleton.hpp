#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "psp/rng.hpp"
#include "psp/tensor.hpp"

namespace psp {

// A raw skeleton recording: T frames x bodies x N joints x 3 coordinates.
struct SkeletonSequence {
    std::string id;
    std::optional<int> label;
    int64_t n_frames = 0;
    int64_t n_bodies = 0;
    int64_t n_joints = 0;
    std::vector<double> coords;  // [T][bodies][N][3] row-major

    double at(int64_t t, int64_t body, int64_t joint, int64_t axis) const {
        return coords[((t * n_bodies + body) * n_joints + joint) * 3 + axis];
    }
    double& at(int64_t t, int64_t body, int64_t joint, int64_t axis) {
        return coords[((t * n_bodies + body) * n_joints + joint) * 3 + axis];
    }
};

// The joint -> part -> body affiliation maps of the skeleton hierarchy.
struct PyramidSpec {
    std::vector<int64_t> joint_to_part;  // size N, values in [0, P)
    std::vector<int64_t> part_to_body;   // size P, values in [0, B)
    std::vector<std::string> joint_names, part_names, body_names;  // optional

    int64_t n_joints() const { return static_cast<int64_t>(joint_to_part.size()); }
    int64_t n_parts() const { return static_cast<int64_t>(part_to_body.size()); }
    int64_t n_bodies() const;
    std::vector<int64_t> joint_to_body() const;  // composed affiliation

    // Throws unless both maps are total and surjective.
    void validate() const;

    // Built-in partitions for the 25- and 20-joint skeletons (P=10, B=5).
    static PyramidSpec default_for(int64_t n_joints);
    // Contiguous even blocks, for small test configurations.
    static PyramidSpec uniform(int64_t n_joints, int64_t n_parts, int64_t n_bodies);

    static PyramidSpec load_file(const std::string& path);
    void save_file(const std::string& path) const;
};

struct DatasetSplit {
    double label_fraction = 1.0;
    std::vector<std::string> labeled, unlabeled, test;

    void validate() const;  // disjointness, fraction range
    static DatasetSplit load_file(const std::string& path);
    void save_file(const std::string& path) const;
};

// A model-ready minibatch. motion[.,.,t,.] = joint[.,.,t+1,.] - joint[.,.,t,.]
// for t < T-1 and zero at t = T-1.
struct Batch {
    Tensor joint;   // [M, 3, T, N]
    Tensor motion;  // [M, 3, T, N]
    Tensor labels;  // one-hot [M, classes], undefined when any label is missing
    std::vector<std::string> ids;
};

// psp-json corpus I/O. Sequences come back sorted by id.
SkeletonSequence load_sequence_file(const std::string& path);
void save_sequence_file(const SkeletonSequence& seq, const std::string& path);
std::vector<SkeletonSequence> load_dataset(const std::string& dir);

// Forward temporal difference with a zero final frame.
Tensor to_motion(const Tensor& joint);

// Uniform-stride resampling to target_t frames; short sequences repeat
// cyclically before sampling.
SkeletonSequence sample_frames(const SkeletonSequence& seq, int64_t target_t);

// First tracked body of one sequence as a [3, T, N] tensor.
Tensor sequence_to_tensor(const SkeletonSequence& seq);
Batch make_batch(const std::vector<const SkeletonSequence*>& seqs, int64_t n_classes);

// Deterministic labeled/unlabeled/test partition. Stratified mode allocates
// max(1, round(fraction * class_train_count)) labeled items per class.
DatasetSplit make_split(const std::vector<std::pair<std::string, int>>& ids_with_labels,
                        double label_fraction, double test_fraction, RngState& rng,
                        bool stratified);

// Synthetic corpus: each class oscillates one body-level group of the skeleton
// at a class-specific frequency; Gaussian coordinate noise on top. Classes are
// separable at zero noise.
std::vector<SkeletonSequence> synth_generate(int64_t classes, int64_t per_class, int64_t frames,
                                             const PyramidSpec& spec, RngState& rng,
                                             double noise_sigma);

}  // namespace psp
