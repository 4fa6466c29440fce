#include "psp/skeleton.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <stdexcept>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace psp {

// --- PyramidSpec ---------------------------------------------------------------

int64_t PyramidSpec::n_bodies() const {
    int64_t b = 0;
    for (int64_t v : part_to_body) b = std::max(b, v + 1);
    return b;
}

std::vector<int64_t> PyramidSpec::joint_to_body() const {
    std::vector<int64_t> out(joint_to_part.size());
    for (size_t j = 0; j < joint_to_part.size(); ++j) out[j] = part_to_body[joint_to_part[j]];
    return out;
}

void PyramidSpec::validate() const {
    const int64_t p = n_parts();
    const int64_t b = n_bodies();
    if (joint_to_part.empty() || part_to_body.empty()) {
        throw std::invalid_argument("PyramidSpec: affiliation maps must be non-empty");
    }
    std::vector<int64_t> part_count(p, 0), body_count(b, 0);
    for (int64_t v : joint_to_part) {
        if (v < 0 || v >= p) {
            throw std::invalid_argument("PyramidSpec: joint_to_part value " + std::to_string(v) +
                                        " out of range [0," + std::to_string(p) + ")");
        }
        ++part_count[v];
    }
    for (int64_t v : part_to_body) {
        if (v < 0) throw std::invalid_argument("PyramidSpec: negative part_to_body value");
        ++body_count[v];
    }
    for (int64_t i = 0; i < p; ++i) {
        if (part_count[i] == 0) {
            throw std::invalid_argument("PyramidSpec: part " + std::to_string(i) +
                                        " has no joints (map not surjective)");
        }
    }
    for (int64_t i = 0; i < b; ++i) {
        if (body_count[i] == 0) {
            throw std::invalid_argument("PyramidSpec: body " + std::to_string(i) +
                                        " has no parts (map not surjective)");
        }
    }
}

namespace {

const std::vector<std::string> kPartNames = {"head_neck", "torso", "l_arm", "l_hand", "r_arm",
                                             "r_hand",    "l_leg", "l_foot", "r_leg", "r_foot"};
const std::vector<std::string> kBodyNames = {"trunk", "l_upper", "r_upper", "l_lower", "r_lower"};

}  // namespace

PyramidSpec PyramidSpec::default_for(int64_t n_joints) {
    PyramidSpec spec;
    spec.part_to_body = {0, 0, 1, 1, 2, 2, 3, 3, 4, 4};
    spec.part_names = kPartNames;
    spec.body_names = kBodyNames;
    if (n_joints == 25) {
        // Kinect v2 ordering: spine/neck/head, left arm+hand, right arm+hand,
        // left leg+foot, right leg+foot, spine_shoulder, hand tips and thumbs.
        spec.joint_to_part = {1, 1, 0, 0, 2, 2, 2, 3, 4, 4, 4, 5, 6,
                              6, 7, 7, 8, 8, 9, 9, 1, 3, 3, 5, 5};
        spec.joint_names = {"spine_base",     "spine_mid", "neck",    "head",      "l_shoulder",
                            "l_elbow",        "l_wrist",   "l_hand",  "r_shoulder", "r_elbow",
                            "r_wrist",        "r_hand",    "l_hip",   "l_knee",    "l_ankle",
                            "l_foot",         "r_hip",     "r_knee",  "r_ankle",   "r_foot",
                            "spine_shoulder", "l_handtip", "l_thumb", "r_handtip", "r_thumb"};
    } else if (n_joints == 20) {
        // Kinect v1 ordering.
        spec.joint_to_part = {1, 1, 0, 0, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 8, 8, 9, 9};
        spec.joint_names = {"hip_center", "spine",   "shoulder_center", "head",
                            "l_shoulder", "l_elbow", "l_wrist",         "l_hand",
                            "r_shoulder", "r_elbow", "r_wrist",         "r_hand",
                            "l_hip",      "l_knee",  "l_ankle",         "l_foot",
                            "r_hip",      "r_knee",  "r_ankle",         "r_foot"};
    } else {
        throw std::invalid_argument("PyramidSpec::default_for: no built-in partition for " +
                                    std::to_string(n_joints) +
                                    " joints; provide an explicit spec file");
    }
    spec.validate();
    return spec;
}

PyramidSpec PyramidSpec::uniform(int64_t n_joints, int64_t n_parts, int64_t n_bodies) {
    if (n_bodies < 1 || n_parts < n_bodies || n_joints < n_parts) {
        throw std::invalid_argument(
            "PyramidSpec::uniform: need n_joints >= n_parts >= n_bodies >= 1");
    }
    PyramidSpec spec;
    spec.joint_to_part.resize(n_joints);
    spec.part_to_body.resize(n_parts);
    for (int64_t j = 0; j < n_joints; ++j) spec.joint_to_part[j] = j * n_parts / n_joints;
    for (int64_t p = 0; p < n_parts; ++p) spec.part_to_body[p] = p * n_bodies / n_parts;
    for (int64_t j = 0; j < n_joints; ++j) spec.joint_names.push_back("j" + std::to_string(j));
    for (int64_t p = 0; p < n_parts; ++p) spec.part_names.push_back("p" + std::to_string(p));
    for (int64_t b = 0; b < n_bodies; ++b) spec.body_names.push_back("b" + std::to_string(b));
    spec.validate();
    return spec;
}

PyramidSpec PyramidSpec::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("PyramidSpec: cannot open " + path);
    json j = json::parse(f);
    PyramidSpec spec;
    spec.joint_to_part = j.at("joint_to_part").get<std::vector<int64_t>>();
    spec.part_to_body = j.at("part_to_body").get<std::vector<int64_t>>();
    if (j.contains("names")) {
        const auto& n = j.at("names");
        if (n.contains("joints")) spec.joint_names = n.at("joints").get<std::vector<std::string>>();
        if (n.contains("parts")) spec.part_names = n.at("parts").get<std::vector<std::string>>();
        if (n.contains("bodies")) spec.body_names = n.at("bodies").get<std::vector<std::string>>();
    }
    spec.validate();
    return spec;
}

void PyramidSpec::save_file(const std::string& path) const {
    json j;
    j["joint_to_part"] = joint_to_part;
    j["part_to_body"] = part_to_body;
    if (!joint_names.empty() || !part_names.empty() || !body_names.empty()) {
        j["names"] = {{"joints", joint_names}, {"parts", part_names}, {"bodies", body_names}};
    }
    std::ofstream f(path);
    if (!f) throw std::runtime_error("PyramidSpec: cannot write " + path);
    f << j.dump(2) << '\n';
}

// --- DatasetSplit ---------------------------------------------------------------

void DatasetSplit::validate() const {
    if (!(label_fraction > 0.0) || label_fraction > 1.0) {
        throw std::invalid_argument("DatasetSplit: label_fraction must be in (0,1]");
    }
    std::set<std::string> lab(labeled.begin(), labeled.end());
    std::set<std::string> unl(unlabeled.begin(), unlabeled.end());
    for (const auto& id : unl) {
        if (lab.count(id)) {
            throw std::invalid_argument("DatasetSplit: id '" + id +
                                        "' is both labeled and unlabeled");
        }
    }
    for (const auto& id : test) {
        if (lab.count(id) || unl.count(id)) {
            throw std::invalid_argument("DatasetSplit: test id '" + id +
                                        "' also appears in the training pool");
        }
    }
}

DatasetSplit DatasetSplit::load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("DatasetSplit: cannot open " + path);
    json j = json::parse(f);
    DatasetSplit s;
    s.label_fraction = j.at("label_fraction").get<double>();
    s.labeled = j.at("labeled").get<std::vector<std::string>>();
    s.unlabeled = j.at("unlabeled").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
    s.validate();
    return s;
}

void DatasetSplit::save_file(const std::string& path) const {
    json j;
    j["label_fraction"] = label_fraction;
    j["labeled"] = labeled;
    j["unlabeled"] = unlabeled;
    j["test"] = test;
    std::ofstream f(path);
    if (!f) throw std::runtime_error("DatasetSplit: cannot write " + path);
    f << j.dump(2) << '\n';
}

// --- sequence I/O ----------------------------------------------------------------

namespace {

[[noreturn]] void schema_error(const std::string& file, const std::string& field,
                               const std::string& what) {
    throw std::runtime_error("psp-json schema violation in " + file + ": " + field + " " + what);
}

}  // namespace

SkeletonSequence load_sequence_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_sequence_file: cannot open " + path);
    json j;
    try {
        j = json::parse(f);
    } catch (const json::exception& e) {
        throw std::runtime_error("load_sequence_file: " + path + ": " + e.what());
    }

    SkeletonSequence seq;
    if (!j.contains("id") || !j["id"].is_string()) schema_error(path, "id", "must be a string");
    seq.id = j["id"].get<std::string>();
    if (!j.contains("label") || (!j["label"].is_null() && !j["label"].is_number_integer())) {
        schema_error(path, "label", "must be an integer or null");
    }
    if (j["label"].is_number_integer()) seq.label = j["label"].get<int>();
    if (!j.contains("n_joints") || !j["n_joints"].is_number_integer()) {
        schema_error(path, "n_joints", "must be an integer");
    }
    seq.n_joints = j["n_joints"].get<int64_t>();
    if (seq.n_joints < 1) schema_error(path, "n_joints", "must be >= 1");
    if (!j.contains("frames") || !j["frames"].is_array() || j["frames"].empty()) {
        schema_error(path, "frames", "must be a non-empty array");
    }

    const auto& frames = j["frames"];
    seq.n_frames = static_cast<int64_t>(frames.size());
    for (size_t t = 0; t < frames.size(); ++t) {
        const auto& frame = frames[t];
        if (!frame.is_array() || frame.empty()) {
            schema_error(path, "frames[" + std::to_string(t) + "]",
                         "must be a non-empty array of bodies");
        }
        if (t == 0) {
            seq.n_bodies = static_cast<int64_t>(frame.size());
            seq.coords.reserve(seq.n_frames * seq.n_bodies * seq.n_joints * 3);
        } else if (static_cast<int64_t>(frame.size()) != seq.n_bodies) {
            schema_error(path, "frames[" + std::to_string(t) + "]",
                         "body count differs from frame 0");
        }
        for (size_t b = 0; b < frame.size(); ++b) {
            const auto& body = frame[b];
            if (!body.is_array() || static_cast<int64_t>(body.size()) != seq.n_joints) {
                schema_error(path, "frames[" + std::to_string(t) + "][" + std::to_string(b) + "]",
                             "must list n_joints joints");
            }
            for (size_t n = 0; n < body.size(); ++n) {
                const auto& pt = body[n];
                if (!pt.is_array() || pt.size() != 3) {
                    schema_error(path,
                                 "frames[" + std::to_string(t) + "][" + std::to_string(b) + "][" +
                                     std::to_string(n) + "]",
                                 "must be [x,y,z]");
                }
                for (size_t a = 0; a < 3; ++a) {
                    if (!pt[a].is_number()) {
                        schema_error(path,
                                     "frames[" + std::to_string(t) + "][" + std::to_string(b) +
                                         "][" + std::to_string(n) + "][" + std::to_string(a) + "]",
                                     "must be a number");
                    }
                    const double v = pt[a].get<double>();
                    if (!std::isfinite(v)) {
                        schema_error(path,
                                     "frames[" + std::to_string(t) + "][" + std::to_string(b) +
                                         "][" + std::to_string(n) + "][" + std::to_string(a) + "]",
                                     "is not finite");
                    }
                    seq.coords.push_back(v);
                }
            }
        }
    }
    return seq;
}

void save_sequence_file(const SkeletonSequence& seq, const std::string& path) {
    json frames = json::array();
    for (int64_t t = 0; t < seq.n_frames; ++t) {
        json frame = json::array();
        for (int64_t b = 0; b < seq.n_bodies; ++b) {
            json body = json::array();
            for (int64_t n = 0; n < seq.n_joints; ++n) {
                body.push_back({seq.at(t, b, n, 0), seq.at(t, b, n, 1), seq.at(t, b, n, 2)});
            }
            frame.push_back(std::move(body));
        }
        frames.push_back(std::move(frame));
    }
    json j;
    j["id"] = seq.id;
    if (seq.label) {
        j["label"] = *seq.label;
    } else {
        j["label"] = nullptr;
    }
    j["n_joints"] = seq.n_joints;
    j["frames"] = std::move(frames);
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_sequence_file: cannot write " + path);
    f << j.dump() << '\n';
}

std::vector<SkeletonSequence> load_dataset(const std::string& dir) {
    if (!fs::is_directory(dir)) {
        throw std::runtime_error("load_dataset: " + dir + " is not a directory");
    }
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".json") {
            files.push_back(entry.path().string());
        }
    }
    std::sort(files.begin(), files.end());
    std::vector<SkeletonSequence> out;
    out.reserve(files.size());
    for (const auto& f : files) out.push_back(load_sequence_file(f));
    std::sort(out.begin(), out.end(),
              [](const SkeletonSequence& a, const SkeletonSequence& b) { return a.id < b.id; });
    for (size_t i = 1; i < out.size(); ++i) {
        if (out[i].id == out[i - 1].id) {
            throw std::runtime_error("load_dataset: duplicate sequence id '" + out[i].id + "'");
        }
    }
    return out;
}

// --- modality and sampling ---------------------------------------------------------

Tensor to_motion(const Tensor& joint) {
    const Shape& s = joint.shape();
    if (s.size() != 4) {
        throw std::invalid_argument("to_motion: expected [M,3,T,N], got " + shape_str(s));
    }
    const int64_t m = s[0], c = s[1], t = s[2], n = s[3];
    if (t < 2) {
        throw std::invalid_argument("to_motion: need at least 2 frames, got " + std::to_string(t));
    }
    std::vector<double> out(joint.numel(), 0.0);
    const double* p = joint.data().data();
    for (int64_t i = 0; i < m * c; ++i) {
        const double* block = p + i * t * n;
        double* ob = out.data() + i * t * n;
        for (int64_t ti = 0; ti + 1 < t; ++ti) {
            for (int64_t j = 0; j < n; ++j) {
                ob[ti * n + j] = block[(ti + 1) * n + j] - block[ti * n + j];
            }
        }
    }
    return Tensor::from_data(s, std::move(out));
}

SkeletonSequence sample_frames(const SkeletonSequence& seq, int64_t target_t) {
    if (target_t < 2) throw std::invalid_argument("sample_frames: target must be >= 2");
    if (seq.n_frames < 1) throw std::invalid_argument("sample_frames: empty sequence");

    std::vector<int64_t> src_index(target_t);
    if (seq.n_frames >= target_t) {
        for (int64_t i = 0; i < target_t; ++i) src_index[i] = i * seq.n_frames / target_t;
    } else {
        // Tile cyclically to the smallest multiple covering target_t, then stride.
        const int64_t reps = (target_t + seq.n_frames - 1) / seq.n_frames;
        const int64_t tiled = reps * seq.n_frames;
        for (int64_t i = 0; i < target_t; ++i) src_index[i] = (i * tiled / target_t) % seq.n_frames;
    }

    SkeletonSequence out;
    out.id = seq.id;
    out.label = seq.label;
    out.n_frames = target_t;
    out.n_bodies = seq.n_bodies;
    out.n_joints = seq.n_joints;
    const int64_t frame_elems = seq.n_bodies * seq.n_joints * 3;
    out.coords.resize(target_t * frame_elems);
    for (int64_t i = 0; i < target_t; ++i) {
        std::copy_n(seq.coords.begin() + src_index[i] * frame_elems, frame_elems,
                    out.coords.begin() + i * frame_elems);
    }
    return out;
}

Tensor sequence_to_tensor(const SkeletonSequence& seq) {
    std::vector<double> data(3 * seq.n_frames * seq.n_joints);
    for (int64_t a = 0; a < 3; ++a) {
        for (int64_t t = 0; t < seq.n_frames; ++t) {
            for (int64_t j = 0; j < seq.n_joints; ++j) {
                data[(a * seq.n_frames + t) * seq.n_joints + j] = seq.at(t, 0, j, a);
            }
        }
    }
    return Tensor::from_data({3, seq.n_frames, seq.n_joints}, std::move(data));
}

Batch make_batch(const std::vector<const SkeletonSequence*>& seqs, int64_t n_classes) {
    if (seqs.empty()) throw std::invalid_argument("make_batch: empty batch");
    const int64_t m = static_cast<int64_t>(seqs.size());
    const int64_t t = seqs[0]->n_frames, n = seqs[0]->n_joints;
    std::vector<double> joint(m * 3 * t * n);
    bool all_labeled = true;
    for (int64_t i = 0; i < m; ++i) {
        const SkeletonSequence& s = *seqs[i];
        if (s.n_frames != t || s.n_joints != n) {
            throw std::invalid_argument("make_batch: sequence '" + s.id +
                                        "' has mismatched dimensions");
        }
        for (int64_t a = 0; a < 3; ++a) {
            for (int64_t ti = 0; ti < t; ++ti) {
                for (int64_t j = 0; j < n; ++j) {
                    joint[((i * 3 + a) * t + ti) * n + j] = s.at(ti, 0, j, a);
                }
            }
        }
        all_labeled = all_labeled && s.label.has_value();
    }
    Batch batch;
    batch.joint = Tensor::from_data({m, 3, t, n}, std::move(joint));
    batch.motion = to_motion(batch.joint);
    for (const auto* s : seqs) batch.ids.push_back(s->id);
    if (all_labeled && n_classes >= 2) {
        std::vector<double> onehot(m * n_classes, 0.0);
        for (int64_t i = 0; i < m; ++i) {
            const int label = *seqs[i]->label;
            if (label < 0 || label >= n_classes) {
                throw std::invalid_argument("make_batch: label " + std::to_string(label) +
                                            " out of range for " + std::to_string(n_classes) +
                                            " classes");
            }
            onehot[i * n_classes + label] = 1.0;
        }
        batch.labels = Tensor::from_data({m, n_classes}, std::move(onehot));
    }
    return batch;
}

// --- splits --------------------------------------------------------------------------

namespace {

int64_t round_count(double fraction, int64_t n) {
    return std::llround(fraction * static_cast<double>(n));
}

}  // namespace

DatasetSplit make_split(const std::vector<std::pair<std::string, int>>& ids_with_labels,
                        double label_fraction, double test_fraction, RngState& rng,
                        bool stratified) {
    if (!(label_fraction > 0.0) || label_fraction > 1.0) {
        throw std::invalid_argument("make_split: label_fraction must be in (0,1]");
    }
    if (test_fraction < 0.0 || test_fraction >= 1.0) {
        throw std::invalid_argument("make_split: test_fraction must be in [0,1)");
    }
    DatasetSplit split;
    split.label_fraction = label_fraction;

    if (stratified) {
        std::vector<int> classes;
        for (const auto& [id, label] : ids_with_labels) {
            if (std::find(classes.begin(), classes.end(), label) == classes.end()) {
                classes.push_back(label);
            }
        }
        std::sort(classes.begin(), classes.end());
        for (int cls : classes) {
            std::vector<std::string> ids;
            for (const auto& [id, label] : ids_with_labels) {
                if (label == cls) ids.push_back(id);
            }
            rng.shuffle(ids);
            const int64_t n_test = round_count(test_fraction, static_cast<int64_t>(ids.size()));
            const int64_t n_train = static_cast<int64_t>(ids.size()) - n_test;
            if (n_train < 1) {
                throw std::invalid_argument("make_split: class " + std::to_string(cls) +
                                            " has no training items under stratification");
            }
            const int64_t n_lab = std::max<int64_t>(1, round_count(label_fraction, n_train));
            for (int64_t i = 0; i < n_test; ++i) split.test.push_back(ids[i]);
            for (int64_t i = n_test; i < n_test + n_lab; ++i) split.labeled.push_back(ids[i]);
            for (int64_t i = n_test + n_lab; i < static_cast<int64_t>(ids.size()); ++i) {
                split.unlabeled.push_back(ids[i]);
            }
        }
    } else {
        std::vector<std::string> ids;
        for (const auto& [id, label] : ids_with_labels) ids.push_back(id);
        rng.shuffle(ids);
        const int64_t n = static_cast<int64_t>(ids.size());
        const int64_t n_test = round_count(test_fraction, n);
        const int64_t n_train = n - n_test;
        const int64_t n_lab = round_count(label_fraction, n_train);
        for (int64_t i = 0; i < n_test; ++i) split.test.push_back(ids[i]);
        for (int64_t i = n_test; i < n_test + n_lab; ++i) split.labeled.push_back(ids[i]);
        for (int64_t i = n_test + n_lab; i < n; ++i) split.unlabeled.push_back(ids[i]);
    }

    std::sort(split.labeled.begin(), split.labeled.end());
    std::sort(split.unlabeled.begin(), split.unlabeled.end());
    std::sort(split.test.begin(), split.test.end());
    split.validate();
    return split;
}

// --- synthetic corpus -------------------------------------------------------------------

std::vector<SkeletonSequence> synth_generate(int64_t classes, int64_t per_class, int64_t frames,
                                             const PyramidSpec& spec, RngState& rng,
                                             double noise_sigma) {
    if (classes < 2) throw std::invalid_argument("synth_generate: need >= 2 classes");
    if (per_class < 1) throw std::invalid_argument("synth_generate: need per_class >= 1");
    if (frames < 2) throw std::invalid_argument("synth_generate: need >= 2 frames");
    spec.validate();

    const int64_t n = spec.n_joints();
    const int64_t n_groups = spec.n_bodies();
    const auto group_of = spec.joint_to_body();

    // Static base pose, spread deterministically by joint index.
    std::vector<double> base(n * 3);
    for (int64_t j = 0; j < n; ++j) {
        base[j * 3 + 0] = 0.05 * static_cast<double>(j);
        base[j * 3 + 1] = 0.04 * static_cast<double>((j * 7) % 13);
        base[j * 3 + 2] = 0.03 * static_cast<double>((j * 5) % 11);
    }

    std::vector<SkeletonSequence> out;
    out.reserve(classes * per_class);
    for (int64_t c = 0; c < classes; ++c) {
        const int64_t osc_group = c % n_groups;
        const double freq = 1.0 + static_cast<double>(c / n_groups);
        for (int64_t i = 0; i < per_class; ++i) {
            const double amp = rng.uniform(0.9, 1.1);
            const double phase = rng.uniform(-0.2, 0.2);

            SkeletonSequence seq;
            char buf[64];
            std::snprintf(buf, sizeof(buf), "synth_c%02lld_i%04lld", static_cast<long long>(c),
                          static_cast<long long>(i));
            seq.id = buf;
            seq.label = static_cast<int>(c);
            seq.n_frames = frames;
            seq.n_bodies = 1;
            seq.n_joints = n;
            seq.coords.resize(frames * n * 3);
            for (int64_t t = 0; t < frames; ++t) {
                const double osc = amp * 0.5 *
                                   std::sin(2.0 * std::numbers::pi * freq *
                                                static_cast<double>(t) /
                                                static_cast<double>(frames) +
                                            phase);
                for (int64_t j = 0; j < n; ++j) {
                    for (int64_t a = 0; a < 3; ++a) {
                        double v = base[j * 3 + a];
                        if (group_of[j] == osc_group && a == j % 3) v += osc;
                        if (noise_sigma != 0.0) v += rng.normal(0.0, noise_sigma);
                        seq.at(t, 0, j, a) = v;
                    }
                }
            }
            out.push_back(std::move(seq));
        }
    }
    return out;
}

}  // namespace psp
