#pragma once

#include <array>

#include "afnet/model.hpp"
#include "afnet/preprocess.hpp"

namespace afnet {

struct TrainConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    int epochs = 70;
    int batch_size = 16;
    std::uint64_t seed = 0;

    void validate() const;
};

// Subject-disjoint fold assignment: seeded shuffle then round robin.
struct FoldPlan {
    int k = 0;
    std::vector<std::vector<int>> folds;
    std::uint64_t seed = 0;
};
FoldPlan build_folds(std::vector<int> subject_ids, int k, std::uint64_t seed);

struct Sample {
    int subject = 0;
    int label = 0;
    int intensity = 0;
    Tensor texture, depth;  // [3,S,S]
    Tensor mask1, mask2;    // [1,S/4,S/4], [1,S/8,S/8]
};
using Dataset = std::vector<Sample>;

// One sample per (subject, class); expression intensity alternates between
// the two strongest levels by subject. Fully determined by (subjects, S, seed).
Dataset make_synthetic_dataset(int subjects, std::int64_t grid_size, std::uint64_t seed,
                               int grid_n = 120);

Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices);

struct EpochLog {
    double loss = 0;
    double accuracy = 0;
};
struct RunLog {
    std::vector<EpochLog> epochs;
    double wall_ms = 0;
    std::vector<std::pair<std::string, std::string>> config;
};

struct TrainOutput {
    AfnetModel model;
    RunLog log;
};
TrainOutput train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const Dataset& train_set);

// Row = true class, column = argmax prediction (ties to the lowest index).
struct ConfusionMatrix {
    std::array<std::int64_t, 36> counts{};

    std::int64_t& at(int truth, int predicted);
    std::int64_t at(int truth, int predicted) const;
    std::int64_t total() const;
    std::int64_t trace() const;
    double accuracy() const;
    void add(const ConfusionMatrix& other);
    Tensor to_tensor() const;
    std::string pretty() const;
};

struct EvalResult {
    double accuracy = 0;
    ConfusionMatrix confusion;
};
EvalResult evaluate(AfnetModel& model, const Dataset& eval_set, int batch_size = 16);

struct RotationResult {
    int repeat = 0;
    int fold = 0;
    double accuracy = 0;
    ConfusionMatrix confusion;
    RunLog log;
};
struct ProtocolResult {
    double mean_accuracy = 0;
    double std_accuracy = 0;
    std::vector<RotationResult> rotations;
    ConfusionMatrix aggregate;
};
// repeats full rounds of k-fold cross-validation; every rotation trains a
// freshly initialized model on k-1 folds and evaluates the held-out one.
// Rotations are independent and run on `jobs` threads; results are identical
// for any job count.
ProtocolResult run_protocol(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                            const Dataset& dataset, int repeats, int k, int jobs = 1);

enum class AblationAxis { FusionStrategy, MaAndModality, FusionPositions };
const char* ablation_axis_name(AblationAxis axis);
AblationAxis ablation_axis_from_name(const std::string& name);

struct AblationRow {
    std::string label;
    ModelConfig config;
    double mean_accuracy = 0;
    double std_accuracy = 0;
};
struct AblationReport {
    AblationAxis axis = AblationAxis::FusionStrategy;
    std::vector<AblationRow> rows;
};
// Runs the protocol once per configuration along the axis. Orderings are
// reported, never asserted.
AblationReport ablate(const Dataset& dataset, AblationAxis axis, const ModelConfig& base,
                      const TrainConfig& train_cfg, int repeats, int k, int jobs = 1);

// Preprocessed dataset on disk: index.csv naming one tensor file per sample
// plane, all in the binary tensor format.
void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);

// Report files: comma-separated tables plus a text summary; the confusion
// matrix additionally lands in the binary tensor format. Timing never goes
// into these files, so identical seeds give byte-identical reports.
void write_protocol_report(const std::string& dir, const ProtocolResult& result,
                           const ModelConfig& model_cfg, const TrainConfig& train_cfg, int repeats,
                           int k);
void write_ablation_report(const std::string& dir, const AblationReport& report);

}  // namespace afnet
