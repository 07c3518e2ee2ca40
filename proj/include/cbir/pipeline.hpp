#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cbir/cosfire.hpp"
#include "cbir/eval.hpp"
#include "cbir/hashnet.hpp"
#include "cbir/imaging.hpp"
#include "cbir/retrieval.hpp"

namespace cbir::cli {

// Hyperparameter search space for `train --grid`.
struct GridSpace {
    std::vector<int> bits{16, 24, 32, 40, 48, 56, 64, 72, 80};
    std::vector<double> learning_rate{0.1, 0.01};
    std::vector<int> batch_size{32, 48, 64};
    std::vector<double> l1_weight{0.0, 1e-8};
    std::vector<double> l2_weight{0.0, 1e-8};
    std::vector<double> margin{24.0, 36.0, 48.0};
    std::vector<double> alpha{1e-3, 1e-5};

    std::size_t combinations() const;
};

struct PipelineConfig {
    std::filesystem::path manifest;
    std::filesystem::path work_dir{"work"};
    std::uint64_t seed = 0;
    int threads = 1;

    double clip_sigma = 3.0;
    int clip_iters = 20;

    cosfire::Hyperparams cosfire;
    int orientations = 12;
    int filters_per_class = 93;

    hashnet::TrainConfig train;  // train.bits is the code length k
    hashnet::DshLossParams loss;
    std::size_t top_n = 10;
    double threshold = 0.0;  // used by encode when no sweep result exists
    std::vector<double> threshold_grid = retrieval::default_threshold_grid();
    GridSpace grid;

    void validate() const;
};

// Missing keys keep their defaults; unknown keys are rejected. Relative
// paths resolve against `base`.
PipelineConfig config_from_json(const std::string& text, const std::filesystem::path& base = {});
PipelineConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const PipelineConfig& cfg);

// Files under the work directory.
struct WorkLayout {
    std::filesystem::path root;

    std::filesystem::path images() const { return root / "images"; }
    std::filesystem::path manifest() const { return images() / "manifest.csv"; }
    std::filesystem::path bank() const { return root / "bank.json"; }
    std::filesystem::path descriptors(imaging::Split s) const;
    std::filesystem::path model() const { return root / "model.bin"; }
    std::filesystem::path history() const { return root / "history.csv"; }
    std::filesystem::path grid() const { return root / "grid.csv"; }
    std::filesystem::path sweep() const { return root / "sweep.json"; }
    std::filesystem::path codes(imaging::Split s) const;
    std::filesystem::path report() const { return root / "report.json"; }
};

struct DescriptorSet {
    std::vector<std::uint32_t> ids;  // manifest row
    std::vector<int> labels;
    Matrix descriptors;

    hashnet::LabeledSet labeled() const { return {descriptors, labels}; }
};

void write_descriptors(const DescriptorSet& set, const std::vector<std::string>& label_names,
                       const std::filesystem::path& path);
DescriptorSet read_descriptors(const std::filesystem::path& path, const std::vector<std::string>& label_names);

// Stage functions. Each reads its inputs from the work directory and
// returns a JSON summary that is also written next to its outputs.
std::string run_preprocess(const PipelineConfig& cfg);
cosfire::FilterBank run_build_bank(const PipelineConfig& cfg);
std::string run_describe(const PipelineConfig& cfg);
hashnet::TrainResult run_train(const PipelineConfig& cfg);
std::string run_train_grid(const PipelineConfig& cfg);
retrieval::SweepResult run_sweep(const PipelineConfig& cfg);
std::string run_encode(const PipelineConfig& cfg);

struct QueryRequest {
    std::optional<std::filesystem::path> image;
    std::optional<std::filesystem::path> codes;
    std::optional<std::uint32_t> id;
    std::optional<std::filesystem::path> index;  // defaults to the training codes
};

struct QueryOutput {
    std::vector<retrieval::Match> matches;
    std::vector<std::string> label_names;
};

QueryOutput run_query(const PipelineConfig& cfg, const QueryRequest& req);

struct EvaluationReport {
    int bits = 0;
    double threshold = 0.0;
    std::size_t k_eval = 0;
    double valid_map = 0.0;
    double test_map = 0.0;
    eval::PerClassMap test_map_at_r;
    eval::ClassDistanceMatrix train_distances;
    eval::ClassDistanceMatrix test_distances;  // test queries x train references
    double train_separability = 0.0;
    double test_separability = 0.0;
    std::vector<std::string> label_names;
};

EvaluationReport run_evaluate(const PipelineConfig& cfg);

// Writes a synthetic four-class dataset (rawf32 images and a manifest).
std::filesystem::path write_synthetic_dataset(const std::filesystem::path& dir, int per_class, int size,
                                              std::uint64_t seed);

std::string flops_text(int bits);

// Entry point of the `cbir` tool; returns the process exit status.
int run_cli(int argc, char** argv);

}  // namespace cbir::cli
