#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cbir/matrix.hpp"

namespace cbir::hashnet {

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

struct Linear {
    Matrix weight;  // fan_in x fan_out
    RowVector bias;
};

struct BatchNorm {
    RowVector gamma;
    RowVector beta;
    RowVector running_mean;
    RowVector running_var;
};

// input -> hidden1 -> hidden2 -> bits. Batch norm follows the two hidden
// linear layers; every layer ends in tanh.
struct MlpParams {
    Linear fc1, fc2, fc3;
    BatchNorm bn1, bn2;

    std::array<int, 4> dims() const;
    int input_size() const { return dims()[0]; }
    int bits() const { return dims()[3]; }
};

// Weights and biases ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)); gamma 1, beta 0,
// running mean 0, running variance 1.
MlpParams init_params(std::array<int, 4> dims, std::uint64_t seed);

enum class Mode { train, infer };

// Train mode normalizes with batch statistics and folds them into the
// running averages; infer mode uses the running averages and is pure.
Matrix forward(const Matrix& batch, MlpParams& params, Mode mode);
Matrix infer(const Matrix& batch, const MlpParams& params);

struct DshLossParams {
    double margin = 24.0;
    double alpha = 1e-3;  // quantization regularizer weight
    double l1_weight = 0.0;
    double l2_weight = 0.0;

    void validate() const;
};

// Pairwise loss for one code pair; y = 0 similar, y = 1 dissimilar.
double dsh_loss(std::span<const double> b1, std::span<const double> b2, int y, const DshLossParams& lp);

struct PairGradient {
    std::vector<double> d1;
    std::vector<double> d2;
};

// Analytic subgradient; zero-side choice at the hinge and at |b_j| = 1.
PairGradient dsh_loss_grad(std::span<const double> b1, std::span<const double> b2, int y, const DshLossParams& lp);

struct Pair {
    std::size_t i;
    std::size_t j;
    int y;

    bool operator==(const Pair&) const = default;
};

// All unordered pairs (i < j) of a minibatch, y = 0 iff labels match.
std::vector<Pair> pair_batch(std::span<const int> labels);

struct Gradients {
    Matrix w1, w2, w3;
    RowVector b1, b2, b3;
    RowVector gamma1, beta1, gamma2, beta2;
};

// Mean pairwise loss over the batch plus l1 * sum|W| + l2 * sum W^2, with
// train-mode batch norm. Pure: running statistics are untouched. Fills
// grads when non-null.
double batch_objective(const MlpParams& params, const Matrix& batch, std::span<const int> labels,
                       const DshLossParams& lp, Gradients* grads = nullptr);

struct TrainConfig {
    double learning_rate = 0.01;
    int batch_size = 32;
    int epochs = 100;
    std::uint64_t seed = 0;
    int patience = 20;  // epochs without validation gain; 0 disables early stopping
    int hidden1 = 300;
    int hidden2 = 200;
    int bits = 72;
    std::size_t k_eval = 100;
    double eval_threshold = 0.0;

    void validate() const;
};

struct LabeledSet {
    Matrix descriptors;
    std::vector<int> labels;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double valid_map = 0.0;

    bool operator==(const EpochRecord&) const = default;
};

struct TrainResult {
    MlpParams params;
    std::vector<EpochRecord> history;
    int best_epoch = 0;
};

// Plain minibatch gradient descent, seeded and single-threaded. Returns the
// parameters of the epoch with the best validation mAP@k_eval.
TrainResult train(const LabeledSet& train_set, const LabeledSet& valid_set, int bank_size, const TrainConfig& cfg,
                  const DshLossParams& lp);

inline constexpr std::uint32_t kModelVersion = 1;

std::vector<unsigned char> encode_model(const MlpParams& params);
MlpParams decode_model(std::span<const unsigned char> bytes);

// Binary "CHSH" model plus a JSON sidecar (path + ".json") with the training settings.
void save_model(const MlpParams& params, const std::filesystem::path& path, const TrainConfig& cfg,
                const DshLossParams& lp);
MlpParams load_model(const std::filesystem::path& path);

std::string to_json(const TrainConfig& cfg, const DshLossParams& lp);

}  // namespace cbir::hashnet
