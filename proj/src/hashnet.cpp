#include "cbir/hashnet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "cbir/error.hpp"
#include "cbir/eval.hpp"
#include "cbir/retrieval.hpp"
#include "json.hpp"

namespace cbir::hashnet {

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

struct BatchNormTrace {
    RowVector mean;
    RowVector var;  // biased
    RowVector inv_std;
    Matrix xhat;
};

struct ForwardTrace {
    Matrix a1, a2, out;
    BatchNormTrace n1, n2;
};

Matrix affine(const Matrix& x, const Linear& l) {
    Matrix z = x * l.weight;
    z.rowwise() += l.bias;
    return z;
}

Matrix batchnorm_train(const Matrix& z, const BatchNorm& bn, BatchNormTrace& t) {
    const double n = static_cast<double>(z.rows());
    t.mean = z.colwise().mean();
    Matrix centered = z.rowwise() - t.mean;
    t.var = centered.array().square().colwise().sum() / n;
    t.inv_std = (t.var.array() + kBatchNormEpsilon).rsqrt();
    t.xhat = centered.array().rowwise() * t.inv_std.array();
    Matrix y = t.xhat.array().rowwise() * bn.gamma.array();
    y.rowwise() += bn.beta;
    return y;
}

Matrix batchnorm_infer(const Matrix& z, const BatchNorm& bn) {
    const RowVector scale = bn.gamma.array() * (bn.running_var.array() + kBatchNormEpsilon).rsqrt();
    Matrix y = (z.rowwise() - bn.running_mean).array().rowwise() * scale.array();
    y.rowwise() += bn.beta;
    return y;
}

void fold_running_stats(BatchNorm& bn, const BatchNormTrace& t, Eigen::Index batch) {
    const double n = static_cast<double>(batch);
    const RowVector unbiased = batch > 1 ? RowVector(t.var * (n / (n - 1.0))) : t.var;
    bn.running_mean = (1.0 - kBatchNormMomentum) * bn.running_mean + kBatchNormMomentum * t.mean;
    bn.running_var = (1.0 - kBatchNormMomentum) * bn.running_var + kBatchNormMomentum * unbiased;
}

void check_input(const Matrix& batch, const MlpParams& p) {
    if (batch.cols() != p.fc1.weight.rows()) {
        throw Error(ErrorCode::dimension_mismatch, "descriptor length " + std::to_string(batch.cols()) +
                                                       " does not match network input " +
                                                       std::to_string(p.fc1.weight.rows()));
    }
    if (batch.rows() == 0) throw Error(ErrorCode::empty_input, "empty batch");
}

ForwardTrace forward_train(const Matrix& x, const MlpParams& p) {
    ForwardTrace t;
    t.a1 = batchnorm_train(affine(x, p.fc1), p.bn1, t.n1).array().tanh();
    t.a2 = batchnorm_train(affine(t.a1, p.fc2), p.bn2, t.n2).array().tanh();
    t.out = affine(t.a2, p.fc3).array().tanh();
    return t;
}

// dL/dz for z -> batchnorm -> y given dL/dy.
Matrix batchnorm_backward(const Matrix& dy, const BatchNorm& bn, const BatchNormTrace& t, RowVector& dgamma,
                          RowVector& dbeta) {
    const double n = static_cast<double>(dy.rows());
    dgamma = (dy.array() * t.xhat.array()).colwise().sum();
    dbeta = dy.colwise().sum();
    const Matrix dxhat = dy.array().rowwise() * bn.gamma.array();
    const RowVector sum_dxhat = dxhat.colwise().sum();
    const RowVector sum_dxhat_xhat = (dxhat.array() * t.xhat.array()).colwise().sum();
    Matrix dz = (n * dxhat).rowwise() - sum_dxhat;
    dz -= (t.xhat.array().rowwise() * sum_dxhat_xhat.array()).matrix();
    return dz.array().rowwise() * (t.inv_std.array() / n);
}

}  // namespace

std::array<int, 4> MlpParams::dims() const {
    return {static_cast<int>(fc1.weight.rows()), static_cast<int>(fc1.weight.cols()),
            static_cast<int>(fc2.weight.cols()), static_cast<int>(fc3.weight.cols())};
}

MlpParams init_params(std::array<int, 4> dims, std::uint64_t seed) {
    for (int d : dims) {
        if (d <= 0) throw Error(ErrorCode::invalid_argument, "network dimensions must be positive");
    }
    std::mt19937_64 rng(seed);
    auto linear = [&](int fan_in, int fan_out) {
        const double bound = std::sqrt(1.0 / fan_in);
        std::uniform_real_distribution<double> u(-bound, bound);
        Linear l{Matrix(fan_in, fan_out), RowVector(fan_out)};
        for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = u(rng);
        for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = u(rng);
        return l;
    };
    auto norm = [](int n) {
        return BatchNorm{RowVector::Ones(n), RowVector::Zero(n), RowVector::Zero(n), RowVector::Ones(n)};
    };
    MlpParams p;
    p.fc1 = linear(dims[0], dims[1]);
    p.bn1 = norm(dims[1]);
    p.fc2 = linear(dims[1], dims[2]);
    p.bn2 = norm(dims[2]);
    p.fc3 = linear(dims[2], dims[3]);
    return p;
}

Matrix forward(const Matrix& batch, MlpParams& params, Mode mode) {
    if (mode == Mode::infer) return infer(batch, params);
    check_input(batch, params);
    ForwardTrace t = forward_train(batch, params);
    fold_running_stats(params.bn1, t.n1, batch.rows());
    fold_running_stats(params.bn2, t.n2, batch.rows());
    return std::move(t.out);
}

Matrix infer(const Matrix& batch, const MlpParams& p) {
    check_input(batch, p);
    const Matrix a1 = batchnorm_infer(affine(batch, p.fc1), p.bn1).array().tanh();
    const Matrix a2 = batchnorm_infer(affine(a1, p.fc2), p.bn2).array().tanh();
    return affine(a2, p.fc3).array().tanh();
}

void DshLossParams::validate() const {
    if (!(margin > 0.0)) throw Error(ErrorCode::invalid_argument, "margin must be positive");
    if (!(alpha >= 0.0 && l1_weight >= 0.0 && l2_weight >= 0.0)) {
        throw Error(ErrorCode::invalid_argument, "regularization weights must be nonnegative");
    }
}

double dsh_loss(std::span<const double> b1, std::span<const double> b2, int y, const DshLossParams& lp) {
    if (b1.size() != b2.size()) throw Error(ErrorCode::dimension_mismatch, "code vectors differ in length");
    double dist = 0.0;
    double quant = 0.0;
    for (std::size_t j = 0; j < b1.size(); ++j) {
        const double d = b1[j] - b2[j];
        dist += d * d;
        quant += std::abs(std::abs(b1[j]) - 1.0) + std::abs(std::abs(b2[j]) - 1.0);
    }
    const double similar = 0.5 * (1 - y) * dist;
    const double dissimilar = 0.5 * y * std::max(lp.margin - dist, 0.0);
    return similar + dissimilar + lp.alpha * quant;
}

PairGradient dsh_loss_grad(std::span<const double> b1, std::span<const double> b2, int y, const DshLossParams& lp) {
    if (b1.size() != b2.size()) throw Error(ErrorCode::dimension_mismatch, "code vectors differ in length");
    const std::size_t k = b1.size();
    double dist = 0.0;
    for (std::size_t j = 0; j < k; ++j) dist += (b1[j] - b2[j]) * (b1[j] - b2[j]);

    // Coefficient on (b1 - b2) in dL/db1.
    double coeff = 0.0;
    if (y == 0) {
        coeff = 1.0;
    } else if (lp.margin - dist > 0.0) {
        coeff = -1.0;
    }

    PairGradient g{std::vector<double>(k), std::vector<double>(k)};
    for (std::size_t j = 0; j < k; ++j) {
        const double diff = coeff * (b1[j] - b2[j]);
        g.d1[j] = diff + lp.alpha * sign(std::abs(b1[j]) - 1.0) * sign(b1[j]);
        g.d2[j] = -diff + lp.alpha * sign(std::abs(b2[j]) - 1.0) * sign(b2[j]);
    }
    return g;
}

std::vector<Pair> pair_batch(std::span<const int> labels) {
    if (labels.size() < 2) throw Error(ErrorCode::empty_input, "a minibatch needs at least two samples to form pairs");
    std::vector<Pair> pairs;
    pairs.reserve(labels.size() * (labels.size() - 1) / 2);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        for (std::size_t j = i + 1; j < labels.size(); ++j) pairs.push_back({i, j, labels[i] == labels[j] ? 0 : 1});
    }
    return pairs;
}

namespace {

double objective(const MlpParams& params, const Matrix& batch, std::span<const int> labels, const DshLossParams& lp,
                 Gradients* grads, ForwardTrace& t) {
    check_input(batch, params);
    if (static_cast<std::size_t>(batch.rows()) != labels.size()) {
        throw Error(ErrorCode::dimension_mismatch, "batch rows and labels differ in count");
    }
    const auto pairs = pair_batch(labels);
    t = forward_train(batch, params);
    const auto k = static_cast<std::size_t>(t.out.cols());
    const double inv_pairs = 1.0 / static_cast<double>(pairs.size());

    double loss = 0.0;
    Matrix dout = Matrix::Zero(t.out.rows(), t.out.cols());
    for (const auto& pr : pairs) {
        const std::span<const double> bi{t.out.row(pr.i).data(), k};
        const std::span<const double> bj{t.out.row(pr.j).data(), k};
        loss += dsh_loss(bi, bj, pr.y, lp);
        if (grads) {
            const auto g = dsh_loss_grad(bi, bj, pr.y, lp);
            for (std::size_t c = 0; c < k; ++c) {
                dout(pr.i, c) += g.d1[c] * inv_pairs;
                dout(pr.j, c) += g.d2[c] * inv_pairs;
            }
        }
    }
    loss *= inv_pairs;

    const Matrix* weights[] = {&params.fc1.weight, &params.fc2.weight, &params.fc3.weight};
    for (const Matrix* w : weights) {
        loss += lp.l1_weight * w->cwiseAbs().sum() + lp.l2_weight * w->squaredNorm();
    }

    if (!grads) return loss;

    const Matrix dz3 = dout.array() * (1.0 - t.out.array().square());
    grads->w3 = t.a2.transpose() * dz3;
    grads->b3 = dz3.colwise().sum();
    const Matrix dy2 = (dz3 * params.fc3.weight.transpose()).array() * (1.0 - t.a2.array().square());
    const Matrix dz2 = batchnorm_backward(dy2, params.bn2, t.n2, grads->gamma2, grads->beta2);
    grads->w2 = t.a1.transpose() * dz2;
    grads->b2 = dz2.colwise().sum();
    const Matrix dy1 = (dz2 * params.fc2.weight.transpose()).array() * (1.0 - t.a1.array().square());
    const Matrix dz1 = batchnorm_backward(dy1, params.bn1, t.n1, grads->gamma1, grads->beta1);
    grads->w1 = batch.transpose() * dz1;
    grads->b1 = dz1.colwise().sum();

    Matrix* gw[] = {&grads->w1, &grads->w2, &grads->w3};
    for (int l = 0; l < 3; ++l) {
        const Matrix& w = *weights[l];
        *gw[l] += (lp.l1_weight * w.unaryExpr([](double v) { return sign(v); }) + 2.0 * lp.l2_weight * w).eval();
    }
    return loss;
}

}  // namespace

double batch_objective(const MlpParams& params, const Matrix& batch, std::span<const int> labels,
                       const DshLossParams& lp, Gradients* grads) {
    ForwardTrace t;
    return objective(params, batch, labels, lp, grads, t);
}

void TrainConfig::validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
        throw Error(ErrorCode::invalid_argument, "learning rate must be finite and nonnegative");
    }
    if (batch_size < 2) throw Error(ErrorCode::invalid_argument, "batch size must be at least 2");
    if (epochs < 1) throw Error(ErrorCode::invalid_argument, "epochs must be positive");
    if (patience < 0) throw Error(ErrorCode::invalid_argument, "patience must be nonnegative");
    if (hidden1 < 1 || hidden2 < 1 || bits < 1) throw Error(ErrorCode::invalid_argument, "layer sizes must be positive");
    if (k_eval < 1) throw Error(ErrorCode::invalid_argument, "k_eval must be positive");
    if (!(eval_threshold >= -1.0 && eval_threshold <= 1.0)) {
        throw Error(ErrorCode::invalid_argument, "evaluation threshold must lie in [-1,1]");
    }
}

namespace {

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(rows[r]);
    return out;
}

void sgd_step(MlpParams& p, const Gradients& g, double lr) {
    p.fc1.weight -= lr * g.w1;
    p.fc1.bias -= lr * g.b1;
    p.fc2.weight -= lr * g.w2;
    p.fc2.bias -= lr * g.b2;
    p.fc3.weight -= lr * g.w3;
    p.fc3.bias -= lr * g.b3;
    p.bn1.gamma -= lr * g.gamma1;
    p.bn1.beta -= lr * g.beta1;
    p.bn2.gamma -= lr * g.gamma2;
    p.bn2.beta -= lr * g.beta2;
}

double validation_map(const MlpParams& p, const LabeledSet& train_set, const LabeledSet& valid_set,
                      const TrainConfig& cfg) {
    const retrieval::RetrievalIndex index(retrieval::binarize_rows(infer(train_set.descriptors, p), cfg.eval_threshold),
                                          train_set.labels);
    const auto queries = retrieval::binarize_rows(infer(valid_set.descriptors, p), cfg.eval_threshold);
    return eval::mean_average_precision(index, queries, valid_set.labels, cfg.k_eval).mean;
}

}  // namespace

TrainResult train(const LabeledSet& train_set, const LabeledSet& valid_set, int bank_size, const TrainConfig& cfg,
                  const DshLossParams& lp) {
    cfg.validate();
    lp.validate();
    if (train_set.descriptors.rows() < 2 || valid_set.descriptors.rows() == 0) {
        throw Error(ErrorCode::empty_input, "training needs at least two training and one validation descriptor");
    }
    if (train_set.descriptors.cols() != bank_size || valid_set.descriptors.cols() != bank_size) {
        throw Error(ErrorCode::dimension_mismatch, "descriptor length differs from the bank size");
    }
    if (static_cast<std::size_t>(train_set.descriptors.rows()) != train_set.labels.size() ||
        static_cast<std::size_t>(valid_set.descriptors.rows()) != valid_set.labels.size()) {
        throw Error(ErrorCode::dimension_mismatch, "descriptor rows and labels differ in count");
    }

    TrainResult result;
    result.params = init_params({bank_size, cfg.hidden1, cfg.hidden2, cfg.bits}, cfg.seed);
    MlpParams params = result.params;
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

    std::vector<std::size_t> order(static_cast<std::size_t>(train_set.descriptors.rows()));
    std::iota(order.begin(), order.end(), std::size_t{0});

    double best_map = -1.0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            // A lone trailing sample cannot form a pair.
            if (end - start < 2) continue;
            const std::span<const std::size_t> rows{order.data() + start, end - start};
            const Matrix xb = gather_rows(train_set.descriptors, rows);
            std::vector<int> yb;
            yb.reserve(rows.size());
            for (auto r : rows) yb.push_back(train_set.labels[r]);

            Gradients g;
            ForwardTrace trace;
            const double loss = objective(params, xb, yb, lp, &g, trace);
            if (!std::isfinite(loss)) {
                throw Error(ErrorCode::divergence, "training diverged at epoch " + std::to_string(epoch));
            }
            fold_running_stats(params.bn1, trace.n1, xb.rows());
            fold_running_stats(params.bn2, trace.n2, xb.rows());
            sgd_step(params, g, cfg.learning_rate);
            loss_sum += loss;
            ++batches;
        }

        const double epoch_loss = loss_sum / std::max(batches, 1);
        const double vmap = validation_map(params, train_set, valid_set, cfg);
        if (!std::isfinite(epoch_loss) || !std::isfinite(vmap)) {
            throw Error(ErrorCode::divergence, "training diverged at epoch " + std::to_string(epoch));
        }
        result.history.push_back({epoch, epoch_loss, vmap});

        if (vmap > best_map) {
            best_map = vmap;
            result.params = params;
            result.best_epoch = epoch;
        } else if (cfg.patience > 0 && epoch - result.best_epoch >= cfg.patience) {
            break;
        }
    }
    return result;
}

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_f64(std::vector<unsigned char>& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

class Reader {
public:
    explicit Reader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
        pos_ += 4;
        return v;
    }

    double f64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
        pos_ += 8;
        const double d = std::bit_cast<double>(v);
        if (!std::isfinite(d)) throw Error(ErrorCode::corrupted_payload, "model contains a non-finite parameter");
        return d;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > bytes_.size()) throw Error(ErrorCode::corrupted_payload, "model file is truncated");
    }

    std::span<const unsigned char> bytes_;
    std::size_t pos_ = 0;
};

template <typename Fn>
void visit_blocks(MlpParams& p, Fn&& fn) {
    fn(p.fc1.weight);
    fn(p.fc1.bias);
    fn(p.bn1.gamma);
    fn(p.bn1.beta);
    fn(p.bn1.running_mean);
    fn(p.bn1.running_var);
    fn(p.fc2.weight);
    fn(p.fc2.bias);
    fn(p.bn2.gamma);
    fn(p.bn2.beta);
    fn(p.bn2.running_mean);
    fn(p.bn2.running_var);
    fn(p.fc3.weight);
    fn(p.fc3.bias);
}

}  // namespace

std::vector<unsigned char> encode_model(const MlpParams& params) {
    std::vector<unsigned char> out{'C', 'H', 'S', 'H'};
    put_u32(out, kModelVersion);
    const auto dims = params.dims();
    put_u32(out, static_cast<std::uint32_t>(dims.size()));
    for (int d : dims) put_u32(out, static_cast<std::uint32_t>(d));
    MlpParams copy = params;
    visit_blocks(copy, [&](const auto& block) {
        for (Eigen::Index i = 0; i < block.size(); ++i) put_f64(out, block.data()[i]);
    });
    return out;
}

MlpParams decode_model(std::span<const unsigned char> bytes) {
    if (bytes.size() < 8 || !std::equal(bytes.begin(), bytes.begin() + 4, "CHSH")) {
        throw Error(ErrorCode::version_mismatch, "not a CHSH model file (bad magic)");
    }
    Reader in(bytes.subspan(4));
    const std::uint32_t version = in.u32();
    if (version != kModelVersion) {
        throw Error(ErrorCode::version_mismatch, "model format version " + std::to_string(version) +
                                                     " is not supported (expected " +
                                                     std::to_string(kModelVersion) + ")");
    }
    if (in.u32() != 4) throw Error(ErrorCode::corrupted_payload, "model must declare four layer dimensions");
    std::array<int, 4> dims{};
    for (int& d : dims) {
        const std::uint32_t v = in.u32();
        if (v == 0 || v > (1u << 20)) throw Error(ErrorCode::corrupted_payload, "implausible layer dimension");
        d = static_cast<int>(v);
    }
    MlpParams p = init_params(dims, 0);
    visit_blocks(p, [&](auto& block) {
        for (Eigen::Index i = 0; i < block.size(); ++i) block.data()[i] = in.f64();
    });
    if (!in.done()) throw Error(ErrorCode::corrupted_payload, "trailing bytes after model parameters");
    for (const RowVector* rv : {&p.bn1.running_var, &p.bn2.running_var}) {
        if ((rv->array() <= 0.0).any()) throw Error(ErrorCode::corrupted_payload, "running variance must be positive");
    }
    return p;
}

std::string to_json(const TrainConfig& cfg, const DshLossParams& lp) {
    nlohmann::json doc;
    doc["train"] = {{"learning_rate", cfg.learning_rate}, {"batch_size", cfg.batch_size},
                    {"epochs", cfg.epochs},               {"seed", cfg.seed},
                    {"patience", cfg.patience},           {"hidden1", cfg.hidden1},
                    {"hidden2", cfg.hidden2},             {"bits", cfg.bits},
                    {"k_eval", cfg.k_eval},               {"eval_threshold", cfg.eval_threshold}};
    doc["loss"] = {{"margin", lp.margin}, {"alpha", lp.alpha}, {"l1_weight", lp.l1_weight}, {"l2_weight", lp.l2_weight}};
    return doc.dump(1);
}

void save_model(const MlpParams& params, const std::filesystem::path& path, const TrainConfig& cfg,
                const DshLossParams& lp) {
    const auto bytes = encode_model(params);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    std::ofstream side(path.string() + ".json", std::ios::trunc);
    if (!side) throw Error(ErrorCode::io, "cannot write sidecar for " + path.string());
    side << to_json(cfg, lp) << '\n';
}

MlpParams load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::missing_artifact, "model file not found: " + path.string());
    const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return decode_model(bytes);
}

}  // namespace cbir::hashnet
