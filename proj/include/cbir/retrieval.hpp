#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cbir/matrix.hpp"

namespace cbir::retrieval {

// k bits packed little-endian into 64-bit words; bits past k stay zero.
class HashCode {
public:
    HashCode() = default;
    explicit HashCode(int bits);

    int bits() const noexcept { return bits_; }
    bool bit(int j) const { return (words_[j / 64] >> (j % 64)) & 1u; }
    void set(int j, bool value);
    std::span<const std::uint64_t> words() const noexcept { return words_; }

    HashCode complement() const;
    std::string to_string() const;

    bool operator==(const HashCode&) const = default;

private:
    int bits_ = 0;
    std::vector<std::uint64_t> words_;
};

// bit j = activation_j > threshold.
HashCode binarize(std::span<const double> activations, double threshold);
std::vector<HashCode> binarize_rows(const Matrix& activations, double threshold);

// Popcount of the XOR; dimension_mismatch when bit lengths differ.
int hamming(const HashCode& a, const HashCode& b);

struct Match {
    std::uint32_t id;
    int label;
    int distance;

    bool operator==(const Match&) const = default;
};

// Immutable after construction; queries are const and thread-safe.
class RetrievalIndex {
public:
    RetrievalIndex() = default;
    RetrievalIndex(std::vector<HashCode> codes, std::vector<int> labels, std::vector<std::uint32_t> ids = {});

    std::size_t size() const noexcept { return codes_.size(); }
    bool empty() const noexcept { return codes_.empty(); }
    int bits() const noexcept { return codes_.empty() ? 0 : codes_.front().bits(); }

    const std::vector<HashCode>& codes() const noexcept { return codes_; }
    const std::vector<int>& labels() const noexcept { return labels_; }
    const std::vector<std::uint32_t>& ids() const noexcept { return ids_; }

    // Number of records carrying the given label.
    std::size_t count_label(int label) const;

private:
    std::vector<HashCode> codes_;
    std::vector<int> labels_;
    std::vector<std::uint32_t> ids_;
};

// Exact linear scan: ascending distance, ties by insertion order.
std::vector<Match> query(const RetrievalIndex& index, const HashCode& q, std::size_t top_n);

// -1.0, -0.9, ..., 1.0
std::vector<double> default_threshold_grid();

struct SweepPoint {
    double threshold;
    double map;
};

struct SweepResult {
    double best_threshold = 0.0;
    double best_map = 0.0;
    std::vector<SweepPoint> curve;
};

// Binarizes both sets at every threshold and scores validation queries
// against the reference index with mAP@k_eval. Ties go to the smallest threshold.
SweepResult threshold_sweep(const Matrix& query_activations, std::span<const int> query_labels,
                            const Matrix& reference_activations, std::span<const int> reference_labels,
                            std::size_t k_eval, std::span<const double> thresholds = {});

// "CODE" file with a JSON sidecar (path + ".json") naming the labels.
struct CodesFile {
    RetrievalIndex index;
    std::vector<std::string> label_names;
};

std::vector<unsigned char> encode_codes(const RetrievalIndex& index);
RetrievalIndex decode_codes(std::span<const unsigned char> bytes);
void save_codes(const CodesFile& file, const std::filesystem::path& path);
CodesFile load_codes(const std::filesystem::path& path);

}  // namespace cbir::retrieval
