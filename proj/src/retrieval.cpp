#include "cbir/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>
#include <sstream>

#include "cbir/error.hpp"
#include "cbir/eval.hpp"
#include "json.hpp"

namespace cbir::retrieval {

HashCode::HashCode(int bits) : bits_(bits), words_((static_cast<std::size_t>(std::max(bits, 0)) + 63) / 64, 0) {
    if (bits <= 0) throw Error(ErrorCode::invalid_argument, "hash code length must be positive");
}

void HashCode::set(int j, bool value) {
    const std::uint64_t mask = std::uint64_t{1} << (j % 64);
    if (value) {
        words_[j / 64] |= mask;
    } else {
        words_[j / 64] &= ~mask;
    }
}

HashCode HashCode::complement() const {
    HashCode out(bits_);
    for (int j = 0; j < bits_; ++j) out.set(j, !bit(j));
    return out;
}

std::string HashCode::to_string() const {
    std::string s(static_cast<std::size_t>(bits_), '0');
    for (int j = 0; j < bits_; ++j) s[j] = bit(j) ? '1' : '0';
    return s;
}

HashCode binarize(std::span<const double> activations, double threshold) {
    if (!(threshold >= -1.0 && threshold <= 1.0)) {
        throw Error(ErrorCode::invalid_argument, "binarization threshold must lie in [-1,1]");
    }
    HashCode code(static_cast<int>(activations.size()));
    for (std::size_t j = 0; j < activations.size(); ++j) {
        if (activations[j] > threshold) code.set(static_cast<int>(j), true);
    }
    return code;
}

std::vector<HashCode> binarize_rows(const Matrix& activations, double threshold) {
    std::vector<HashCode> out;
    out.reserve(static_cast<std::size_t>(activations.rows()));
    for (Eigen::Index r = 0; r < activations.rows(); ++r) {
        out.push_back(binarize({activations.row(r).data(), static_cast<std::size_t>(activations.cols())}, threshold));
    }
    return out;
}

int hamming(const HashCode& a, const HashCode& b) {
    if (a.bits() != b.bits()) {
        throw Error(ErrorCode::dimension_mismatch, "hash codes differ in length: " + std::to_string(a.bits()) +
                                                       " vs " + std::to_string(b.bits()));
    }
    const auto wa = a.words();
    const auto wb = b.words();
    int d = 0;
    for (std::size_t i = 0; i < wa.size(); ++i) d += std::popcount(wa[i] ^ wb[i]);
    return d;
}

RetrievalIndex::RetrievalIndex(std::vector<HashCode> codes, std::vector<int> labels, std::vector<std::uint32_t> ids)
    : codes_(std::move(codes)), labels_(std::move(labels)), ids_(std::move(ids)) {
    if (ids_.empty()) {
        ids_.resize(codes_.size());
        std::iota(ids_.begin(), ids_.end(), 0u);
    }
    if (labels_.size() != codes_.size() || ids_.size() != codes_.size()) {
        throw Error(ErrorCode::dimension_mismatch, "index codes, labels and ids must have equal length");
    }
    for (const auto& c : codes_) {
        if (c.bits() != codes_.front().bits()) {
            throw Error(ErrorCode::dimension_mismatch, "all codes in an index must share one bit length");
        }
    }
}

std::size_t RetrievalIndex::count_label(int label) const {
    return static_cast<std::size_t>(std::count(labels_.begin(), labels_.end(), label));
}

std::vector<Match> query(const RetrievalIndex& index, const HashCode& q, std::size_t top_n) {
    if (index.empty()) throw Error(ErrorCode::empty_input, "retrieval index is empty");
    if (top_n == 0) throw Error(ErrorCode::invalid_argument, "top_n must be positive");
    if (q.bits() != index.bits()) {
        throw Error(ErrorCode::dimension_mismatch, "query has " + std::to_string(q.bits()) + " bits, index has " +
                                                       std::to_string(index.bits()));
    }
    const auto& codes = index.codes();
    std::vector<std::pair<int, std::size_t>> ranked(codes.size());
    for (std::size_t i = 0; i < codes.size(); ++i) ranked[i] = {hamming(q, codes[i]), i};

    const std::size_t n = std::min(top_n, ranked.size());
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(n), ranked.end());

    std::vector<Match> out;
    out.reserve(n);
    for (std::size_t r = 0; r < n; ++r) {
        const std::size_t i = ranked[r].second;
        out.push_back({index.ids()[i], index.labels()[i], ranked[r].first});
    }
    return out;
}

std::vector<double> default_threshold_grid() {
    std::vector<double> grid;
    for (int i = -10; i <= 10; ++i) grid.push_back(i / 10.0);
    return grid;
}

SweepResult threshold_sweep(const Matrix& query_activations, std::span<const int> query_labels,
                            const Matrix& reference_activations, std::span<const int> reference_labels,
                            std::size_t k_eval, std::span<const double> thresholds) {
    const std::set<int> classes(reference_labels.begin(), reference_labels.end());
    if (classes.size() < 2) throw Error(ErrorCode::degenerate_labels, "threshold sweep needs at least two classes");
    if (static_cast<std::size_t>(query_activations.rows()) != query_labels.size() ||
        static_cast<std::size_t>(reference_activations.rows()) != reference_labels.size()) {
        throw Error(ErrorCode::dimension_mismatch, "activation rows and labels differ in count");
    }

    std::vector<double> grid = thresholds.empty() ? default_threshold_grid()
                                                  : std::vector<double>(thresholds.begin(), thresholds.end());
    SweepResult result;
    bool first = true;
    for (double t : grid) {
        const RetrievalIndex index(binarize_rows(reference_activations, t),
                                   std::vector<int>(reference_labels.begin(), reference_labels.end()));
        const auto queries = binarize_rows(query_activations, t);
        const double map = eval::mean_average_precision(index, queries, query_labels, k_eval).mean;
        result.curve.push_back({t, map});
        if (first || map > result.best_map) {
            result.best_map = map;
            result.best_threshold = t;
            first = false;
        }
    }
    return result;
}

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const unsigned char> bytes, std::size_t at) {
    return std::uint32_t{bytes[at]} | (std::uint32_t{bytes[at + 1]} << 8) | (std::uint32_t{bytes[at + 2]} << 16) |
           (std::uint32_t{bytes[at + 3]} << 24);
}

}  // namespace

std::vector<unsigned char> encode_codes(const RetrievalIndex& index) {
    const int k = index.bits();
    const std::size_t code_bytes = (static_cast<std::size_t>(k) + 7) / 8;
    std::vector<unsigned char> out{'C', 'O', 'D', 'E'};
    put_u32(out, static_cast<std::uint32_t>(k));
    put_u32(out, static_cast<std::uint32_t>(index.size()));
    for (std::size_t r = 0; r < index.size(); ++r) {
        const int label = index.labels()[r];
        if (label < 0 || label > 255) throw Error(ErrorCode::invalid_argument, "label index must fit in one byte");
        put_u32(out, index.ids()[r]);
        out.push_back(static_cast<unsigned char>(label));
        const auto& code = index.codes()[r];
        for (std::size_t b = 0; b < code_bytes; ++b) {
            unsigned char byte = 0;
            for (int bit = 0; bit < 8; ++bit) {
                const int j = static_cast<int>(b * 8) + bit;
                if (j < k && code.bit(j)) byte |= static_cast<unsigned char>(1u << bit);
            }
            out.push_back(byte);
        }
    }
    return out;
}

RetrievalIndex decode_codes(std::span<const unsigned char> bytes) {
    if (bytes.size() < 12 || !std::equal(bytes.begin(), bytes.begin() + 4, "CODE")) {
        throw Error(ErrorCode::version_mismatch, "not a CODE file (bad magic)");
    }
    const std::uint32_t k = get_u32(bytes, 4);
    const std::uint32_t count = get_u32(bytes, 8);
    if (k == 0) throw Error(ErrorCode::corrupted_payload, "CODE file declares zero-bit codes");
    const std::size_t code_bytes = (std::size_t{k} + 7) / 8;
    const std::size_t record = 5 + code_bytes;
    if (bytes.size() != 12 + record * count) {
        throw Error(ErrorCode::corrupted_payload, "CODE file size does not match its header");
    }
    std::vector<HashCode> codes;
    std::vector<int> labels;
    std::vector<std::uint32_t> ids;
    std::size_t at = 12;
    for (std::uint32_t r = 0; r < count; ++r) {
        ids.push_back(get_u32(bytes, at));
        labels.push_back(bytes[at + 4]);
        HashCode code(static_cast<int>(k));
        for (std::uint32_t j = 0; j < k; ++j) {
            if ((bytes[at + 5 + j / 8] >> (j % 8)) & 1u) code.set(static_cast<int>(j), true);
        }
        for (std::uint32_t j = k; j < code_bytes * 8; ++j) {
            if ((bytes[at + 5 + j / 8] >> (j % 8)) & 1u) {
                throw Error(ErrorCode::corrupted_payload, "CODE record has bits set past the code length");
            }
        }
        codes.push_back(std::move(code));
        at += record;
    }
    return RetrievalIndex(std::move(codes), std::move(labels), std::move(ids));
}

void save_codes(const CodesFile& file, const std::filesystem::path& path) {
    const auto bytes = encode_codes(file.index);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));

    nlohmann::json sidecar;
    sidecar["bits"] = file.index.bits();
    sidecar["count"] = file.index.size();
    sidecar["labels"] = file.label_names;
    std::ofstream side(path.string() + ".json", std::ios::trunc);
    if (!side) throw Error(ErrorCode::io, "cannot write sidecar for " + path.string());
    side << sidecar.dump(1) << '\n';
}

CodesFile load_codes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::missing_artifact, "codes file not found: " + path.string());
    const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    CodesFile file{decode_codes(bytes), {}};
    std::ifstream side(path.string() + ".json");
    if (side) {
        try {
            const auto doc = nlohmann::json::parse(side);
            file.label_names = doc.at("labels").get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorCode::corrupted_payload, std::string("malformed codes sidecar: ") + e.what());
        }
    }
    return file;
}

}  // namespace cbir::retrieval
