#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cbir/retrieval.hpp"

namespace cbir::cosfire {
struct FilterBank;
}

namespace cbir::eval {

// Relevance flags of one ranked list, cut at min(k, index size).
struct QueryResult {
    std::vector<bool> relevant;
    std::size_t total_relevant = 0;  // R
    std::size_t cutoff = 0;          // k
};

QueryResult make_query_result(const retrieval::RetrievalIndex& index, const retrieval::HashCode& q, int label,
                              std::size_t k);

// (1 / min(R, k)) * sum_i Precision(i) * Rel(i). Throws empty_input when R = 0.
double ap_at_k(const QueryResult& qr);

struct MapSummary {
    double mean = 0.0;
    std::size_t evaluated = 0;
    std::size_t excluded = 0;  // queries with R = 0
};

// Mean AP@k. Queries with R = 0 are skipped with a warning on stderr; throws
// empty_input if nothing is left.
MapSummary map_at_k(std::span<const QueryResult> results);

MapSummary mean_average_precision(const retrieval::RetrievalIndex& index,
                                  std::span<const retrieval::HashCode> queries, std::span<const int> labels,
                                  std::size_t k);

struct PerClassMap {
    std::vector<int> classes;
    std::vector<std::size_t> relevant;  // R per class in the reference set
    std::vector<double> map;
    double average = 0.0;  // unweighted over classes
};

// mAP with the cutoff for each query set to R of its class.
PerClassMap map_at_r(const retrieval::RetrievalIndex& index, std::span<const retrieval::HashCode> queries,
                     std::span<const int> labels);

struct ClassDistanceMatrix {
    int classes = 0;
    std::vector<double> mean;         // row-major classes x classes
    std::vector<std::size_t> pairs;

    double at(int a, int b) const { return mean[static_cast<std::size_t>(a) * classes + b]; }
};

// Within one set: diagonal cells average over unordered distinct pairs.
ClassDistanceMatrix class_distance_matrix(std::span<const retrieval::HashCode> codes, std::span<const int> labels,
                                          int classes);
// Rows index query classes, columns reference classes; full bipartite pair set.
ClassDistanceMatrix class_distance_matrix(std::span<const retrieval::HashCode> queries,
                                          std::span<const int> query_labels,
                                          std::span<const retrieval::HashCode> references,
                                          std::span<const int> reference_labels, int classes);

// Mean diagonal cell over mean off-diagonal cell.
double separability_ratio(const ClassDistanceMatrix& m);

struct FlopsRow {
    std::string component;
    std::string formula;
    std::uint64_t flops = 0;
};

struct FlopsReport {
    std::vector<FlopsRow> rows;
    std::uint64_t total = 0;
};

// Linear 2mn, batch norm 4n, tanh n. layer_sizes has one more entry than the flags.
FlopsReport mlp_flops(std::span<const int> layer_sizes, std::span<const bool> batchnorm,
                      std::span<const bool> tanh);
FlopsReport reference_mlp_flops(int bits = 72);

// Descriptor-stage count quoted for the reference COSFIRE configuration.
inline constexpr std::uint64_t kReferenceDescriptorFlops = 1'139'692'788;

// Analytic operation count for describing one width x height image with the
// given bank, following the cached implementation in cosfire.cpp.
FlopsReport descriptor_flops(const cosfire::FilterBank& bank, int width, int height);

std::string format_thousands(std::uint64_t v);

}  // namespace cbir::eval
