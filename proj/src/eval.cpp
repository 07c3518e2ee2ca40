#include "cbir/eval.hpp"

#include <algorithm>
#include <iostream>
#include <map>
#include <set>
#include <tuple>

#include "cbir/cosfire.hpp"
#include "cbir/error.hpp"

namespace cbir::eval {

using retrieval::HashCode;
using retrieval::RetrievalIndex;

QueryResult make_query_result(const RetrievalIndex& index, const HashCode& q, int label, std::size_t k) {
    QueryResult qr;
    qr.cutoff = k;
    qr.total_relevant = index.count_label(label);
    for (const auto& m : retrieval::query(index, q, k)) qr.relevant.push_back(m.label == label);
    return qr;
}

double ap_at_k(const QueryResult& qr) {
    if (qr.total_relevant == 0) throw Error(ErrorCode::empty_input, "AP@k undefined for a query with R = 0");
    if (qr.cutoff == 0) throw Error(ErrorCode::invalid_argument, "AP@k cutoff must be positive");
    const std::size_t n = std::min(qr.relevant.size(), qr.cutoff);
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (qr.relevant[i]) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(i + 1);
        }
    }
    return sum / static_cast<double>(std::min(qr.total_relevant, qr.cutoff));
}

MapSummary map_at_k(std::span<const QueryResult> results) {
    MapSummary s;
    double sum = 0.0;
    for (const auto& qr : results) {
        if (qr.total_relevant == 0) {
            ++s.excluded;
            continue;
        }
        sum += ap_at_k(qr);
        ++s.evaluated;
    }
    if (s.excluded > 0) {
        std::clog << "warning: " << s.excluded << " quer" << (s.excluded == 1 ? "y" : "ies")
                  << " with no relevant reference excluded from mAP\n";
    }
    if (s.evaluated == 0) throw Error(ErrorCode::empty_input, "mAP undefined: no query has a relevant reference");
    s.mean = sum / static_cast<double>(s.evaluated);
    return s;
}

MapSummary mean_average_precision(const RetrievalIndex& index, std::span<const HashCode> queries,
                                  std::span<const int> labels, std::size_t k) {
    if (queries.size() != labels.size()) throw Error(ErrorCode::dimension_mismatch, "queries and labels differ in count");
    std::vector<QueryResult> results;
    results.reserve(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) results.push_back(make_query_result(index, queries[i], labels[i], k));
    return map_at_k(results);
}

PerClassMap map_at_r(const RetrievalIndex& index, std::span<const HashCode> queries, std::span<const int> labels) {
    if (queries.size() != labels.size()) throw Error(ErrorCode::dimension_mismatch, "queries and labels differ in count");
    std::map<int, std::vector<QueryResult>> by_class;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        const std::size_t r = index.count_label(labels[i]);
        by_class[labels[i]].push_back(make_query_result(index, queries[i], labels[i], std::max<std::size_t>(r, 1)));
    }
    PerClassMap out;
    double sum = 0.0;
    for (const auto& [label, results] : by_class) {
        if (index.count_label(label) == 0) {
            std::clog << "warning: class " << label << " has no reference records; excluded from mAP@R\n";
            continue;
        }
        const double m = map_at_k(results).mean;
        out.classes.push_back(label);
        out.relevant.push_back(index.count_label(label));
        out.map.push_back(m);
        sum += m;
    }
    if (out.classes.empty()) throw Error(ErrorCode::empty_input, "mAP@R undefined: no class has reference records");
    out.average = sum / static_cast<double>(out.classes.size());
    return out;
}

namespace {

void check_labels(std::span<const int> labels, int classes) {
    for (int l : labels) {
        if (l < 0 || l >= classes) throw Error(ErrorCode::invalid_argument, "label index outside class range");
    }
}

ClassDistanceMatrix finish(int classes, const std::vector<double>& sums, std::vector<std::size_t> pairs) {
    ClassDistanceMatrix m;
    m.classes = classes;
    m.pairs = std::move(pairs);
    m.mean.resize(sums.size());
    for (std::size_t c = 0; c < sums.size(); ++c) {
        m.mean[c] = m.pairs[c] > 0 ? sums[c] / static_cast<double>(m.pairs[c]) : 0.0;
    }
    return m;
}

}  // namespace

ClassDistanceMatrix class_distance_matrix(std::span<const HashCode> codes, std::span<const int> labels, int classes) {
    if (codes.size() != labels.size()) throw Error(ErrorCode::dimension_mismatch, "codes and labels differ in count");
    check_labels(labels, classes);
    const auto cells = static_cast<std::size_t>(classes) * classes;
    std::vector<double> sums(cells, 0.0);
    std::vector<std::size_t> pairs(cells, 0);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        for (std::size_t j = i + 1; j < codes.size(); ++j) {
            const double d = retrieval::hamming(codes[i], codes[j]);
            const auto a = static_cast<std::size_t>(labels[i]);
            const auto b = static_cast<std::size_t>(labels[j]);
            sums[a * classes + b] += d;
            ++pairs[a * classes + b];
            if (a != b) {
                sums[b * classes + a] += d;
                ++pairs[b * classes + a];
            }
        }
    }
    std::vector<std::size_t> members(static_cast<std::size_t>(classes), 0);
    for (int l : labels) ++members[l];
    for (int c = 0; c < classes; ++c) {
        if (members[c] < 2) {
            throw Error(ErrorCode::empty_input,
                        "class " + std::to_string(c) + " has fewer than two members; intra-class distance undefined");
        }
    }
    return finish(classes, sums, std::move(pairs));
}

ClassDistanceMatrix class_distance_matrix(std::span<const HashCode> queries, std::span<const int> query_labels,
                                          std::span<const HashCode> references, std::span<const int> reference_labels,
                                          int classes) {
    if (queries.size() != query_labels.size() || references.size() != reference_labels.size()) {
        throw Error(ErrorCode::dimension_mismatch, "codes and labels differ in count");
    }
    check_labels(query_labels, classes);
    check_labels(reference_labels, classes);
    const auto cells = static_cast<std::size_t>(classes) * classes;
    std::vector<double> sums(cells, 0.0);
    std::vector<std::size_t> pairs(cells, 0);
    for (std::size_t i = 0; i < queries.size(); ++i) {
        for (std::size_t j = 0; j < references.size(); ++j) {
            const auto c = static_cast<std::size_t>(query_labels[i]) * classes + reference_labels[j];
            sums[c] += retrieval::hamming(queries[i], references[j]);
            ++pairs[c];
        }
    }
    for (std::size_t c = 0; c < cells; ++c) {
        if (pairs[c] == 0) throw Error(ErrorCode::empty_input, "a class is missing from the query or reference set");
    }
    return finish(classes, sums, std::move(pairs));
}

double separability_ratio(const ClassDistanceMatrix& m) {
    if (m.classes < 2) throw Error(ErrorCode::degenerate_labels, "separability needs at least two classes");
    double diag = 0.0;
    double off = 0.0;
    for (int a = 0; a < m.classes; ++a) {
        for (int b = 0; b < m.classes; ++b) (a == b ? diag : off) += m.at(a, b);
    }
    diag /= m.classes;
    off /= static_cast<double>(m.classes) * (m.classes - 1);
    if (!(off > 0.0)) throw Error(ErrorCode::zero_vector, "mean inter-class distance is zero");
    return diag / off;
}

FlopsReport mlp_flops(std::span<const int> layer_sizes, std::span<const bool> batchnorm, std::span<const bool> tanh) {
    if (layer_sizes.size() < 2) throw Error(ErrorCode::invalid_argument, "need at least input and output sizes");
    const std::size_t layers = layer_sizes.size() - 1;
    if (batchnorm.size() != layers || tanh.size() != layers) {
        throw Error(ErrorCode::dimension_mismatch, "one batchnorm and one tanh flag per linear layer");
    }
    for (int s : layer_sizes) {
        if (s <= 0) throw Error(ErrorCode::invalid_argument, "layer sizes must be positive");
    }
    FlopsReport report;
    for (std::size_t l = 0; l < layers; ++l) {
        const auto m = static_cast<std::uint64_t>(layer_sizes[l]);
        const auto n = static_cast<std::uint64_t>(layer_sizes[l + 1]);
        const auto idx = std::to_string(l + 1);
        report.rows.push_back({"Linear Layer " + idx + ": m = " + std::to_string(m) + ", n = " + std::to_string(n),
                               "2mn", 2 * m * n});
        if (batchnorm[l]) report.rows.push_back({"Batch Normalization " + idx + ": n = " + std::to_string(n), "4n", 4 * n});
        if (tanh[l]) report.rows.push_back({"Tanh Activation " + idx + ": n = " + std::to_string(n), "n", n});
    }
    for (const auto& r : report.rows) report.total += r.flops;
    return report;
}

FlopsReport reference_mlp_flops(int bits) {
    const int sizes[] = {372, 300, 200, bits};
    const bool bn[] = {true, true, false};
    const bool th[] = {true, true, true};
    return mlp_flops(sizes, bn, th);
}

FlopsReport descriptor_flops(const cosfire::FilterBank& bank, int width, int height) {
    const auto pixels = static_cast<std::uint64_t>(width) * static_cast<std::uint64_t>(height);
    auto conv = [&](double sigma) {
        // Two 1D passes, L multiplies and L adds per tap row.
        const auto len = static_cast<std::uint64_t>(2 * dog::kernel_radius(sigma) + 1);
        return 2 * 2 * len * pixels;
    };

    std::set<double> sigmas;
    std::set<std::tuple<double, int, double>> channels;
    std::set<std::tuple<double, int, double, double>> blurred;
    std::uint64_t combine = 0;
    std::uint64_t maxima = 0;
    const auto orientations = static_cast<std::uint64_t>(bank.orientations.size());
    for (const auto& f : bank.filters) {
        const auto& hp = f.hyperparams;
        for (const auto& t : f.tuples) {
            sigmas.insert(t.sigma);
            channels.insert({t.sigma, static_cast<int>(t.polarity), hp.t1});
            blurred.insert({t.sigma, static_cast<int>(t.polarity), hp.t1, hp.blur_sigma(t.rho)});
        }
        if (f.tuples.size() == 1 && f.tuples.front().rho == 0.0) {
            maxima += pixels;
        } else {
            combine += orientations * f.tuples.size() * pixels;
            maxima += orientations * pixels;
        }
    }

    std::uint64_t dog_ops = 0;
    for (double s : sigmas) dog_ops += conv(s / 2.0) + conv(s) + pixels;
    std::uint64_t blur_ops = 0;
    for (const auto& b : blurred) blur_ops += conv(std::get<3>(b));

    FlopsReport report;
    report.rows.push_back({"DoG convolutions (" + std::to_string(sigmas.size()) + " scales)", "sum 4(L_in+L_out)WH + WH", dog_ops});
    report.rows.push_back({"Rectify + threshold (" + std::to_string(channels.size()) + " channels)", "3WH", 3 * pixels * channels.size()});
    report.rows.push_back({"Gaussian blur (" + std::to_string(blurred.size()) + " maps)", "4 L_b WH", blur_ops});
    report.rows.push_back({"Log transform", "WH", pixels * blurred.size()});
    report.rows.push_back({"Shift + geometric combine", "n WH per orientation", combine});
    report.rows.push_back({"Maximum search", "WH per orientation", maxima});
    report.rows.push_back({"L2 normalization", "3N + 1", 3 * bank.size() + 1});
    for (const auto& r : report.rows) report.total += r.flops;
    return report;
}

std::string format_thousands(std::uint64_t v) {
    std::string digits = std::to_string(v);
    std::string out;
    const int n = static_cast<int>(digits.size());
    for (int i = 0; i < n; ++i) {
        if (i > 0 && (n - i) % 3 == 0) out.push_back(',');
        out.push_back(digits[i]);
    }
    return out;
}

}  // namespace cbir::eval
