#pragma once

// Straight-line reference implementations used only by the tests. They share
// no code with the library routines they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace oracle {

using Bits = std::vector<int>;  // one 0/1 entry per bit

inline int hamming(const Bits& a, const Bits& b) {
    int d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
    return d;
}

struct Ranked {
    std::size_t index;
    int distance;
};

// Full sort by (distance, insertion order).
inline std::vector<Ranked> rank(const std::vector<Bits>& db, const Bits& q) {
    std::vector<Ranked> r;
    for (std::size_t i = 0; i < db.size(); ++i) r.push_back({i, hamming(db[i], q)});
    std::sort(r.begin(), r.end(), [](const Ranked& a, const Ranked& b) {
        return a.distance != b.distance ? a.distance < b.distance : a.index < b.index;
    });
    return r;
}

inline double average_precision(const std::vector<Bits>& db, const std::vector<int>& db_labels, const Bits& q,
                                int q_label, std::size_t k) {
    const auto r = rank(db, q);
    std::size_t relevant_total = 0;
    for (int l : db_labels) relevant_total += (l == q_label);
    if (relevant_total == 0) return std::nan("");
    double sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < std::min(k, r.size()); ++i) {
        if (db_labels[r[i].index] == q_label) {
            ++hits;
            sum += double(hits) / double(i + 1);
        }
    }
    return sum / double(std::min(relevant_total, k));
}

inline double mean_ap(const std::vector<Bits>& db, const std::vector<int>& db_labels, const std::vector<Bits>& queries,
                      const std::vector<int>& q_labels, std::size_t k) {
    double sum = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        const double ap = average_precision(db, db_labels, queries[i], q_labels[i], k);
        if (std::isnan(ap)) continue;
        sum += ap;
        ++n;
    }
    return sum / n;
}

inline Bits threshold(const std::vector<double>& a, double t) {
    Bits b(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) b[i] = a[i] > t ? 1 : 0;
    return b;
}

inline Bits random_bits(std::mt19937_64& rng, int k) {
    Bits b(static_cast<std::size_t>(k));
    for (auto& v : b) v = static_cast<int>(rng() & 1u);
    return b;
}

// Unit-sum 2D Gaussian sampled on [-r, r]^2 with r = ceil(3 sigma).
inline std::vector<std::vector<double>> gaussian_2d(double sigma) {
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<std::vector<double>> k(2 * r + 1, std::vector<double>(2 * r + 1));
    double sum = 0.0;
    for (int y = -r; y <= r; ++y) {
        for (int x = -r; x <= r; ++x) {
            k[y + r][x + r] = std::exp(-(x * x + y * y) / (2.0 * sigma * sigma));
            sum += k[y + r][x + r];
        }
    }
    for (auto& row : k)
        for (auto& v : row) v /= sum;
    return k;
}

inline int mirror(int i, int n) {
    // ... c b a | a b c ... | c b a ...
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
}

// Brute-force 2D correlation with a square kernel and mirrored borders.
inline std::vector<double> convolve_2d(const std::vector<double>& img, int w, int h,
                                       const std::vector<std::vector<double>>& k) {
    const int r = static_cast<int>(k.size() / 2);
    std::vector<double> out(img.size(), 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int j = -r; j <= r; ++j)
                for (int i = -r; i <= r; ++i) acc += k[j + r][i + r] * img[mirror(y + j, h) * w + mirror(x + i, w)];
            out[y * w + x] = acc;
        }
    return out;
}

}  // namespace oracle
