#include <random>

#include "cbir/cosfire.hpp"
#include "cbir/error.hpp"
#include "cbir/eval.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cbir;
using namespace cbir::eval;
using retrieval::HashCode;
using retrieval::RetrievalIndex;

namespace {

HashCode from_bits(const oracle::Bits& b) {
    HashCode c(static_cast<int>(b.size()));
    for (std::size_t j = 0; j < b.size(); ++j) c.set(static_cast<int>(j), b[j] != 0);
    return c;
}

HashCode from_string(const std::string& s) {
    oracle::Bits b;
    for (char ch : s) b.push_back(ch == '1');
    return from_bits(b);
}

QueryResult flags(std::vector<bool> rel, std::size_t r, std::size_t k) { return {std::move(rel), r, k}; }

ErrorCode code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected cbir::Error");
    return ErrorCode::usage;
}

struct Instance {
    std::vector<oracle::Bits> db, qs;
    std::vector<int> dl, ql;
    std::vector<HashCode> db_codes, q_codes;
};

Instance random_instance(std::mt19937_64& rng, int k, int n_db, int n_q, int classes) {
    Instance in;
    for (int i = 0; i < n_db; ++i) {
        in.db.push_back(oracle::random_bits(rng, k));
        in.dl.push_back(static_cast<int>(rng() % classes));
        in.db_codes.push_back(from_bits(in.db.back()));
    }
    for (int i = 0; i < n_q; ++i) {
        in.qs.push_back(oracle::random_bits(rng, k));
        in.ql.push_back(static_cast<int>(rng() % classes));
        in.q_codes.push_back(from_bits(in.qs.back()));
    }
    return in;
}

}  // namespace

TEST_CASE("AP@k examples") {
    CHECK(ap_at_k(flags({true, true, true}, 3, 3)) == 1.0);
    CHECK(ap_at_k(flags({false, false, false}, 5, 3)) == 0.0);
    CHECK(ap_at_k(flags({true, false, true}, 2, 3)) == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-15));
    CHECK(ap_at_k(flags({false, true}, 1, 2)) == 0.5);
    CHECK(code_of([] { ap_at_k(flags({false}, 0, 1)); }) == ErrorCode::empty_input);
}

TEST_CASE("AP@k bounds and perfection") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t k = 1 + rng() % 10;
        std::vector<bool> rel(k);
        std::size_t hits = 0;
        for (std::size_t i = 0; i < k; ++i) hits += (rel[i] = rng() % 2);
        const std::size_t r = hits + rng() % 4;
        if (r == 0) continue;
        const double ap = ap_at_k(flags(rel, r, k));
        CHECK(ap >= 0.0);
        CHECK(ap <= 1.0);
        const std::size_t need = std::min(r, k);
        const bool top_all = std::all_of(rel.begin(), rel.begin() + need, [](bool b) { return b; });
        CHECK((ap == doctest::Approx(1.0)) == top_all);
    }
}

TEST_CASE("mAP examples") {
    const QueryResult one[] = {flags({true, false, true}, 2, 3)};
    CHECK(map_at_k(one).mean == ap_at_k(one[0]));
    const QueryResult two[] = {flags({true}, 1, 1), flags({false}, 1, 1)};
    CHECK(map_at_k(two).mean == 0.5);
    const QueryResult with_empty[] = {flags({true}, 1, 1), flags({false}, 0, 1)};
    const auto s = map_at_k(with_empty);
    CHECK(s.mean == 1.0);
    CHECK(s.evaluated == 1);
    CHECK(s.excluded == 1);
    const QueryResult none[] = {flags({false}, 0, 1)};
    CHECK(code_of([&] { map_at_k(none); }) == ErrorCode::empty_input);
}

TEST_CASE("mAP matches an independent recomputation and ignores query order") {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        auto in = random_instance(rng, 16, 40, 10, 3);
        const RetrievalIndex index(in.db_codes, in.dl);
        const double got = mean_average_precision(index, in.q_codes, in.ql, 8).mean;
        CHECK(got == doctest::Approx(oracle::mean_ap(in.db, in.dl, in.qs, in.ql, 8)).epsilon(1e-12));

        std::vector<std::size_t> perm(in.qs.size());
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<HashCode> pq;
        std::vector<int> pl;
        for (auto i : perm) {
            pq.push_back(in.q_codes[i]);
            pl.push_back(in.ql[i]);
        }
        CHECK(mean_average_precision(index, pq, pl, 8).mean == doctest::Approx(got).epsilon(1e-12));
    }
}

TEST_CASE("mAP@R examples") {
    const RetrievalIndex sep({from_string("00"), from_string("00"), from_string("11"), from_string("11")}, {0, 0, 1, 1});
    const HashCode q[] = {from_string("00"), from_string("11")};
    const int ql[] = {0, 1};
    const auto perfect = map_at_r(sep, q, ql);
    CHECK(perfect.map == std::vector<double>{1.0, 1.0});
    CHECK(perfect.average == 1.0);
    CHECK(perfect.relevant == std::vector<std::size_t>{2, 2});

    const int swapped[] = {1, 0};
    const auto wrong = map_at_r(sep, q, swapped);
    CHECK(wrong.average == 0.0);
}

TEST_CASE("mAP@R matches brute force with per-class cutoffs") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 10; ++trial) {
        auto in = random_instance(rng, 8, 30, 12, 3);
        const RetrievalIndex index(in.db_codes, in.dl);
        const auto got = map_at_r(index, in.q_codes, in.ql);
        double sum = 0.0;
        int classes = 0;
        for (int c = 0; c < 3; ++c) {
            const auto r = static_cast<std::size_t>(std::count(in.dl.begin(), in.dl.end(), c));
            std::vector<oracle::Bits> qs;
            std::vector<int> ql;
            for (std::size_t i = 0; i < in.qs.size(); ++i)
                if (in.ql[i] == c) qs.push_back(in.qs[i]), ql.push_back(c);
            if (qs.empty() || r == 0) continue;
            sum += oracle::mean_ap(in.db, in.dl, qs, ql, r);
            ++classes;
        }
        CHECK(got.average == doctest::Approx(sum / classes).epsilon(1e-12));
    }
}

TEST_CASE("class distance matrix examples") {
    const HashCode codes[] = {from_string("00"), from_string("00"), from_string("11"), from_string("11")};
    const int labels[] = {0, 0, 1, 1};
    const auto m = class_distance_matrix(codes, labels, 2);
    CHECK(m.at(0, 0) == 0.0);
    CHECK(m.at(1, 1) == 0.0);
    CHECK(m.at(0, 1) == 2.0);
    CHECK(m.at(1, 0) == 2.0);
    CHECK(separability_ratio(m) == 0.0);

    const HashCode same[] = {from_string("101"), from_string("101"), from_string("101"), from_string("101")};
    const auto z = class_distance_matrix(same, labels, 2);
    for (double v : z.mean) CHECK(v == 0.0);
    CHECK(code_of([&] { separability_ratio(z); }) == ErrorCode::zero_vector);

    const int lonely[] = {0, 1, 1, 1};
    CHECK(code_of([&] { class_distance_matrix(codes, lonely, 2); }) == ErrorCode::empty_input);
    const int out_of_range[] = {0, 0, 2, 2};
    CHECK(code_of([&] { class_distance_matrix(codes, out_of_range, 2); }) == ErrorCode::invalid_argument);
}

TEST_CASE("class distance matrix matches exhaustive pairs") {
    std::mt19937_64 rng(15);
    auto in = random_instance(rng, 12, 20, 8, 4);
    for (int c = 0; c < 4; ++c) in.dl[c] = in.dl[c + 4] = c;  // every class has two members
    const auto m = class_distance_matrix(in.db_codes, in.dl, 4);
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
            double sum = 0.0;
            int n = 0;
            for (int i = 0; i < 20; ++i)
                for (int j = 0; j < 20; ++j) {
                    if (i == j || in.dl[i] != a || in.dl[j] != b) continue;
                    sum += oracle::hamming(in.db[i], in.db[j]);
                    ++n;
                }
            CHECK(m.at(a, b) == doctest::Approx(sum / n));
            CHECK(m.at(a, b) == m.at(b, a));
            CHECK(m.at(a, b) <= 12.0);
        }

    for (int c = 0; c < 4; ++c) in.ql[c] = c;
    const auto bi = class_distance_matrix(in.q_codes, in.ql, in.db_codes, in.dl, 4);
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
            double sum = 0.0;
            int n = 0;
            for (int i = 0; i < 8; ++i)
                for (int j = 0; j < 20; ++j) {
                    if (in.ql[i] != a || in.dl[j] != b) continue;
                    sum += oracle::hamming(in.qs[i], in.db[j]);
                    ++n;
                }
            CHECK(bi.at(a, b) == doctest::Approx(sum / n));
        }
}

TEST_CASE("separability ratio") {
    ClassDistanceMatrix m{2, {3.0, 3.0, 3.0, 3.0}, {1, 1, 1, 1}};
    CHECK(separability_ratio(m) == 1.0);
    ClassDistanceMatrix n{2, {1.0, 4.0, 4.0, 3.0}, {1, 1, 1, 1}};
    CHECK(separability_ratio(n) == 0.5);
    ClassDistanceMatrix one{1, {0.0}, {1}};
    CHECK(code_of([&] { separability_ratio(one); }) == ErrorCode::degenerate_labels);
}

TEST_CASE("MLP FLOPs") {
    const auto r = reference_mlp_flops(72);
    CHECK(r.total == 374'572);
    const std::uint64_t rows[] = {223'200, 1'200, 300, 120'000, 800, 200, 28'800, 72};
    REQUIRE(r.rows.size() == 8);
    for (std::size_t i = 0; i < 8; ++i) CHECK(r.rows[i].flops == rows[i]);
    CHECK(r.rows[0].component == "Linear Layer 1: m = 372, n = 300");

    const int single[] = {10, 10};
    const bool no[] = {false};
    CHECK(mlp_flops(single, no, no).total == 200);
    const int first[] = {372, 300};
    const bool yes[] = {true};
    CHECK(mlp_flops(first, yes, yes).total == 224'700);

    // Linear in the 2mn term.
    const int wide[] = {744, 300};
    CHECK(mlp_flops(wide, no, no).total == 2 * mlp_flops(first, no, no).total);
    const bool two[] = {true, true};
    CHECK(code_of([&] { mlp_flops(first, two, yes); }) == ErrorCode::dimension_mismatch);
}

TEST_CASE("thousands formatting") {
    CHECK(format_thousands(374572) == "374,572");
    CHECK(format_thousands(1139692788) == "1,139,692,788");
    CHECK(format_thousands(999) == "999");
    CHECK(format_thousands(0) == "0");
}

TEST_CASE("descriptor FLOPs model grows with the bank") {
    cosfire::FilterBank bank;
    bank.orientations = cosfire::default_orientations();
    cosfire::CosfireFilter f;
    f.tuples = {{4.0, 0.0, 2.0, dog::Polarity::center_on}, {4.0, 3.14, 2.0, dog::Polarity::center_on}};
    bank.filters = {f};
    const auto one = descriptor_flops(bank, 64, 64).total;
    bank.filters.push_back(f);
    const auto two = descriptor_flops(bank, 64, 64).total;
    CHECK(two > one);
    CHECK(descriptor_flops(bank, 128, 128).total > two);
}
