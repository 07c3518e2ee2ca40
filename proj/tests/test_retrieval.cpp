#include <filesystem>
#include <fstream>
#include <random>

#include "cbir/error.hpp"
#include "cbir/retrieval.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cbir;
using namespace cbir::retrieval;

namespace {

HashCode from_string(const std::string& s) {
    HashCode c(static_cast<int>(s.size()));
    for (std::size_t j = 0; j < s.size(); ++j) c.set(static_cast<int>(j), s[j] == '1');
    return c;
}

HashCode from_bits(const oracle::Bits& b) {
    HashCode c(static_cast<int>(b.size()));
    for (std::size_t j = 0; j < b.size(); ++j) c.set(static_cast<int>(j), b[j] != 0);
    return c;
}

ErrorCode code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected cbir::Error");
    return ErrorCode::usage;
}

}  // namespace

TEST_CASE("binarize examples") {
    const std::vector<double> a{0.7, -0.2, 0.0, 0.95};
    CHECK(binarize(a, 0.0).to_string() == "1001");
    CHECK(binarize(a, -1.0).to_string() == "1111");
    CHECK(binarize(a, 1.0).to_string() == "0000");
    CHECK(binarize(a, 0.9).to_string() == "0001");
    CHECK(code_of([&] { binarize(a, 1.5); }) == ErrorCode::invalid_argument);
}

TEST_CASE("raising the threshold never sets a bit") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> a(72);
        for (auto& v : a) v = u(rng);
        double t1 = u(rng), t2 = u(rng);
        if (t1 > t2) std::swap(t1, t2);
        const auto lo = binarize(a, t1), hi = binarize(a, t2);
        for (int j = 0; j < 72; ++j) CHECK((!hi.bit(j) || lo.bit(j)));
        CHECK(lo == from_bits(oracle::threshold(a, t1)));
    }
}

TEST_CASE("hamming examples") {
    CHECK(hamming(from_string("0000"), from_string("1111")) == 4);
    CHECK(hamming(from_string("1010"), from_string("1010")) == 0);
    CHECK(hamming(from_string("1100"), from_string("1010")) == 2);
    CHECK(code_of([] { hamming(HashCode(16), HashCode(72)); }) == ErrorCode::dimension_mismatch);
}

TEST_CASE("hamming is a metric and matches per-bit counting") {
    std::mt19937_64 rng(9);
    for (int k : {1, 16, 63, 64, 65, 72, 200}) {
        for (int trial = 0; trial < 30; ++trial) {
            const auto a = oracle::random_bits(rng, k), b = oracle::random_bits(rng, k), c = oracle::random_bits(rng, k);
            const auto ha = from_bits(a), hb = from_bits(b), hc = from_bits(c);
            CHECK(hamming(ha, hb) == oracle::hamming(a, b));
            CHECK(hamming(ha, hb) == hamming(hb, ha));
            CHECK(hamming(ha, ha) == 0);
            CHECK(hamming(ha, hc) <= hamming(ha, hb) + hamming(hb, hc));
            CHECK(hamming(ha, ha.complement()) == k);
        }
    }
}

TEST_CASE("query examples") {
    const RetrievalIndex index({from_string("0000"), from_string("1111"), from_string("0001")}, {0, 1, 0});
    const auto r = query(index, from_string("0000"), 2);
    REQUIRE(r.size() == 2);
    CHECK(r[0] == Match{0, 0, 0});
    CHECK(r[1] == Match{2, 0, 1});
    CHECK(query(index, from_string("1111"), 10).size() == 3);

    const RetrievalIndex ties({from_string("11"), from_string("00"), from_string("11")}, {1, 0, 2}, {10, 20, 30});
    const auto t = query(ties, from_string("11"), 3);
    CHECK(t[0].id == 10);
    CHECK(t[1].id == 30);
    CHECK(t[2].id == 20);
}

TEST_CASE("query errors") {
    const RetrievalIndex index({from_string("01")}, {0});
    CHECK(code_of([&] { query(RetrievalIndex{}, from_string("01"), 1); }) == ErrorCode::empty_input);
    CHECK(code_of([&] { query(index, from_string("01"), 0); }) == ErrorCode::invalid_argument);
    CHECK(code_of([&] { query(index, from_string("011"), 1); }) == ErrorCode::dimension_mismatch);
    CHECK(code_of([] { RetrievalIndex({HashCode(3), HashCode(4)}, {0, 0}); }) == ErrorCode::dimension_mismatch);
}

TEST_CASE("query matches the full-sort oracle") {
    std::mt19937_64 rng(123);
    for (int trial = 0; trial < 100; ++trial) {
        const int k = trial % 2 ? 16 : 72;
        const std::size_t n = 1 + rng() % 120;
        std::vector<oracle::Bits> db;
        std::vector<HashCode> codes;
        std::vector<int> labels;
        for (std::size_t i = 0; i < n; ++i) {
            // Few distinct codes so ties are common.
            db.push_back(i > 0 && rng() % 3 == 0 ? db[rng() % i] : oracle::random_bits(rng, k));
            codes.push_back(from_bits(db.back()));
            labels.push_back(static_cast<int>(rng() % 4));
        }
        const RetrievalIndex index(codes, labels);
        const auto q = oracle::random_bits(rng, k);
        const std::size_t top = 1 + rng() % (n + 5);
        const auto got = query(index, from_bits(q), top);
        const auto want = oracle::rank(db, q);
        REQUIRE(got.size() == std::min(top, n));
        for (std::size_t r = 0; r < got.size(); ++r) {
            CHECK(got[r].id == want[r].index);
            CHECK(got[r].distance == want[r].distance);
            CHECK(got[r].label == labels[want[r].index]);
        }
    }
}

TEST_CASE("permuting the index permutes ids among equal-distance groups only") {
    std::mt19937_64 rng(5);
    std::vector<HashCode> codes;
    std::vector<int> labels;
    for (int i = 0; i < 50; ++i) {
        codes.push_back(from_bits(oracle::random_bits(rng, 16)));
        labels.push_back(i % 3);
    }
    const auto q = from_bits(oracle::random_bits(rng, 16));
    const auto a = query(RetrievalIndex(codes, labels), q, 50);
    std::vector<std::size_t> perm(50);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<HashCode> pc;
    std::vector<int> pl;
    std::vector<std::uint32_t> pid;
    for (auto i : perm) {
        pc.push_back(codes[i]);
        pl.push_back(labels[i]);
        pid.push_back(static_cast<std::uint32_t>(i));
    }
    const auto b = query(RetrievalIndex(pc, pl, pid), q, 50);
    for (std::size_t r = 0; r < 50; ++r) CHECK(a[r].distance == b[r].distance);
}

TEST_CASE("threshold grid") {
    const auto g = default_threshold_grid();
    REQUIRE(g.size() == 21);
    CHECK(g.front() == -1.0);
    CHECK(g[10] == 0.0);
    CHECK(g.back() == 1.0);
}

TEST_CASE("threshold sweep matches an independent mAP oracle") {
    std::mt19937_64 rng(44);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const int k = 16;
    Matrix qa(12, k), ra(40, k);
    for (Eigen::Index i = 0; i < qa.size(); ++i) qa.data()[i] = u(rng);
    for (Eigen::Index i = 0; i < ra.size(); ++i) ra.data()[i] = u(rng);
    std::vector<int> ql, rl;
    for (int i = 0; i < 12; ++i) ql.push_back(i % 3);
    for (int i = 0; i < 40; ++i) rl.push_back(i % 3);

    const auto s = threshold_sweep(qa, ql, ra, rl, 10);
    REQUIRE(s.curve.size() == 21);
    double best = -1.0;
    for (const auto& p : s.curve) {
        std::vector<oracle::Bits> db, qs;
        for (int i = 0; i < 40; ++i) db.push_back(oracle::threshold({ra.row(i).data(), ra.row(i).data() + k}, p.threshold));
        for (int i = 0; i < 12; ++i) qs.push_back(oracle::threshold({qa.row(i).data(), qa.row(i).data() + k}, p.threshold));
        const double want = oracle::mean_ap(db, rl, qs, ql, 10);
        CHECK(p.map == doctest::Approx(want).epsilon(1e-12));
        best = std::max(best, want);
    }
    CHECK(s.best_map == doctest::Approx(best));
    for (const auto& p : s.curve) {
        if (p.map == s.best_map) {
            CHECK(p.threshold == s.best_threshold);
            break;
        }
    }
}

TEST_CASE("sweep is flat between activation values") {
    // Activations all within (0.25, 0.35): every threshold outside that band
    // yields the same codes.
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.26, 0.34);
    Matrix qa(6, 8), ra(20, 8);
    for (Eigen::Index i = 0; i < qa.size(); ++i) qa.data()[i] = u(rng) * (i % 2 ? 1 : -1);
    for (Eigen::Index i = 0; i < ra.size(); ++i) ra.data()[i] = u(rng) * (i % 3 ? 1 : -1);
    std::vector<int> ql{0, 1, 0, 1, 0, 1}, rl;
    for (int i = 0; i < 20; ++i) rl.push_back(i % 2);
    const auto s = threshold_sweep(qa, ql, ra, rl, 5);
    for (std::size_t i = 1; i < s.curve.size(); ++i) {
        const double lo = s.curve[i - 1].threshold, hi = s.curve[i].threshold;
        if (hi <= -0.35 || lo >= 0.35 || (lo >= -0.25 && hi <= 0.25)) CHECK(s.curve[i].map == s.curve[i - 1].map);
    }
}

TEST_CASE("perfectly separated activations score 1 around zero") {
    Matrix qa(4, 4), ra(8, 4);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) qa(i, j) = (i % 2 == 0) == (j < 2) ? 0.9 : -0.9;
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 4; ++j) ra(i, j) = (i % 2 == 0) == (j < 2) ? 0.8 : -0.8;
    const std::vector<int> ql{0, 1, 0, 1}, rl{0, 1, 0, 1, 0, 1, 0, 1};
    const double grid[] = {-0.5, 0.0, 0.5};
    const auto s = threshold_sweep(qa, ql, ra, rl, 4, grid);
    for (const auto& p : s.curve) CHECK(p.map == 1.0);
    CHECK(s.best_threshold == -0.5);
}

TEST_CASE("sweep needs two classes") {
    Matrix a = Matrix::Zero(3, 4);
    const std::vector<int> l{1, 1, 1};
    CHECK(code_of([&] { threshold_sweep(a, l, a, l, 2); }) == ErrorCode::degenerate_labels);
}

TEST_CASE("codes file round trip") {
    std::mt19937_64 rng(8);
    for (int k : {5, 16, 72}) {
        std::vector<HashCode> codes;
        std::vector<int> labels;
        std::vector<std::uint32_t> ids;
        for (int i = 0; i < 9; ++i) {
            codes.push_back(from_bits(oracle::random_bits(rng, k)));
            labels.push_back(i % 4);
            ids.push_back(static_cast<std::uint32_t>(100 + 3 * i));
        }
        const RetrievalIndex index(codes, labels, ids);
        const auto bytes = encode_codes(index);
        CHECK(bytes.size() == 12 + 9 * (5 + (k + 7) / 8));
        const auto back = decode_codes(bytes);
        CHECK(back.codes() == codes);
        CHECK(back.labels() == labels);
        CHECK(back.ids() == ids);
    }
}

TEST_CASE("codes file errors") {
    const RetrievalIndex index({from_string("10101")}, {2});
    auto bytes = encode_codes(index);
    auto magic = bytes;
    magic[1] = 'X';
    CHECK(code_of([&] { decode_codes(magic); }) == ErrorCode::version_mismatch);
    auto cut = bytes;
    cut.pop_back();
    CHECK(code_of([&] { decode_codes(cut); }) == ErrorCode::corrupted_payload);
    auto stray = bytes;
    stray.back() |= 0x80;
    CHECK(code_of([&] { decode_codes(stray); }) == ErrorCode::corrupted_payload);

    const auto dir = std::filesystem::temp_directory_path() / "cbir_codes_test";
    std::filesystem::create_directories(dir);
    save_codes({index, {"a", "b", "c"}}, dir / "c.bin");
    const auto f = load_codes(dir / "c.bin");
    CHECK(f.label_names == std::vector<std::string>{"a", "b", "c"});
    CHECK(f.index.codes() == index.codes());
    CHECK(code_of([&] { load_codes(dir / "none.bin"); }) == ErrorCode::missing_artifact);
    std::filesystem::remove_all(dir);
}
