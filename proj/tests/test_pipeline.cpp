#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include "cbir/error.hpp"
#include "cbir/pipeline.hpp"
#include "doctest.h"

using namespace cbir;
using namespace cbir::cli;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("cbir_" + tag + "_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

PipelineConfig small_config(const fs::path& manifest, const fs::path& work) {
    PipelineConfig cfg;
    cfg.manifest = manifest;
    cfg.work_dir = work;
    cfg.seed = 3;
    cfg.filters_per_class = 2;
    cfg.train.bits = 16;
    cfg.train.hidden1 = 24;
    cfg.train.hidden2 = 16;
    cfg.train.epochs = 4;
    cfg.train.batch_size = 8;
    cfg.train.k_eval = 5;
    cfg.loss.margin = 32;
    return cfg;
}

void run_all(const PipelineConfig& cfg) {
    run_preprocess(cfg);
    run_build_bank(cfg);
    run_describe(cfg);
    run_train(cfg);
    run_sweep(cfg);
    run_encode(cfg);
    run_evaluate(cfg);
}

int run_tool(std::vector<std::string> args) {
    args.insert(args.begin(), "cbir");
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    return run_cli(static_cast<int>(argv.size()), argv.data());
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

TEST_CASE("config defaults mirror the search space") {
    const PipelineConfig cfg;
    CHECK(cfg.grid.bits == std::vector<int>{16, 24, 32, 40, 48, 56, 64, 72, 80});
    CHECK(cfg.grid.learning_rate == std::vector<double>{0.1, 0.01});
    CHECK(cfg.grid.batch_size == std::vector<int>{32, 48, 64});
    CHECK(cfg.grid.margin == std::vector<double>{24, 36, 48});
    CHECK(cfg.grid.alpha == std::vector<double>{1e-3, 1e-5});
    CHECK(cfg.grid.combinations() == 1296);
    CHECK(cfg.train.k_eval == 100);
    CHECK(cfg.filters_per_class == 93);
}

TEST_CASE("config json round trip and validation") {
    PipelineConfig cfg;
    cfg.seed = 9;
    cfg.train.bits = 24;
    cfg.cosfire.radii = {0, 3, 6};
    const auto back = config_from_json(config_to_json(cfg));
    CHECK(back.seed == 9);
    CHECK(back.train.bits == 24);
    CHECK(back.cosfire == cfg.cosfire);
    CHECK(config_to_json(back) == config_to_json(cfg));

    CHECK(code_of([] { config_from_json("{\"bogus\": 1}"); }) == ErrorCode::invalid_argument);
    CHECK(code_of([] { config_from_json("{\"train\": {\"bits\": 0}}"); }) == ErrorCode::invalid_argument);
    CHECK(code_of([] { config_from_json("not json"); }) == ErrorCode::invalid_argument);
    const auto rel = config_from_json("{\"manifest\": \"m.csv\"}", "/data");
    CHECK(rel.manifest == fs::path("/data/m.csv"));
}

TEST_CASE("descriptor csv round trip") {
    TempDir dir("desc");
    DescriptorSet s;
    s.ids = {4, 9};
    s.labels = {1, 0};
    s.descriptors.resize(2, 3);
    s.descriptors << 0.1, 0.2, 1.0 / 3.0, 0.0, 1e-300, 0.5;
    const std::vector<std::string> names{"a", "b"};
    write_descriptors(s, names, dir.path / "d.csv");
    const auto back = read_descriptors(dir.path / "d.csv", names);
    CHECK(back.ids == s.ids);
    CHECK(back.labels == s.labels);
    CHECK(back.descriptors == s.descriptors);
    CHECK(code_of([&] { read_descriptors(dir.path / "d.csv", {"x"}); }) == ErrorCode::corrupted_payload);
}

TEST_CASE("preprocess errors") {
    TempDir dir("pre");
    {
        std::ofstream(dir.path / "empty.csv") << "path,label,split\n";
    }
    auto cfg = small_config(dir.path / "empty.csv", dir.path / "work");
    CHECK(code_of([&] { run_preprocess(cfg); }) == ErrorCode::empty_input);
    {
        std::ofstream(dir.path / "bad.csv") << "path,label,split\nmissing.pgm,a,train\n";
    }
    cfg.manifest = dir.path / "bad.csv";
    CHECK(code_of([&] { run_preprocess(cfg); }) == ErrorCode::io);
}

TEST_CASE("downstream stages name missing artifacts") {
    TempDir dir("missing");
    const auto cfg = small_config({}, dir.path / "work");
    try {
        run_build_bank(cfg);
        FAIL("expected error");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::missing_artifact);
        CHECK(std::string(e.what()).find("not found") != std::string::npos);
    }
}

TEST_CASE("pipeline on a tiny synthetic dataset") {
    TempDir dir("pipe");
    const auto manifest = write_synthetic_dataset(dir.path / "data", 10, 65, 1);
    auto cfg = small_config(manifest, dir.path / "work");
    const WorkLayout w{cfg.work_dir};

    const auto pre = run_preprocess(cfg);
    CHECK(pre.find("\"images\": 40") != std::string::npos);
    const auto bank = run_build_bank(cfg);
    CHECK(bank.size() == 8);
    run_describe(cfg);
    const auto names = imaging::read_manifest(w.manifest()).labels();
    const auto train = read_descriptors(w.descriptors(imaging::Split::train), names);
    CHECK(train.descriptors.rows() == 24);
    CHECK(train.descriptors.cols() == 8);
    for (Eigen::Index r = 0; r < train.descriptors.rows(); ++r) CHECK(train.descriptors.row(r).norm() == doctest::Approx(1.0));

    run_train(cfg);
    const auto sweep = run_sweep(cfg);
    CHECK(sweep.curve.size() == 21);
    run_encode(cfg);
    const auto report = run_evaluate(cfg);
    CHECK(report.bits == 16);
    CHECK(report.test_map >= 0.0);
    CHECK(report.test_map <= 1.0);
    CHECK(fs::exists(w.report()));
    CHECK(fs::exists(w.root / "table_flops.csv"));

    // A stored record queried against its own index comes back first at distance 0.
    QueryRequest req;
    req.codes = w.codes(imaging::Split::train);
    req.id = train.ids[3];
    cfg.top_n = 1;
    const auto hit = run_query(cfg, req);
    REQUIRE(hit.matches.size() == 1);
    CHECK(hit.matches[0].distance == 0);

    QueryRequest by_image;
    by_image.image = imaging::read_manifest(manifest).entries[0].path;
    cfg.top_n = 5;
    CHECK(run_query(cfg, by_image).matches.size() == 5);
}

TEST_CASE("reruns are byte-identical, including after deleting intermediates") {
    TempDir dir("det");
    const auto manifest = write_synthetic_dataset(dir.path / "data", 8, 49, 2);
    auto cfg = small_config(manifest, dir.path / "a");
    cfg.threads = 1;
    run_all(cfg);
    auto cfg2 = cfg;
    cfg2.work_dir = dir.path / "b";
    cfg2.threads = 3;
    run_all(cfg2);
    for (const char* f : {"bank.json", "descriptors_train.csv", "descriptors_test.csv", "model.bin", "history.csv",
                          "sweep.json", "codes_train.bin", "codes_test.bin", "report.json", "table_map_at_r.csv"}) {
        CHECK_MESSAGE(slurp(cfg.work_dir / f) == slurp(cfg2.work_dir / f), f);
    }
    const auto before = slurp(cfg.work_dir / "report.json");
    fs::remove(cfg.work_dir / "descriptors_train.csv");
    fs::remove(cfg.work_dir / "model.bin");
    run_describe(cfg);
    run_train(cfg);
    run_sweep(cfg);
    run_encode(cfg);
    run_evaluate(cfg);
    CHECK(slurp(cfg.work_dir / "report.json") == before);
}

TEST_CASE("separable codes evaluate to mAP 1") {
    TempDir dir("sep");
    const auto manifest = write_synthetic_dataset(dir.path / "data", 5, 33, 0);
    auto cfg = small_config(manifest, dir.path / "work");
    run_preprocess(cfg);
    const WorkLayout w{cfg.work_dir};
    const auto store = imaging::read_manifest(w.manifest());
    const auto names = store.labels();
    // Hand-built codes: class c sets bit c only.
    for (auto split : {imaging::Split::train, imaging::Split::test}) {
        std::vector<retrieval::HashCode> codes;
        std::vector<int> labels;
        std::vector<std::uint32_t> ids;
        for (auto i : store.indices_of(split)) {
            const int c = store.label_index(store.entries[i].label);
            retrieval::HashCode code(8);
            code.set(c, true);
            codes.push_back(code);
            labels.push_back(c);
            ids.push_back(static_cast<std::uint32_t>(i));
        }
        retrieval::save_codes({retrieval::RetrievalIndex(codes, labels, ids), names}, w.codes(split));
    }
    hashnet::save_model(hashnet::init_params({4, 3, 3, 8}, 0), w.model(), cfg.train, cfg.loss);
    const auto r = run_evaluate(cfg);
    CHECK(r.test_map == 1.0);
    CHECK(r.test_map_at_r.average == 1.0);
    CHECK(r.test_separability == 0.0);
}

TEST_CASE("cli exit codes and flops") {
    CHECK(run_tool({"flops"}) == 0);
    CHECK(flops_text(72).find("374,572") != std::string::npos);
    CHECK(flops_text(72).find("1,139,692,788") != std::string::npos);
    CHECK(run_tool({}) == 1);
    CHECK(run_tool({"no-such-command"}) == 1);
    CHECK(run_tool({"--bits", "0", "flops"}) == 1);
    TempDir dir("cli");
    CHECK(run_tool({"--work-dir", (dir.path / "w").string(), "build-bank"}) == 2);
    CHECK(run_tool({"--config", (dir.path / "none.json").string(), "flops"}) == 2);
}
