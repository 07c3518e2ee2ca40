#include "cbir/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "cbir/error.hpp"
#include "cbir/synthetic.hpp"
#include "json.hpp"

namespace cbir::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using imaging::Split;

namespace {

constexpr Split kSplits[] = {Split::train, Split::valid, Split::test};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fixed(double v, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    out << text;
    if (!out) throw Error(ErrorCode::io, "write failed: " + path.string());
}

void require(const fs::path& path, const std::string& what, const std::string& stage) {
    if (!fs::exists(path)) {
        throw Error(ErrorCode::missing_artifact, what + " not found: " + path.string() + " (run " + stage + ")");
    }
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. The exception of
// the lowest failing index is rethrown.
template <class Fn>
void parallel_for(std::size_t n, int threads, Fn fn) {
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const auto count = static_cast<std::size_t>(std::max(1, threads));
    if (count == 1 || n < 2) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < std::min(count, n); ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw Error(ErrorCode::invalid_argument, "config: '" + where + "' must be an object");
    for (const auto& [key, value] : obj.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
            throw Error(ErrorCode::invalid_argument, "config: unknown key '" + where + "." + key + "'");
        }
    }
}

template <class T>
void read(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

fs::path resolve(const fs::path& p, const fs::path& base) {
    if (p.empty() || p.is_absolute() || base.empty()) return p;
    return base / p;
}

imaging::DatasetManifest load_store(const WorkLayout& w) {
    require(w.manifest(), "preprocessed image manifest", "preprocess");
    return imaging::read_manifest(w.manifest());
}

std::vector<std::string> label_names(const WorkLayout& w) { return load_store(w).labels(); }

hashnet::MlpParams load_model_checked(const WorkLayout& w) {
    require(w.model(), "model file", "train");
    return hashnet::load_model(w.model());
}

cosfire::FilterBank load_bank_checked(const WorkLayout& w) {
    require(w.bank(), "bank file", "build-bank");
    return cosfire::load_bank(w.bank());
}

DescriptorSet load_split(const WorkLayout& w, Split s, const std::vector<std::string>& names) {
    require(w.descriptors(s), std::string(imaging::to_string(s)) + " descriptor file", "describe");
    return read_descriptors(w.descriptors(s), names);
}

retrieval::CodesFile load_codes_checked(const WorkLayout& w, Split s) {
    require(w.codes(s), std::string(imaging::to_string(s)) + " codes file", "encode");
    return retrieval::load_codes(w.codes(s));
}

double encode_threshold(const PipelineConfig& cfg) {
    const WorkLayout w{cfg.work_dir};
    if (!fs::exists(w.sweep())) return cfg.threshold;
    std::ifstream in(w.sweep());
    try {
        return json::parse(in).at("best_threshold").get<double>();
    } catch (const json::exception& e) {
        throw Error(ErrorCode::corrupted_payload, "malformed " + w.sweep().string() + ": " + e.what());
    }
}

std::string dump(const json& j) { return j.dump(1) + "\n"; }

json matrix_json(const eval::ClassDistanceMatrix& m) {
    json rows = json::array();
    for (int a = 0; a < m.classes; ++a) {
        json row = json::array();
        for (int b = 0; b < m.classes; ++b) row.push_back(m.at(a, b));
        rows.push_back(row);
    }
    return rows;
}

std::string matrix_csv(const eval::ClassDistanceMatrix& m, const std::vector<std::string>& names) {
    std::string s = "class";
    for (const auto& n : names) s += "," + n;
    s += "\n";
    for (int a = 0; a < m.classes; ++a) {
        s += names[a];
        for (int b = 0; b < m.classes; ++b) s += "," + fmt(m.at(a, b));
        s += "\n";
    }
    return s;
}

}  // namespace

std::size_t GridSpace::combinations() const {
    return bits.size() * learning_rate.size() * batch_size.size() * l1_weight.size() * l2_weight.size() *
           margin.size() * alpha.size();
}

void PipelineConfig::validate() const {
    cosfire.validate();
    train.validate();
    loss.validate();
    if (orientations < 1) throw Error(ErrorCode::invalid_argument, "orientations must be positive");
    if (filters_per_class < 1) throw Error(ErrorCode::invalid_argument, "filters_per_class must be positive");
    if (threads < 1) throw Error(ErrorCode::invalid_argument, "threads must be positive");
    if (top_n < 1) throw Error(ErrorCode::invalid_argument, "top_n must be positive");
    if (!(clip_sigma > 0.0) || clip_iters < 1) throw Error(ErrorCode::invalid_argument, "invalid sigma-clip settings");
    if (!(threshold >= -1.0 && threshold <= 1.0)) throw Error(ErrorCode::invalid_argument, "threshold must lie in [-1,1]");
    if (threshold_grid.empty()) throw Error(ErrorCode::invalid_argument, "threshold grid is empty");
    for (double t : threshold_grid) {
        if (!(t >= -1.0 && t <= 1.0)) throw Error(ErrorCode::invalid_argument, "grid thresholds must lie in [-1,1]");
    }
}

PipelineConfig config_from_json(const std::string& text, const fs::path& base) {
    PipelineConfig cfg;
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::invalid_argument, std::string("config is not valid JSON: ") + e.what());
    }
    try {
        check_keys(doc, "", {"manifest", "work_dir", "seed", "threads", "sigma_clip", "cosfire", "train", "loss",
                             "retrieval", "grid"});
        std::string manifest, work_dir;
        read(doc, "manifest", manifest);
        read(doc, "work_dir", work_dir);
        if (!manifest.empty()) cfg.manifest = resolve(manifest, base);
        if (!work_dir.empty()) cfg.work_dir = resolve(work_dir, base);
        read(doc, "seed", cfg.seed);
        read(doc, "threads", cfg.threads);
        if (doc.contains("sigma_clip")) {
            const auto& s = doc.at("sigma_clip");
            check_keys(s, "sigma_clip", {"n_sigma", "max_iters"});
            read(s, "n_sigma", cfg.clip_sigma);
            read(s, "max_iters", cfg.clip_iters);
        }
        if (doc.contains("cosfire")) {
            const auto& c = doc.at("cosfire");
            check_keys(c, "cosfire",
                       {"sigmas", "radii", "t1", "sigma0_blur", "alpha_blur", "orientations", "filters_per_class"});
            read(c, "sigmas", cfg.cosfire.sigmas);
            read(c, "radii", cfg.cosfire.radii);
            read(c, "t1", cfg.cosfire.t1);
            read(c, "sigma0_blur", cfg.cosfire.sigma0_blur);
            read(c, "alpha_blur", cfg.cosfire.alpha_blur);
            read(c, "orientations", cfg.orientations);
            read(c, "filters_per_class", cfg.filters_per_class);
        }
        if (doc.contains("train")) {
            const auto& t = doc.at("train");
            check_keys(t, "train", {"learning_rate", "batch_size", "epochs", "patience", "hidden1", "hidden2", "bits",
                                    "k_eval", "eval_threshold"});
            read(t, "learning_rate", cfg.train.learning_rate);
            read(t, "batch_size", cfg.train.batch_size);
            read(t, "epochs", cfg.train.epochs);
            read(t, "patience", cfg.train.patience);
            read(t, "hidden1", cfg.train.hidden1);
            read(t, "hidden2", cfg.train.hidden2);
            read(t, "bits", cfg.train.bits);
            read(t, "k_eval", cfg.train.k_eval);
            read(t, "eval_threshold", cfg.train.eval_threshold);
        }
        if (doc.contains("loss")) {
            const auto& l = doc.at("loss");
            check_keys(l, "loss", {"margin", "alpha", "l1_weight", "l2_weight"});
            read(l, "margin", cfg.loss.margin);
            read(l, "alpha", cfg.loss.alpha);
            read(l, "l1_weight", cfg.loss.l1_weight);
            read(l, "l2_weight", cfg.loss.l2_weight);
        }
        if (doc.contains("retrieval")) {
            const auto& r = doc.at("retrieval");
            check_keys(r, "retrieval", {"top_n", "threshold", "threshold_grid"});
            read(r, "top_n", cfg.top_n);
            read(r, "threshold", cfg.threshold);
            read(r, "threshold_grid", cfg.threshold_grid);
        }
        if (doc.contains("grid")) {
            const auto& g = doc.at("grid");
            check_keys(g, "grid", {"bits", "learning_rate", "batch_size", "l1_weight", "l2_weight", "margin", "alpha"});
            read(g, "bits", cfg.grid.bits);
            read(g, "learning_rate", cfg.grid.learning_rate);
            read(g, "batch_size", cfg.grid.batch_size);
            read(g, "l1_weight", cfg.grid.l1_weight);
            read(g, "l2_weight", cfg.grid.l2_weight);
            read(g, "margin", cfg.grid.margin);
            read(g, "alpha", cfg.grid.alpha);
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::invalid_argument, std::string("config: ") + e.what());
    }
    cfg.train.seed = cfg.seed;
    cfg.validate();
    return cfg;
}

PipelineConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::missing_artifact, "config file not found: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return config_from_json(ss.str(), path.parent_path());
}

std::string config_to_json(const PipelineConfig& cfg) {
    json doc;
    doc["manifest"] = cfg.manifest.generic_string();
    doc["work_dir"] = cfg.work_dir.generic_string();
    doc["seed"] = cfg.seed;
    doc["threads"] = cfg.threads;
    doc["sigma_clip"] = {{"n_sigma", cfg.clip_sigma}, {"max_iters", cfg.clip_iters}};
    doc["cosfire"] = {{"sigmas", cfg.cosfire.sigmas},
                      {"radii", cfg.cosfire.radii},
                      {"t1", cfg.cosfire.t1},
                      {"sigma0_blur", cfg.cosfire.sigma0_blur},
                      {"alpha_blur", cfg.cosfire.alpha_blur},
                      {"orientations", cfg.orientations},
                      {"filters_per_class", cfg.filters_per_class}};
    doc["train"] = {{"learning_rate", cfg.train.learning_rate}, {"batch_size", cfg.train.batch_size},
                    {"epochs", cfg.train.epochs},               {"patience", cfg.train.patience},
                    {"hidden1", cfg.train.hidden1},             {"hidden2", cfg.train.hidden2},
                    {"bits", cfg.train.bits},                   {"k_eval", cfg.train.k_eval},
                    {"eval_threshold", cfg.train.eval_threshold}};
    doc["loss"] = {{"margin", cfg.loss.margin},
                   {"alpha", cfg.loss.alpha},
                   {"l1_weight", cfg.loss.l1_weight},
                   {"l2_weight", cfg.loss.l2_weight}};
    doc["retrieval"] = {{"top_n", cfg.top_n}, {"threshold", cfg.threshold}, {"threshold_grid", cfg.threshold_grid}};
    doc["grid"] = {{"bits", cfg.grid.bits},           {"learning_rate", cfg.grid.learning_rate},
                   {"batch_size", cfg.grid.batch_size}, {"l1_weight", cfg.grid.l1_weight},
                   {"l2_weight", cfg.grid.l2_weight}, {"margin", cfg.grid.margin},
                   {"alpha", cfg.grid.alpha}};
    return dump(doc);
}

fs::path WorkLayout::descriptors(Split s) const {
    return root / ("descriptors_" + std::string(imaging::to_string(s)) + ".csv");
}

fs::path WorkLayout::codes(Split s) const { return root / ("codes_" + std::string(imaging::to_string(s)) + ".bin"); }

void write_descriptors(const DescriptorSet& set, const std::vector<std::string>& names, const fs::path& path) {
    std::string s = "id,label";
    for (Eigen::Index c = 0; c < set.descriptors.cols(); ++c) s += ",d" + std::to_string(c);
    s += "\n";
    for (Eigen::Index r = 0; r < set.descriptors.rows(); ++r) {
        s += std::to_string(set.ids[r]) + "," + names.at(set.labels[r]);
        for (Eigen::Index c = 0; c < set.descriptors.cols(); ++c) s += "," + fmt(set.descriptors(r, c));
        s += "\n";
    }
    write_text(path, s);
}

DescriptorSet read_descriptors(const fs::path& path, const std::vector<std::string>& names) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::missing_artifact, "descriptor file not found: " + path.string());
    auto split_line = [](const std::string& line) {
        std::vector<std::string> out;
        std::stringstream ss(line);
        for (std::string f; std::getline(ss, f, ',');) out.push_back(f);
        return out;
    };
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::malformed_header, "empty descriptor file: " + path.string());
    const auto header = split_line(line);
    if (header.size() < 3 || header[0] != "id" || header[1] != "label") {
        throw Error(ErrorCode::malformed_header, "descriptor file must start with id,label,d0,...: " + path.string());
    }
    const std::size_t dims = header.size() - 2;
    DescriptorSet set;
    std::vector<double> values;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_line(line);
        const std::string where = path.string() + ":" + std::to_string(line_no);
        if (fields.size() != header.size()) throw Error(ErrorCode::corrupted_payload, where + ": wrong column count");
        try {
            set.ids.push_back(static_cast<std::uint32_t>(std::stoul(fields[0])));
            for (std::size_t c = 2; c < fields.size(); ++c) values.push_back(std::stod(fields[c]));
        } catch (const std::exception&) {
            throw Error(ErrorCode::corrupted_payload, where + ": unparsable number");
        }
        const auto it = std::find(names.begin(), names.end(), fields[1]);
        if (it == names.end()) throw Error(ErrorCode::corrupted_payload, where + ": unknown label " + fields[1]);
        set.labels.push_back(static_cast<int>(it - names.begin()));
    }
    set.descriptors.resize(static_cast<Eigen::Index>(set.ids.size()), static_cast<Eigen::Index>(dims));
    for (std::size_t i = 0; i < values.size(); ++i) set.descriptors.data()[i] = values[i];
    return set;
}

std::string run_preprocess(const PipelineConfig& cfg) {
    if (cfg.manifest.empty()) throw Error(ErrorCode::usage, "no manifest given (--manifest or config 'manifest')");
    const auto manifest = imaging::read_manifest(cfg.manifest);
    if (manifest.entries.empty()) throw Error(ErrorCode::empty_input, "manifest has no entries: " + cfg.manifest.string());

    const WorkLayout w{cfg.work_dir};
    fs::create_directories(w.images());
    imaging::DatasetManifest store;
    store.entries.resize(manifest.entries.size());
    std::vector<std::string> failures(manifest.entries.size());
    parallel_for(manifest.entries.size(), cfg.threads, [&](std::size_t i) {
        const auto& e = manifest.entries[i];
        char name[32];
        std::snprintf(name, sizeof name, "%06zu.rf32", i);
        const fs::path out = w.images() / name;
        try {
            imaging::save_rawf32(imaging::sigma_clip(imaging::load_image(e.path), cfg.clip_sigma, cfg.clip_iters), out);
        } catch (const Error& err) {
            failures[i] = e.path.string() + ": " + err.what();
        }
        store.entries[i] = {out, e.label, e.split};
    });
    std::size_t failed = 0;
    for (const auto& f : failures) {
        if (f.empty()) continue;
        std::cerr << "unreadable: " << f << "\n";
        ++failed;
    }
    if (failed > 0) throw Error(ErrorCode::io, std::to_string(failed) + " manifest entr" + (failed == 1 ? "y" : "ies") + " could not be read");
    imaging::write_manifest(store, w.manifest());

    json summary = {{"images", store.entries.size()}, {"labels", store.labels()}};
    for (Split s : kSplits) summary["splits"][imaging::to_string(s)] = store.indices_of(s).size();
    const auto text = dump(summary);
    write_text(w.root / "preprocess.json", text);
    return text;
}

cosfire::FilterBank run_build_bank(const PipelineConfig& cfg) {
    const WorkLayout w{cfg.work_dir};
    const auto store = load_store(w);
    const auto names = store.labels();
    std::mt19937_64 rng(cfg.seed);

    cosfire::FilterBank bank;
    bank.orientations = cosfire::default_orientations(cfg.orientations);
    for (const auto& name : names) {
        std::vector<std::size_t> pool;
        for (std::size_t i : store.indices_of(Split::train)) {
            if (store.entries[i].label == name) pool.push_back(i);
        }
        if (pool.empty()) throw Error(ErrorCode::empty_input, "class " + name + " has no training images");

        // Prototypes are drawn without replacement until the pool runs out,
        // then the pool is reshuffled.
        std::vector<std::size_t> order;
        int failures = 0;
        int built = 0;
        while (built < cfg.filters_per_class) {
            if (order.empty()) {
                order = pool;
                std::shuffle(order.begin(), order.end(), rng);
                std::reverse(order.begin(), order.end());
            }
            const std::size_t idx = order.back();
            order.pop_back();
            const auto& entry = store.entries[idx];
            const auto img = imaging::load_image(entry.path);
            try {
                auto f = cosfire::configure_filter(img, cosfire::image_center(img), cfg.cosfire);
                f.label = name;
                f.prototype = entry.path.filename().generic_string();
                bank.filters.push_back(std::move(f));
                ++built;
                failures = 0;
            } catch (const Error& e) {
                if (e.code() != ErrorCode::configuration_failure) throw;
                std::clog << "prototype " << entry.path.filename().string() << " (" << name
                          << ") yields no keypoints; resampling\n";
                if (++failures >= 10) {
                    throw Error(ErrorCode::configuration_failure,
                                "10 consecutive prototypes of class " + name + " failed to configure");
                }
            }
        }
    }
    cosfire::save_bank(bank, w.bank());
    return bank;
}

std::string run_describe(const PipelineConfig& cfg) {
    const WorkLayout w{cfg.work_dir};
    const auto store = load_store(w);
    const auto names = store.labels();
    const auto bank = load_bank_checked(w);
    if (bank.filters.empty()) throw Error(ErrorCode::empty_input, "bank has no filters");

    json summary = {{"bank_size", bank.size()}};
    for (Split s : kSplits) {
        const auto rows = store.indices_of(s);
        DescriptorSet set;
        set.descriptors = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(bank.size()));
        for (std::size_t i : rows) {
            set.ids.push_back(static_cast<std::uint32_t>(i));
            set.labels.push_back(store.label_index(store.entries[i].label));
        }
        parallel_for(rows.size(), cfg.threads, [&](std::size_t r) {
            const auto& path = store.entries[rows[r]].path;
            cosfire::ResponseCache cache(imaging::load_image(path));
            cosfire::Descriptor d;
            try {
                d = cosfire::compute_descriptor(cache, bank);
            } catch (const Error& e) {
                throw Error(e.code(), path.string() + ": " + e.what());
            }
            for (std::size_t c = 0; c < d.size(); ++c) set.descriptors(static_cast<Eigen::Index>(r), c) = d[c];
        });
        write_descriptors(set, names, w.descriptors(s));
        summary["rows"][imaging::to_string(s)] = rows.size();
    }
    const auto text = dump(summary);
    write_text(w.root / "describe.json", text);
    return text;
}

hashnet::TrainResult run_train(const PipelineConfig& cfg) {
    const WorkLayout w{cfg.work_dir};
    const auto names = label_names(w);
    const auto train = load_split(w, Split::train, names);
    const auto valid = load_split(w, Split::valid, names);
    if (valid.ids.empty()) throw Error(ErrorCode::empty_input, "validation split is empty");

    auto tc = cfg.train;
    tc.seed = cfg.seed;
    auto result = hashnet::train(train.labeled(), valid.labeled(), static_cast<int>(train.descriptors.cols()), tc, cfg.loss);
    hashnet::save_model(result.params, w.model(), tc, cfg.loss);

    std::string hist = "epoch,train_loss,valid_map\n";
    for (const auto& r : result.history) hist += std::to_string(r.epoch) + "," + fmt(r.train_loss) + "," + fmt(r.valid_map) + "\n";
    write_text(w.history(), hist);

    json summary = {{"bits", tc.bits}, {"epochs_run", result.history.size()}, {"best_epoch", result.best_epoch}};
    for (const auto& r : result.history) {
        if (r.epoch == result.best_epoch) summary["best_valid_map"] = r.valid_map;
    }
    write_text(w.root / "train.json", dump(summary));
    return result;
}

std::string run_train_grid(const PipelineConfig& cfg) {
    const WorkLayout w{cfg.work_dir};
    const auto names = label_names(w);
    const auto train = load_split(w, Split::train, names);
    const auto valid = load_split(w, Split::valid, names);
    if (valid.ids.empty()) throw Error(ErrorCode::empty_input, "validation split is empty");
    const auto& g = cfg.grid;
    if (g.combinations() == 0) throw Error(ErrorCode::invalid_argument, "grid has an empty axis");

    const std::string header = "bits,learning_rate,batch_size,l1_weight,l2_weight,margin,alpha,best_epoch,valid_map\n";
    write_text(w.grid(), header);
    std::ofstream acc(w.grid(), std::ios::app);

    struct Best {
        double map = -1.0;
        std::string row;
    };
    std::map<int, Best> best;
    std::size_t done = 0;
    for (int bits : g.bits)
        for (double lr : g.learning_rate)
            for (int batch : g.batch_size)
                for (double l1 : g.l1_weight)
                    for (double l2 : g.l2_weight)
                        for (double m : g.margin)
                            for (double a : g.alpha) {
                                auto tc = cfg.train;
                                tc.seed = cfg.seed;
                                tc.bits = bits;
                                tc.learning_rate = lr;
                                tc.batch_size = batch;
                                hashnet::DshLossParams lp{m, a, l1, l2};
                                double map = 0.0;
                                int epoch = 0;
                                try {
                                    const auto r = hashnet::train(train.labeled(), valid.labeled(),
                                                                  static_cast<int>(train.descriptors.cols()), tc, lp);
                                    epoch = r.best_epoch;
                                    for (const auto& h : r.history) {
                                        if (h.epoch == r.best_epoch) map = h.valid_map;
                                    }
                                } catch (const Error& e) {
                                    if (e.code() != ErrorCode::divergence) throw;
                                    std::clog << "diverged: " << e.what() << "\n";
                                    epoch = -1;
                                    map = std::nan("");
                                }
                                const std::string row = std::to_string(bits) + "," + fmt(lr) + "," +
                                                        std::to_string(batch) + "," + fmt(l1) + "," + fmt(l2) + "," +
                                                        fmt(m) + "," + fmt(a) + "," + std::to_string(epoch) + "," +
                                                        fmt(map) + "\n";
                                acc << row << std::flush;
                                if (!std::isnan(map) && map > best[bits].map) best[bits] = {map, row};
                                ++done;
                                std::clog << "grid " << done << "/" << g.combinations() << "\n";
                            }

    std::string table = header;
    json summary = {{"combinations", done}};
    for (const auto& [bits, b] : best) {
        table += b.row;
        summary["best_valid_map"][std::to_string(bits)] = b.map;
    }
    write_text(w.root / "grid_best.csv", table);
    const auto text = dump(summary);
    write_text(w.root / "grid.json", text);
    return text;
}

retrieval::SweepResult run_sweep(const PipelineConfig& cfg) {
    const WorkLayout w{cfg.work_dir};
    const auto names = label_names(w);
    const auto model = load_model_checked(w);
    const auto train = load_split(w, Split::train, names);
    const auto valid = load_split(w, Split::valid, names);
    if (valid.ids.empty()) throw Error(ErrorCode::empty_input, "validation split is empty");

    const auto result = retrieval::threshold_sweep(hashnet::infer(valid.descriptors, model), valid.labels,
                                                   hashnet::infer(train.descriptors, model), train.labels,
                                                   cfg.train.k_eval, cfg.threshold_grid);
    json doc = {{"best_threshold", result.best_threshold}, {"best_map", result.best_map}, {"k_eval", cfg.train.k_eval}};
    std::string csv = "threshold,map\n";
    for (const auto& p : result.curve) {
        doc["curve"].push_back({{"threshold", p.threshold}, {"map", p.map}});
        csv += fmt(p.threshold) + "," + fmt(p.map) + "\n";
    }
    write_text(w.sweep(), dump(doc));
    write_text(w.root / "sweep.csv", csv);
    return result;
}

std::string run_encode(const PipelineConfig& cfg) {
    const WorkLayout w{cfg.work_dir};
    const auto names = label_names(w);
    const auto model = load_model_checked(w);
    const double t = encode_threshold(cfg);
    json summary = {{"threshold", t}, {"bits", model.bits()}};
    for (Split s : kSplits) {
        const auto set = load_split(w, s, names);
        if (set.ids.empty()) continue;
        retrieval::RetrievalIndex index(retrieval::binarize_rows(hashnet::infer(set.descriptors, model), t), set.labels,
                                        set.ids);
        retrieval::save_codes({std::move(index), names}, w.codes(s));
        summary["codes"][imaging::to_string(s)] = set.ids.size();
    }
    const auto text = dump(summary);
    write_text(w.root / "encode.json", text);
    return text;
}

QueryOutput run_query(const PipelineConfig& cfg, const QueryRequest& req) {
    const WorkLayout w{cfg.work_dir};
    if (req.image.has_value() == req.codes.has_value()) {
        throw Error(ErrorCode::usage, "query needs exactly one of --image or --codes");
    }
    const fs::path index_path = req.index.value_or(w.codes(Split::train));
    if (!fs::exists(index_path)) throw Error(ErrorCode::missing_artifact, "index codes file not found: " + index_path.string());
    const auto index = retrieval::load_codes(index_path);

    retrieval::HashCode q;
    if (req.image) {
        const auto bank = load_bank_checked(w);
        const auto model = load_model_checked(w);
        if (!fs::exists(*req.image)) throw Error(ErrorCode::missing_artifact, "query image not found: " + req.image->string());
        const auto img = imaging::sigma_clip(imaging::load_image(*req.image), cfg.clip_sigma, cfg.clip_iters);
        const auto d = cosfire::compute_descriptor(img, bank);
        Matrix row(1, static_cast<Eigen::Index>(d.size()));
        for (std::size_t c = 0; c < d.size(); ++c) row(0, static_cast<Eigen::Index>(c)) = d[c];
        q = retrieval::binarize_rows(hashnet::infer(row, model), encode_threshold(cfg)).front();
    } else {
        if (!req.id) throw Error(ErrorCode::usage, "--codes needs --id");
        if (!fs::exists(*req.codes)) throw Error(ErrorCode::missing_artifact, "codes file not found: " + req.codes->string());
        const auto source = retrieval::load_codes(*req.codes);
        const auto& ids = source.index.ids();
        const auto it = std::find(ids.begin(), ids.end(), *req.id);
        if (it == ids.end()) throw Error(ErrorCode::invalid_argument, "id " + std::to_string(*req.id) + " not in " + req.codes->string());
        q = source.index.codes()[static_cast<std::size_t>(it - ids.begin())];
    }
    return {retrieval::query(index.index, q, cfg.top_n), index.label_names};
}

EvaluationReport run_evaluate(const PipelineConfig& cfg) {
    const WorkLayout w{cfg.work_dir};
    const auto names = label_names(w);
    const auto model = load_model_checked(w);
    const auto train = load_codes_checked(w, Split::train);
    const auto test = load_codes_checked(w, Split::test);
    const int classes = static_cast<int>(names.size());

    EvaluationReport r;
    r.bits = train.index.bits();
    r.threshold = encode_threshold(cfg);
    r.k_eval = cfg.train.k_eval;
    r.label_names = names;
    r.valid_map = std::nan("");
    if (fs::exists(w.codes(Split::valid))) {
        const auto valid = retrieval::load_codes(w.codes(Split::valid));
        r.valid_map = eval::mean_average_precision(train.index, valid.index.codes(), valid.index.labels(), r.k_eval).mean;
    }
    r.test_map = eval::mean_average_precision(train.index, test.index.codes(), test.index.labels(), r.k_eval).mean;
    r.test_map_at_r = eval::map_at_r(train.index, test.index.codes(), test.index.labels());
    r.train_distances = eval::class_distance_matrix(train.index.codes(), train.index.labels(), classes);
    r.test_distances = eval::class_distance_matrix(test.index.codes(), test.index.labels(), train.index.codes(),
                                                   train.index.labels(), classes);
    r.train_separability = eval::separability_ratio(r.train_distances);
    r.test_separability = eval::separability_ratio(r.test_distances);

    const auto dims = model.dims();
    const int sizes[] = {dims[0], dims[1], dims[2], dims[3]};
    const bool bn[] = {true, true, false};
    const bool th[] = {true, true, true};
    const auto flops = eval::mlp_flops(sizes, bn, th);

    json doc;
    doc["bits"] = r.bits;
    doc["threshold"] = r.threshold;
    doc["k_eval"] = r.k_eval;
    doc["valid_map"] = std::isnan(r.valid_map) ? json(nullptr) : json(r.valid_map);
    doc["test_map"] = r.test_map;
    for (std::size_t i = 0; i < r.test_map_at_r.classes.size(); ++i) {
        const int c = r.test_map_at_r.classes[i];
        doc["test_map_at_r"]["classes"].push_back(
            {{"class", names[c]}, {"relevant", r.test_map_at_r.relevant[i]}, {"map", r.test_map_at_r.map[i]}});
    }
    doc["test_map_at_r"]["average"] = r.test_map_at_r.average;
    doc["labels"] = names;
    doc["distances"]["train"] = matrix_json(r.train_distances);
    doc["distances"]["test_vs_train"] = matrix_json(r.test_distances);
    doc["separability"] = {{"train", r.train_separability}, {"test_vs_train", r.test_separability}};
    for (const auto& row : flops.rows) doc["flops"]["rows"].push_back({{"component", row.component}, {"flops", row.flops}});
    doc["flops"]["total"] = flops.total;
    write_text(w.report(), dump(doc));

    write_text(w.root / "table_map.csv", "bits,threshold,k,valid_map,test_map\n" + std::to_string(r.bits) + "," +
                                             fmt(r.threshold) + "," + std::to_string(r.k_eval) + "," +
                                             fmt(r.valid_map) + "," + fmt(r.test_map) + "\n");
    std::string per_class = "class,relevant,map_at_r\n";
    for (std::size_t i = 0; i < r.test_map_at_r.classes.size(); ++i) {
        per_class += names[r.test_map_at_r.classes[i]] + "," + std::to_string(r.test_map_at_r.relevant[i]) + "," +
                     fmt(r.test_map_at_r.map[i]) + "\n";
    }
    per_class += "average,," + fmt(r.test_map_at_r.average) + "\n";
    write_text(w.root / "table_map_at_r.csv", per_class);
    std::string flops_csv = "component,formula,flops\n";
    for (const auto& row : flops.rows) flops_csv += "\"" + row.component + "\"," + row.formula + "," + std::to_string(row.flops) + "\n";
    flops_csv += "Total,," + std::to_string(flops.total) + "\n";
    write_text(w.root / "table_flops.csv", flops_csv);
    write_text(w.root / "distances_train.csv", matrix_csv(r.train_distances, names));
    write_text(w.root / "distances_test_vs_train.csv", matrix_csv(r.test_distances, names));
    return r;
}

fs::path write_synthetic_dataset(const fs::path& dir, int per_class, int size, std::uint64_t seed) {
    synthetic::Options opt;
    opt.size = size;
    const auto samples = synthetic::make_dataset(per_class, seed, opt);
    fs::create_directories(dir);
    imaging::DatasetManifest manifest;
    std::vector<int> seen(synthetic::kMorphologies, 0);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        // 60 / 20 / 20 split within each class.
        const int n = seen[s.label]++;
        const int bucket = (n * 10) / per_class;
        const Split split = bucket < 6 ? Split::train : (bucket < 8 ? Split::valid : Split::test);
        char name[32];
        std::snprintf(name, sizeof name, "img%05zu.rf32", i);
        imaging::save_rawf32(s.image, dir / name);
        manifest.entries.push_back({dir / name, synthetic::to_string(static_cast<synthetic::Morphology>(s.label)), split});
    }
    const auto path = dir / "manifest.csv";
    imaging::write_manifest(manifest, path);
    return path;
}

std::string flops_text(int bits) {
    const auto report = eval::reference_mlp_flops(bits);
    std::ostringstream out;
    std::size_t width = 0;
    for (const auto& r : report.rows) width = std::max(width, r.component.size());
    out << "MLP hashing network, 372 -> 300 -> 200 -> " << bits << "\n";
    for (const auto& r : report.rows) {
        out << "  " << r.component << std::string(width - r.component.size() + 2, ' ') << r.formula
            << std::string(6 - std::min<std::size_t>(5, r.formula.size()), ' ') << eval::format_thousands(r.flops) << "\n";
    }
    out << "  Total" << std::string(width - 3, ' ') << "      " << eval::format_thousands(report.total) << "\n";
    out << "Descriptor stage (reference COSFIRE configuration): "
        << eval::format_thousands(eval::kReferenceDescriptorFlops) << "\n";
    return out.str();
}

namespace {

void print_report(const EvaluationReport& r) {
    std::cout << "bits " << r.bits << ", threshold " << fixed(r.threshold, 2) << ", k " << r.k_eval << "\n";
    if (!std::isnan(r.valid_map)) std::cout << "valid mAP@" << r.k_eval << "  " << fixed(100.0 * r.valid_map, 2) << "%\n";
    std::cout << "test  mAP@" << r.k_eval << "  " << fixed(100.0 * r.test_map, 2) << "%\n";
    std::cout << "test mAP@R per class\n";
    for (std::size_t i = 0; i < r.test_map_at_r.classes.size(); ++i) {
        std::cout << "  " << r.label_names[r.test_map_at_r.classes[i]] << " (R=" << r.test_map_at_r.relevant[i]
                  << ")  " << fixed(100.0 * r.test_map_at_r.map[i], 2) << "%\n";
    }
    std::cout << "  average  " << fixed(100.0 * r.test_map_at_r.average, 2) << "%\n";
    std::cout << "separability (intra/inter): train " << fixed(r.train_separability, 4) << ", test vs train "
              << fixed(r.test_separability, 4) << "\n";
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"Content-based image retrieval with COSFIRE descriptors and learned binary codes", "cbir"};
    app.require_subcommand(1);

    std::string config_path, manifest, work_dir;
    std::optional<std::uint64_t> seed;
    std::optional<int> bits, threads;
    std::optional<std::size_t> top_n, k_eval;
    bool as_json = false;
    app.add_option("--config", config_path, "Pipeline config (JSON)");
    app.add_option("--manifest", manifest, "Dataset manifest CSV (path,label,split)");
    app.add_option("--work-dir", work_dir, "Directory for intermediate and output files");
    app.add_option("--seed", seed, "Random seed");
    app.add_option("--bits", bits, "Hash code length k");
    app.add_option("--top-n", top_n, "Number of results returned by query");
    app.add_option("--k-eval", k_eval, "Cutoff k for mAP@k");
    app.add_option("--threads", threads, "Worker threads for per-image stages");
    app.add_flag("--json", as_json, "Print the machine-readable summary instead of text");

    auto* preprocess = app.add_subcommand("preprocess", "Sigma-clip every manifest image into the work directory");
    auto* build_bank = app.add_subcommand("build-bank", "Configure COSFIRE filters from random training prototypes");
    auto* describe = app.add_subcommand("describe", "Compute descriptor matrices for every split");
    auto* train = app.add_subcommand("train", "Train the hashing network");
    bool grid = false;
    train->add_flag("--grid", grid, "Run the full hyperparameter grid and write grid.csv");
    auto* sweep = app.add_subcommand("sweep-threshold", "Pick the binarization threshold on the validation split");
    auto* encode = app.add_subcommand("encode", "Write binary codes for every split");
    auto* query = app.add_subcommand("query", "Rank the training codes against one query");
    QueryRequest req;
    std::string image, codes, index;
    std::optional<std::uint32_t> id;
    query->add_option("--image", image, "Query image (.pgm or .rf32)");
    query->add_option("--codes", codes, "Codes file holding the query record");
    query->add_option("--id", id, "Record id within --codes");
    query->add_option("--index", index, "Codes file to search (default: training codes)");
    auto* evaluate = app.add_subcommand("evaluate", "Score test and validation codes against the training codes");
    auto* flops = app.add_subcommand("flops", "Print the operation count of the hashing network");
    auto* synth = app.add_subcommand("synth", "Write a synthetic four-class blob dataset");
    std::string synth_out = "synthetic";
    int per_class = 60;
    int size = 65;
    synth->add_option("--out", synth_out, "Output directory");
    synth->add_option("--per-class", per_class, "Images per class");
    synth->add_option("--size", size, "Image side length");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        PipelineConfig cfg = config_path.empty() ? PipelineConfig{} : load_config(config_path);
        if (!manifest.empty()) cfg.manifest = manifest;
        if (!work_dir.empty()) cfg.work_dir = work_dir;
        if (seed) cfg.seed = *seed;
        if (bits) {
            cfg.train.bits = *bits;
            cfg.grid.bits = {*bits};
        }
        if (top_n) cfg.top_n = *top_n;
        if (k_eval) cfg.train.k_eval = *k_eval;
        if (threads) cfg.threads = *threads;
        cfg.train.seed = cfg.seed;
        cfg.validate();

        auto emit = [&](const std::string& json_text, const std::string& human) {
            std::cout << (as_json ? json_text : human);
        };
        auto flat = [](const std::string& json_text) {
            const auto doc = json::parse(json_text);
            std::string out;
            for (const auto& [k, v] : doc.items()) out += k + ": " + v.dump() + "\n";
            return out;
        };
        const auto t0 = std::chrono::steady_clock::now();

        if (*preprocess) {
            const auto text = run_preprocess(cfg);
            emit(text, "preprocessed into " + WorkLayout{cfg.work_dir}.images().string() + "\n" + flat(text));
        } else if (*build_bank) {
            const auto bank = run_build_bank(cfg);
            std::size_t tuples = 0;
            for (const auto& f : bank.filters) tuples += f.size();
            json j = {{"filters", bank.size()}, {"tuples", tuples}, {"orientations", bank.orientations.size()}};
            emit(dump(j), "bank of " + std::to_string(bank.size()) + " filters (" + std::to_string(tuples) +
                              " tuples) written to " + WorkLayout{cfg.work_dir}.bank().string() + "\n");
        } else if (*describe) {
            const auto text = run_describe(cfg);
            emit(text, flat(text));
        } else if (*train) {
            if (grid) {
                const auto text = run_train_grid(cfg);
                emit(text, flat(text));
            } else {
                const auto r = run_train(cfg);
                double best = 0.0;
                for (const auto& h : r.history) {
                    if (h.epoch == r.best_epoch) best = h.valid_map;
                }
                json j = {{"best_epoch", r.best_epoch}, {"epochs_run", r.history.size()}, {"best_valid_map", best}};
                emit(dump(j), "trained " + std::to_string(r.history.size()) + " epochs; best epoch " +
                                  std::to_string(r.best_epoch) + ", valid mAP@" + std::to_string(cfg.train.k_eval) +
                                  " " + fixed(100.0 * best, 2) + "%\n");
            }
        } else if (*sweep) {
            const auto r = run_sweep(cfg);
            std::string human;
            for (const auto& p : r.curve) human += fixed(p.threshold, 1) + "  " + fixed(100.0 * p.map, 2) + "%\n";
            human += "best threshold " + fixed(r.best_threshold, 1) + " (" + fixed(100.0 * r.best_map, 2) + "%)\n";
            std::ifstream in(WorkLayout{cfg.work_dir}.sweep());
            std::stringstream ss;
            ss << in.rdbuf();
            emit(ss.str(), human);
        } else if (*encode) {
            const auto text = run_encode(cfg);
            emit(text, flat(text));
        } else if (*query) {
            if (!image.empty()) req.image = image;
            if (!codes.empty()) req.codes = codes;
            if (!index.empty()) req.index = index;
            req.id = id;
            const auto out = run_query(cfg, req);
            json j = json::array();
            std::string human = "rank id label distance\n";
            for (std::size_t r = 0; r < out.matches.size(); ++r) {
                const auto& m = out.matches[r];
                const std::string label = m.label < static_cast<int>(out.label_names.size())
                                              ? out.label_names[m.label]
                                              : std::to_string(m.label);
                j.push_back({{"id", m.id}, {"label", label}, {"distance", m.distance}});
                human += std::to_string(r + 1) + " " + std::to_string(m.id) + " " + label + " " +
                         std::to_string(m.distance) + "\n";
            }
            emit(dump(j), human);
        } else if (*evaluate) {
            const auto r = run_evaluate(cfg);
            if (as_json) {
                std::ifstream in(WorkLayout{cfg.work_dir}.report());
                std::cout << in.rdbuf();
            } else {
                print_report(r);
            }
        } else if (*flops) {
            const int k = bits.value_or(72);
            const auto report = eval::reference_mlp_flops(k);
            json j;
            for (const auto& row : report.rows) j["rows"].push_back({{"component", row.component}, {"flops", row.flops}});
            j["total"] = report.total;
            j["descriptor_reference"] = eval::kReferenceDescriptorFlops;
            emit(dump(j), flops_text(k));
        } else if (*synth) {
            const auto path = write_synthetic_dataset(synth_out, per_class, size, cfg.seed);
            emit(dump({{"manifest", path.generic_string()}}), "wrote " + path.string() + "\n");
        }

        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!*flops) std::clog << "done in " << fixed(secs, 1) << " s\n";
        return 0;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e.code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace cbir::cli
