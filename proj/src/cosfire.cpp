#include "cbir/cosfire.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "cbir/error.hpp"
#include "json.hpp"

namespace cbir::cosfire {

using dog::Polarity;
using json = nlohmann::json;

namespace {

constexpr int kAngularSamples = 360;
constexpr Polarity kPolarities[] = {Polarity::center_on, Polarity::center_off};

double wrap_angle(double a) {
    double r = std::fmod(a, kTwoPi);
    if (r < 0.0) r += kTwoPi;
    if (r >= kTwoPi) r = 0.0;
    return r;
}

// Indices of circular local maxima. A run of equal samples counts as one
// maximum (at its middle) when it is strictly above both flanking samples.
std::vector<int> circular_maxima(std::span<const double> profile) {
    const int n = static_cast<int>(profile.size());
    std::vector<int> out;
    int start = -1;
    for (int i = 0; i < n; ++i) {
        if (profile[i] != profile[(i + n - 1) % n]) {
            start = i;
            break;
        }
    }
    if (start < 0) return out;  // flat circle

    int i = start;
    int visited = 0;
    while (visited < n) {
        int len = 1;
        while (len < n && profile[(i + len) % n] == profile[i]) ++len;
        const double prev = profile[(i + n - 1) % n];
        const double next = profile[(i + len) % n];
        if (profile[i] > prev && profile[i] > next) out.push_back((i + (len - 1) / 2) % n);
        i = (i + len) % n;
        visited += len;
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Adds the shifted log map into log_sum. Content moves by (-dx, -dy):
// out(x, y) = in(x + dx, y + dy), and cells shifted in from outside are 0.
void accumulate_shifted_log(const Grid& log_map, int dx, int dy, std::vector<double>& log_sum) {
    const int w = log_map.width();
    const int h = log_map.height();
    const double neg_inf = -std::numeric_limits<double>::infinity();
    const auto src = log_map.values();
    for (int y = 0; y < h; ++y) {
        const int sy = y + dy;
        double* row = log_sum.data() + static_cast<std::size_t>(y) * w;
        if (sy < 0 || sy >= h) {
            std::fill(row, row + w, neg_inf);
            continue;
        }
        const double* srow = src.data() + static_cast<std::size_t>(sy) * w;
        const int x_begin = std::clamp(-dx, 0, w);
        const int x_end = std::clamp(w - dx, 0, w);
        std::fill(row, row + x_begin, neg_inf);
        for (int x = x_begin; x < x_end; ++x) row[x] += srow[x + dx];
        std::fill(row + x_end, row + w, neg_inf);
    }
}

// Sum over tuples of the shifted log maps; the response is exp(sum / n).
void log_response(ResponseCache& cache, const CosfireFilter& f, std::vector<double>& log_sum) {
    const auto& hp = f.hyperparams;
    std::fill(log_sum.begin(), log_sum.end(), 0.0);
    for (const Tuple& t : f.tuples) {
        const Grid& lb = cache.log_blurred(t.sigma, t.polarity, hp.t1, hp.blur_sigma(t.rho));
        const int dx = static_cast<int>(std::lround(t.rho * std::cos(t.phi)));
        const int dy = static_cast<int>(std::lround(t.rho * std::sin(t.phi)));
        accumulate_shifted_log(lb, dx, dy, log_sum);
    }
}

}  // namespace

void Hyperparams::validate() const {
    if (sigmas.empty()) throw Error(ErrorCode::invalid_argument, "COSFIRE sigma bank is empty");
    for (double s : sigmas) {
        if (!(s > 0.0)) throw Error(ErrorCode::invalid_argument, "COSFIRE sigma values must be positive");
    }
    if (radii.empty()) throw Error(ErrorCode::invalid_argument, "COSFIRE radius set is empty");
    for (double r : radii) {
        if (!(r >= 0.0)) throw Error(ErrorCode::invalid_argument, "COSFIRE radii must be nonnegative");
    }
    if (!(t1 >= 0.0 && t1 <= 1.0)) throw Error(ErrorCode::invalid_argument, "t1 must lie in [0,1]");
    if (!(sigma0_blur > 0.0)) throw Error(ErrorCode::invalid_argument, "sigma0_blur must be positive");
    if (!(alpha_blur >= 0.0)) throw Error(ErrorCode::invalid_argument, "alpha_blur must be nonnegative");
}

std::vector<double> default_orientations(int count) {
    if (count < 1) throw Error(ErrorCode::invalid_argument, "orientation count must be positive");
    std::vector<double> out(static_cast<std::size_t>(count));
    for (int k = 0; k < count; ++k) out[k] = kTwoPi * k / count;
    return out;
}

Point image_center(const Grid& img) { return {(img.width() - 1) / 2.0, (img.height() - 1) / 2.0}; }

double sample_bilinear(const Grid& g, double x, double y) {
    const double fx0 = std::floor(x);
    const double fy0 = std::floor(y);
    const int x0 = static_cast<int>(fx0);
    const int y0 = static_cast<int>(fy0);
    const double ax = x - fx0;
    const double ay = y - fy0;
    auto value = [&](int xi, int yi) {
        if (xi < 0 || yi < 0 || xi >= g.width() || yi >= g.height()) return 0.0;
        return g.at(xi, yi);
    };
    return (1 - ax) * (1 - ay) * value(x0, y0) + ax * (1 - ay) * value(x0 + 1, y0) +
           (1 - ax) * ay * value(x0, y0 + 1) + ax * ay * value(x0 + 1, y0 + 1);
}

const ResponseMap& ResponseCache::dog(double sigma, Polarity polarity, double t1) {
    const auto key = std::make_tuple(sigma, static_cast<int>(polarity), t1);
    if (auto it = dogs_.find(key); it != dogs_.end()) return it->second;
    auto diff = differences_.find(sigma);
    if (diff == differences_.end()) diff = differences_.emplace(sigma, dog::dog_difference(image_, sigma)).first;
    auto map = dog::threshold_map(dog::rectify(diff->second, polarity), t1);
    return dogs_.emplace(key, std::move(map)).first->second;
}

const ResponseMap& ResponseCache::blurred(double sigma, Polarity polarity, double t1, double blur_sigma) {
    const auto key = std::make_tuple(sigma, static_cast<int>(polarity), t1, blur_sigma);
    if (auto it = blurred_.find(key); it != blurred_.end()) return it->second;
    const ResponseMap& src = dog(sigma, polarity, t1);
    Grid b = dog::gaussian_blur(src, blur_sigma);
    ResponseMap map(b.width(), b.height());
    std::copy(b.values().begin(), b.values().end(), map.values().begin());
    // Rounding in the convolution can leave tiny negatives where the source is 0.
    for (double& v : map.values()) v = v > 0.0 ? v : 0.0;
    return blurred_.emplace(key, std::move(map)).first->second;
}

const Grid& ResponseCache::log_blurred(double sigma, Polarity polarity, double t1, double blur_sigma) {
    const auto key = std::make_tuple(sigma, static_cast<int>(polarity), t1, blur_sigma);
    if (auto it = log_blurred_.find(key); it != log_blurred_.end()) return it->second;
    const ResponseMap& b = blurred(sigma, polarity, t1, blur_sigma);
    Grid logs(b.width(), b.height());
    const auto src = b.values();
    auto dst = logs.values();
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i] = src[i] > 0.0 ? std::log(src[i]) : -std::numeric_limits<double>::infinity();
    }
    return log_blurred_.emplace(key, std::move(logs)).first->second;
}

CosfireFilter configure_filter(const Image& prototype, Point center, const Hyperparams& hp) {
    hp.validate();
    if (!(center.x >= 0 && center.y >= 0 && center.x <= prototype.width() - 1 &&
          center.y <= prototype.height() - 1)) {
        throw Error(ErrorCode::invalid_argument, "configuration centre lies outside the prototype");
    }

    struct Channel {
        double sigma;
        Polarity polarity;
        ResponseMap map;
    };
    std::vector<Channel> channels;
    for (double sigma : hp.sigmas) {
        const Grid diff = dog::dog_difference(prototype, sigma);
        for (Polarity p : kPolarities) {
            channels.push_back({sigma, p, dog::threshold_map(dog::rectify(diff, p), hp.t1)});
        }
    }

    CosfireFilter filter;
    filter.hyperparams = hp;
    for (double rho : hp.radii) {
        const int samples = rho == 0.0 ? 1 : kAngularSamples;
        std::vector<double> profile(samples, 0.0);
        std::vector<std::size_t> winner(samples, 0);
        for (int k = 0; k < samples; ++k) {
            const double theta = kTwoPi * k / samples;
            const double x = center.x + rho * std::cos(theta);
            const double y = center.y + rho * std::sin(theta);
            for (std::size_t c = 0; c < channels.size(); ++c) {
                const double v = sample_bilinear(channels[c].map, x, y);
                if (v > profile[k]) {
                    profile[k] = v;
                    winner[k] = c;
                }
            }
        }

        const double peak = *std::max_element(profile.begin(), profile.end());
        if (!(peak > 0.0)) continue;

        std::vector<int> keypoints;
        if (samples == 1) {
            keypoints.push_back(0);
        } else {
            for (int k : circular_maxima(profile)) {
                if (profile[k] >= hp.t1 * peak) keypoints.push_back(k);
            }
        }
        for (int k : keypoints) {
            const Channel& c = channels[winner[k]];
            filter.tuples.push_back({rho, kTwoPi * k / samples, c.sigma, c.polarity});
        }
    }

    if (filter.tuples.empty()) {
        throw Error(ErrorCode::configuration_failure, "no keypoint found on any configuration circle");
    }
    return filter;
}

CosfireFilter rotate_filter(const CosfireFilter& f, double psi) {
    CosfireFilter out = f;
    for (auto& t : out.tuples) t.phi = wrap_angle(t.phi + psi);
    return out;
}

ResponseMap filter_response_map(const Image& img, const CosfireFilter& f) {
    ResponseCache cache(img);
    return filter_response_map(cache, f);
}

ResponseMap filter_response_map(ResponseCache& cache, const CosfireFilter& f) {
    const auto& hp = f.hyperparams;
    const int w = cache.image().width();
    const int h = cache.image().height();
    if (f.tuples.empty()) throw Error(ErrorCode::invalid_argument, "COSFIRE filter has no tuples");

    if (f.tuples.size() == 1 && f.tuples.front().rho == 0.0) {
        const Tuple& t = f.tuples.front();
        return cache.blurred(t.sigma, t.polarity, hp.t1, hp.blur_sigma(t.rho));
    }

    std::vector<double> log_sum(static_cast<std::size_t>(w) * h);
    log_response(cache, f, log_sum);

    const double inv_n = 1.0 / static_cast<double>(f.tuples.size());
    ResponseMap out(w, h);
    auto dst = out.values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = std::exp(log_sum[i] * inv_n);
    return out;
}

ResponseMap rotation_tolerant_response(const Image& img, const CosfireFilter& f,
                                       std::span<const double> orientations) {
    ResponseCache cache(img);
    return rotation_tolerant_response(cache, f, orientations);
}

ResponseMap rotation_tolerant_response(ResponseCache& cache, const CosfireFilter& f,
                                       std::span<const double> orientations) {
    if (orientations.empty()) throw Error(ErrorCode::invalid_argument, "orientation list is empty");
    ResponseMap out = filter_response_map(cache, rotate_filter(f, orientations.front()));
    for (std::size_t i = 1; i < orientations.size(); ++i) {
        const ResponseMap r = filter_response_map(cache, rotate_filter(f, orientations[i]));
        auto dst = out.values();
        const auto src = r.values();
        for (std::size_t p = 0; p < dst.size(); ++p) dst[p] = std::max(dst[p], src[p]);
    }
    return out;
}

double max_rotation_tolerant_response(ResponseCache& cache, const CosfireFilter& f,
                                      std::span<const double> orientations) {
    if (orientations.empty()) throw Error(ErrorCode::invalid_argument, "orientation list is empty");
    if (f.tuples.empty()) throw Error(ErrorCode::invalid_argument, "COSFIRE filter has no tuples");
    if (f.tuples.size() == 1 && f.tuples.front().rho == 0.0) {
        // Rotation cannot move a single centred tuple.
        return filter_response_map(cache, f).max();
    }
    const auto& img = cache.image();
    std::vector<double> log_sum(img.size());
    double best = -std::numeric_limits<double>::infinity();
    for (double psi : orientations) {
        log_response(cache, rotate_filter(f, psi), log_sum);
        best = std::max(best, *std::max_element(log_sum.begin(), log_sum.end()));
    }
    return std::exp(best / static_cast<double>(f.tuples.size()));
}

std::vector<double> raw_descriptor(ResponseCache& cache, const FilterBank& bank) {
    if (bank.filters.empty()) throw Error(ErrorCode::invalid_argument, "filter bank is empty");
    std::vector<double> raw;
    raw.reserve(bank.size());
    for (const auto& f : bank.filters) raw.push_back(max_rotation_tolerant_response(cache, f, bank.orientations));
    return raw;
}

Descriptor compute_descriptor(const Image& img, const FilterBank& bank) {
    ResponseCache cache(img);
    return compute_descriptor(cache, bank);
}

Descriptor compute_descriptor(ResponseCache& cache, const FilterBank& bank) {
    const auto raw = raw_descriptor(cache, bank);
    try {
        return l2_normalize(raw);
    } catch (const Error& e) {
        throw Error(e.code(), "image activates no filter in the bank");
    }
}

std::vector<double> l2_normalize(std::span<const double> v) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    const double norm = std::sqrt(sq);
    if (!(norm > 0.0) || !std::isfinite(norm)) throw Error(ErrorCode::zero_vector, "cannot normalize a zero vector");
    std::vector<double> out(v.begin(), v.end());
    for (double& x : out) x /= norm;
    return out;
}

std::string bank_to_json(const FilterBank& bank) {
    json doc;
    doc["format"] = "cosfire-bank";
    doc["version"] = 1;
    doc["orientations"] = bank.orientations;
    if (!bank.filters.empty()) {
        const auto& hp = bank.filters.front().hyperparams;
        doc["hyperparams"] = {{"sigmas", hp.sigmas},
                              {"radii", hp.radii},
                              {"t1", hp.t1},
                              {"sigma0_blur", hp.sigma0_blur},
                              {"alpha_blur", hp.alpha_blur}};
    }
    json filters = json::array();
    for (const auto& f : bank.filters) {
        if (f.hyperparams != bank.filters.front().hyperparams) {
            throw Error(ErrorCode::invalid_argument, "all filters in a bank must share hyperparameters");
        }
        json tuples = json::array();
        for (const auto& t : f.tuples) tuples.push_back({t.rho, t.phi, t.sigma, dog::to_string(t.polarity)});
        filters.push_back({{"label", f.label}, {"prototype", f.prototype}, {"tuples", tuples}});
    }
    doc["filters"] = filters;
    return doc.dump(1);
}

FilterBank bank_from_json(const std::string& text) {
    FilterBank bank;
    try {
        const json doc = json::parse(text);
        if (doc.at("format") != "cosfire-bank" || doc.at("version") != 1) {
            throw Error(ErrorCode::version_mismatch, "unsupported filter-bank format/version");
        }
        bank.orientations = doc.at("orientations").get<std::vector<double>>();
        Hyperparams hp;
        if (doc.contains("hyperparams")) {
            const auto& h = doc["hyperparams"];
            hp.sigmas = h.at("sigmas").get<std::vector<double>>();
            hp.radii = h.at("radii").get<std::vector<double>>();
            hp.t1 = h.at("t1").get<double>();
            hp.sigma0_blur = h.at("sigma0_blur").get<double>();
            hp.alpha_blur = h.at("alpha_blur").get<double>();
            hp.validate();
        }
        for (const auto& jf : doc.at("filters")) {
            CosfireFilter f;
            f.hyperparams = hp;
            f.label = jf.value("label", "");
            f.prototype = jf.value("prototype", "");
            for (const auto& jt : jf.at("tuples")) {
                if (jt.size() != 4) throw Error(ErrorCode::corrupted_payload, "tuple must have 4 entries");
                f.tuples.push_back({jt[0].get<double>(), jt[1].get<double>(), jt[2].get<double>(),
                                    dog::parse_polarity(jt[3].get<std::string>())});
            }
            if (f.tuples.empty()) throw Error(ErrorCode::corrupted_payload, "filter without tuples");
            bank.filters.push_back(std::move(f));
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::corrupted_payload, std::string("malformed filter-bank JSON: ") + e.what());
    }
    return bank;
}

void save_bank(const FilterBank& bank, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    out << bank_to_json(bank) << '\n';
}

FilterBank load_bank(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::missing_artifact, "bank file not found: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return bank_from_json(ss.str());
}

}  // namespace cbir::cosfire
