#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "cbir/dog.hpp"
#include "cbir/image.hpp"

namespace cbir::cosfire {

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

// Five knobs of a COSFIRE configuration: the DoG scales, circle radii and
// threshold used while configuring, plus the blur parameters used while
// applying (blur std = sigma0_blur + alpha_blur * rho).
struct Hyperparams {
    std::vector<double> sigmas{2.0};
    std::vector<double> radii{0.0, 4.0, 8.0, 12.0};
    double t1 = 0.2;
    double sigma0_blur = 1.0;
    double alpha_blur = 0.2;

    void validate() const;
    double blur_sigma(double rho) const { return sigma0_blur + alpha_blur * rho; }

    bool operator==(const Hyperparams&) const = default;
};

// One keypoint: polar offset from the filter centre and the DoG channel
// that responded most strongly there.
struct Tuple {
    double rho = 0.0;
    double phi = 0.0;
    double sigma = 1.0;
    dog::Polarity polarity = dog::Polarity::center_on;

    bool operator==(const Tuple&) const = default;
};

struct CosfireFilter {
    std::vector<Tuple> tuples;
    Hyperparams hyperparams;
    // Provenance only; not used when applying the filter.
    std::string label;
    std::string prototype;

    std::size_t size() const noexcept { return tuples.size(); }
    bool operator==(const CosfireFilter&) const = default;
};

struct FilterBank {
    std::vector<CosfireFilter> filters;
    std::vector<double> orientations;

    std::size_t size() const noexcept { return filters.size(); }
    bool operator==(const FilterBank&) const = default;
};

struct Point {
    double x = 0.0;
    double y = 0.0;
};

using Descriptor = std::vector<double>;

// psi_k = k * 2pi / count for k = 0..count-1 (default 12 steps of pi/6).
std::vector<double> default_orientations(int count = 12);

Point image_center(const Grid& img);

// Bilinear sample; locations outside the grid read as 0.
double sample_bilinear(const Grid& g, double x, double y);

// Per-image memo of thresholded DoG maps and their blurred versions, shared
// by every filter and orientation applied to the same image.
class ResponseCache {
public:
    explicit ResponseCache(Image img) : image_(std::move(img)) {}

    const Image& image() const noexcept { return image_; }
    const ResponseMap& dog(double sigma, dog::Polarity polarity, double t1);
    const ResponseMap& blurred(double sigma, dog::Polarity polarity, double t1, double blur_sigma);
    // Natural log of blurred(); -inf where the response is 0.
    const Grid& log_blurred(double sigma, dog::Polarity polarity, double t1, double blur_sigma);

private:
    Image image_;
    std::map<double, Grid> differences_;
    std::map<std::tuple<double, int, double>, ResponseMap> dogs_;
    std::map<std::tuple<double, int, double, double>, ResponseMap> blurred_;
    std::map<std::tuple<double, int, double, double>, Grid> log_blurred_;
};

// Throws configuration_failure if no keypoint is found on any circle.
CosfireFilter configure_filter(const Image& prototype, Point center, const Hyperparams& hp);

CosfireFilter rotate_filter(const CosfireFilter& f, double psi);

// Blur-shift-combine: per-pixel geometric mean of the blurred, shifted DoG
// maps of every tuple.
ResponseMap filter_response_map(const Image& img, const CosfireFilter& f);
ResponseMap filter_response_map(ResponseCache& cache, const CosfireFilter& f);

// Pixelwise maximum over the responses of the filter rotated by each psi.
ResponseMap rotation_tolerant_response(const Image& img, const CosfireFilter& f,
                                       std::span<const double> orientations);
ResponseMap rotation_tolerant_response(ResponseCache& cache, const CosfireFilter& f,
                                       std::span<const double> orientations);

// Same value as rotation_tolerant_response(...).max(), without materialising maps.
double max_rotation_tolerant_response(ResponseCache& cache, const CosfireFilter& f,
                                      std::span<const double> orientations);

// Global maximum of the rotation-tolerant response of each filter, in bank order.
std::vector<double> raw_descriptor(ResponseCache& cache, const FilterBank& bank);

// Raw descriptor followed by L2 normalization; zero_vector if nothing responds.
Descriptor compute_descriptor(const Image& img, const FilterBank& bank);
Descriptor compute_descriptor(ResponseCache& cache, const FilterBank& bank);

std::vector<double> l2_normalize(std::span<const double> v);

void save_bank(const FilterBank& bank, const std::filesystem::path& path);
FilterBank load_bank(const std::filesystem::path& path);
std::string bank_to_json(const FilterBank& bank);
FilterBank bank_from_json(const std::string& text);

}  // namespace cbir::cosfire
