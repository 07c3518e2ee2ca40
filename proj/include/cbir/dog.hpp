#pragma once

#include <span>
#include <string>
#include <vector>

#include "cbir/image.hpp"

namespace cbir::dog {

enum class Polarity { center_on, center_off };

const char* to_string(Polarity p);
Polarity parse_polarity(const std::string& text);

// Outer Gaussian std sigma_outer; the inner Gaussian always uses half of it.
struct DogParams {
    double sigma_outer = 1.0;
    Polarity polarity = Polarity::center_on;

    double sigma_inner() const { return sigma_outer / 2.0; }
};

// ceil(3 sigma)
int kernel_radius(double sigma);

// Samples of exp(-x^2 / 2 sigma^2) on [-r, r], r = ceil(3 sigma), normalized to unit sum.
std::vector<double> gaussian_kernel_1d(double sigma);

// Half-sample symmetric reflection of index i into [0, n): ... c b a | a b c ... 
int reflect_index(int i, int n);

// Correlates rows then columns with the same symmetric kernel, reflecting at borders.
Grid convolve_separable(const Grid& src, std::span<const double> kernel);

Grid gaussian_blur(const Grid& src, double sigma);

// Signed difference (G_{sigma/2} * img) - (G_{sigma} * img).
Grid dog_difference(const Grid& img, double sigma_outer);

// Half-wave rectified DoG: max(r, 0) for center-on, max(-r, 0) for center-off.
ResponseMap dog_response_map(const Image& img, const DogParams& params);
ResponseMap rectify(const Grid& difference, Polarity polarity);

// Zeroes every value strictly below t1_fraction * max(m).
ResponseMap threshold_map(const ResponseMap& m, double t1_fraction);

}  // namespace cbir::dog
