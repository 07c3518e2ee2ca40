#include "cbir/dog.hpp"

#include <cmath>
#include <string>

#include "cbir/error.hpp"

namespace cbir::dog {

const char* to_string(Polarity p) { return p == Polarity::center_on ? "on" : "off"; }

Polarity parse_polarity(const std::string& text) {
    if (text == "on" || text == "center_on") return Polarity::center_on;
    if (text == "off" || text == "center_off") return Polarity::center_off;
    throw Error(ErrorCode::invalid_argument, "unknown polarity '" + text + "'");
}

int kernel_radius(double sigma) { return static_cast<int>(std::ceil(3.0 * sigma)); }

std::vector<double> gaussian_kernel_1d(double sigma) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) {
        throw Error(ErrorCode::invalid_argument, "Gaussian sigma must be positive, got " + std::to_string(sigma));
    }
    const int r = kernel_radius(sigma);
    std::vector<double> k(2 * static_cast<std::size_t>(r) + 1);
    const double denom = 2.0 * sigma * sigma;
    double sum = 0.0;
    for (int x = -r; x <= r; ++x) {
        k[x + r] = std::exp(-static_cast<double>(x) * x / denom);
        sum += k[x + r];
    }
    for (double& v : k) v /= sum;
    return k;
}

int reflect_index(int i, int n) {
    const int period = 2 * n;
    int m = i % period;
    if (m < 0) m += period;
    return m < n ? m : period - 1 - m;
}

Grid convolve_separable(const Grid& src, std::span<const double> kernel) {
    const int w = src.width();
    const int h = src.height();
    const int r = static_cast<int>(kernel.size() / 2);

    Grid tmp(w, h);
    std::vector<double> row(static_cast<std::size_t>(w + 2 * r));
    for (int y = 0; y < h; ++y) {
        for (int x = -r; x < w + r; ++x) row[x + r] = src.at(reflect_index(x, w), y);
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int j = 0; j <= 2 * r; ++j) acc += kernel[j] * row[x + j];
            tmp.at(x, y) = acc;
        }
    }

    Grid out(w, h);
    auto dst = out.values();
    const auto in = tmp.values();
    for (int y = 0; y < h; ++y) {
        double* out_row = dst.data() + static_cast<std::size_t>(y) * w;
        for (int j = -r; j <= r; ++j) {
            const double kj = kernel[j + r];
            const double* in_row = in.data() + static_cast<std::size_t>(reflect_index(y + j, h)) * w;
            for (int x = 0; x < w; ++x) out_row[x] += kj * in_row[x];
        }
    }
    return out;
}

Grid gaussian_blur(const Grid& src, double sigma) {
    const auto k = gaussian_kernel_1d(sigma);
    return convolve_separable(src, k);
}

Grid dog_difference(const Grid& img, double sigma_outer) {
    if (!(sigma_outer > 0.0)) throw Error(ErrorCode::invalid_argument, "DoG sigma must be positive");
    Grid inner = gaussian_blur(img, sigma_outer / 2.0);
    const Grid outer = gaussian_blur(img, sigma_outer);
    auto iv = inner.values();
    const auto ov = outer.values();
    for (std::size_t i = 0; i < iv.size(); ++i) iv[i] -= ov[i];
    return inner;
}

ResponseMap rectify(const Grid& difference, Polarity polarity) {
    ResponseMap out(difference.width(), difference.height());
    auto dst = out.values();
    const auto src = difference.values();
    const double sign = polarity == Polarity::center_on ? 1.0 : -1.0;
    for (std::size_t i = 0; i < src.size(); ++i) {
        const double v = sign * src[i];
        dst[i] = v > 0.0 ? v : 0.0;
    }
    return out;
}

ResponseMap dog_response_map(const Image& img, const DogParams& params) {
    return rectify(dog_difference(img, params.sigma_outer), params.polarity);
}

ResponseMap threshold_map(const ResponseMap& m, double t1_fraction) {
    if (!(t1_fraction >= 0.0 && t1_fraction <= 1.0)) {
        throw Error(ErrorCode::invalid_argument, "threshold fraction must lie in [0,1]");
    }
    ResponseMap out = m;
    const double cut = t1_fraction * m.max();
    for (double& v : out.values()) {
        if (v < cut) v = 0.0;
    }
    return out;
}

}  // namespace cbir::dog
