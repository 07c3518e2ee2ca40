#include "cbir/synthetic.hpp"

#include <cmath>
#include <numbers>

#include "cbir/error.hpp"

namespace cbir::synthetic {

const char* to_string(Morphology m) {
    switch (m) {
        case Morphology::compact: return "compact";
        case Morphology::two_lobe: return "two_lobe";
        case Morphology::bent: return "bent";
        case Morphology::three_blob: return "three_blob";
    }
    return "?";
}

Image render_blobs(const std::vector<Blob>& blobs, int size) {
    Image img(size, size);
    const double c = (size - 1) / 2.0;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            double v = 0.0;
            for (const auto& b : blobs) {
                const double dx = x - (c + b.x);
                const double dy = y - (c + b.y);
                v += b.amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * b.width * b.width));
            }
            img.at(x, y) = v;
        }
    }
    return img;
}

Image render(Morphology m, double orientation, std::mt19937_64& rng, const Options& opt) {
    using std::numbers::pi;
    std::uniform_real_distribution<double> amp(0.6, 1.0);
    std::uniform_real_distribution<double> width(1.6, 2.4);
    std::uniform_real_distribution<double> radius(opt.size * 0.16, opt.size * 0.22);

    auto lobe = [&](double r, double angle) {
        return Blob{r * std::cos(orientation + angle), r * std::sin(orientation + angle), width(rng), amp(rng)};
    };

    std::vector<Blob> blobs;
    switch (m) {
        case Morphology::compact: {
            std::uniform_real_distribution<double> core(1.8, 3.2);
            blobs.push_back({0.0, 0.0, core(rng), amp(rng)});
            break;
        }
        case Morphology::two_lobe: {
            const double r = radius(rng);
            blobs.push_back(lobe(r, 0.0));
            blobs.push_back(lobe(r, pi));
            break;
        }
        case Morphology::bent: {
            std::uniform_real_distribution<double> opening(0.40 * pi, 0.55 * pi);
            const double r = radius(rng);
            blobs.push_back({0.0, 0.0, width(rng), amp(rng)});
            blobs.push_back(lobe(r, 0.0));
            blobs.push_back(lobe(r, opening(rng)));
            break;
        }
        case Morphology::three_blob: {
            const double r = radius(rng);
            for (int i = 0; i < 3; ++i) blobs.push_back(lobe(r, 2.0 * pi * i / 3.0));
            break;
        }
    }

    Image img = render_blobs(blobs, opt.size);
    if (opt.noise > 0.0) {
        std::normal_distribution<double> noise(0.0, opt.noise);
        for (double& v : img.values()) v += noise(rng);
    }
    return img;
}

std::vector<Sample> make_dataset(int per_class, std::uint64_t seed, const Options& opt) {
    if (per_class < 1) throw Error(ErrorCode::invalid_argument, "per_class must be positive");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(per_class) * kMorphologies);
    for (int i = 0; i < per_class; ++i) {
        for (int c = 0; c < kMorphologies; ++c) {
            const double theta = angle(rng);
            out.push_back({render(static_cast<Morphology>(c), theta, rng, opt), c});
        }
    }
    return out;
}

Image rotate90(const Image& img) {
    // (x, y) -> (h-1-y, x) maps a w x h grid onto h x w.
    Image out(img.height(), img.width());
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) out.at(img.height() - 1 - y, x) = img.at(x, y);
    }
    return out;
}

}  // namespace cbir::synthetic
