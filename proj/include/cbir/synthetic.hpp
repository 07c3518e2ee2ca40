#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "cbir/image.hpp"

namespace cbir::synthetic {

// Four toy morphologies built from Gaussian blobs around the image centre.
enum class Morphology { compact, two_lobe, bent, three_blob };

inline constexpr int kMorphologies = 4;

const char* to_string(Morphology m);

struct Options {
    int size = 65;
    double noise = 0.02;  // std of additive Gaussian background noise
};

struct Blob {
    double x, y;  // offset from the centre, pixels
    double width;
    double amplitude;
};

Image render_blobs(const std::vector<Blob>& blobs, int size);

Image render(Morphology m, double orientation, std::mt19937_64& rng, const Options& opt = {});

struct Sample {
    Image image;
    int label;
};

// per_class samples of every morphology at uniformly random orientations,
// interleaved by class.
std::vector<Sample> make_dataset(int per_class, std::uint64_t seed, const Options& opt = {});

// Quarter turn about the centre pixel.
Image rotate90(const Image& img);

}  // namespace cbir::synthetic
