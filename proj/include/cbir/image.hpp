#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace cbir {

// Row-major 2D grid of doubles. Base for Image and ResponseMap.
class Grid {
public:
    Grid() = default;
    Grid(int width, int height, double fill = 0.0);
    Grid(int width, int height, std::vector<double> values);

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    double& at(int x, int y) { return values_[static_cast<std::size_t>(y) * width_ + x]; }
    double at(int x, int y) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }

    double max() const;

    bool operator==(const Grid&) const = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<double> values_;
};

// Grayscale intensities. All values finite.
class Image : public Grid {
public:
    using Grid::Grid;
};

// Nonnegative filter responses with the dimensions of the source image.
class ResponseMap : public Grid {
public:
    using Grid::Grid;
};

}  // namespace cbir
