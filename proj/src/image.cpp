#include "cbir/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cbir/error.hpp"

namespace cbir {

Grid::Grid(int width, int height, double fill)
    : Grid(width, height,
           std::vector<double>(static_cast<std::size_t>(std::max(width, 0)) *
                                   static_cast<std::size_t>(std::max(height, 0)),
                               fill)) {}

Grid::Grid(int width, int height, std::vector<double> values)
    : width_(width), height_(height), values_(std::move(values)) {
    if (width <= 0 || height <= 0) {
        throw Error(ErrorCode::zero_dimensions,
                    "grid dimensions must be positive, got " + std::to_string(width) + "x" +
                        std::to_string(height));
    }
    if (values_.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
        throw Error(ErrorCode::dimension_mismatch, "grid payload does not match dimensions");
    }
    for (double v : values_) {
        if (!std::isfinite(v)) throw Error(ErrorCode::invalid_argument, "non-finite pixel value");
    }
}

double Grid::max() const {
    if (values_.empty()) return 0.0;
    return *std::max_element(values_.begin(), values_.end());
}

}  // namespace cbir
