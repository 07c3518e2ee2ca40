#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cbir/image.hpp"

namespace cbir::imaging {

enum class ImageFormat { pgm, rawf32 };

// Picks the format from the file extension (.pgm, .rf32/.rawf32).
ImageFormat format_from_path(const std::filesystem::path& path);

// 8/16-bit binary PGM (P5) is scaled to [0,1]; rawf32 is read verbatim.
Image load_image(const std::filesystem::path& path, ImageFormat format);
Image load_image(const std::filesystem::path& path);

Image decode_pgm(std::span<const unsigned char> bytes);
Image decode_rawf32(std::span<const unsigned char> bytes);
std::vector<unsigned char> encode_rawf32(const Image& img);

void save_rawf32(const Image& img, const std::filesystem::path& path);
// Writes a P5 PGM with the given maxval (255 or 65535); values are clamped to [0,1].
void save_pgm(const Image& img, const std::filesystem::path& path, int maxval = 255);

// Iterative global sigma clipping. Pixels at or below mean + n_sigma * stddev of
// the surviving background set are background and become 0; the rest keep
// their value. Iterates until the background set stops shrinking.
Image sigma_clip(const Image& img, double n_sigma = 3.0, int max_iters = 20);

enum class Split { train, valid, test };

const char* to_string(Split split);
Split parse_split(const std::string& text);

struct ManifestEntry {
    std::filesystem::path path;
    std::string label;
    Split split;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;

    // Sorted, de-duplicated label names; label index = position.
    std::vector<std::string> labels() const;
    int label_index(const std::string& label) const;
    std::vector<std::size_t> indices_of(Split split) const;
};

// CSV with header `path,label,split`. Relative paths resolve against the
// manifest's own directory.
DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

}  // namespace cbir::imaging
