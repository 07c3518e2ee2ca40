#include "cbir/imaging.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "cbir/error.hpp"

namespace cbir::imaging {

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw Error(ErrorCode::missing_artifact, "not found: " + path.string());
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

std::uint32_t read_u32le(const unsigned char* p) {
    return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
           (std::uint32_t{p[3]} << 24);
}

void put_u32le(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

// Cursor over the ASCII part of a PNM header.
class PnmHeader {
public:
    explicit PnmHeader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

    long next_int() {
        skip_space_and_comments();
        if (pos_ >= bytes_.size() || !std::isdigit(bytes_[pos_])) {
            throw Error(ErrorCode::malformed_header, "PGM header: expected integer");
        }
        long v = 0;
        while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
            v = v * 10 + (bytes_[pos_++] - '0');
            if (v > 1'000'000'000) throw Error(ErrorCode::malformed_header, "PGM header: integer overflow");
        }
        return v;
    }

    // Exactly one whitespace byte separates the header from the raster.
    std::size_t raster_offset() {
        if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) {
            throw Error(ErrorCode::malformed_header, "PGM header: missing separator before raster");
        }
        return pos_ + 1;
    }

    std::size_t pos_ = 2;

private:
    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            if (std::isspace(bytes_[pos_])) {
                ++pos_;
            } else if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else {
                break;
            }
        }
    }

    std::span<const unsigned char> bytes_;
};

}  // namespace

ImageFormat format_from_path(const std::filesystem::path& path) {
    auto ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".pgm") return ImageFormat::pgm;
    if (ext == ".rf32" || ext == ".rawf32") return ImageFormat::rawf32;
    throw Error(ErrorCode::invalid_argument, "unrecognised image extension: " + path.string());
}

Image decode_pgm(std::span<const unsigned char> bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
        throw Error(ErrorCode::malformed_header, "not a binary PGM (P5) file");
    }
    PnmHeader header(bytes);
    const long width = header.next_int();
    const long height = header.next_int();
    const long maxval = header.next_int();
    if (maxval < 1 || maxval > 65535) {
        throw Error(ErrorCode::malformed_header, "PGM maxval out of range: " + std::to_string(maxval));
    }
    const std::size_t offset = header.raster_offset();
    if (width == 0 || height == 0) {
        throw Error(ErrorCode::zero_dimensions, "PGM has zero width or height");
    }
    const std::size_t bytes_per_sample = maxval < 256 ? 1 : 2;
    const std::size_t count = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
    if (bytes.size() < offset + count * bytes_per_sample) {
        throw Error(ErrorCode::truncated_payload,
                    "PGM payload truncated: expected " + std::to_string(count * bytes_per_sample) +
                        " bytes, found " + std::to_string(bytes.size() - std::min(offset, bytes.size())));
    }
    std::vector<double> pixels(count);
    const double scale = 1.0 / static_cast<double>(maxval);
    const unsigned char* p = bytes.data() + offset;
    for (std::size_t i = 0; i < count; ++i) {
        unsigned v = bytes_per_sample == 1 ? p[i] : (unsigned{p[2 * i]} << 8) | p[2 * i + 1];
        pixels[i] = static_cast<double>(std::min<unsigned>(v, static_cast<unsigned>(maxval))) * scale;
    }
    return Image(static_cast<int>(width), static_cast<int>(height), std::move(pixels));
}

Image decode_rawf32(std::span<const unsigned char> bytes) {
    if (bytes.size() < 16 || !std::equal(bytes.begin(), bytes.begin() + 4, "RF32")) {
        throw Error(ErrorCode::malformed_header, "not a rawf32 file (bad magic or short header)");
    }
    const std::uint32_t width = read_u32le(bytes.data() + 4);
    const std::uint32_t height = read_u32le(bytes.data() + 8);
    if (width == 0 || height == 0) throw Error(ErrorCode::zero_dimensions, "rawf32 has zero width or height");
    if (width > 1u << 16 || height > 1u << 16) {
        throw Error(ErrorCode::malformed_header, "rawf32 dimensions implausibly large");
    }
    const std::size_t count = std::size_t{width} * height;
    if (bytes.size() < 16 + 4 * count) {
        throw Error(ErrorCode::truncated_payload,
                    "rawf32 payload truncated: expected " + std::to_string(4 * count) + " bytes, found " +
                        std::to_string(bytes.size() - 16));
    }
    std::vector<double> pixels(count);
    for (std::size_t i = 0; i < count; ++i) {
        const float v = std::bit_cast<float>(read_u32le(bytes.data() + 16 + 4 * i));
        if (!std::isfinite(v)) throw Error(ErrorCode::corrupted_payload, "rawf32 contains non-finite value");
        pixels[i] = v;
    }
    return Image(static_cast<int>(width), static_cast<int>(height), std::move(pixels));
}

std::vector<unsigned char> encode_rawf32(const Image& img) {
    std::vector<unsigned char> out;
    out.reserve(16 + 4 * img.size());
    for (char c : {'R', 'F', '3', '2'}) out.push_back(static_cast<unsigned char>(c));
    put_u32le(out, static_cast<std::uint32_t>(img.width()));
    put_u32le(out, static_cast<std::uint32_t>(img.height()));
    put_u32le(out, 0);  // reserved
    for (double v : img.values()) put_u32le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    return out;
}

Image load_image(const std::filesystem::path& path, ImageFormat format) {
    const auto bytes = read_file(path);
    return format == ImageFormat::pgm ? decode_pgm(bytes) : decode_rawf32(bytes);
}

Image load_image(const std::filesystem::path& path) { return load_image(path, format_from_path(path)); }

void save_rawf32(const Image& img, const std::filesystem::path& path) { write_file(path, encode_rawf32(img)); }

void save_pgm(const Image& img, const std::filesystem::path& path, int maxval) {
    if (maxval != 255 && maxval != 65535) throw Error(ErrorCode::invalid_argument, "PGM maxval must be 255 or 65535");
    std::string header = "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n" +
                         std::to_string(maxval) + "\n";
    std::vector<unsigned char> out(header.begin(), header.end());
    for (double v : img.values()) {
        const auto q = static_cast<unsigned>(std::lround(std::clamp(v, 0.0, 1.0) * maxval));
        if (maxval == 255) {
            out.push_back(static_cast<unsigned char>(q));
        } else {
            out.push_back(static_cast<unsigned char>(q >> 8));
            out.push_back(static_cast<unsigned char>(q & 0xff));
        }
    }
    write_file(path, out);
}

Image sigma_clip(const Image& img, double n_sigma, int max_iters) {
    if (!(n_sigma > 0.0)) throw Error(ErrorCode::invalid_argument, "n_sigma must be positive");
    if (max_iters < 1) throw Error(ErrorCode::invalid_argument, "max_iters must be positive");

    const auto pixels = img.values();
    std::vector<std::size_t> background(pixels.size());
    for (std::size_t i = 0; i < background.size(); ++i) background[i] = i;

    for (int iter = 0; iter < max_iters && !background.empty(); ++iter) {
        // Two-pass mean/variance in long double keeps the threshold insensitive
        // to summation order.
        long double sum = 0.0L;
        for (auto i : background) sum += pixels[i];
        const long double mean = sum / static_cast<long double>(background.size());
        long double sq = 0.0L;
        for (auto i : background) {
            const long double d = pixels[i] - mean;
            sq += d * d;
        }
        const double stddev = static_cast<double>(std::sqrt(sq / static_cast<long double>(background.size())));
        const double threshold = static_cast<double>(mean) + n_sigma * stddev;

        std::vector<std::size_t> kept;
        kept.reserve(background.size());
        for (auto i : background) {
            if (!(pixels[i] > threshold)) kept.push_back(i);
        }
        const bool stable = kept.size() == background.size();
        background = std::move(kept);
        if (stable) break;
    }

    std::vector<double> out(pixels.begin(), pixels.end());
    for (auto i : background) out[i] = 0.0;
    return Image(img.width(), img.height(), std::move(out));
}

const char* to_string(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::valid: return "valid";
        case Split::test: return "test";
    }
    return "?";
}

Split parse_split(const std::string& text) {
    if (text == "train") return Split::train;
    if (text == "valid") return Split::valid;
    if (text == "test") return Split::test;
    throw Error(ErrorCode::malformed_header, "unknown split tag '" + text + "'");
}

std::vector<std::string> DatasetManifest::labels() const {
    std::set<std::string> unique;
    for (const auto& e : entries) unique.insert(e.label);
    return {unique.begin(), unique.end()};
}

int DatasetManifest::label_index(const std::string& label) const {
    const auto names = labels();
    const auto it = std::find(names.begin(), names.end(), label);
    if (it == names.end()) throw Error(ErrorCode::invalid_argument, "unknown label '" + label + "'");
    return static_cast<int>(it - names.begin());
}

std::vector<std::size_t> DatasetManifest::indices_of(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].split == split) out.push_back(i);
    }
    return out;
}

namespace {

std::string trim(std::string s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
    std::size_t start = 0;
    while (start < s.size() && s[start] == ' ') ++start;
    return s.substr(start);
}

}  // namespace

DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::missing_artifact, "manifest not found: " + path.string());
    std::string line;
    if (!std::getline(in, line) || trim(line) != "path,label,split") {
        throw Error(ErrorCode::malformed_header, "manifest must start with header 'path,label,split'");
    }
    DatasetManifest manifest;
    const auto base = path.parent_path();
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        for (std::string f; std::getline(ss, f, ',');) fields.push_back(trim(f));
        if (fields.size() != 3 || fields[0].empty() || fields[1].empty()) {
            throw Error(ErrorCode::malformed_header,
                        path.string() + ":" + std::to_string(line_no) + ": expected path,label,split");
        }
        std::filesystem::path p = fields[0];
        if (p.is_relative()) p = base / p;
        manifest.entries.push_back({p, fields[1], parse_split(fields[2])});
    }
    return manifest;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    out << "path,label,split\n";
    const auto base = path.parent_path();
    for (const auto& e : manifest.entries) {
        auto p = e.path;
        const auto rel = std::filesystem::absolute(p).lexically_relative(std::filesystem::absolute(base));
        if (!rel.empty()) p = rel;
        out << p.generic_string() << ',' << e.label << ',' << to_string(e.split) << '\n';
    }
}

}  // namespace cbir::imaging
