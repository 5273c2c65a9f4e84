#ifndef HSRDIFF_CUBE_HPP
#define HSRDIFF_CUBE_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "hsrdiff/errors.hpp"

namespace hsrdiff {

// Band-major reflectance cube: data[(b * H + i) * W + j].
template <class R>
struct hsi_cube {
    std::int64_t bands = 0;
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<R> data;

    hsi_cube() = default;
    hsi_cube(std::int64_t b, std::int64_t h, std::int64_t w, R fill = R(0))
        : bands(b), height(h), width(w),
          data(static_cast<std::size_t>(b * h * w), fill) {}

    std::int64_t numel() const { return bands * height * width; }
    std::int64_t pixels() const { return height * width; }

    R& at(std::int64_t b, std::int64_t i, std::int64_t j) {
        return data[(b * height + i) * width + j];
    }
    R at(std::int64_t b, std::int64_t i, std::int64_t j) const {
        return data[(b * height + i) * width + j];
    }

    bool same_shape(const hsi_cube& o) const {
        return bands == o.bands && height == o.height && width == o.width;
    }
};

// Row-normalized b x B response matrix (stored in double for mixing accuracy).
struct spectral_response {
    std::int64_t msi_bands = 0;  // b
    std::int64_t hsi_bands = 0;  // B
    std::vector<double> matrix;  // row-major, b x B

    double at(std::int64_t row, std::int64_t col) const {
        return matrix[row * hsi_bands + col];
    }

    void validate() const {
        if (msi_bands < 1 || hsi_bands < 1 || msi_bands >= hsi_bands)
            throw validation_error(detail::concat("spectral response must satisfy 0 < b < B, got b=",
                                                  msi_bands, " B=", hsi_bands));
        if (static_cast<std::int64_t>(matrix.size()) != msi_bands * hsi_bands)
            throw validation_error("spectral response matrix size mismatch");
        for (std::int64_t r = 0; r < msi_bands; ++r) {
            double sum = 0;
            for (std::int64_t c = 0; c < hsi_bands; ++c) {
                if (matrix[r * hsi_bands + c] < 0)
                    throw validation_error("spectral response weights must be nonnegative");
                sum += matrix[r * hsi_bands + c];
            }
            if (std::abs(sum - 1.0) > 1e-9)
                throw validation_error(detail::concat("spectral response row ", r,
                                                      " sums to ", sum, ", expected 1"));
        }
    }
};

// Smooth bump rows mimicking broad-band integration over the spectrum.
inline spectral_response make_default_response(std::int64_t b, std::int64_t B) {
    spectral_response r;
    r.msi_bands = b;
    r.hsi_bands = B;
    r.matrix.assign(static_cast<std::size_t>(b * B), 0.0);
    const double width = static_cast<double>(B) / (2.0 * static_cast<double>(b));
    for (std::int64_t i = 0; i < b; ++i) {
        const double center = (static_cast<double>(i) + 0.5) * static_cast<double>(B) / static_cast<double>(b) - 0.5;
        double sum = 0;
        for (std::int64_t j = 0; j < B; ++j) {
            const double d = (static_cast<double>(j) - center) / width;
            const double w = std::exp(-0.5 * d * d);
            r.matrix[i * B + j] = w;
            sum += w;
        }
        for (std::int64_t j = 0; j < B; ++j) r.matrix[i * B + j] /= sum;
    }
    r.validate();
    return r;
}

namespace detail {

inline void write_bytes(std::ofstream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::ifstream& is, void* p, std::size_t n, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n)
        throw io_error(concat("truncated file while reading ", what));
}

template <class T>
void write_pod(std::ofstream& os, T v) { write_bytes(os, &v, sizeof(T)); }

template <class T>
T read_pod(std::ifstream& is, const char* what) {
    T v;
    read_bytes(is, &v, sizeof(T), what);
    return v;
}

constexpr std::int64_t k_max_dim = 1 << 24;

}  // namespace detail

// Cube file: magic "HCUB", version u16=1, reserved u16=0, B u32, H u32, W u32,
// then B*H*W float32 band-major, row-major within band. Little-endian.
template <class R>
void save_cube(const std::string& path, const hsi_cube<R>& cube) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open for writing: " + path);
    detail::write_bytes(os, "HCUB", 4);
    detail::write_pod<std::uint16_t>(os, 1);
    detail::write_pod<std::uint16_t>(os, 0);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cube.bands));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cube.height));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cube.width));
    std::vector<float> buf(cube.data.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(cube.data[i]);
    detail::write_bytes(os, buf.data(), buf.size() * sizeof(float));
    if (!os) throw io_error("write failed: " + path);
}

template <class R>
hsi_cube<R> load_cube(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open: " + path);
    char magic[4];
    detail::read_bytes(is, magic, 4, "cube magic");
    if (std::memcmp(magic, "HCUB", 4) != 0)
        throw io_error("bad magic in cube file: " + path);
    const auto version = detail::read_pod<std::uint16_t>(is, "cube version");
    if (version != 1)
        throw io_error(detail::concat("unsupported cube version ", version, " in ", path));
    detail::read_pod<std::uint16_t>(is, "cube reserved");
    const auto B = detail::read_pod<std::uint32_t>(is, "cube bands");
    const auto H = detail::read_pod<std::uint32_t>(is, "cube height");
    const auto W = detail::read_pod<std::uint32_t>(is, "cube width");
    if (B == 0 || H == 0 || W == 0 || B > detail::k_max_dim || H > detail::k_max_dim ||
        W > detail::k_max_dim ||
        static_cast<std::uint64_t>(B) * H * W > (std::uint64_t(1) << 33))
        throw io_error(detail::concat("unreasonable cube dimensions ", B, "x", H, "x", W,
                                      " in ", path));
    hsi_cube<R> cube(B, H, W);
    std::vector<float> buf(cube.data.size());
    detail::read_bytes(is, buf.data(), buf.size() * sizeof(float), "cube data");
    for (std::size_t i = 0; i < buf.size(); ++i) cube.data[i] = static_cast<R>(buf[i]);
    return cube;
}

// Response file: magic "SRSP", b u32, B u32, then b*B float32 row-major.
inline void save_response(const std::string& path, const spectral_response& r) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open for writing: " + path);
    detail::write_bytes(os, "SRSP", 4);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(r.msi_bands));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(r.hsi_bands));
    std::vector<float> buf(r.matrix.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(r.matrix[i]);
    detail::write_bytes(os, buf.data(), buf.size() * sizeof(float));
    if (!os) throw io_error("write failed: " + path);
}

inline spectral_response load_response(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open: " + path);
    char magic[4];
    detail::read_bytes(is, magic, 4, "response magic");
    if (std::memcmp(magic, "SRSP", 4) != 0)
        throw io_error("bad magic in response file: " + path);
    const auto b = detail::read_pod<std::uint32_t>(is, "response rows");
    const auto B = detail::read_pod<std::uint32_t>(is, "response cols");
    if (b == 0 || B == 0 || b > 4096 || B > 65536)
        throw io_error("unreasonable response dimensions");
    spectral_response r;
    r.msi_bands = b;
    r.hsi_bands = B;
    std::vector<float> buf(static_cast<std::size_t>(b) * B);
    detail::read_bytes(is, buf.data(), buf.size() * sizeof(float), "response data");
    r.matrix.assign(buf.begin(), buf.end());
    // rows may drift off unit sum by float32 rounding; renormalize exactly
    for (std::uint32_t i = 0; i < b; ++i) {
        double sum = 0;
        for (std::uint32_t j = 0; j < B; ++j) sum += r.matrix[i * B + j];
        if (sum <= 0) throw io_error(detail::concat("response row ", i, " sums to zero"));
        for (std::uint32_t j = 0; j < B; ++j) r.matrix[i * B + j] /= sum;
    }
    r.validate();
    return r;
}

}  // namespace hsrdiff

#endif  // HSRDIFF_CUBE_HPP
