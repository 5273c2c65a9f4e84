#ifndef HSRDIFF_DEGRADATION_HPP
#define HSRDIFF_DEGRADATION_HPP

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "hsrdiff/cube.hpp"
#include "hsrdiff/kernels.hpp"
#include "hsrdiff/rng.hpp"

namespace hsrdiff {

// Blur + down-sample operator: Gaussian taps (unit sum), integer factor,
// center-aligned subsampling.
struct spatial_degradation {
    std::int64_t factor = 4;
    double kernel_sigma = 2.0;
    std::shared_ptr<std::vector<double>> taps;

    static spatial_degradation make(std::int64_t factor, double sigma = 0.0) {
        if (factor < 2) throw validation_error("degradation factor must be >= 2");
        spatial_degradation d;
        d.factor = factor;
        d.kernel_sigma = sigma > 0 ? sigma : static_cast<double>(factor) / 2.0;
        d.taps = std::make_shared<std::vector<double>>(detail::gaussian_taps(d.kernel_sigma));
        return d;
    }

    std::int64_t radius() const { return (static_cast<std::int64_t>(taps->size()) - 1) / 2; }
};

// X = R Z: per-pixel spectral mixing.
template <class R>
hsi_cube<R> apply_spectral_response(const hsi_cube<R>& z, const spectral_response& r) {
    if (r.hsi_bands != z.bands)
        throw shape_error(detail::concat("spectral response expects ", r.hsi_bands,
                                         " bands, cube has ", z.bands));
    hsi_cube<R> x(r.msi_bands, z.height, z.width);
    detail::spectral_mix(r.matrix.data(), r.msi_bands, z.bands, z.data.data(),
                         z.pixels(), x.data.data());
    return x;
}

// Y = Z D: per-band blur (reflective boundary) + stride-factor subsampling.
template <class R>
hsi_cube<R> apply_spatial_degradation(const hsi_cube<R>& z, const spatial_degradation& d) {
    if (z.height % d.factor != 0 || z.width % d.factor != 0)
        throw shape_error(detail::concat("cube ", z.height, "x", z.width,
                                         " not divisible by factor ", d.factor));
    hsi_cube<R> y(z.bands, z.height / d.factor, z.width / d.factor);
    for (std::int64_t b = 0; b < z.bands; ++b)
        detail::degrade_plane(z.data.data() + b * z.pixels(), z.height, z.width,
                              *d.taps, d.factor, y.data.data() + b * y.pixels());
    return y;
}

template <class R>
struct observation_pair {
    hsi_cube<R> x;  // HR-MSI
    hsi_cube<R> y;  // LR-HSI
    hsi_cube<R> z;  // ground-truth HR-HSI
};

template <class R>
observation_pair<R> make_pair(const hsi_cube<R>& z, const spectral_response& r,
                              const spatial_degradation& d) {
    return {apply_spectral_response(z, r), apply_spatial_degradation(z, d), z};
}

// ----------------------------------------------------------- scene synthesis

struct scene_config {
    std::int64_t endmembers = 4;
    std::int64_t bands = 16;
    std::int64_t height = 64;
    std::int64_t width = 64;
    double smoothness = 8.0;  // correlation length of abundance maps, pixels
    std::uint64_t seed = 0;

    void validate() const {
        if (endmembers < 1) throw validation_error("scene endmembers must be >= 1");
        if (bands < 1) throw validation_error("scene bands must be >= 1");
        if (height < 1 || width < 1) throw validation_error("scene size must be positive");
        if (!(smoothness > 0)) throw validation_error("scene smoothness must be positive");
    }
};

namespace detail {

// Separable reflective Gaussian blur of one plane; scene generation only.
inline void blur_plane(std::vector<double>& plane, std::int64_t H, std::int64_t W,
                       const std::vector<double>& taps) {
    const std::int64_t r = (static_cast<std::int64_t>(taps.size()) - 1) / 2;
    std::vector<double> tmp(plane.size());
    for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < W; ++j) {
            double acc = 0;
            for (std::int64_t k = -r; k <= r; ++k)
                acc += taps[k + r] * plane[i * W + reflect_index(j + k, W)];
            tmp[i * W + j] = acc;
        }
    for (std::int64_t j = 0; j < W; ++j)
        for (std::int64_t i = 0; i < H; ++i) {
            double acc = 0;
            for (std::int64_t k = -r; k <= r; ++k)
                acc += taps[k + r] * tmp[reflect_index(i + k, H) * W + j];
            plane[i * W + j] = acc;
        }
}

}  // namespace detail

// Smooth per-pixel abundance fields, softmax-normalized so each pixel is a
// convex mixture over endmembers. Row-major (k * HW + pixel).
inline std::vector<double> scene_abundances(const scene_config& cfg, rng& gen) {
    cfg.validate();
    const std::int64_t K = cfg.endmembers, HW = cfg.height * cfg.width;
    const auto taps = detail::gaussian_taps(cfg.smoothness);
    std::vector<std::vector<double>> fields(static_cast<std::size_t>(K));
    for (auto& f : fields) {
        f.resize(static_cast<std::size_t>(HW));
        for (auto& v : f) v = gen.normal();
        detail::blur_plane(f, cfg.height, cfg.width, taps);
        // restore unit variance lost to smoothing, then sharpen the mixture
        double mean = 0, var = 0;
        for (double v : f) mean += v;
        mean /= static_cast<double>(HW);
        for (double v : f) var += (v - mean) * (v - mean);
        var = std::max(var / static_cast<double>(HW), 1e-12);
        const double gain = 3.0 / std::sqrt(var);
        for (auto& v : f) v = (v - mean) * gain;
    }
    std::vector<double> ab(static_cast<std::size_t>(K * HW));
    for (std::int64_t p = 0; p < HW; ++p) {
        double mx = fields[0][p];
        for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, fields[k][p]);
        double denom = 0;
        for (std::int64_t k = 0; k < K; ++k) {
            const double e = std::exp(fields[k][p] - mx);
            ab[k * HW + p] = e;
            denom += e;
        }
        for (std::int64_t k = 0; k < K; ++k) ab[k * HW + p] /= denom;
    }
    return ab;
}

// Smooth random endmember signatures mapped into [0.1, 0.95].
inline std::vector<double> scene_spectra(const scene_config& cfg, rng& gen) {
    const std::int64_t K = cfg.endmembers, B = cfg.bands;
    const auto taps = detail::gaussian_taps(std::max(1.0, static_cast<double>(B) / 8.0));
    const std::int64_t r = (static_cast<std::int64_t>(taps.size()) - 1) / 2;
    std::vector<double> spectra(static_cast<std::size_t>(K * B));
    for (std::int64_t k = 0; k < K; ++k) {
        std::vector<double> raw(static_cast<std::size_t>(B));
        for (auto& v : raw) v = gen.normal();
        std::vector<double> smooth(static_cast<std::size_t>(B));
        for (std::int64_t j = 0; j < B; ++j) {
            double acc = 0;
            for (std::int64_t t = -r; t <= r; ++t)
                acc += taps[t + r] * raw[detail::reflect_index(j + t, B)];
            smooth[j] = acc;
        }
        double lo = smooth[0], hi = smooth[0];
        for (double v : smooth) { lo = std::min(lo, v); hi = std::max(hi, v); }
        const double span = hi > lo ? hi - lo : 1.0;
        for (std::int64_t j = 0; j < B; ++j)
            spectra[k * B + j] = 0.1 + 0.85 * (smooth[j] - lo) / span;
    }
    return spectra;
}

// Z = sum_k a_k(x,y) * s_k(lambda), rescaled into (0, 1]. The B x HW unfolding
// has rank <= K by construction.
template <class R>
hsi_cube<R> synthesize_scene(const scene_config& cfg, rng& gen) {
    cfg.validate();
    const std::int64_t K = cfg.endmembers, B = cfg.bands, HW = cfg.height * cfg.width;
    const auto ab = scene_abundances(cfg, gen);
    const auto sp = scene_spectra(cfg, gen);
    std::vector<double> z(static_cast<std::size_t>(B * HW), 0.0);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t k = 0; k < K; ++k) {
            const double s = sp[k * B + b];
            const double* a = ab.data() + k * HW;
            double* zrow = z.data() + b * HW;
            for (std::int64_t p = 0; p < HW; ++p) zrow[p] += s * a[p];
        }
    double mx = 0;
    for (double v : z) mx = std::max(mx, v);
    hsi_cube<R> cube(B, cfg.height, cfg.width);
    const double inv = mx > 0 ? 1.0 / mx : 1.0;
    for (std::int64_t i = 0; i < B * HW; ++i) cube.data[i] = static_cast<R>(z[i] * inv);
    return cube;
}

// Crop so both dimensions divide the factor; generation-side convenience.
template <class R>
hsi_cube<R> crop_to_factor(const hsi_cube<R>& z, std::int64_t factor) {
    const std::int64_t H = (z.height / factor) * factor;
    const std::int64_t W = (z.width / factor) * factor;
    if (H == z.height && W == z.width) return z;
    if (H < factor || W < factor)
        throw validation_error("cube smaller than one degradation cell");
    hsi_cube<R> out(z.bands, H, W);
    for (std::int64_t b = 0; b < z.bands; ++b)
        for (std::int64_t i = 0; i < H; ++i)
            std::copy(z.data.begin() + (b * z.height + i) * z.width,
                      z.data.begin() + (b * z.height + i) * z.width + W,
                      out.data.begin() + (b * H + i) * W);
    return out;
}

}  // namespace hsrdiff

#endif  // HSRDIFF_DEGRADATION_HPP
