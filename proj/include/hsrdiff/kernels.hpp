#ifndef HSRDIFF_KERNELS_HPP
#define HSRDIFF_KERNELS_HPP

#include <cmath>
#include <cstdint>
#include <vector>

#include "hsrdiff/errors.hpp"

namespace hsrdiff {
namespace detail {

// Symmetric reflection with edge repeat (… c b a | a b c … | c b a …).
// Well defined for any n >= 1, including n == 1.
inline std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
    const std::int64_t period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
}

// Unit-sum Gaussian taps truncated at 4 sigma.
inline std::vector<double> gaussian_taps(double sigma) {
    if (!(sigma > 0)) throw validation_error("gaussian_taps: sigma must be positive");
    const auto radius = static_cast<std::int64_t>(std::ceil(4.0 * sigma));
    std::vector<double> taps(static_cast<std::size_t>(2 * radius + 1));
    double total = 0;
    for (std::int64_t k = -radius; k <= radius; ++k) {
        const double w = std::exp(-0.5 * (static_cast<double>(k) / sigma) * (static_cast<double>(k) / sigma));
        taps[static_cast<std::size_t>(k + radius)] = w;
        total += w;
    }
    for (auto& w : taps) w /= total;
    return taps;
}

// Blur + center-aligned stride-f subsampling of one H x W plane. The exact
// accumulation order here is the contract: every caller (cube pipeline and
// differentiable op alike) must produce bit-identical outputs.
template <class R>
void degrade_plane(const R* in, std::int64_t H, std::int64_t W,
                   const std::vector<double>& taps, std::int64_t factor, R* out) {
    const std::int64_t radius = (static_cast<std::int64_t>(taps.size()) - 1) / 2;
    const std::int64_t offset = factor / 2;
    const std::int64_t oh = H / factor, ow = W / factor;
    for (std::int64_t oi = 0; oi < oh; ++oi) {
        const std::int64_t ci = oi * factor + offset;
        for (std::int64_t oj = 0; oj < ow; ++oj) {
            const std::int64_t cj = oj * factor + offset;
            double acc = 0;
            for (std::int64_t u = -radius; u <= radius; ++u) {
                const std::int64_t ri = reflect_index(ci + u, H);
                const double wu = taps[static_cast<std::size_t>(u + radius)];
                for (std::int64_t v = -radius; v <= radius; ++v) {
                    const std::int64_t rj = reflect_index(cj + v, W);
                    acc += wu * taps[static_cast<std::size_t>(v + radius)] *
                           static_cast<double>(in[ri * W + rj]);
                }
            }
            out[oi * ow + oj] = static_cast<R>(acc);
        }
    }
}

// Per-pixel spectral mixing: out[i, p] = sum_k m[i, k] * in[k, p], ascending k.
// Shared by the cube pipeline and the differentiable loss path so the two are
// bit-identical.
template <class R>
void spectral_mix(const double* m, std::int64_t rows, std::int64_t bands,
                  const R* in, std::int64_t pixels, R* out) {
    for (std::int64_t i = 0; i < rows; ++i) {
        R* orow = out + i * pixels;
        for (std::int64_t p = 0; p < pixels; ++p) orow[p] = R(0);
        for (std::int64_t k = 0; k < bands; ++k) {
            const R w = static_cast<R>(m[i * bands + k]);
            const R* irow = in + k * pixels;
            for (std::int64_t p = 0; p < pixels; ++p) orow[p] += w * irow[p];
        }
    }
}

}  // namespace detail
}  // namespace hsrdiff

#endif  // HSRDIFF_KERNELS_HPP
