#ifndef HSRDIFF_METRICS_HPP
#define HSRDIFF_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "hsrdiff/cube.hpp"

namespace hsrdiff {

// 10*log10(1/MSE_b) per band (unit dynamic range), capped at 99 dB, averaged
// over bands.
template <class R>
double psnr(const hsi_cube<R>& ref, const hsi_cube<R>& est) {
    if (!ref.same_shape(est)) throw shape_error("psnr: cube shapes disagree");
    const std::int64_t N = ref.pixels();
    double total = 0;
    for (std::int64_t b = 0; b < ref.bands; ++b) {
        double mse = 0;
        for (std::int64_t p = 0; p < N; ++p) {
            const double d = static_cast<double>(ref.data[b * N + p]) - est.data[b * N + p];
            mse += d * d;
        }
        mse /= static_cast<double>(N);
        total += mse == 0 ? 99.0 : std::min(99.0, 10.0 * std::log10(1.0 / mse));
    }
    return total / static_cast<double>(ref.bands);
}

// Mean per-pixel spectral angle in degrees; zero-norm pixels are skipped.
template <class R>
double sam(const hsi_cube<R>& ref, const hsi_cube<R>& est) {
    if (!ref.same_shape(est)) throw shape_error("sam: cube shapes disagree");
    const std::int64_t B = ref.bands, N = ref.pixels();
    double total = 0;
    std::int64_t valid = 0;
    for (std::int64_t p = 0; p < N; ++p) {
        double dot = 0, nr = 0, ne = 0;
        for (std::int64_t b = 0; b < B; ++b) {
            const double r = ref.data[b * N + p], e = est.data[b * N + p];
            dot += r * e;
            nr += r * r;
            ne += e * e;
        }
        if (nr == 0 || ne == 0) continue;
        const double c = std::clamp(dot / std::sqrt(nr * ne), -1.0, 1.0);
        total += std::acos(c);
        ++valid;
    }
    if (valid == 0) throw validation_error("sam: no pixel has a nonzero spectrum in both cubes");
    return total / static_cast<double>(valid) * (180.0 / 3.14159265358979323846);
}

// 100/factor * sqrt(mean_b(MSE_b / mu_b^2)) with mu_b the reference band mean.
template <class R>
double ergas(const hsi_cube<R>& ref, const hsi_cube<R>& est, std::int64_t factor) {
    if (!ref.same_shape(est)) throw shape_error("ergas: cube shapes disagree");
    if (factor < 1) throw validation_error("ergas: factor must be >= 1");
    const std::int64_t N = ref.pixels();
    double acc = 0;
    for (std::int64_t b = 0; b < ref.bands; ++b) {
        double mse = 0, mean = 0;
        for (std::int64_t p = 0; p < N; ++p) {
            const double r = ref.data[b * N + p];
            const double d = r - static_cast<double>(est.data[b * N + p]);
            mse += d * d;
            mean += r;
        }
        mse /= static_cast<double>(N);
        mean /= static_cast<double>(N);
        if (mean == 0)
            throw validation_error(detail::concat("ergas: reference band ", b, " has zero mean"));
        acc += mse / (mean * mean);
    }
    return 100.0 / static_cast<double>(factor) * std::sqrt(acc / static_cast<double>(ref.bands));
}

namespace detail {

inline const std::vector<double>& ssim_window_taps() {
    static const std::vector<double> taps = [] {
        std::vector<double> w(11);
        double sum = 0;
        for (int k = -5; k <= 5; ++k) {
            w[k + 5] = std::exp(-0.5 * (k / 1.5) * (k / 1.5));
            sum += w[k + 5];
        }
        for (auto& v : w) v /= sum;
        return w;
    }();
    return taps;
}

// weighted valid-mode filtering with the separable 11-tap window
inline std::vector<double> ssim_filter(const std::vector<double>& img, std::int64_t H,
                                       std::int64_t W) {
    const auto& w = ssim_window_taps();
    const std::int64_t oh = H - 10, ow = W - 10;
    std::vector<double> tmp(static_cast<std::size_t>(H * ow));
    for (std::int64_t i = 0; i < H; ++i)
        for (std::int64_t j = 0; j < ow; ++j) {
            double acc = 0;
            for (int k = 0; k < 11; ++k) acc += w[k] * img[i * W + j + k];
            tmp[i * ow + j] = acc;
        }
    std::vector<double> out(static_cast<std::size_t>(oh * ow));
    for (std::int64_t i = 0; i < oh; ++i)
        for (std::int64_t j = 0; j < ow; ++j) {
            double acc = 0;
            for (int k = 0; k < 11; ++k) acc += w[k] * tmp[(i + k) * ow + j];
            out[i * ow + j] = acc;
        }
    return out;
}

}  // namespace detail

// Per-band SSIM with the 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2 and
// C2 = 0.03^2 on unit dynamic range; window means then band mean.
template <class R>
double ssim(const hsi_cube<R>& ref, const hsi_cube<R>& est) {
    if (!ref.same_shape(est)) throw shape_error("ssim: cube shapes disagree");
    const std::int64_t H = ref.height, W = ref.width;
    if (H < 11 || W < 11)
        throw validation_error(detail::concat("ssim: image ", H, "x", W,
                                              " is smaller than the 11x11 window"));
    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    const std::int64_t N = ref.pixels();
    double band_total = 0;
    std::vector<double> x(static_cast<std::size_t>(N)), y(static_cast<std::size_t>(N)),
        xx(static_cast<std::size_t>(N)), yy(static_cast<std::size_t>(N)),
        xy(static_cast<std::size_t>(N));
    for (std::int64_t b = 0; b < ref.bands; ++b) {
        for (std::int64_t p = 0; p < N; ++p) {
            x[p] = ref.data[b * N + p];
            y[p] = est.data[b * N + p];
            xx[p] = x[p] * x[p];
            yy[p] = y[p] * y[p];
            xy[p] = x[p] * y[p];
        }
        const auto mx = detail::ssim_filter(x, H, W);
        const auto my = detail::ssim_filter(y, H, W);
        const auto mxx = detail::ssim_filter(xx, H, W);
        const auto myy = detail::ssim_filter(yy, H, W);
        const auto mxy = detail::ssim_filter(xy, H, W);
        double acc = 0;
        for (std::size_t k = 0; k < mx.size(); ++k) {
            const double vx = mxx[k] - mx[k] * mx[k];
            const double vy = myy[k] - my[k] * my[k];
            const double cxy = mxy[k] - mx[k] * my[k];
            acc += ((2 * mx[k] * my[k] + C1) * (2 * cxy + C2)) /
                   ((mx[k] * mx[k] + my[k] * my[k] + C1) * (vx + vy + C2));
        }
        band_total += acc / static_cast<double>(mx.size());
    }
    return band_total / static_cast<double>(ref.bands);
}

struct metric_report {
    double psnr_db = 0;
    double ssim = 0;
    double sam_deg = 0;
    double ergas = 0;
};

template <class R>
metric_report evaluate_pair(const hsi_cube<R>& ref, const hsi_cube<R>& est, std::int64_t factor) {
    return {psnr(ref, est), ssim(ref, est), sam(ref, est), ergas(ref, est, factor)};
}

// Tab-separated report row: name psnr ssim sam ergas.
inline std::string format_report_line(const std::string& name, const metric_report& m) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s\t%.2f\t%.4f\t%.2f\t%.3f", name.c_str(), m.psnr_db,
                  m.ssim, m.sam_deg, m.ergas);
    return buf;
}

}  // namespace hsrdiff

#endif  // HSRDIFF_METRICS_HPP
