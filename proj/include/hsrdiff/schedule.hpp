#ifndef HSRDIFF_SCHEDULE_HPP
#define HSRDIFF_SCHEDULE_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "hsrdiff/cube.hpp"
#include "hsrdiff/rng.hpp"

namespace hsrdiff {

// alpha[t-1] = alpha_t for t in 1..T; gamma[t] = prod_{i<=t} alpha_i, gamma[0] = 1.
// Kept in double regardless of the pipeline float width.
struct noise_schedule {
    std::int64_t T = 0;
    double beta_start = 0, beta_end = 0;
    std::vector<double> alpha;
    std::vector<double> gamma;

    double alpha_t(std::int64_t t) const { return alpha[t - 1]; }
    double gamma_t(std::int64_t t) const { return gamma[t]; }
};

inline noise_schedule build_training_schedule(std::int64_t T, double beta_start = 1e-6,
                                              double beta_end = 1e-2) {
    if (T < 1) throw validation_error("schedule length T must be >= 1");
    if (!(beta_start > 0) || !(beta_start <= beta_end) || !(beta_end < 1))
        throw validation_error(detail::concat("betas must satisfy 0 < start <= end < 1, got ",
                                              beta_start, ", ", beta_end));
    noise_schedule s;
    s.T = T;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.alpha.resize(static_cast<std::size_t>(T));
    s.gamma.resize(static_cast<std::size_t>(T) + 1);
    s.gamma[0] = 1.0;
    for (std::int64_t t = 1; t <= T; ++t) {
        const double beta =
            T == 1 ? beta_start
                   : beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) /
                                      static_cast<double>(T - 1);
        s.alpha[t - 1] = 1.0 - beta;
        s.gamma[t] = s.gamma[t - 1] * s.alpha[t - 1];
    }
    return s;
}

struct gamma_draw {
    std::int64_t t;
    double gamma;
};

// Two-step draw: t ~ U{1..T}, then gamma ~ U(gamma_t, gamma_{t-1}).
inline gamma_draw sample_gamma(const noise_schedule& s, rng& gen) {
    const std::int64_t t = gen.uniform_int(1, static_cast<int>(s.T));
    const double lo = s.gamma[t], hi = s.gamma[t - 1];
    return {t, lo + gen.uniform_open01() * (hi - lo)};
}

// Z_t = sqrt(gamma) Z_0 + sqrt(1 - gamma) eps
template <class R>
hsi_cube<R> forward_marginal(const hsi_cube<R>& z0, double gamma, const hsi_cube<R>& eps) {
    if (!z0.same_shape(eps)) throw shape_error("forward_marginal: noise shape mismatch");
    if (!(gamma > 0) || gamma > 1)
        throw validation_error(detail::concat("forward_marginal: gamma must lie in (0,1], got ", gamma));
    const R a = static_cast<R>(std::sqrt(gamma));
    const R b = static_cast<R>(std::sqrt(1.0 - gamma));
    hsi_cube<R> out(z0.bands, z0.height, z0.width);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = a * z0.data[i] + b * eps.data[i];
    return out;
}

// Z_t = sqrt(alpha_t) Z_{t-1} + sqrt(1 - alpha_t) eps
template <class R>
hsi_cube<R> forward_step(const hsi_cube<R>& z_prev, double alpha_t, const hsi_cube<R>& eps) {
    if (!z_prev.same_shape(eps)) throw shape_error("forward_step: noise shape mismatch");
    if (!(alpha_t > 0) || !(alpha_t < 1))
        throw validation_error(detail::concat("forward_step: alpha must lie in (0,1), got ", alpha_t));
    const R a = static_cast<R>(std::sqrt(alpha_t));
    const R b = static_cast<R>(std::sqrt(1.0 - alpha_t));
    hsi_cube<R> out(z_prev.bands, z_prev.height, z_prev.width);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = a * z_prev.data[i] + b * eps.data[i];
    return out;
}

template <class R>
struct posterior_gaussian {
    hsi_cube<R> mean;
    double var = 0;
};

// q(Z_{t-1} | Z_0, Z_t) moments.
template <class R>
posterior_gaussian<R> posterior_params(const hsi_cube<R>& z0, const hsi_cube<R>& zt,
                                       std::int64_t t, const noise_schedule& s) {
    if (t < 1 || t > s.T)
        throw validation_error(detail::concat("posterior_params: t=", t, " outside 1..", s.T));
    if (!z0.same_shape(zt)) throw shape_error("posterior_params: cube shapes disagree");
    const double gamma_t = s.gamma[t], gamma_prev = s.gamma[t - 1], alpha = s.alpha[t - 1];
    const double denom = 1.0 - gamma_t;
    const R c0 = static_cast<R>(std::sqrt(gamma_prev) * (1.0 - alpha) / denom);
    const R c1 = static_cast<R>(std::sqrt(alpha) * (1.0 - gamma_prev) / denom);
    posterior_gaussian<R> post;
    post.mean = hsi_cube<R>(z0.bands, z0.height, z0.width);
    for (std::size_t i = 0; i < post.mean.data.size(); ++i)
        post.mean.data[i] = c0 * z0.data[i] + c1 * zt.data[i];
    post.var = (1.0 - gamma_prev) * (1.0 - alpha) / denom;
    return post;
}

struct infer_step {
    double gamma;       // gamma'_t of this step
    double gamma_prev;  // gamma'_{t-1}; 1.0 for the final step
    double alpha;       // gamma / gamma_prev
};

// steps[i] corresponds to coarse index t = i + 1; gamma strictly decreasing
// along the vector. The sampler applies steps back-to-front.
struct inference_schedule {
    std::vector<infer_step> steps;
    std::int64_t size() const { return static_cast<std::int64_t>(steps.size()); }
};

// Sub-samples the training schedule at S gamma targets linearly spaced between
// gamma_1 and gamma_T (inclusive), snapping each target to a training value
// while preserving strict monotonicity. S == T reproduces the full schedule.
inline inference_schedule build_inference_schedule(const noise_schedule& train, std::int64_t S = 100) {
    if (S < 1 || S > train.T)
        throw validation_error(detail::concat("inference steps S=", S, " outside 1..", train.T));
    const std::int64_t T = train.T;
    const double g1 = train.gamma[1], gT = train.gamma[T];
    std::vector<double> picked(static_cast<std::size_t>(S));
    std::int64_t prev_idx = 0;
    for (std::int64_t i = 1; i <= S; ++i) {
        const double target =
            S == 1 ? gT
                   : g1 + (gT - g1) * static_cast<double>(i - 1) / static_cast<double>(S - 1);
        const std::int64_t lo = prev_idx + 1, hi = T - S + i;
        std::int64_t best = lo;
        double best_d = std::abs(train.gamma[lo] - target);
        for (std::int64_t t = lo + 1; t <= hi; ++t) {
            const double d = std::abs(train.gamma[t] - target);
            if (d < best_d) { best_d = d; best = t; }
        }
        picked[i - 1] = train.gamma[best];
        prev_idx = best;
    }
    inference_schedule out;
    out.steps.resize(static_cast<std::size_t>(S));
    for (std::int64_t i = 0; i < S; ++i) {
        const double g = picked[i];
        const double gp = i == 0 ? 1.0 : picked[i - 1];
        out.steps[i] = {g, gp, g / gp};
    }
    return out;
}

enum class refine_variance { eq6, posterior };

// Z_{t-1} from Z_t and the prediction of Z_0 (one reverse-chain update).
template <class R>
hsi_cube<R> refinement_step(const hsi_cube<R>& zt, const hsi_cube<R>& z0_hat,
                            const infer_step& step, const hsi_cube<R>& eps,
                            refine_variance variance = refine_variance::eq6) {
    if (!zt.same_shape(z0_hat) || !zt.same_shape(eps))
        throw shape_error("refinement_step: cube shapes disagree");
    const double denom = 1.0 - step.gamma;
    if (!(denom > 0)) throw validation_error("refinement_step: gamma must be < 1");
    const R c0 = static_cast<R>(std::sqrt(step.gamma_prev) * (1.0 - step.alpha) / denom);
    const R c1 = static_cast<R>(std::sqrt(step.alpha) * (1.0 - step.gamma_prev) / denom);
    const double noise_scale =
        variance == refine_variance::eq6
            ? std::sqrt(1.0 - step.alpha)
            : std::sqrt((1.0 - step.gamma_prev) * (1.0 - step.alpha) / denom);
    const R cn = static_cast<R>(noise_scale);
    hsi_cube<R> out(zt.bands, zt.height, zt.width);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = c0 * z0_hat.data[i] + c1 * zt.data[i] + cn * eps.data[i];
    return out;
}

template <class R>
using denoise_fn = std::function<hsi_cube<R>(const hsi_cube<R>& x, const hsi_cube<R>& y,
                                             const hsi_cube<R>& zt, double gamma)>;

template <class R>
void clamp01(hsi_cube<R>& c) {
    for (auto& v : c.data) v = std::min<R>(R(1), std::max<R>(R(0), v));
}

struct sample_options {
    refine_variance variance = refine_variance::eq6;
    bool clamp_prediction = true;  // clamp model's Z0 estimate into [0,1]
};

// Observer for intermediate states: called with the coarse chain index
// (counting down to 1) and the state after that refinement.
template <class R>
using sample_observer = std::function<void(std::int64_t, const hsi_cube<R>&)>;

// Full reverse chain: start from pure Gaussian noise at the coarsest step and
// refine with the model's Z0 prediction; final-step noise is zeroed.
template <class R>
hsi_cube<R> sample(const denoise_fn<R>& model, const hsi_cube<R>& x, const hsi_cube<R>& y,
                   std::int64_t bands, std::int64_t height, std::int64_t width,
                   const inference_schedule& infer, rng& gen,
                   const sample_options& opts = {},
                   const sample_observer<R>& observe = nullptr) {
    if (infer.size() < 1) throw validation_error("sample: empty inference schedule");
    hsi_cube<R> z(bands, height, width);
    for (auto& v : z.data) v = static_cast<R>(gen.normal());
    hsi_cube<R> zero(bands, height, width, R(0));
    for (std::int64_t i = infer.size(); i >= 1; --i) {
        const infer_step& step = infer.steps[static_cast<std::size_t>(i - 1)];
        hsi_cube<R> z0_hat = model(x, y, z, step.gamma);
        if (!z0_hat.same_shape(z))
            throw shape_error("sample: model output shape disagrees with state");
        if (opts.clamp_prediction) clamp01(z0_hat);
        if (i > 1) {
            hsi_cube<R> eps(bands, height, width);
            for (auto& v : eps.data) v = static_cast<R>(gen.normal());
            z = refinement_step(z, z0_hat, step, eps, opts.variance);
        } else {
            z = refinement_step(z, z0_hat, step, zero, opts.variance);
        }
        if (observe) observe(i, z);
    }
    clamp01(z);
    return z;
}

}  // namespace hsrdiff

#endif  // HSRDIFF_SCHEDULE_HPP
