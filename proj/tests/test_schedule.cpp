#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "hsrdiff/degradation.hpp"
#include "hsrdiff/schedule.hpp"
#include "test_support.hpp"

using hsrdiff::hsi_cube;
using hsrdiff::rng;
namespace hd = hsrdiff;

namespace {

hsi_cube<double> random_cube(std::int64_t B, std::int64_t H, std::int64_t W, rng& gen,
                             bool unit_range = false) {
    hsi_cube<double> c(B, H, W);
    for (auto& v : c.data) v = unit_range ? gen.uniform01() : gen.normal();
    return c;
}

double cube_psnr(const hsi_cube<double>& ref, const hsi_cube<double>& est) {
    double mse = 0;
    for (std::size_t i = 0; i < ref.data.size(); ++i) {
        const double d = ref.data[i] - est.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(ref.data.size());
    if (mse == 0) return 99.0;
    return 10.0 * std::log10(1.0 / mse);
}

}  // namespace

TEST_CASE("training schedule satisfies its defining identities", "[schedule]") {
    auto s = hd::build_training_schedule(2000);
    REQUIRE(s.T == 2000);
    REQUIRE(s.gamma[0] == 1.0);

    // direct prefix product oracle
    double prod = 1.0;
    for (std::int64_t t = 1; t <= s.T; ++t) {
        prod *= s.alpha[t - 1];
        CHECK(s.gamma[t] == Catch::Approx(prod).epsilon(1e-14));
        CHECK(s.alpha[t - 1] > 0.0);
        CHECK(s.alpha[t - 1] < 1.0);
        CHECK(std::abs(s.gamma[t] / s.gamma[t - 1] - s.alpha[t - 1]) < 1e-12);
        CHECK(s.gamma[t] < s.gamma[t - 1]);
    }
    CHECK(s.gamma[s.T] > 0.0);
    // endpoints of the default beta ramp
    CHECK(s.alpha[0] == Catch::Approx(1.0 - 1e-6));
    CHECK(s.alpha[s.T - 1] == Catch::Approx(1.0 - 1e-2));
}

TEST_CASE("single-step schedule degenerates to gamma_1 = alpha_1", "[schedule]") {
    auto s = hd::build_training_schedule(1, 1e-12, 1e-12);
    CHECK(s.gamma[1] == s.alpha[0]);
    CHECK(s.alpha[0] == Catch::Approx(1.0 - 1e-12));
}

TEST_CASE("schedule construction rejects invalid beta ranges", "[schedule]") {
    CHECK_THROWS_AS(hd::build_training_schedule(10, 0.0, 0.5), hd::validation_error);
    CHECK_THROWS_AS(hd::build_training_schedule(10, 0.5, 0.4), hd::validation_error);
    CHECK_THROWS_AS(hd::build_training_schedule(10, 0.5, 1.0), hd::validation_error);
    CHECK_THROWS_AS(hd::build_training_schedule(0, 1e-6, 1e-2), hd::validation_error);
}

TEST_CASE("gamma draws stay inside the schedule range and are deterministic", "[schedule]") {
    auto s1 = hd::build_training_schedule(1, 1e-3, 1e-3);
    rng gen(7);
    for (int i = 0; i < 200; ++i) {
        auto d = hd::sample_gamma(s1, gen);
        REQUIRE(d.t == 1);
        REQUIRE(d.gamma > s1.gamma[1]);
        REQUIRE(d.gamma < 1.0);
    }

    auto s = hd::build_training_schedule(100);
    rng a(42), b(42);
    for (int i = 0; i < 500; ++i) {
        auto da = hd::sample_gamma(s, a);
        auto db = hd::sample_gamma(s, b);
        REQUIRE(da.t == db.t);
        REQUIRE(da.gamma == db.gamma);
        REQUIRE(da.gamma > s.gamma[s.T]);
        REQUIRE(da.gamma < 1.0);
    }
}

TEST_CASE("gamma draws follow the two-step mixture law", "[schedule][oracle]") {
    // chi-square goodness of fit against sum_t (1/T) U(gamma_{t-1}, gamma_t)
    const std::int64_t T = 50;
    auto s = hd::build_training_schedule(T);
    const int n_draws = 100000, n_bins = 50;
    const double lo = s.gamma[T], hi = 1.0, width = (hi - lo) / n_bins;

    std::vector<std::int64_t> observed(n_bins, 0);
    rng gen(2024);
    for (int i = 0; i < n_draws; ++i) {
        const double g = hd::sample_gamma(s, gen).gamma;
        int bin = static_cast<int>((g - lo) / width);
        bin = std::min(std::max(bin, 0), n_bins - 1);
        ++observed[bin];
    }

    auto mixture_cdf = [&](double x) {
        double acc = 0;
        for (std::int64_t t = 1; t <= T; ++t) {
            const double a = s.gamma[t], b = s.gamma[t - 1];
            const double u = std::min(std::max((x - a) / (b - a), 0.0), 1.0);
            acc += u / static_cast<double>(T);
        }
        return acc;
    };

    double chi2 = 0;
    for (int k = 0; k < n_bins; ++k) {
        const double p = mixture_cdf(lo + (k + 1) * width) - mixture_cdf(lo + k * width);
        const double expected = p * n_draws;
        REQUIRE(expected > 5.0);
        chi2 += (observed[k] - expected) * (observed[k] - expected) / expected;
    }
    // 1% critical value of chi-square with 49 degrees of freedom
    CHECK(chi2 < 74.9195);
}

TEST_CASE("forward marginal limits", "[schedule]") {
    rng gen(11);
    auto z0 = random_cube(2, 4, 4, gen, true);
    auto eps = random_cube(2, 4, 4, gen);

    auto at_one = hd::forward_marginal(z0, 1.0, eps);
    for (std::size_t i = 0; i < z0.data.size(); ++i)
        CHECK(at_one.data[i] == z0.data[i]);

    hsi_cube<double> zero_eps(2, 4, 4, 0.0);
    auto near_zero = hd::forward_marginal(z0, 1e-12, zero_eps);
    for (double v : near_zero.data) CHECK(std::abs(v) < 1e-5);

    hsi_cube<double> bad(2, 4, 5, 0.0);
    CHECK_THROWS_AS(hd::forward_marginal(z0, 0.5, bad), hd::shape_error);
    CHECK_THROWS_AS(hd::forward_marginal(z0, 0.0, eps), hd::validation_error);
}

TEST_CASE("forward step limits and variance", "[schedule]") {
    rng gen(12);
    auto z = random_cube(1, 4, 4, gen, true);
    auto eps = random_cube(1, 4, 4, gen);

    auto near_id = hd::forward_step(z, 1.0 - 1e-12, eps);
    for (std::size_t i = 0; i < z.data.size(); ++i)
        CHECK(near_id.data[i] == Catch::Approx(z.data[i]).margin(1e-5));

    hsi_cube<double> zero_eps(1, 4, 4, 0.0);
    const double alpha = 0.7;
    auto scaled = hd::forward_step(z, alpha, zero_eps);
    for (std::size_t i = 0; i < z.data.size(); ++i)
        CHECK(scaled.data[i] == Catch::Approx(std::sqrt(alpha) * z.data[i]).epsilon(1e-12));

    // sample variance of the noise contribution approaches 1 - alpha
    const int trials = 20000;
    double mean = 0, m2 = 0;
    std::int64_t n = 0;
    for (int k = 0; k < trials; ++k) {
        auto e = random_cube(1, 4, 4, gen);
        auto out = hd::forward_step(z, alpha, e);
        for (std::size_t i = 0; i < out.data.size(); ++i) {
            const double r = out.data[i] - std::sqrt(alpha) * z.data[i];
            ++n;
            const double d = r - mean;
            mean += d / n;
            m2 += d * (r - mean);
        }
    }
    const double var = m2 / (n - 1);
    const double se = (1.0 - alpha) * std::sqrt(2.0 / (n - 1));
    CHECK(std::abs(var - (1.0 - alpha)) < 3.0 * se);
}

TEST_CASE("marginal matches composed steps in first two moments", "[schedule][oracle]") {
    const std::int64_t T = 20, t_star = 10;
    auto s = hd::build_training_schedule(T, 0.02, 0.25);
    rng gen(13);
    auto z0 = random_cube(2, 4, 4, gen, true);
    const double gamma = s.gamma[t_star];

    const int trials = 10000;
    double mean = 0, m2 = 0;
    std::int64_t n = 0;
    for (int k = 0; k < trials; ++k) {
        hsi_cube<double> z = z0;
        for (std::int64_t t = 1; t <= t_star; ++t) {
            auto e = random_cube(2, 4, 4, gen);
            z = hd::forward_step(z, s.alpha[t - 1], e);
        }
        for (std::size_t i = 0; i < z.data.size(); ++i) {
            const double r = z.data[i] - std::sqrt(gamma) * z0.data[i];
            ++n;
            const double d = r - mean;
            mean += d / n;
            m2 += d * (r - mean);
        }
    }
    const double var = m2 / (n - 1);
    const double target_var = 1.0 - gamma;
    const double se_mean = std::sqrt(target_var / n);
    const double se_var = target_var * std::sqrt(2.0 / (n - 1));
    CHECK(std::abs(mean) < 3.0 * se_mean);
    CHECK(std::abs(var - target_var) < 3.0 * se_var);
}

TEST_CASE("posterior collapses onto z0 at t=1", "[schedule]") {
    auto s = hd::build_training_schedule(10, 0.01, 0.2);
    rng gen(14);
    auto z0 = random_cube(1, 3, 3, gen, true);
    auto zt = random_cube(1, 3, 3, gen);
    auto post = hd::posterior_params(z0, zt, 1, s);
    REQUIRE(post.var == 0.0);
    for (std::size_t i = 0; i < z0.data.size(); ++i)
        CHECK(post.mean.data[i] == z0.data[i]);
    CHECK_THROWS_AS(hd::posterior_params(z0, zt, 0, s), hd::validation_error);
    CHECK_THROWS_AS(hd::posterior_params(z0, zt, 11, s), hd::validation_error);
}

TEST_CASE("posterior mean approaches z0 when alpha is near one and zt == z0", "[schedule]") {
    auto s = hd::build_training_schedule(10, 1e-12, 1e-11);
    rng gen(15);
    auto z0 = random_cube(1, 3, 3, gen, true);
    auto post = hd::posterior_params(z0, z0, 5, s);
    for (std::size_t i = 0; i < z0.data.size(); ++i)
        CHECK(post.mean.data[i] == Catch::Approx(z0.data[i]).epsilon(1e-9));
}

TEST_CASE("posterior matches a grid Bayes oracle", "[schedule][oracle]") {
    auto s = hd::build_training_schedule(10, 0.02, 0.3);
    const std::int64_t t = 6;
    const double z0 = 0.31, zt = -0.42;
    hsi_cube<double> c0(1, 1, 1), ct(1, 1, 1);
    c0.data[0] = z0;
    ct.data[0] = zt;
    auto post = hd::posterior_params(c0, ct, t, s);

    // numeric Bayes: density(z) ∝ N(zt; sqrt(a) z, 1-a) * N(z; sqrt(g_prev) z0, 1-g_prev)
    const double a = s.alpha[t - 1], gp = s.gamma[t - 1];
    const long n_grid = 400000;
    const double span = 12.0;
    const double lo = -span, step = 2 * span / n_grid;
    double w_sum = 0, w_mean = 0;
    std::vector<double> w(n_grid);
    for (long i = 0; i < n_grid; ++i) {
        const double z = lo + (i + 0.5) * step;
        const double d1 = zt - std::sqrt(a) * z;
        const double d2 = z - std::sqrt(gp) * z0;
        w[i] = std::exp(-0.5 * d1 * d1 / (1 - a) - 0.5 * d2 * d2 / (1 - gp));
        w_sum += w[i];
        w_mean += w[i] * z;
    }
    w_mean /= w_sum;
    double w_var = 0;
    for (long i = 0; i < n_grid; ++i) {
        const double z = lo + (i + 0.5) * step;
        w_var += w[i] * (z - w_mean) * (z - w_mean);
    }
    w_var /= w_sum;

    CHECK(std::abs(post.mean.data[0] - w_mean) < 1e-6);
    CHECK(std::abs(post.var - w_var) < 1e-6);
}

TEST_CASE("refinement with perfect prediction and zero noise equals the posterior mean", "[schedule]") {
    auto s = hd::build_training_schedule(30, 0.01, 0.2);
    rng gen(16);
    auto z0 = random_cube(2, 3, 3, gen, true);
    auto zt = random_cube(2, 3, 3, gen);
    hsi_cube<double> zero(2, 3, 3, 0.0);
    for (std::int64_t t : {2, 7, 30}) {
        hd::infer_step step{s.gamma[t], s.gamma[t - 1], s.alpha[t - 1]};
        auto refined = hd::refinement_step(zt, z0, step, zero);
        auto post = hd::posterior_params(z0, zt, t, s);
        for (std::size_t i = 0; i < z0.data.size(); ++i)
            REQUIRE(refined.data[i] == post.mean.data[i]);
    }
}

TEST_CASE("final refinement step collapses onto the prediction", "[schedule]") {
    auto s = hd::build_training_schedule(100);
    auto infer = hd::build_inference_schedule(s, 10);
    const auto last = infer.steps[0];
    REQUIRE(last.gamma_prev == 1.0);
    // coefficient algebra at gamma_prev = 1: c1 = 0 and c0 = (1-alpha)/(1-gamma) = 1
    rng gen(17);
    auto z0_hat = random_cube(1, 4, 4, gen, true);
    auto zt = random_cube(1, 4, 4, gen);
    hsi_cube<double> zero(1, 4, 4, 0.0);
    auto out = hd::refinement_step(zt, z0_hat, last, zero);
    for (std::size_t i = 0; i < out.data.size(); ++i)
        REQUIRE(out.data[i] == z0_hat.data[i]);
}

TEST_CASE("refinement is linear in its cube inputs", "[schedule][property]") {
    auto s = hd::build_training_schedule(50, 0.01, 0.2);
    rng gen(18);
    for (int rep = 0; rep < 10; ++rep) {
        const std::int64_t t = gen.uniform_int(2, 50);
        hd::infer_step step{s.gamma[t], s.gamma[t - 1], s.alpha[t - 1]};
        auto zt = random_cube(1, 3, 3, gen);
        auto z0h = random_cube(1, 3, 3, gen);
        auto eps = random_cube(1, 3, 3, gen);
        const double a = 0.5 + gen.uniform01();
        auto scaled_in = zt, scaled_z0 = z0h, scaled_eps = eps;
        for (auto& v : scaled_in.data) v *= a;
        for (auto& v : scaled_z0.data) v *= a;
        for (auto& v : scaled_eps.data) v *= a;
        auto lhs = hd::refinement_step(scaled_in, scaled_z0, step, scaled_eps);
        auto rhs = hd::refinement_step(zt, z0h, step, eps);
        for (std::size_t i = 0; i < lhs.data.size(); ++i)
            REQUIRE(lhs.data[i] == Catch::Approx(a * rhs.data[i]).epsilon(1e-12));
    }
}

TEST_CASE("posterior-variance mode uses the Eq. 4 noise scale", "[schedule]") {
    auto s = hd::build_training_schedule(30, 0.01, 0.2);
    const std::int64_t t = 10;
    hd::infer_step step{s.gamma[t], s.gamma[t - 1], s.alpha[t - 1]};
    hsi_cube<double> zt(1, 1, 1), z0(1, 1, 1), eps(1, 1, 1);
    zt.data[0] = 0.0;
    z0.data[0] = 0.0;
    eps.data[0] = 1.0;
    auto e6 = hd::refinement_step(zt, z0, step, eps, hd::refine_variance::eq6);
    auto pv = hd::refinement_step(zt, z0, step, eps, hd::refine_variance::posterior);
    CHECK(e6.data[0] == Catch::Approx(std::sqrt(1.0 - step.alpha)).epsilon(1e-12));
    const double sigma2 = (1.0 - step.gamma_prev) * (1.0 - step.alpha) / (1.0 - step.gamma);
    CHECK(pv.data[0] == Catch::Approx(std::sqrt(sigma2)).epsilon(1e-12));
}

TEST_CASE("inference schedule sub-samples the training gammas", "[schedule]") {
    auto s = hd::build_training_schedule(200);

    SECTION("degenerate S == T reproduces the training sequence") {
        auto infer = hd::build_inference_schedule(s, 200);
        REQUIRE(infer.size() == 200);
        for (std::int64_t t = 1; t <= 200; ++t) {
            REQUIRE(infer.steps[t - 1].gamma == s.gamma[t]);
            REQUIRE(infer.steps[t - 1].gamma_prev == s.gamma[t - 1]);
        }
    }

    SECTION("S=100 of a T=2000 schedule is strictly decreasing with valid ratios") {
        auto big = hd::build_training_schedule(2000);
        auto infer = hd::build_inference_schedule(big, 100);
        REQUIRE(infer.size() == 100);
        CHECK(infer.steps.front().gamma == big.gamma[1]);
        CHECK(infer.steps.back().gamma == big.gamma[2000]);
        for (std::int64_t i = 0; i < infer.size(); ++i) {
            const auto& st = infer.steps[i];
            CHECK(st.alpha > 0.0);
            CHECK(st.alpha < 1.0);
            CHECK(st.gamma < st.gamma_prev);
            if (i > 0) CHECK(st.gamma < infer.steps[i - 1].gamma);
        }
    }

    SECTION("range errors") {
        CHECK_THROWS_AS(hd::build_inference_schedule(s, 0), hd::validation_error);
        CHECK_THROWS_AS(hd::build_inference_schedule(s, 201), hd::validation_error);
    }
}

TEST_CASE("sampler with a perfect denoiser recovers the scene", "[schedule][oracle]") {
    hd::scene_config cfg;
    cfg.endmembers = 3;
    cfg.bands = 6;
    cfg.height = 16;
    cfg.width = 16;
    cfg.smoothness = 3.0;
    rng scene_gen(100);
    auto z0 = hd::synthesize_scene<double>(cfg, scene_gen);

    auto s = hd::build_training_schedule(2000);
    auto infer = hd::build_inference_schedule(s, 100);
    hsi_cube<double> dummy(1, 1, 1);

    hd::denoise_fn<double> oracle = [&](const hsi_cube<double>&, const hsi_cube<double>&,
                                        const hsi_cube<double>&, double) { return z0; };
    rng gen(3000);
    auto out = hd::sample(oracle, dummy, dummy, z0.bands, z0.height, z0.width, infer, gen);
    CHECK(cube_psnr(z0, out) >= 60.0);

    SECTION("fixed seed gives bit-identical output") {
        rng g1(555), g2(555);
        auto o1 = hd::sample(oracle, dummy, dummy, z0.bands, z0.height, z0.width, infer, g1);
        auto o2 = hd::sample(oracle, dummy, dummy, z0.bands, z0.height, z0.width, infer, g2);
        REQUIRE(o1.data == o2.data);
    }

    SECTION("single-step schedule collapses onto the oracle prediction") {
        auto infer1 = hd::build_inference_schedule(s, 1);
        rng g(9);
        auto out1 = hd::sample(oracle, dummy, dummy, z0.bands, z0.height, z0.width, infer1, g);
        for (std::size_t i = 0; i < z0.data.size(); ++i)
            REQUIRE(out1.data[i] == z0.data[i]);
    }
}
