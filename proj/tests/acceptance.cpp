// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Criterion 8 drives the command-line tool end to end; point
// HSRDIFF_CLI at the built binary (ctest does this automatically).

#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "hsrdiff/config.hpp"
#include "hsrdiff/metrics.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
namespace hd = hsrdiff;
using hd::hsi_cube;
using hd::rng;

namespace {

int g_failures = 0;

void criterion(int number, const char* title, double budget_seconds,
               const std::function<bool(std::string&)>& body) {
    std::string detail;
    const auto start = std::chrono::steady_clock::now();
    bool ok = false;
    try {
        ok = body(detail);
    } catch (const std::exception& e) {
        detail = std::string("exception: ") + e.what();
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (elapsed > budget_seconds) {
        ok = false;
        detail += detail.empty() ? "" : "; ";
        detail += "exceeded runtime budget";
    }
    std::printf("[%s] %d. %s (%.1f s)%s%s\n", ok ? "PASS" : "FAIL", number, title, elapsed,
                detail.empty() ? "" : ": ", detail.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

template <class R>
hsi_cube<R> scene(std::int64_t K, std::int64_t B, std::int64_t size, double smooth,
                  std::uint64_t seed) {
    hd::scene_config cfg;
    cfg.endmembers = K;
    cfg.bands = B;
    cfg.height = size;
    cfg.width = size;
    cfg.smoothness = smooth;
    rng gen(seed);
    return hd::synthesize_scene<R>(cfg, gen);
}

// ---------------------------------------------------------------- criterion 1

bool diffusion_identities(std::string& detail) {
    std::ostringstream msg;

    // (a) forward_marginal moments vs t-fold forward_step composition
    const std::int64_t T = 20, t_star = 12;
    auto sched = hd::build_training_schedule(T, 0.02, 0.25);
    rng gen(101);
    hsi_cube<double> z0(2, 4, 4);
    for (auto& v : z0.data) v = gen.uniform01();
    const double gamma = sched.gamma[t_star];
    const int trials = 10000;
    double mean = 0, m2 = 0;
    std::int64_t n = 0;
    for (int k = 0; k < trials; ++k) {
        hsi_cube<double> z = z0;
        for (std::int64_t t = 1; t <= t_star; ++t) {
            hsi_cube<double> eps(2, 4, 4);
            for (auto& v : eps.data) v = gen.normal();
            z = hd::forward_step(z, sched.alpha[t - 1], eps);
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
    const double tv = 1.0 - gamma;
    const double se_mean = std::sqrt(tv / n);
    const double se_var = tv * std::sqrt(2.0 / (n - 1));
    if (std::abs(mean) >= 3 * se_mean || std::abs(var - tv) >= 3 * se_var) {
        detail = "marginal moments off: mean/var z-scores too large";
        return false;
    }
    msg << "moment z-scores " << std::abs(mean) / se_mean << "/" << std::abs(var - tv) / se_var;

    // (b) posterior vs a grid Bayes oracle
    auto s2 = hd::build_training_schedule(10, 0.02, 0.3);
    const std::int64_t t = 6;
    const double z0v = 0.31, ztv = -0.42;
    hsi_cube<double> c0(1, 1, 1), ct(1, 1, 1);
    c0.data[0] = z0v;
    ct.data[0] = ztv;
    auto post = hd::posterior_params(c0, ct, t, s2);
    const double a = s2.alpha[t - 1], gp = s2.gamma[t - 1];
    const long grid = 400000;
    const double lo = -12.0, step = 24.0 / grid;
    double wsum = 0, wmean = 0;
    std::vector<double> w(grid);
    for (long i = 0; i < grid; ++i) {
        const double z = lo + (i + 0.5) * step;
        const double d1 = ztv - std::sqrt(a) * z;
        const double d2 = z - std::sqrt(gp) * z0v;
        w[i] = std::exp(-0.5 * d1 * d1 / (1 - a) - 0.5 * d2 * d2 / (1 - gp));
        wsum += w[i];
        wmean += w[i] * z;
    }
    wmean /= wsum;
    double wvar = 0;
    for (long i = 0; i < grid; ++i) {
        const double z = lo + (i + 0.5) * step;
        wvar += w[i] * (z - wmean) * (z - wmean);
    }
    wvar /= wsum;
    const double mean_err = std::abs(post.mean.data[0] - wmean);
    const double var_err = std::abs(post.var - wvar);
    if (mean_err >= 1e-6 || var_err >= 1e-6) {
        detail = hd::detail::concat("grid Bayes mismatch: ", mean_err, ", ", var_err);
        return false;
    }
    msg << "; grid-Bayes err " << mean_err << "/" << var_err;

    // (c) refinement with perfect prediction and zero noise == posterior mean
    rng gen3(103);
    hsi_cube<double> rz0(2, 3, 3), rzt(2, 3, 3), zero(2, 3, 3, 0.0);
    for (auto& v : rz0.data) v = gen3.uniform01();
    for (auto& v : rzt.data) v = gen3.normal();
    for (std::int64_t tt : {2, 9, 15}) {
        hd::infer_step st{sched.gamma[tt], sched.gamma[tt - 1], sched.alpha[tt - 1]};
        auto refined = hd::refinement_step(rzt, rz0, st, zero);
        auto p = hd::posterior_params(rz0, rzt, tt, sched);
        if (refined.data != p.mean.data) {
            detail = "refinement with zero noise is not exactly the posterior mean";
            return false;
        }
    }
    msg << "; refinement == posterior mean exactly";
    detail = msg.str();
    return true;
}

// ---------------------------------------------------------------- criterion 2

bool gamma_sampling_law(std::string& detail) {
    const std::int64_t T = 50;
    auto s = hd::build_training_schedule(T);
    const int draws = 100000, bins = 50;
    const double lo = s.gamma[T], width = (1.0 - lo) / bins;
    std::vector<std::int64_t> observed(bins, 0);
    rng gen(202);
    for (int i = 0; i < draws; ++i) {
        const double g = hd::sample_gamma(s, gen).gamma;
        int b = static_cast<int>((g - lo) / width);
        b = std::min(std::max(b, 0), bins - 1);
        ++observed[b];
    }
    auto cdf = [&](double x) {
        double acc = 0;
        for (std::int64_t t = 1; t <= T; ++t) {
            const double a = s.gamma[t], b = s.gamma[t - 1];
            acc += std::min(std::max((x - a) / (b - a), 0.0), 1.0) / static_cast<double>(T);
        }
        return acc;
    };
    double chi2 = 0;
    for (int k = 0; k < bins; ++k) {
        const double expected = (cdf(lo + (k + 1) * width) - cdf(lo + k * width)) * draws;
        if (expected <= 5.0) {
            detail = "degenerate bin expectation";
            return false;
        }
        chi2 += (observed[k] - expected) * (observed[k] - expected) / expected;
    }
    // 1% critical value, chi-square with 49 degrees of freedom
    detail = hd::detail::concat("chi2 = ", chi2, " vs 74.92 (49 dof, 1%)");
    return chi2 < 74.9195;
}

// ---------------------------------------------------------------- criterion 3

bool gradient_correctness(std::string& detail) {
    hd::model_config mcfg;
    mcfg.channels = 8;
    mcfg.n_layers = 1;
    mcfg.heads = 2;
    mcfg.window = 4;
    mcfg.bands = 4;
    mcfg.msi_bands = 2;

    auto z = scene<double>(3, 4, 8, 2.0, 303);
    auto resp = hd::make_default_response(2, 4);
    auto degr = hd::spatial_degradation::make(2);
    auto pair = hd::make_pair(z, resp, degr);

    rng igen(304);
    auto params = hd::model_params<double>::init(mcfg, igen);
    // activate every path, including the zero-initialized projections
    for (auto& [name, t] : params.table)
        for (auto& v : t.mutable_value()) v = 0.25 * igen.normal();

    auto sched = hd::build_training_schedule(100);
    rng dgen(305);
    const double gamma = hd::sample_gamma(sched, dgen).gamma;
    hsi_cube<double> eps(4, 8, 8);
    for (auto& v : eps.data) v = dgen.normal();
    auto zt = hd::forward_marginal(pair.z, gamma, eps);

    auto make_loss = [&]() {
        auto out = hd::denoise_forward(params, mcfg, hd::cube_to_tensor(pair.x),
                                       hd::cube_to_tensor(pair.y), hd::cube_to_tensor(zt), gamma);
        return hd::loss_eq8(out, pair.z, pair.x, pair.y, resp, degr, false);
    };
    std::vector<hd::tensor<double>> leaves;
    for (auto& [name, t] : params.table) leaves.push_back(t);
    auto rep = hsrtest::finite_difference_check(make_loss, leaves, 1e-5, 3, &dgen);
    detail = hd::detail::concat(rep.checked, " parameters sampled, max relative error ",
                                rep.max_rel);
    return rep.checked >= 200 && rep.max_rel < 1e-3;
}

// ---------------------------------------------------------------- criterion 4

bool oracle_sampler(std::string& detail) {
    auto z0 = scene<double>(3, 6, 16, 3.0, 404);
    auto sched = hd::build_training_schedule(2000);
    auto infer = hd::build_inference_schedule(sched, 100);
    hsi_cube<double> dummy(1, 1, 1);
    hd::denoise_fn<double> oracle = [&](const hsi_cube<double>&, const hsi_cube<double>&,
                                        const hsi_cube<double>&, double) { return z0; };
    rng gen(405);
    auto out = hd::sample(oracle, dummy, dummy, z0.bands, z0.height, z0.width, infer, gen);
    const double psnr = hd::psnr(z0, out);
    detail = hd::detail::concat("oracle-denoiser PSNR ", psnr, " dB over ", infer.size(),
                                " steps");
    return psnr >= 60.0;
}

// ---------------------------------------------------------------- criterion 5

struct fixture {
    hd::training_set<float> data;
    hd::model_config mcfg;
};

fixture make_fixture(std::int64_t size, std::uint64_t seed) {
    fixture f;
    hd::scene_config scfg;
    scfg.endmembers = 4;
    scfg.bands = 8;
    scfg.height = size;
    scfg.width = size;
    scfg.smoothness = static_cast<double>(size) / 8.0;
    rng gen(seed);
    f.data.z = hd::synthesize_scene<float>(scfg, gen);
    f.data.resp = hd::make_default_response(3, 8);
    f.data.degr = hd::spatial_degradation::make(4);
    auto pair = hd::make_pair(f.data.z, f.data.resp, f.data.degr);
    f.data.x = pair.x;
    f.data.y = pair.y;

    f.mcfg.channels = 16;
    f.mcfg.n_layers = 2;
    f.mcfg.heads = 4;
    f.mcfg.window = 8;
    f.mcfg.bands = 8;
    f.mcfg.msi_bands = 3;
    return f;
}

double fuse_and_psnr(const fixture& f, const hd::model_params<float>& params,
                     const hd::noise_schedule& sched, std::uint64_t seed, double* sam_out) {
    auto infer = hd::build_inference_schedule(sched, 100);
    auto model = hd::make_denoiser(params, f.mcfg);
    rng gen(seed);
    auto fused = hd::sample(model, f.data.x, f.data.y, f.data.z.bands, f.data.z.height,
                            f.data.z.width, infer, gen);
    hsi_cube<double> ref(f.data.z.bands, f.data.z.height, f.data.z.width);
    hsi_cube<double> est(ref.bands, ref.height, ref.width);
    for (std::size_t i = 0; i < ref.data.size(); ++i) {
        ref.data[i] = f.data.z.data[i];
        est.data[i] = fused.data[i];
    }
    if (sam_out) *sam_out = hd::sam(ref, est);
    return hd::psnr(ref, est);
}

bool end_to_end_overfit(std::string& detail) {
    auto f = make_fixture(32, 505);
    hd::train_config tcfg;
    tcfg.lr = 1e-4;
    tcfg.batch_size = 1;
    tcfg.epochs = 40;
    tcfg.steps_per_epoch = 50;  // 2000 Adam steps in total
    auto sched = hd::build_training_schedule(2000);
    rng igen(506);
    auto params = hd::model_params<float>::init(f.mcfg, igen);
    auto opt = hd::optim_state<float>::init(params);
    rng tgen(507);
    const double final_loss =
        hd::train_loop(f.data, params, opt, f.mcfg, tcfg, sched, tgen);

    double sam = 0;
    const double psnr = fuse_and_psnr(f, params, sched, 508, &sam);
    detail = hd::detail::concat("final loss ", final_loss, ", fused PSNR ", psnr,
                                " dB (need >= 35), SAM ", sam, " deg (need <= 3)");
    return psnr >= 35.0 && sam <= 3.0;
}

// ---------------------------------------------------------------- criterion 6

bool progressive_direction(std::string& detail) {
    const std::int64_t budget_epochs = 24, steps_per_epoch = 40;

    auto run = [&](bool progressive) {
        auto f = make_fixture(64, 606);
        hd::train_config tcfg;
        tcfg.lr = 1e-4;
        tcfg.batch_size = 1;
        tcfg.epochs = budget_epochs;
        tcfg.steps_per_epoch = steps_per_epoch;
        if (progressive)
            tcfg.stages = {{0, 16}, {8, 32}, {16, 64}};
        else
            tcfg.stages = {{0, 16}};
        auto sched = hd::build_training_schedule(2000);
        rng igen(607);
        auto params = hd::model_params<float>::init(f.mcfg, igen);
        auto opt = hd::optim_state<float>::init(params);
        rng tgen(608);
        hd::train_loop(f.data, params, opt, f.mcfg, tcfg, sched, tgen);
        return fuse_and_psnr(f, params, sched, 609, nullptr);
    };

    const double fixed = run(false);
    const double progressive = run(true);
    detail = hd::detail::concat("progressive ", progressive, " dB vs fixed-16 ", fixed,
                                " dB over ", budget_epochs * steps_per_epoch, " equal steps");
    return progressive >= fixed;
}

// ---------------------------------------------------------------- criterion 7

bool metric_pinning(std::string& detail) {
    rng gen(707);
    hsi_cube<double> ref(3, 16, 16), est(3, 16, 16);
    for (auto& v : ref.data) v = gen.uniform01();

    // identical-input pins
    if (hd::psnr(ref, ref) != 99.0) { detail = "psnr cap"; return false; }
    if (hd::ssim(ref, ref) != 1.0) { detail = "ssim identity"; return false; }
    if (hd::sam(ref, ref) > 1e-5) { detail = "sam identity"; return false; }
    if (hd::ergas(ref, ref, 4) != 0.0) { detail = "ergas identity"; return false; }

    // closed-form +0.1 offset: MSE 0.01 in every band -> exactly 20 dB
    est = ref;
    for (auto& v : est.data) v += 0.1;
    if (std::abs(hd::psnr(ref, est) - 20.0) > 1e-9) { detail = "psnr closed form"; return false; }

    // brute-force oracles on random pairs
    for (auto& v : est.data) v = gen.uniform01();
    const std::int64_t B = 3, N = 256;
    double want_psnr = 0;
    for (std::int64_t b = 0; b < B; ++b) {
        double mse = 0;
        for (std::int64_t p = 0; p < N; ++p) {
            const double d = ref.data[b * N + p] - est.data[b * N + p];
            mse += d * d;
        }
        want_psnr += std::min(99.0, 10 * std::log10(N / mse));
    }
    want_psnr /= B;
    if (std::abs(hd::psnr(ref, est) - want_psnr) > 1e-9) { detail = "psnr oracle"; return false; }

    double want_sam = 0;
    std::int64_t valid = 0;
    for (std::int64_t p = 0; p < N; ++p) {
        double dot = 0, nr = 0, ne = 0;
        for (std::int64_t b = 0; b < B; ++b) {
            dot += ref.data[b * N + p] * est.data[b * N + p];
            nr += ref.data[b * N + p] * ref.data[b * N + p];
            ne += est.data[b * N + p] * est.data[b * N + p];
        }
        if (nr == 0 || ne == 0) continue;
        want_sam += std::acos(std::min(std::max(dot / std::sqrt(nr * ne), -1.0), 1.0));
        ++valid;
    }
    want_sam = want_sam / valid * 180.0 / 3.14159265358979323846;
    if (std::abs(hd::sam(ref, est) - want_sam) > 1e-9) { detail = "sam oracle"; return false; }

    double want_ergas = 0;
    for (std::int64_t b = 0; b < B; ++b) {
        double mse = 0, mu = 0;
        for (std::int64_t p = 0; p < N; ++p) {
            const double d = ref.data[b * N + p] - est.data[b * N + p];
            mse += d * d;
            mu += ref.data[b * N + p];
        }
        mse /= N;
        mu /= N;
        want_ergas += mse / (mu * mu);
    }
    want_ergas = 100.0 / 4 * std::sqrt(want_ergas / B);
    if (std::abs(hd::ergas(ref, est, 4) - want_ergas) > 1e-9) {
        detail = "ergas oracle";
        return false;
    }

    // ssim vs the naive 2-D sliding window
    std::vector<double> w(11);
    double wsum = 0;
    for (int k = -5; k <= 5; ++k) {
        w[k + 5] = std::exp(-0.5 * (k / 1.5) * (k / 1.5));
        wsum += w[k + 5];
    }
    for (auto& v : w) v /= wsum;
    double want_ssim = 0;
    for (std::int64_t b = 0; b < B; ++b) {
        double acc = 0;
        std::int64_t cnt = 0;
        for (std::int64_t i = 0; i + 11 <= 16; ++i)
            for (std::int64_t j = 0; j + 11 <= 16; ++j) {
                double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
                for (int u = 0; u < 11; ++u)
                    for (int v = 0; v < 11; ++v) {
                        const double ww = w[u] * w[v];
                        const double xv = ref.data[b * N + (i + u) * 16 + (j + v)];
                        const double yv = est.data[b * N + (i + u) * 16 + (j + v)];
                        mx += ww * xv;
                        my += ww * yv;
                        mxx += ww * xv * xv;
                        myy += ww * yv * yv;
                        mxy += ww * xv * yv;
                    }
                acc += ((2 * mx * my + 1e-4) * (2 * (mxy - mx * my) + 9e-4)) /
                       ((mx * mx + my * my + 1e-4) *
                        ((mxx - mx * mx) + (myy - my * my) + 9e-4));
                ++cnt;
            }
        want_ssim += acc / cnt;
    }
    want_ssim /= B;
    if (std::abs(hd::ssim(ref, est) - want_ssim) > 1e-6) { detail = "ssim oracle"; return false; }

    detail = "caps, closed forms, and all four brute-force oracles agree";
    return true;
}

// ---------------------------------------------------------------- criterion 8

std::string sh(const std::string& cmd) { return cmd + " > /dev/null 2>&1"; }

bool same_bytes(const fs::path& a, const fs::path& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    if (!fa || !fb) return false;
    std::vector<char> ba((std::istreambuf_iterator<char>(fa)), {});
    std::vector<char> bb((std::istreambuf_iterator<char>(fb)), {});
    return ba == bb;
}

bool determinism_and_persistence(std::string& detail) {
    const char* cli = std::getenv("HSRDIFF_CLI");
    if (!cli || !fs::exists(cli)) {
        detail = "HSRDIFF_CLI not set or missing; cannot drive the pipeline";
        return false;
    }
    const fs::path root = fs::absolute("acceptance_tmp");
    fs::remove_all(root);
    fs::create_directories(root);

    auto write_cfg = [&](const fs::path& path, const fs::path& dir, std::int64_t epochs) {
        std::ofstream os(path);
        os << "[run]\nseed = 11\n\n[scene]\nendmembers = 3\nbands = 6\nmsi_bands = 2\n"
              "height = 24\nwidth = 24\nsmoothness = 3.0\n\n[degradation]\nfactor = 4\n\n"
              "[model]\nchannels = 8\nlayers = 1\nheads = 2\nwindow = 4\n\n"
              "[schedule]\nT = 200\n\n"
           << "[train]\nlr = 1e-4\nbatch_size = 1\nepochs = " << epochs
           << "\nsteps_per_epoch = 4\n\n[io]\nout_dir = " << dir.string()
           << "\ndata_dir = " << dir.string() << "\ncheckpoint = " << (dir / "model.ckpt").string()
           << "\nlog = " << (dir / "train.log").string() << "\n";
    };

    auto pipeline = [&](const fs::path& dir) -> bool {
        fs::create_directories(dir);
        write_cfg(dir / "run.cfg", dir, 4);
        if (std::system(sh(std::string(cli) + " generate " + (dir / "run.cfg").string()).c_str()))
            return false;
        if (std::system(sh(std::string(cli) + " train " + (dir / "run.cfg").string()).c_str()))
            return false;
        if (std::system(sh(std::string(cli) + " fuse " + (dir / "model.ckpt").string() + " " +
                           (dir / "x.hcube").string() + " " + (dir / "y.hcube").string() + " " +
                           (dir / "fused.hcube").string() + " --steps 10 --seed 5")
                            .c_str()))
            return false;
        const std::string eval_cmd = std::string(cli) + " evaluate " +
                                     (dir / "z.hcube").string() + " " +
                                     (dir / "fused.hcube").string() + " --factor 4 > " +
                                     (dir / "metrics.txt").string() + " 2>/dev/null";
        return std::system(eval_cmd.c_str()) == 0;
    };

    if (!pipeline(root / "a") || !pipeline(root / "b")) {
        detail = "pipeline run failed";
        return false;
    }
    for (const char* f :
         {"z.hcube", "x.hcube", "y.hcube", "response.srsp", "model.ckpt", "train.log",
          "fused.hcube", "metrics.txt"}) {
        if (!same_bytes(root / "a" / f, root / "b" / f)) {
            detail = std::string("repeated runs differ in ") + f;
            return false;
        }
    }

    // resume: run epochs 0..2, checkpoint, resume to 4; compare with run a
    const fs::path r = root / "r";
    fs::create_directories(r);
    write_cfg(r / "half.cfg", r, 2);
    write_cfg(r / "full.cfg", r, 4);
    if (std::system(sh(std::string(cli) + " generate " + (r / "half.cfg").string()).c_str())) {
        detail = "resume pipeline: generate failed";
        return false;
    }
    if (std::system(sh(std::string(cli) + " train " + (r / "half.cfg").string()).c_str())) {
        detail = "resume pipeline: first half failed";
        return false;
    }
    if (std::system(sh(std::string(cli) + " train " + (r / "full.cfg").string() + " --resume " +
                       (r / "model.ckpt").string())
                        .c_str())) {
        detail = "resume pipeline: second half failed";
        return false;
    }
    if (!same_bytes(root / "a" / "train.log", r / "train.log")) {
        detail = "resumed loss trace differs from the unbroken run";
        return false;
    }
    if (!same_bytes(root / "a" / "model.ckpt", r / "model.ckpt")) {
        detail = "resumed checkpoint differs from the unbroken run";
        return false;
    }

    fs::remove_all(root);
    detail = "byte-identical artifacts across reruns; resume matches the unbroken trace";
    return true;
}

}  // namespace

int main() {
    std::printf("acceptance suite\n");
    criterion(1, "diffusion identities", 30, diffusion_identities);
    criterion(2, "gamma sampling law (chi-square, 1% level)", 60, gamma_sampling_law);
    criterion(3, "gradient correctness on the full model", 300, gradient_correctness);
    criterion(4, "oracle sampler recovers the scene", 60, oracle_sampler);
    criterion(5, "end-to-end overfit to 35 dB / 3 deg", 1800, end_to_end_overfit);
    criterion(6, "progressive training beats fixed patches", 1200, progressive_direction);
    criterion(7, "metric pinning against brute-force oracles", 60, metric_pinning);
    criterion(8, "determinism and persistence of the pipeline", 600,
              determinism_and_persistence);
    if (g_failures == 0) {
        std::printf("all 8 criteria passed\n");
        return 0;
    }
    std::printf("%d criteria FAILED\n", g_failures);
    return 1;
}
