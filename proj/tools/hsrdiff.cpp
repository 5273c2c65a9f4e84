// hsrdiff: generate / train / fuse / evaluate pipeline for diffusion-based
// hyperspectral super-resolution experiments.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <CLI11.hpp>

#include "hsrdiff/config.hpp"
#include "hsrdiff/metrics.hpp"

namespace fs = std::filesystem;
using real = float;  // pipeline width; files store float32 either way
namespace hd = hsrdiff;

namespace {

constexpr std::uint64_t k_stream_scene = 0x5343454eULL;     // data generation
constexpr std::uint64_t k_stream_init = 0x494e4954ULL;      // weight init
constexpr std::uint64_t k_stream_train = 0x5452414eULL;     // gamma/eps/patches
constexpr std::uint64_t k_stream_sample = 0x53414d50ULL;    // fusion noise

int cmd_generate(const std::string& config_path) {
    auto rc = hd::load_run_config(config_path);
    hd::validate_run_config(rc, false, rc.scene.height, rc.scene.width);

    hd::rng scene_gen = hd::rng(rc.seed).split(k_stream_scene);
    auto z = hd::synthesize_scene<real>(rc.scene, scene_gen);
    z = hd::crop_to_factor(z, rc.factor);
    auto resp = hd::make_default_response(rc.msi_bands, rc.scene.bands);
    auto degr = rc.make_degradation();
    auto pair = hd::make_pair(z, resp, degr);

    fs::create_directories(rc.out_dir);
    const auto out = [&](const char* name) { return (fs::path(rc.out_dir) / name).string(); };
    hd::save_cube(out("z.hcube"), pair.z);
    hd::save_cube(out("x.hcube"), pair.x);
    hd::save_cube(out("y.hcube"), pair.y);
    hd::save_response(out("response.srsp"), resp);

    std::printf("z: %" PRId64 "x%" PRId64 "x%" PRId64 "  (ground truth)\n", pair.z.bands,
                pair.z.height, pair.z.width);
    std::printf("x: %" PRId64 "x%" PRId64 "x%" PRId64 "  (HR-MSI)\n", pair.x.bands,
                pair.x.height, pair.x.width);
    std::printf("y: %" PRId64 "x%" PRId64 "x%" PRId64 "  (LR-HSI)\n", pair.y.bands,
                pair.y.height, pair.y.width);
    std::printf("response: %" PRId64 "x%" PRId64 "\n", resp.msi_bands, resp.hsi_bands);
    std::printf("config:\n");
    std::printf("  seed = %" PRIu64 "\n", rc.seed);
    std::printf("  scene = K%" PRId64 " B%" PRId64 " %" PRId64 "x%" PRId64 " smooth %.3g\n",
                rc.scene.endmembers, rc.scene.bands, rc.scene.height, rc.scene.width,
                rc.scene.smoothness);
    std::printf("  degradation = factor %" PRId64 " sigma %.3g (radius %" PRId64 ")\n",
                degr.factor, degr.kernel_sigma, degr.radius());
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& resume_path, bool dry_run) {
    auto rc = hd::load_run_config(config_path);

    const auto in = [&](const char* name) { return (fs::path(rc.data_dir) / name).string(); };
    hd::training_set<real> data;
    data.z = hd::load_cube<real>(in("z.hcube"));
    data.x = hd::load_cube<real>(in("x.hcube"));
    data.y = hd::load_cube<real>(in("y.hcube"));
    data.resp = hd::load_response(in("response.srsp"));
    data.degr = rc.make_degradation();

    rc.model.bands = data.z.bands;
    rc.model.msi_bands = data.x.bands;
    rc.scene.bands = data.z.bands;
    rc.scene.height = data.z.height;
    rc.scene.width = data.z.width;
    rc.msi_bands = data.x.bands;
    hd::validate_run_config(rc, true, data.z.height, data.z.width);
    data.validate();

    if (dry_run) {
        std::printf("parameters: %" PRId64 "\n", hd::parameter_count(rc.model));
        std::printf("stage plan:\n");
        std::int64_t epoch = 0;
        while (epoch < rc.train.epochs) {
            const std::int64_t patch = hd::stage_patch(rc.train, epoch);
            std::int64_t end = rc.train.epochs;
            for (const auto& [start, size] : rc.train.stages)
                if (start > epoch) { end = std::min(end, start); break; }
            if (rc.train.full_res_epoch > epoch)
                end = std::min(end, rc.train.full_res_epoch);
            std::printf("  epochs %" PRId64 "..%" PRId64 ": patch %s%s\n", epoch, end - 1,
                        patch < 0 ? "full" : std::to_string(patch).c_str(),
                        hd::in_full_res_stage(rc.train, epoch) ? " (second half trainable)" : "");
            epoch = end;
        }
        return 0;
    }

    hd::model_params<real> params;
    hd::optim_state<real> opt;
    auto sched = rc.make_schedule();
    hd::rng train_gen = hd::rng(rc.seed).split(k_stream_train);
    std::int64_t start_epoch = 0;
    std::int64_t global_step = 0;
    if (!resume_path.empty()) {
        auto ck = hd::load_checkpoint<real>(resume_path);
        params = std::move(ck.params);
        opt = std::move(ck.opt);
        sched = std::move(ck.sched);
        rc.model = ck.mcfg;
        train_gen = hd::rng(ck.rng_seed, ck.rng_counter);
        start_epoch = ck.next_epoch;
        global_step = ck.global_step;
    } else {
        hd::rng init_gen = hd::rng(rc.seed).split(k_stream_init);
        params = hd::model_params<real>::init(rc.model, init_gen);
        opt = hd::optim_state<real>::init(params);
    }

    std::ofstream log(rc.log_path, start_epoch > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw hd::io_error("cannot open log for writing: " + rc.log_path);

    const auto save = [&](std::int64_t next_epoch) {
        hd::checkpoint<real> ck;
        ck.mcfg = rc.model;
        ck.params = params;
        ck.opt = opt;
        ck.sched = sched;
        ck.rng_seed = train_gen.seed();
        ck.rng_counter = train_gen.counter();
        ck.next_epoch = next_epoch;
        ck.global_step = global_step;
        hd::save_checkpoint(rc.checkpoint_path, ck);
    };

    hd::train_callbacks cb;
    cb.on_step = [&](std::int64_t epoch, std::int64_t step, double loss, double lr,
                     std::int64_t patch) {
        char line[160];
        std::snprintf(line, sizeof(line), "%" PRId64 " %" PRId64 " %.9e %.6g %" PRId64, epoch,
                      step, loss, lr, patch);
        log << line << '\n';
        log.flush();
    };
    cb.on_epoch_end = [&](std::int64_t epoch) {
        if (rc.train.checkpoint_every > 0 && (epoch + 1) % rc.train.checkpoint_every == 0)
            save(epoch + 1);
    };

    const double final_loss = hd::train_loop(data, params, opt, rc.model, rc.train, sched,
                                             train_gen, start_epoch, &global_step, cb);
    save(rc.train.epochs);
    std::printf("trained %" PRId64 " steps, final loss %.6e, checkpoint %s\n", global_step,
                final_loss, rc.checkpoint_path.c_str());
    return 0;
}

int cmd_fuse(const std::string& ckpt_path, const std::string& x_path, const std::string& y_path,
             const std::string& out_path, std::int64_t steps, std::uint64_t seed,
             std::int64_t save_every, const std::string& variance) {
    auto ck = hd::load_checkpoint<real>(ckpt_path);
    auto x = hd::load_cube<real>(x_path);
    auto y = hd::load_cube<real>(y_path);
    if (x.bands != ck.mcfg.msi_bands || y.bands != ck.mcfg.bands)
        throw hd::validation_error(hd::detail::concat(
            "band mismatch: checkpoint expects x/", ck.mcfg.msi_bands, " y/", ck.mcfg.bands,
            ", files carry x/", x.bands, " y/", y.bands));

    hd::sample_options opts;
    if (variance == "posterior") {
        opts.variance = hd::refine_variance::posterior;
    } else if (variance != "eq6") {
        throw hd::validation_error("--variance must be eq6 or posterior");
    }

    auto infer = hd::build_inference_schedule(ck.sched, steps);
    auto model = hd::make_denoiser(ck.params, ck.mcfg);
    hd::rng gen = hd::rng(seed).split(k_stream_sample);

    hd::sample_observer<real> observer;
    if (save_every > 0) {
        const fs::path dir = fs::path(out_path).parent_path();
        observer = [&, dir](std::int64_t i, const hd::hsi_cube<real>& z) {
            if (i % save_every != 0 && i != 1) return;
            char name[64];
            std::snprintf(name, sizeof(name), "traj_%04" PRId64 ".hcube", i);
            hd::save_cube((dir / name).string(), z);
        };
    }

    auto fused = hd::sample(model, x, y, ck.mcfg.bands, x.height, x.width, infer, gen, opts,
                            observer);
    hd::save_cube(out_path, fused);
    std::printf("fused %" PRId64 "x%" PRId64 "x%" PRId64 " over %" PRId64 " steps -> %s\n",
                fused.bands, fused.height, fused.width, infer.size(), out_path.c_str());
    return 0;
}

int cmd_evaluate(const std::string& ref_path, const std::string& est_path, std::int64_t factor) {
    auto ref = hd::load_cube<double>(ref_path);
    auto est = hd::load_cube<double>(est_path);
    auto report = hd::evaluate_pair(ref, est, factor);
    const std::string name = fs::path(est_path).stem().string();
    std::printf("%s\n", hd::format_report_line(name, report).c_str());
    std::printf("%s\n", hd::format_report_line("mean", report).c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"conditional-diffusion hyperspectral/multispectral fusion toolkit"};
    app.require_subcommand(1);

    std::string config_path, resume_path, ckpt, x_path, y_path, out_path, ref_path, est_path;
    std::string variance = "eq6";
    bool dry_run = false;
    std::int64_t steps = 100, save_every = 0, factor = 4;
    std::uint64_t seed = 0;

    auto* gen = app.add_subcommand("generate", "synthesize a scene and its observation pair");
    gen->add_option("config", config_path, "run configuration file")->required();

    auto* train = app.add_subcommand("train", "train the denoiser on a generated scene");
    train->add_option("config", config_path, "run configuration file")->required();
    train->add_option("--resume", resume_path, "checkpoint to continue from");
    train->add_flag("--dry-run", dry_run, "print parameter count and stage plan, then exit");

    auto* fuse = app.add_subcommand("fuse", "sample an HR-HSI from a trained checkpoint");
    fuse->add_option("checkpoint", ckpt)->required();
    fuse->add_option("x", x_path, "HR-MSI cube")->required();
    fuse->add_option("y", y_path, "LR-HSI cube")->required();
    fuse->add_option("out", out_path, "output cube path")->required();
    fuse->add_option("--steps", steps, "refinement steps (default 100)");
    fuse->add_option("--seed", seed, "sampling seed");
    fuse->add_option("--save-trajectory", save_every, "write every k-th intermediate state");
    fuse->add_option("--variance", variance, "noise scale: eq6 or posterior");

    auto* eval = app.add_subcommand("evaluate", "report PSNR/SSIM/SAM/ERGAS for a cube pair");
    eval->add_option("ref", ref_path, "reference cube")->required();
    eval->add_option("est", est_path, "estimate cube")->required();
    eval->add_option("--factor", factor, "resolution factor for ERGAS (default 4)");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return cmd_generate(config_path);
        if (train->parsed()) return cmd_train(config_path, resume_path, dry_run);
        if (fuse->parsed())
            return cmd_fuse(ckpt, x_path, y_path, out_path, steps, seed, save_every, variance);
        if (eval->parsed()) return cmd_evaluate(ref_path, est_path, factor);
        return 2;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const hsrdiff::numeric_error& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 4;
    } catch (const hsrdiff::io_error& e) {
        std::fprintf(stderr, "i/o error: %s\n", e.what());
        return 3;
    } catch (const hsrdiff::validation_error& e) {
        std::fprintf(stderr, "invalid configuration: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    }
}
