#ifndef HSRDIFF_TRAINING_HPP
#define HSRDIFF_TRAINING_HPP

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "hsrdiff/cdformer.hpp"
#include "hsrdiff/degradation.hpp"
#include "hsrdiff/schedule.hpp"

namespace hsrdiff {

struct train_config {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;  // global L2 gradient clip; <= 0 disables
    std::int64_t batch_size = 1;
    std::int64_t epochs = 1;
    std::int64_t steps_per_epoch = 50;
    std::vector<std::pair<std::int64_t, std::int64_t>> stages = {};  // (start_epoch, patch)
    std::int64_t full_res_epoch = -1;  // epoch from which full images + partial freeze apply
    std::int64_t checkpoint_every = 0;  // epochs between checkpoints; 0 = final only
    std::uint64_t seed = 0;

    void validate() const {
        if (!(lr > 0)) throw validation_error("learning rate must be positive");
        if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
            throw validation_error("adam betas must lie in [0,1)");
        if (!(adam_eps > 0)) throw validation_error("adam epsilon must be positive");
        if (batch_size < 1 || epochs < 1 || steps_per_epoch < 1)
            throw validation_error("batch size, epochs and steps per epoch must be >= 1");
        for (std::size_t i = 1; i < stages.size(); ++i) {
            if (stages[i].first <= stages[i - 1].first)
                throw validation_error("progressive stages must have increasing start epochs");
            if (stages[i].second < stages[i - 1].second)
                throw validation_error("progressive patch sizes must be non-decreasing");
        }
    }
};

// Active patch size for an epoch: -1 requests the full image (full-resolution
// stage); epochs before the first stage use the first stage's size.
inline std::int64_t stage_patch(const train_config& cfg, std::int64_t epoch) {
    if (cfg.full_res_epoch >= 0 && epoch >= cfg.full_res_epoch) return -1;
    if (cfg.stages.empty()) return -1;
    std::int64_t patch = cfg.stages.front().second;
    for (const auto& [start, size] : cfg.stages)
        if (epoch >= start) patch = size;
    return patch;
}

inline bool in_full_res_stage(const train_config& cfg, std::int64_t epoch) {
    return cfg.full_res_epoch >= 0 && epoch >= cfg.full_res_epoch;
}

// Full-resolution stage trains only the later half of the denoising stream
// plus the reconstruction head; everything else is frozen.
inline std::function<bool(const std::string&)> trainable_filter(const model_config& mcfg,
                                                                bool full_res) {
    if (!full_res) return [](const std::string&) { return true; };
    const std::int64_t first_trainable = mcfg.n_layers - (mcfg.n_layers + 1) / 2;
    return [first_trainable](const std::string& name) {
        if (name.rfind("recon.", 0) == 0) return true;
        if (name.rfind("ds.blk", 0) == 0) {
            const std::size_t digits_at = 6;
            const std::int64_t blk = std::strtoll(name.c_str() + digits_at, nullptr, 10);
            return blk >= first_trainable;
        }
        return false;
    };
}

// ------------------------------------------------------------------ optimizer

template <class R>
struct optim_state {
    std::map<std::string, std::vector<R>> m, v;
    std::int64_t step = 0;

    static optim_state init(const model_params<R>& params) {
        optim_state s;
        for (const auto& [name, t] : params.table) {
            s.m.emplace(name, std::vector<R>(t.value().size(), R(0)));
            s.v.emplace(name, std::vector<R>(t.value().size(), R(0)));
        }
        return s;
    }
};

using grad_table_d = std::map<std::string, std::vector<double>>;

// Standard Adam with bias correction; frozen names are skipped entirely so
// their parameters and moments stay bit-identical.
template <class R>
void adam_update(model_params<R>& params, const std::map<std::string, std::vector<R>>& grads,
                 optim_state<R>& opt, const train_config& cfg,
                 const std::function<bool(const std::string&)>& trainable = nullptr) {
    ++opt.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
    for (auto& [name, t] : params.table) {
        if (trainable && !trainable(name)) continue;
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const auto& g = git->second;
        auto& m = opt.m.at(name);
        auto& v = opt.v.at(name);
        if (g.size() != m.size())
            throw shape_error("adam_update: gradient shape disagrees with moments for " + name);
        auto& value = t.mutable_value();
        for (std::size_t i = 0; i < value.size(); ++i) {
            const double gi = g[i];
            const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            m[i] = static_cast<R>(mi);
            v[i] = static_cast<R>(vi);
            value[i] = static_cast<R>(value[i] -
                                      cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.adam_eps));
        }
    }
}

// ----------------------------------------------------------------- Eq. 8 loss

// Valid LR rows/cols after cropping: indices whose blur stencil stays inside
// the HR patch.
struct lr_valid_range {
    std::int64_t lo = 0, hi = -1;  // inclusive; empty when lo > hi
    std::int64_t count() const { return hi - lo + 1; }
    bool empty() const { return lo > hi; }
};

inline lr_valid_range valid_lr_range(std::int64_t hr_size, std::int64_t factor,
                                     std::int64_t radius) {
    const std::int64_t off = factor / 2;
    lr_valid_range r;
    r.lo = std::max<std::int64_t>(0, (radius - off + factor - 1) / factor);
    r.hi = std::min(hr_size / factor - 1, (hr_size - 1 - off - radius) / factor);
    return r;
}

template <class R>
struct eq8_terms {
    tensor<R> total, x_term, y_term, z_term;
};

// L = |X - R Zhat|_1 + |Y - Zhat D|_1 + |Z - Zhat|_1, every term an element
// mean. When the sample is a crop, the Y term is restricted to LR pixels whose
// blur stencil is fully covered by the crop; an empty interior drops the term.
template <class R>
eq8_terms<R> loss_eq8_terms(const tensor<R>& z0_hat, const hsi_cube<R>& z0,
                            const hsi_cube<R>& x, const hsi_cube<R>& y,
                            const spectral_response& resp, const spatial_degradation& degr,
                            bool crop_y_ring) {
    const std::int64_t B = z0.bands, H = z0.height, W = z0.width;
    if (z0_hat.shape() != shape_t{B, H, W})
        throw shape_error("loss_eq8: prediction shape disagrees with the reference");
    if (x.height != H || x.width != W || x.bands != resp.msi_bands)
        throw shape_error("loss_eq8: x shape inconsistent with the response");
    if (y.bands != B || y.height != H / degr.factor || y.width != W / degr.factor)
        throw shape_error("loss_eq8: y shape inconsistent with the degradation");

    eq8_terms<R> out;
    auto m = std::make_shared<std::vector<double>>(resp.matrix);
    auto xr = spectral_response_op(reshape(z0_hat, {B, H * W}), m, resp.msi_bands);
    auto xc = tensor<R>::from({resp.msi_bands, H * W}, x.data);
    out.x_term = mean_all(abs_val(sub(xc, xr)));

    auto yd = spatial_degrade_op(z0_hat, degr.taps, degr.factor);
    auto yc = tensor<R>::from({B, y.height, y.width}, y.data);
    bool have_y = true;
    if (crop_y_ring) {
        const auto ri = valid_lr_range(H, degr.factor, degr.radius());
        const auto rj = valid_lr_range(W, degr.factor, degr.radius());
        if (ri.empty() || rj.empty()) {
            have_y = false;
        } else {
            yd = slice(yd, {0, ri.lo, rj.lo}, {B, ri.count(), rj.count()});
            yc = slice(yc, {0, ri.lo, rj.lo}, {B, ri.count(), rj.count()});
        }
    }
    out.y_term = have_y ? mean_all(abs_val(sub(yc, yd))) : tensor<R>::scalar(R(0));

    auto zc = tensor<R>::from({B, H, W}, z0.data);
    out.z_term = mean_all(abs_val(sub(zc, z0_hat)));
    out.total = add(add(out.x_term, out.y_term), out.z_term);
    return out;
}

template <class R>
tensor<R> loss_eq8(const tensor<R>& z0_hat, const hsi_cube<R>& z0, const hsi_cube<R>& x,
                   const hsi_cube<R>& y, const spectral_response& resp,
                   const spatial_degradation& degr, bool crop_y_ring = false) {
    return loss_eq8_terms(z0_hat, z0, x, y, resp, degr, crop_y_ring).total;
}

// ---------------------------------------------------------------- data access

template <class R>
struct training_set {
    hsi_cube<R> z, x, y;
    spectral_response resp;
    spatial_degradation degr;

    void validate() const {
        resp.validate();
        if (x.height != z.height || x.width != z.width)
            throw validation_error("training set: x and z resolutions disagree");
        if (x.bands != resp.msi_bands || z.bands != resp.hsi_bands)
            throw validation_error("training set: band counts disagree with the response");
        if (y.bands != z.bands || y.height * degr.factor != z.height ||
            y.width * degr.factor != z.width)
            throw validation_error("training set: y resolution disagrees with the factor");
    }
};

template <class R>
struct train_batch_item {
    hsi_cube<R> z, x, y;
    bool full_image = false;
};

namespace detail {

template <class R>
hsi_cube<R> crop_cube(const hsi_cube<R>& c, std::int64_t i0, std::int64_t j0, std::int64_t h,
                      std::int64_t w) {
    hsi_cube<R> out(c.bands, h, w);
    for (std::int64_t b = 0; b < c.bands; ++b)
        for (std::int64_t i = 0; i < h; ++i)
            std::copy(c.data.begin() + (b * c.height + i0 + i) * c.width + j0,
                      c.data.begin() + (b * c.height + i0 + i) * c.width + j0 + w,
                      out.data.begin() + (b * h + i) * w);
    return out;
}

}  // namespace detail

// Aligned random crop: the LR offset is drawn, the HR offset is factor-aligned
// to it, so X = RZ and (away from the border ring) Y = ZD hold on the triple.
template <class R>
train_batch_item<R> sample_patch(const training_set<R>& data, std::int64_t patch, rng& gen) {
    const std::int64_t f = data.degr.factor;
    if (patch < 0 || (patch == data.z.height && patch == data.z.width))
        return {data.z, data.x, data.y, true};
    if (patch % f != 0)
        throw validation_error(detail::concat("patch size ", patch,
                                              " is not divisible by factor ", f));
    if (patch > data.z.height || patch > data.z.width)
        throw validation_error(detail::concat("patch size ", patch, " exceeds the scene"));
    const std::int64_t lp = patch / f;
    const std::int64_t i = gen.uniform_int(0, static_cast<int>(data.y.height - lp));
    const std::int64_t j = gen.uniform_int(0, static_cast<int>(data.y.width - lp));
    return {detail::crop_cube(data.z, i * f, j * f, patch, patch),
            detail::crop_cube(data.x, i * f, j * f, patch, patch),
            detail::crop_cube(data.y, i, j, lp, lp), false};
}

// --------------------------------------------------------------- one SGD step

inline std::int64_t worker_thread_cap() {
    if (const char* env = std::getenv("HSRDIFF_THREADS")) {
        const long n = std::strtol(env, nullptr, 10);
        if (n >= 1) return n;
    }
    return 1;
}

template <class R>
struct step_stats {
    double loss = 0;
    double grad_norm = 0;
};

// Draws (gamma, eps) per item, runs forward/backward per item (optionally on
// worker threads over cloned parameter leaves), reduces gradients in item
// order, clips, and applies Adam. The reduction order is fixed, so the result
// is bit-identical for any worker count.
template <class R>
step_stats<R> training_step(const std::vector<train_batch_item<R>>& batch,
                            model_params<R>& params, optim_state<R>& opt,
                            const model_config& mcfg, const train_config& tcfg,
                            const noise_schedule& sched, rng& gen,
                            const spectral_response& resp, const spatial_degradation& degr,
                            const std::function<bool(const std::string&)>& trainable = nullptr) {
    const std::size_t n = batch.size();
    if (n == 0) throw validation_error("training_step: empty batch");

    // all stochastic inputs are drawn serially up front
    std::vector<double> gammas(n);
    std::vector<hsi_cube<R>> noisy(n);
    for (std::size_t i = 0; i < n; ++i) {
        gammas[i] = sample_gamma(sched, gen).gamma;
        hsi_cube<R> eps(batch[i].z.bands, batch[i].z.height, batch[i].z.width);
        for (auto& v : eps.data) v = static_cast<R>(gen.normal());
        noisy[i] = forward_marginal(batch[i].z, gammas[i], eps);
    }

    std::vector<std::map<std::string, std::vector<R>>> item_grads(n);
    std::vector<double> item_loss(n);
    auto run_item = [&](std::size_t i) {
        model_params<R> local;
        for (const auto& [name, t] : params.table)
            local.table.emplace(name, tensor<R>::param(t.shape(), t.value()));
        auto z0_hat = denoise_forward(local, mcfg, cube_to_tensor(batch[i].x),
                                      cube_to_tensor(batch[i].y), cube_to_tensor(noisy[i]),
                                      gammas[i]);
        auto loss = loss_eq8(z0_hat, batch[i].z, batch[i].x, batch[i].y, resp, degr,
                             !batch[i].full_image);
        item_loss[i] = static_cast<double>(loss.item());
        loss.backward();
        for (const auto& [name, t] : local.table)
            if (!t.grad().empty()) item_grads[i].emplace(name, t.grad());
    };

    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(worker_thread_cap()), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) run_item(i);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&, w]() {
                for (std::size_t i = w; i < n; i += workers) run_item(i);
            });
        for (auto& t : pool) t.join();
    }

    // reduce in item order, then average
    std::map<std::string, std::vector<R>> grads;
    for (std::size_t i = 0; i < n; ++i)
        for (auto& [name, g] : item_grads[i]) {
            auto it = grads.find(name);
            if (it == grads.end()) {
                grads.emplace(name, g);
            } else {
                auto& acc = it->second;
                for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k];
            }
        }
    const R inv_n = static_cast<R>(1.0 / static_cast<double>(n));
    for (auto& [name, g] : grads)
        for (auto& v : g) v *= inv_n;

    step_stats<R> stats;
    for (double l : item_loss) stats.loss += l;
    stats.loss /= static_cast<double>(n);
    if (!std::isfinite(stats.loss)) {
        std::string offender = "loss";
        for (const auto& [name, g] : grads)
            for (R v : g)
                if (!std::isfinite(static_cast<double>(v))) { offender = name; goto found; }
    found:
        throw numeric_error("non-finite training loss; first offending path: " + offender);
    }

    double norm_sq = 0;
    for (const auto& [name, g] : grads) {
        if (trainable && !trainable(name)) continue;
        for (R v : g) norm_sq += static_cast<double>(v) * static_cast<double>(v);
    }
    stats.grad_norm = std::sqrt(norm_sq);
    if (tcfg.clip_norm > 0 && stats.grad_norm > tcfg.clip_norm) {
        const R s = static_cast<R>(tcfg.clip_norm / stats.grad_norm);
        for (auto& [name, g] : grads)
            for (auto& v : g) v *= s;
    }

    adam_update(params, grads, opt, tcfg, trainable);
    return stats;
}

// ----------------------------------------------------------------- checkpoint

template <class R>
struct checkpoint {
    model_config mcfg;
    model_params<R> params;
    optim_state<R> opt;
    noise_schedule sched;
    std::uint64_t rng_seed = 0;
    std::uint64_t rng_counter = 0;
    std::int64_t next_epoch = 0;
    std::int64_t global_step = 0;
};

namespace detail {

template <class R>
void write_table_entry(std::ofstream& os, const std::string& name, const shape_t& shape,
                       const std::vector<R>& data) {
    write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    write_bytes(os, name.data(), name.size());
    write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    std::vector<float> buf(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) buf[i] = static_cast<float>(data[i]);
    write_bytes(os, buf.data(), buf.size() * sizeof(float));
}

struct table_entry {
    std::string name;
    shape_t shape;
    std::vector<float> data;
};

inline table_entry read_table_entry(std::ifstream& is) {
    table_entry e;
    const auto len = read_pod<std::uint16_t>(is, "entry name length");
    e.name.resize(len);
    read_bytes(is, e.name.data(), len, "entry name");
    const auto rank = read_pod<std::uint8_t>(is, "entry rank");
    std::int64_t count = 1;
    for (int d = 0; d < rank; ++d) {
        const auto dim = read_pod<std::uint32_t>(is, "entry dim");
        e.shape.push_back(dim);
        count *= dim;
    }
    if (count < 0 || count > (std::int64_t(1) << 32))
        throw io_error("unreasonable checkpoint entry size");
    e.data.resize(static_cast<std::size_t>(count));
    read_bytes(is, e.data.data(), e.data.size() * sizeof(float), "entry data");
    return e;
}

}  // namespace detail

template <class R>
void save_checkpoint(const std::string& path, const checkpoint<R>& ck) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open for writing: " + path);
    detail::write_bytes(os, "HSRD", 4);
    detail::write_pod<std::uint16_t>(os, 1);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ck.mcfg.channels));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ck.mcfg.n_layers));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ck.mcfg.heads));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ck.mcfg.window));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ck.mcfg.bands));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ck.mcfg.msi_bands));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ck.mcfg.ffn_expand));
    detail::write_pod<double>(os, ck.mcfg.nle_scale);
    detail::write_pod<std::uint8_t>(os, ck.mcfg.residual_zt ? 1 : 0);

    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ck.params.table.size()));
    for (const auto& [name, t] : ck.params.table)
        detail::write_table_entry(os, name, t.shape(), t.value());

    detail::write_pod<std::uint32_t>(os,
                                     static_cast<std::uint32_t>(2 * ck.opt.m.size() + 1));
    for (const auto& [name, m] : ck.opt.m)
        detail::write_table_entry(os, "m." + name,
                                  {static_cast<std::int64_t>(m.size())}, m);
    for (const auto& [name, v] : ck.opt.v)
        detail::write_table_entry(os, "v." + name,
                                  {static_cast<std::int64_t>(v.size())}, v);
    detail::write_table_entry<R>(os, "step", {},
                                 {static_cast<R>(ck.opt.step)});

    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ck.sched.T));
    detail::write_pod<double>(os, ck.sched.beta_start);
    detail::write_pod<double>(os, ck.sched.beta_end);
    detail::write_bytes(os, ck.sched.alpha.data(), ck.sched.alpha.size() * sizeof(double));
    detail::write_bytes(os, ck.sched.gamma.data(), ck.sched.gamma.size() * sizeof(double));

    detail::write_bytes(os, "RNGS", 4);
    detail::write_pod<std::uint64_t>(os, ck.rng_seed);
    detail::write_pod<std::uint64_t>(os, ck.rng_counter);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ck.next_epoch));
    detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(ck.global_step));
    if (!os) throw io_error("write failed: " + path);
}

template <class R>
checkpoint<R> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open: " + path);
    char magic[4];
    detail::read_bytes(is, magic, 4, "checkpoint magic");
    if (std::memcmp(magic, "HSRD", 4) != 0)
        throw io_error("bad magic in checkpoint: " + path);
    const auto version = detail::read_pod<std::uint16_t>(is, "checkpoint version");
    if (version != 1) throw io_error("unsupported checkpoint version");

    checkpoint<R> ck;
    ck.mcfg.channels = detail::read_pod<std::uint32_t>(is, "channels");
    ck.mcfg.n_layers = detail::read_pod<std::uint32_t>(is, "layers");
    ck.mcfg.heads = detail::read_pod<std::uint32_t>(is, "heads");
    ck.mcfg.window = detail::read_pod<std::uint32_t>(is, "window");
    ck.mcfg.bands = detail::read_pod<std::uint32_t>(is, "bands");
    ck.mcfg.msi_bands = detail::read_pod<std::uint32_t>(is, "msi bands");
    ck.mcfg.ffn_expand = detail::read_pod<std::uint32_t>(is, "ffn expand");
    ck.mcfg.nle_scale = detail::read_pod<double>(is, "nle scale");
    ck.mcfg.residual_zt = detail::read_pod<std::uint8_t>(is, "residual mode") != 0;
    ck.mcfg.validate();

    const auto n_params = detail::read_pod<std::uint32_t>(is, "parameter count");
    const auto layout = parameter_layout(ck.mcfg);
    if (n_params != layout.size())
        throw io_error(detail::concat("checkpoint carries ", n_params,
                                      " parameters, config expects ", layout.size()));
    for (std::uint32_t i = 0; i < n_params; ++i) {
        auto e = detail::read_table_entry(is);
        ck.params.table.emplace(e.name,
                                tensor<R>::param(e.shape,
                                                 std::vector<R>(e.data.begin(), e.data.end())));
    }
    for (const auto& spec : layout) {
        auto it = ck.params.table.find(spec.name);
        if (it == ck.params.table.end())
            throw io_error("checkpoint is missing parameter " + spec.name);
        if (it->second.shape() != spec.shape)
            throw io_error("checkpoint parameter has unexpected shape: " + spec.name);
    }

    const auto n_opt = detail::read_pod<std::uint32_t>(is, "optimizer entry count");
    for (std::uint32_t i = 0; i < n_opt; ++i) {
        auto e = detail::read_table_entry(is);
        if (e.name == "step") {
            ck.opt.step = static_cast<std::int64_t>(e.data.at(0));
        } else if (e.name.rfind("m.", 0) == 0) {
            ck.opt.m.emplace(e.name.substr(2), std::vector<R>(e.data.begin(), e.data.end()));
        } else if (e.name.rfind("v.", 0) == 0) {
            ck.opt.v.emplace(e.name.substr(2), std::vector<R>(e.data.begin(), e.data.end()));
        } else {
            throw io_error("unexpected optimizer entry: " + e.name);
        }
    }

    ck.sched.T = detail::read_pod<std::uint32_t>(is, "schedule T");
    ck.sched.beta_start = detail::read_pod<double>(is, "beta start");
    ck.sched.beta_end = detail::read_pod<double>(is, "beta end");
    ck.sched.alpha.resize(static_cast<std::size_t>(ck.sched.T));
    ck.sched.gamma.resize(static_cast<std::size_t>(ck.sched.T) + 1);
    detail::read_bytes(is, ck.sched.alpha.data(), ck.sched.alpha.size() * sizeof(double),
                       "schedule alphas");
    detail::read_bytes(is, ck.sched.gamma.data(), ck.sched.gamma.size() * sizeof(double),
                       "schedule gammas");

    char rmagic[4];
    detail::read_bytes(is, rmagic, 4, "rng section magic");
    if (std::memcmp(rmagic, "RNGS", 4) != 0) throw io_error("corrupt rng section");
    ck.rng_seed = detail::read_pod<std::uint64_t>(is, "rng seed");
    ck.rng_counter = detail::read_pod<std::uint64_t>(is, "rng counter");
    ck.next_epoch = detail::read_pod<std::uint32_t>(is, "epoch");
    ck.global_step = static_cast<std::int64_t>(detail::read_pod<std::uint64_t>(is, "step count"));
    return ck;
}

// ---------------------------------------------------------------- epoch loop

struct train_callbacks {
    // one record per step: epoch, global step, loss, lr, patch
    std::function<void(std::int64_t, std::int64_t, double, double, std::int64_t)> on_step;
    std::function<void(std::int64_t)> on_epoch_end;
};

// Runs epochs [start_epoch, tcfg.epochs); all stochastic state flows through
// `gen` so a (seed, counter) pair resumes a run exactly.
template <class R>
double train_loop(const training_set<R>& data, model_params<R>& params, optim_state<R>& opt,
                  const model_config& mcfg, const train_config& tcfg,
                  const noise_schedule& sched, rng& gen, std::int64_t start_epoch = 0,
                  std::int64_t* global_step = nullptr, const train_callbacks& cb = {}) {
    data.validate();
    tcfg.validate();
    double last_loss = 0;
    std::int64_t step_counter = global_step ? *global_step : 0;
    for (std::int64_t epoch = start_epoch; epoch < tcfg.epochs; ++epoch) {
        const std::int64_t patch = stage_patch(tcfg, epoch);
        const bool full_res = in_full_res_stage(tcfg, epoch);
        auto trainable = trainable_filter(mcfg, full_res);
        for (std::int64_t s = 0; s < tcfg.steps_per_epoch; ++s) {
            std::vector<train_batch_item<R>> batch;
            batch.reserve(static_cast<std::size_t>(tcfg.batch_size));
            for (std::int64_t k = 0; k < tcfg.batch_size; ++k)
                batch.push_back(sample_patch(data, patch, gen));
            auto stats = training_step(batch, params, opt, mcfg, tcfg, sched, gen, data.resp,
                                       data.degr, trainable);
            last_loss = stats.loss;
            ++step_counter;
            if (cb.on_step)
                cb.on_step(epoch, step_counter, stats.loss, tcfg.lr,
                           patch < 0 ? data.z.height : patch);
        }
        if (cb.on_epoch_end) cb.on_epoch_end(epoch);
    }
    if (global_step) *global_step = step_counter;
    return last_loss;
}

}  // namespace hsrdiff

#endif  // HSRDIFF_TRAINING_HPP
