#ifndef HSRDIFF_CDFORMER_HPP
#define HSRDIFF_CDFORMER_HPP

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "hsrdiff/cube.hpp"
#include "hsrdiff/image_ops.hpp"
#include "hsrdiff/schedule.hpp"
#include "hsrdiff/tensor.hpp"

namespace hsrdiff {

struct model_config {
    std::int64_t channels = 32;   // C, per-stream feature width
    std::int64_t n_layers = 4;    // stacked blocks per stream
    std::int64_t heads = 4;
    std::int64_t window = 8;      // spatial attention window
    std::int64_t bands = 0;       // B, HSI bands
    std::int64_t msi_bands = 0;   // b
    std::int64_t ffn_expand = 2;
    double nle_scale = 5000.0;    // gamma is scaled before the sinusoid bank
    bool residual_zt = false;     // reconstruction anchor: upsampled y (default) or zt

    void validate() const {
        if (channels < 2 || channels % 2 != 0)
            throw validation_error("model channels must be even and >= 2");
        if (heads < 1 || channels % heads != 0)
            throw validation_error("model channels must divide evenly into heads");
        if (n_layers < 1) throw validation_error("model needs at least one layer per stream");
        if (window < 1) throw validation_error("attention window must be >= 1");
        if (bands < 1 || msi_bands < 1)
            throw validation_error("model band counts must be positive");
        if (ffn_expand < 1) throw validation_error("ffn expansion must be >= 1");
        if (!(nle_scale > 0)) throw validation_error("nle scale must be positive");
    }
};

enum class init_kind { fan_in_uniform, zeros, ones };

struct param_spec {
    std::string name;
    shape_t shape;
    init_kind init;
};

// Single source of truth for the parameter table layout.
inline std::vector<param_spec> parameter_layout(const model_config& cfg) {
    cfg.validate();
    const std::int64_t C = cfg.channels, B = cfg.bands, b = cfg.msi_bands;
    const std::int64_t rC = cfg.ffn_expand * C;
    std::vector<param_spec> specs;
    auto lin = [&](const std::string& n, std::int64_t out, std::int64_t in, init_kind k) {
        specs.push_back({n + ".w", {out, in}, k});
        specs.push_back({n + ".b", {out}, init_kind::zeros});
    };
    auto ln = [&](const std::string& n) {
        specs.push_back({n + ".g", {C}, init_kind::ones});
        specs.push_back({n + ".b", {C}, init_kind::zeros});
    };
    auto attention = [&](const std::string& p, bool temperature) {
        lin(p + ".q", C, C, init_kind::fan_in_uniform);
        lin(p + ".k", C, C, init_kind::fan_in_uniform);
        lin(p + ".v", C, C, init_kind::fan_in_uniform);
        lin(p + ".o", C, C, init_kind::zeros);  // residual identity at init
        if (temperature) specs.push_back({p + ".temp", {cfg.heads}, init_kind::ones});
    };
    auto s2tl = [&](const std::string& p) {
        ln(p + ".ln1");
        attention(p + ".spatio", false);
        ln(p + ".ln2");
        attention(p + ".spectral", true);
        ln(p + ".ln3");
        lin(p + ".ffn.u", rC, C, init_kind::fan_in_uniform);
        lin(p + ".ffn.g", rC, C, init_kind::fan_in_uniform);
        lin(p + ".ffn.o", C, rC, init_kind::zeros);
    };

    specs.push_back({"sr.embed.w", {C, B + b, 3, 3}, init_kind::fan_in_uniform});
    specs.push_back({"sr.embed.b", {C}, init_kind::zeros});
    for (std::int64_t l = 0; l < cfg.n_layers; ++l)
        s2tl("sr.blk" + std::to_string(l));

    specs.push_back({"ds.embed.w", {C, B, 3, 3}, init_kind::fan_in_uniform});
    specs.push_back({"ds.embed.b", {C}, init_kind::zeros});
    for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "ds.blk" + std::to_string(l);
        lin(p + ".nle", 2 * C, C, init_kind::fan_in_uniform);
        ln(p + ".mca.lnq");
        ln(p + ".mca.lnkv");
        attention(p + ".mca", false);
        s2tl(p);
    }

    specs.push_back({"recon.w", {B, C, 3, 3}, init_kind::zeros});
    specs.push_back({"recon.b", {B}, init_kind::zeros});
    return specs;
}

inline std::int64_t parameter_count(const model_config& cfg) {
    std::int64_t total = 0;
    for (const auto& s : parameter_layout(cfg)) total += shape_numel(s.shape);
    return total;
}

template <class R>
struct model_params {
    std::map<std::string, tensor<R>> table;

    static model_params init(const model_config& cfg, rng& gen) {
        model_params p;
        for (const auto& spec : parameter_layout(cfg)) {
            const auto n = static_cast<std::size_t>(shape_numel(spec.shape));
            std::vector<R> data(n, R(0));
            switch (spec.init) {
                case init_kind::zeros:
                    break;
                case init_kind::ones:
                    std::fill(data.begin(), data.end(), R(1));
                    break;
                case init_kind::fan_in_uniform: {
                    std::int64_t fan_in = 1;
                    for (std::size_t d = 1; d < spec.shape.size(); ++d) fan_in *= spec.shape[d];
                    const double limit = std::sqrt(3.0 / static_cast<double>(fan_in));
                    for (auto& v : data)
                        v = static_cast<R>(limit * (2.0 * gen.uniform01() - 1.0));
                    break;
                }
            }
            auto [it, inserted] = p.table.emplace(spec.name, tensor<R>::param(spec.shape, std::move(data)));
            if (!inserted) throw validation_error("duplicate parameter name: " + spec.name);
        }
        return p;
    }

    const tensor<R>& at(const std::string& name) const {
        auto it = table.find(name);
        if (it == table.end()) throw validation_error("unknown parameter: " + name);
        return it->second;
    }

    std::int64_t total_count() const {
        std::int64_t total = 0;
        for (const auto& [name, t] : table) total += t.numel();
        return total;
    }

    void zero_grad() {
        for (auto& [name, t] : table) t.clear_grad();
    }
};

// Sinusoidal embedding of the (scaled) noise level, Transformer-style
// interleaved sin/cos bank.
inline std::vector<double> noise_level_embedding(double gamma, std::int64_t C,
                                                 double scale = 5000.0) {
    if (C < 2 || C % 2 != 0)
        throw validation_error("noise level embedding needs an even channel count");
    if (!(gamma > 0) || gamma > 1)
        throw validation_error(detail::concat("noise level must lie in (0,1], got ", gamma));
    std::vector<double> e(static_cast<std::size_t>(C));
    const double g = gamma * scale;
    for (std::int64_t i = 0; i < C / 2; ++i) {
        const double freq = std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(C));
        e[2 * i] = std::sin(g / freq);
        e[2 * i + 1] = std::cos(g / freq);
    }
    return e;
}

// Optional capture of attention distributions for inspection/tests.
template <class R>
struct attn_probe {
    std::vector<tensor<R>> maps;
};

namespace detail {

template <class R>
tensor<R> linear_tokens(const tensor<R>& x, const tensor<R>& w, const tensor<R>& b) {
    auto out = matmul(x, transpose(w));
    const std::int64_t cols = out.shape().back();
    auto flat = reshape(out, {out.numel() / cols, cols});
    return reshape(add_cols(flat, b), out.shape());
}

template <class R>
tensor<R> linear_channels(const tensor<R>& x, const tensor<R>& w, const tensor<R>& b) {
    return add_rows(matmul(w, x), b);
}

// Channel-wise layer norm of a (C,H,W) map, applied per pixel.
template <class R>
tensor<R> ln_channels(const tensor<R>& f, const tensor<R>& gain, const tensor<R>& bias) {
    const std::int64_t C = f.dim(0), N = f.dim(1) * f.dim(2);
    auto rows = transpose(reshape(f, {C, N}));  // (N, C)
    auto normed = layer_norm_rows(rows, gain, bias);
    return reshape(transpose(normed), f.shape());
}

// Window-partitioned multi-head attention; queries from q_src, keys/values
// from kv_src (the two coincide for self-attention).
template <class R>
tensor<R> windowed_attention(const tensor<R>& q_src, const tensor<R>& kv_src,
                             const model_params<R>& params, const std::string& prefix,
                             std::int64_t win, std::int64_t heads,
                             attn_probe<R>* probe = nullptr) {
    const std::int64_t C = q_src.dim(0), H = q_src.dim(1), W = q_src.dim(2);
    const std::int64_t dh = C / heads;
    auto qw = window_partition(q_src, win);
    auto kw = window_partition(kv_src, win);
    const std::int64_t n = qw.dim(0), T = win * win;

    auto tokens = [&](const tensor<R>& wins) {
        return permute(reshape(wins, {n, C, T}), {0, 2, 1});  // (n, T, C)
    };
    auto heads_of = [&](const tensor<R>& t) {
        return permute(reshape(t, {n, T, heads, dh}), {0, 2, 1, 3});  // (n, h, T, dh)
    };
    auto qtok = tokens(qw), ktok = tokens(kw);
    auto q = heads_of(linear_tokens(qtok, params.at(prefix + ".q.w"), params.at(prefix + ".q.b")));
    auto k = heads_of(linear_tokens(ktok, params.at(prefix + ".k.w"), params.at(prefix + ".k.b")));
    auto v = heads_of(linear_tokens(ktok, params.at(prefix + ".v.w"), params.at(prefix + ".v.b")));

    auto scores = scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
    auto probs = softmax_last(scores);  // (n, h, T, T)
    if (probe) probe->maps.push_back(probs);
    auto ctx = matmul(probs, v);  // (n, h, T, dh)
    auto merged = reshape(permute(ctx, {0, 2, 1, 3}), {n, T, C});
    auto out = linear_tokens(merged, params.at(prefix + ".o.w"), params.at(prefix + ".o.b"));
    auto wins_out = reshape(permute(out, {0, 2, 1}), {n, C, win, win});
    return window_merge(wins_out, H, W);
}

}  // namespace detail

// Window self-attention over pixels (residual added by the caller).
template <class R>
tensor<R> spatio_msa(const tensor<R>& f, const model_params<R>& params, const std::string& prefix,
                     std::int64_t win, std::int64_t heads, attn_probe<R>* probe = nullptr) {
    return detail::windowed_attention(f, f, params, prefix, win, heads, probe);
}

// Transposed attention over channels: per head a (dh x dh) attention matrix
// from L2-normalized projections, scaled by a learned temperature. Cost is
// linear in the pixel count.
template <class R>
tensor<R> spectral_msa(const tensor<R>& f, const model_params<R>& params, const std::string& prefix,
                       std::int64_t heads, attn_probe<R>* probe = nullptr) {
    const std::int64_t C = f.dim(0), N = f.dim(1) * f.dim(2);
    const std::int64_t dh = C / heads;
    auto flat = reshape(f, {C, N});
    auto proj = [&](const char* which) {
        return detail::linear_channels(flat, params.at(prefix + "." + which + ".w"),
                                       params.at(prefix + "." + which + ".b"));
    };
    auto q = l2_normalize_last(reshape(proj("q"), {heads, dh, N}));
    auto k = l2_normalize_last(reshape(proj("k"), {heads, dh, N}));
    auto v = reshape(proj("v"), {heads, dh, N});

    auto scores = matmul(q, transpose_last2(k));  // (h, dh, dh)
    auto scaled = reshape(mul_rows(reshape(scores, {heads, dh * dh}), params.at(prefix + ".temp")),
                          {heads, dh, dh});
    auto probs = softmax_last(scaled);
    if (probe) probe->maps.push_back(probs);
    auto ctx = matmul(probs, v);  // (h, dh, N)
    auto out = detail::linear_channels(reshape(ctx, {C, N}), params.at(prefix + ".o.w"),
                                       params.at(prefix + ".o.b"));
    return reshape(out, f.shape());
}

// Gated feed-forward: two parallel expansions, one gated through GELU.
template <class R>
tensor<R> gated_ffn(const tensor<R>& f, const model_params<R>& params, const std::string& prefix) {
    const std::int64_t C = f.dim(0), N = f.dim(1) * f.dim(2);
    auto flat = reshape(f, {C, N});
    auto u = detail::linear_channels(flat, params.at(prefix + ".u.w"), params.at(prefix + ".u.b"));
    auto g = detail::linear_channels(flat, params.at(prefix + ".g.w"), params.at(prefix + ".g.b"));
    auto h = mul(gelu(u), g);
    auto out = detail::linear_channels(h, params.at(prefix + ".o.w"), params.at(prefix + ".o.b"));
    return reshape(out, f.shape());
}

// Spatio-spectral transformer layer: pre-norm residual composition of window
// attention, transposed channel attention, and the gated FFN.
template <class R>
tensor<R> s2tl(const tensor<R>& f, const model_params<R>& params, const std::string& prefix,
               const model_config& cfg, attn_probe<R>* probe = nullptr) {
    auto a = add(f, spatio_msa(detail::ln_channels(f, params.at(prefix + ".ln1.g"),
                                                   params.at(prefix + ".ln1.b")),
                               params, prefix + ".spatio", cfg.window, cfg.heads, probe));
    auto b = add(a, spectral_msa(detail::ln_channels(a, params.at(prefix + ".ln2.g"),
                                                     params.at(prefix + ".ln2.b")),
                                 params, prefix + ".spectral", cfg.heads, probe));
    return add(b, gated_ffn(detail::ln_channels(b, params.at(prefix + ".ln3.g"),
                                                params.at(prefix + ".ln3.b")),
                            params, prefix + ".ffn"));
}

// Noise-aware conditional layer: NLE scale-shift merge, windowed cross
// attention onto the SR-stream features, then a full S2TL.
template <class R>
tensor<R> nc_s2tl(const tensor<R>& f_ds, const tensor<R>& f_sr, const tensor<R>& nle,
                  const model_params<R>& params, const std::string& prefix,
                  const model_config& cfg, attn_probe<R>* probe = nullptr) {
    if (f_ds.shape() != f_sr.shape())
        throw shape_error("nc_s2tl: stream feature resolutions disagree");
    const std::int64_t C = f_ds.dim(0), N = f_ds.dim(1) * f_ds.dim(2);

    auto sb = detail::linear_channels(reshape(nle, {C, 1}), params.at(prefix + ".nle.w"),
                                      params.at(prefix + ".nle.b"));
    auto parts = split(reshape(sb, {2 * C}), 0, {C, C});
    auto merged_flat = add_rows(mul_rows(reshape(f_ds, {C, N}), add_scalar(parts[0], 1.0)),
                                parts[1]);
    auto merged = reshape(merged_flat, f_ds.shape());

    auto qn = detail::ln_channels(merged, params.at(prefix + ".mca.lnq.g"),
                                  params.at(prefix + ".mca.lnq.b"));
    auto kvn = detail::ln_channels(f_sr, params.at(prefix + ".mca.lnkv.g"),
                                   params.at(prefix + ".mca.lnkv.b"));
    auto cross = detail::windowed_attention(qn, kvn, params, prefix + ".mca", cfg.window,
                                            cfg.heads, probe);
    return s2tl(add(merged, cross), params, prefix, cfg, probe);
}

// SR-stream features: y upsampled onto the HR grid, fused with x, then the
// stack of S2TLs. Returned per layer so the denoising stream can attend to
// the matching depth.
template <class R>
struct sr_features {
    std::vector<tensor<R>> layers;
    tensor<R> y_up;
};

template <class R>
sr_features<R> run_sr_stream(const model_params<R>& params, const model_config& cfg,
                             const tensor<R>& x, const tensor<R>& y,
                             attn_probe<R>* probe = nullptr) {
    const std::int64_t H = x.dim(1), W = x.dim(2);
    if (x.dim(0) != cfg.msi_bands)
        throw shape_error(detail::concat("x has ", x.dim(0), " bands, config expects ",
                                         cfg.msi_bands));
    if (y.dim(0) != cfg.bands)
        throw shape_error(detail::concat("y has ", y.dim(0), " bands, config expects ", cfg.bands));
    if (y.dim(1) < 1 || H % y.dim(1) != 0 || W % y.dim(2) != 0 ||
        H / y.dim(1) != W / y.dim(2))
        throw shape_error("y resolution must divide x resolution by one integer factor");
    const std::int64_t factor = H / y.dim(1);

    sr_features<R> out;
    out.y_up = bilinear_upsample(y, factor);
    auto f = conv2d_3x3(concat<R>({out.y_up, x}, 0), params.at("sr.embed.w"),
                        params.at("sr.embed.b"));
    for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
        f = s2tl(f, params, "sr.blk" + std::to_string(l), cfg, probe);
        out.layers.push_back(f);
    }
    return out;
}

template <class R>
tensor<R> run_denoise_stream(const model_params<R>& params, const model_config& cfg,
                             const sr_features<R>& sr, const tensor<R>& zt, double gamma,
                             attn_probe<R>* probe = nullptr) {
    if (zt.dim(0) != cfg.bands)
        throw shape_error(detail::concat("z has ", zt.dim(0), " bands, config expects ",
                                         cfg.bands));
    const auto nle_values = noise_level_embedding(gamma, cfg.channels, cfg.nle_scale);
    auto nle = tensor<R>::from({cfg.channels},
                               std::vector<R>(nle_values.begin(), nle_values.end()));
    auto g = conv2d_3x3(zt, params.at("ds.embed.w"), params.at("ds.embed.b"));
    for (std::int64_t l = 0; l < cfg.n_layers; ++l)
        g = nc_s2tl(g, sr.layers[static_cast<std::size_t>(l)], nle, params,
                    "ds.blk" + std::to_string(l), cfg, probe);
    auto recon = conv2d_3x3(g, params.at("recon.w"), params.at("recon.b"));
    return add(recon, cfg.residual_zt ? zt : sr.y_up);
}

// Full f(x, y, z_t, gamma) pass on tensors (graph-recording when params
// require gradients).
template <class R>
tensor<R> denoise_forward(const model_params<R>& params, const model_config& cfg,
                          const tensor<R>& x, const tensor<R>& y, const tensor<R>& zt,
                          double gamma, attn_probe<R>* probe = nullptr) {
    auto sr = run_sr_stream(params, cfg, x, y, probe);
    return run_denoise_stream(params, cfg, sr, zt, gamma, probe);
}

template <class R>
tensor<R> cube_to_tensor(const hsi_cube<R>& c) {
    return tensor<R>::from({c.bands, c.height, c.width}, c.data);
}

template <class R>
hsi_cube<R> tensor_to_cube(const tensor<R>& t) {
    hsi_cube<R> c(t.dim(0), t.dim(1), t.dim(2));
    c.data = t.value();
    return c;
}

// Inference-side denoiser with the SR stream cached across refinement steps
// (it depends only on x and y).
template <class R>
denoise_fn<R> make_denoiser(const model_params<R>& params, const model_config& cfg) {
    auto cache = std::make_shared<sr_features<R>>();
    auto cached = std::make_shared<bool>(false);
    return [&params, cfg, cache, cached](const hsi_cube<R>& x, const hsi_cube<R>& y,
                                         const hsi_cube<R>& zt, double gamma) {
        no_grad_guard guard;
        if (!*cached) {
            *cache = run_sr_stream(params, cfg, cube_to_tensor(x), cube_to_tensor(y));
            *cached = true;
        }
        auto out = run_denoise_stream(params, cfg, *cache, cube_to_tensor(zt), gamma);
        return tensor_to_cube(out);
    };
}

}  // namespace hsrdiff

#endif  // HSRDIFF_CDFORMER_HPP
