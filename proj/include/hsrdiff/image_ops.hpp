#ifndef HSRDIFF_IMAGE_OPS_HPP
#define HSRDIFF_IMAGE_OPS_HPP

#include <memory>
#include <vector>

#include "hsrdiff/kernels.hpp"
#include "hsrdiff/tensor.hpp"

namespace hsrdiff {

// 3x3 cross-correlation, zero padding, spatial size preserved.
// input (C_in, H, W), kernel (C_out, C_in, 3, 3), bias (C_out).
template <class R>
tensor<R> conv2d_3x3(const tensor<R>& input, const tensor<R>& kernel, const tensor<R>& bias) {
    if (input.rank() != 3) throw shape_error("conv2d_3x3: input must be (C,H,W)");
    if (kernel.rank() != 4 || kernel.dim(2) != 3 || kernel.dim(3) != 3)
        throw shape_error("conv2d_3x3: kernel must be (C_out,C_in,3,3)");
    const std::int64_t cin = input.dim(0), H = input.dim(1), W = input.dim(2);
    const std::int64_t cout = kernel.dim(0);
    if (kernel.dim(1) != cin)
        throw shape_error(detail::concat("conv2d_3x3: kernel expects ", kernel.dim(1),
                                         " input channels, image has ", cin));
    if (bias.rank() != 1 || bias.dim(0) != cout)
        throw shape_error("conv2d_3x3: bias length must equal C_out");

    std::vector<R> out(static_cast<std::size_t>(cout * H * W));
    const R* x = input.value().data();
    const R* w = kernel.value().data();
    for (std::int64_t co = 0; co < cout; ++co) {
        R* oplane = out.data() + co * H * W;
        const R b = bias.value()[co];
        for (std::int64_t i = 0; i < H * W; ++i) oplane[i] = b;
        for (std::int64_t ci = 0; ci < cin; ++ci) {
            const R* xplane = x + ci * H * W;
            for (std::int64_t u = 0; u < 3; ++u)
                for (std::int64_t v = 0; v < 3; ++v) {
                    const R wk = w[((co * cin + ci) * 3 + u) * 3 + v];
                    if (wk == R(0)) continue;
                    const std::int64_t i0 = std::max<std::int64_t>(0, 1 - u);
                    const std::int64_t i1 = std::min<std::int64_t>(H, H + 1 - u);
                    const std::int64_t j0 = std::max<std::int64_t>(0, 1 - v);
                    const std::int64_t j1 = std::min<std::int64_t>(W, W + 1 - v);
                    for (std::int64_t i = i0; i < i1; ++i) {
                        R* orow = oplane + i * W;
                        const R* xrow = xplane + (i + u - 1) * W + (v - 1);
                        for (std::int64_t j = j0; j < j1; ++j) orow[j] += wk * xrow[j];
                    }
                }
        }
    }
    return detail::make_op<R>({cout, H, W}, std::move(out),
        {input.node(), kernel.node(), bias.node()},
        [cin, cout, H, W](tensor_node<R>& self) {
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            auto& pb = *self.parents[2];
            const R* go = self.grad.data();
            if (pb.requires_grad) {
                auto& gb = pb.grad_buf();
                for (std::int64_t co = 0; co < cout; ++co) {
                    R acc = R(0);
                    const R* gplane = go + co * H * W;
                    for (std::int64_t i = 0; i < H * W; ++i) acc += gplane[i];
                    gb[co] += acc;
                }
            }
            for (std::int64_t co = 0; co < cout; ++co) {
                const R* gplane = go + co * H * W;
                for (std::int64_t ci = 0; ci < cin; ++ci) {
                    const R* xplane = px.value.data() + ci * H * W;
                    for (std::int64_t u = 0; u < 3; ++u)
                        for (std::int64_t v = 0; v < 3; ++v) {
                            const std::int64_t i0 = std::max<std::int64_t>(0, 1 - u);
                            const std::int64_t i1 = std::min<std::int64_t>(H, H + 1 - u);
                            const std::int64_t j0 = std::max<std::int64_t>(0, 1 - v);
                            const std::int64_t j1 = std::min<std::int64_t>(W, W + 1 - v);
                            if (pw.requires_grad) {
                                R acc = R(0);
                                for (std::int64_t i = i0; i < i1; ++i) {
                                    const R* grow = gplane + i * W;
                                    const R* xrow = xplane + (i + u - 1) * W + (v - 1);
                                    for (std::int64_t j = j0; j < j1; ++j) acc += grow[j] * xrow[j];
                                }
                                pw.grad_buf()[((co * cin + ci) * 3 + u) * 3 + v] += acc;
                            }
                            if (px.requires_grad) {
                                const R wk = pw.value[((co * cin + ci) * 3 + u) * 3 + v];
                                if (wk == R(0)) continue;
                                auto& gx = px.grad_buf();
                                R* gxplane = gx.data() + ci * H * W;
                                for (std::int64_t i = i0; i < i1; ++i) {
                                    const R* grow = gplane + i * W;
                                    R* gxrow = gxplane + (i + u - 1) * W + (v - 1);
                                    for (std::int64_t j = j0; j < j1; ++j) gxrow[j] += wk * grow[j];
                                }
                            }
                        }
                }
            }
        });
}

namespace detail {

template <class R>
tensor<R> gather(const tensor<R>& a, shape_t out_shape,
                 std::shared_ptr<std::vector<std::int64_t>> map) {
    std::vector<R> out(map->size());
    const auto& v = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[(*map)[i]];
    return make_op<R>(std::move(out_shape), std::move(out), {a.node()},
        [map](tensor_node<R>& self) {
            auto& g = self.parents[0]->grad_buf();
            for (std::size_t i = 0; i < map->size(); ++i) g[(*map)[i]] += self.grad[i];
        });
}

}  // namespace detail

// Non-overlapping win x win tiles; H and W are reflect-padded up to multiples
// of win first. Output (n_windows, C, win, win), windows in row-major order.
template <class R>
tensor<R> window_partition(const tensor<R>& x, std::int64_t win) {
    if (x.rank() != 3) throw shape_error("window_partition: input must be (C,H,W)");
    if (win < 1) throw validation_error("window_partition: window must be >= 1");
    const std::int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const std::int64_t nwh = (H + win - 1) / win, nww = (W + win - 1) / win;
    const std::int64_t nwin = nwh * nww;
    auto map = std::make_shared<std::vector<std::int64_t>>(
        static_cast<std::size_t>(nwin * C * win * win));
    std::size_t k = 0;
    for (std::int64_t wi = 0; wi < nwh; ++wi)
        for (std::int64_t wj = 0; wj < nww; ++wj)
            for (std::int64_t c = 0; c < C; ++c)
                for (std::int64_t a = 0; a < win; ++a) {
                    const std::int64_t i = detail::reflect_index(wi * win + a, H);
                    for (std::int64_t b = 0; b < win; ++b) {
                        const std::int64_t j = detail::reflect_index(wj * win + b, W);
                        (*map)[k++] = (c * H + i) * W + j;
                    }
                }
    return detail::gather(x, {nwin, C, win, win}, std::move(map));
}

// Inverse of window_partition for the given original size: places tiles back
// and crops the padding.
template <class R>
tensor<R> window_merge(const tensor<R>& wins, std::int64_t H, std::int64_t W) {
    if (wins.rank() != 4 || wins.dim(2) != wins.dim(3))
        throw shape_error("window_merge: input must be (n,C,win,win)");
    const std::int64_t nwin = wins.dim(0), C = wins.dim(1), win = wins.dim(2);
    const std::int64_t nwh = (H + win - 1) / win, nww = (W + win - 1) / win;
    if (nwin != nwh * nww)
        throw shape_error(detail::concat("window_merge: ", nwin, " windows cannot tile ",
                                         H, "x", W, " at window ", win));
    auto map = std::make_shared<std::vector<std::int64_t>>(
        static_cast<std::size_t>(C * H * W));
    std::size_t k = 0;
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < H; ++i) {
            const std::int64_t wi = i / win, a = i % win;
            for (std::int64_t j = 0; j < W; ++j) {
                const std::int64_t wj = j / win, b = j % win;
                (*map)[k++] = (((wi * nww + wj) * C + c) * win + a) * win + b;
            }
        }
    return detail::gather(wins, {C, H, W}, std::move(map));
}

// Half-pixel-aligned bilinear upsampling by an integer factor.
template <class R>
tensor<R> bilinear_upsample(const tensor<R>& x, std::int64_t factor) {
    if (x.rank() != 3) throw shape_error("bilinear_upsample: input must be (C,h,w)");
    if (factor < 1) throw validation_error("bilinear_upsample: factor must be >= 1");
    const std::int64_t C = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::int64_t H = h * factor, W = w * factor;

    struct axis_tap { std::int64_t lo, hi; R wlo, whi; };
    auto make_taps = [factor](std::int64_t n, std::int64_t N) {
        std::vector<axis_tap> taps(static_cast<std::size_t>(N));
        for (std::int64_t o = 0; o < N; ++o) {
            const double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
            double fl = std::floor(src);
            double frac = src - fl;
            std::int64_t lo = static_cast<std::int64_t>(fl);
            std::int64_t hi = lo + 1;
            if (lo < 0) { lo = 0; hi = std::min<std::int64_t>(1, n - 1); frac = 0.0; }
            if (hi > n - 1) { hi = n - 1; lo = n - 1; frac = 0.0; }
            taps[o] = {lo, hi, static_cast<R>(1.0 - frac), static_cast<R>(frac)};
        }
        return taps;
    };
    auto ty = std::make_shared<std::vector<axis_tap>>(make_taps(h, H));
    auto tx = std::make_shared<std::vector<axis_tap>>(make_taps(w, W));

    std::vector<R> out(static_cast<std::size_t>(C * H * W));
    const R* v = x.value().data();
    for (std::int64_t c = 0; c < C; ++c) {
        const R* plane = v + c * h * w;
        R* oplane = out.data() + c * H * W;
        for (std::int64_t i = 0; i < H; ++i) {
            const auto& ay = (*ty)[i];
            for (std::int64_t j = 0; j < W; ++j) {
                const auto& ax = (*tx)[j];
                oplane[i * W + j] =
                    ay.wlo * (ax.wlo * plane[ay.lo * w + ax.lo] + ax.whi * plane[ay.lo * w + ax.hi]) +
                    ay.whi * (ax.wlo * plane[ay.hi * w + ax.lo] + ax.whi * plane[ay.hi * w + ax.hi]);
            }
        }
    }
    return detail::make_op<R>({C, H, W}, std::move(out), {x.node()},
        [C, h, w, H, W, ty, tx](tensor_node<R>& self) {
            auto& g = self.parents[0]->grad_buf();
            for (std::int64_t c = 0; c < C; ++c) {
                R* gplane = g.data() + c * h * w;
                const R* splane = self.grad.data() + c * H * W;
                for (std::int64_t i = 0; i < H; ++i) {
                    const auto& ay = (*ty)[i];
                    for (std::int64_t j = 0; j < W; ++j) {
                        const auto& ax = (*tx)[j];
                        const R go = splane[i * W + j];
                        gplane[ay.lo * w + ax.lo] += ay.wlo * ax.wlo * go;
                        gplane[ay.lo * w + ax.hi] += ay.wlo * ax.whi * go;
                        gplane[ay.hi * w + ax.lo] += ay.whi * ax.wlo * go;
                        gplane[ay.hi * w + ax.hi] += ay.whi * ax.whi * go;
                    }
                }
            }
        });
}

// Differentiable Eq.-1 style spatial degradation; forward is bit-identical to
// the cube pipeline's kernel.
template <class R>
tensor<R> spatial_degrade_op(const tensor<R>& x, std::shared_ptr<std::vector<double>> taps,
                             std::int64_t factor) {
    if (x.rank() != 3) throw shape_error("spatial_degrade_op: input must be (B,H,W)");
    const std::int64_t B = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (H % factor != 0 || W % factor != 0)
        throw validation_error(detail::concat("spatial_degrade_op: ", H, "x", W,
                                              " not divisible by factor ", factor));
    const std::int64_t oh = H / factor, ow = W / factor;
    std::vector<R> out(static_cast<std::size_t>(B * oh * ow));
    for (std::int64_t band = 0; band < B; ++band)
        detail::degrade_plane(x.value().data() + band * H * W, H, W, *taps, factor,
                              out.data() + band * oh * ow);
    return detail::make_op<R>({B, oh, ow}, std::move(out), {x.node()},
        [B, H, W, oh, ow, factor, taps](tensor_node<R>& self) {
            auto& g = self.parents[0]->grad_buf();
            const std::int64_t radius = (static_cast<std::int64_t>(taps->size()) - 1) / 2;
            const std::int64_t offset = factor / 2;
            for (std::int64_t band = 0; band < B; ++band) {
                R* gplane = g.data() + band * H * W;
                const R* splane = self.grad.data() + band * oh * ow;
                for (std::int64_t oi = 0; oi < oh; ++oi) {
                    const std::int64_t ci = oi * factor + offset;
                    for (std::int64_t oj = 0; oj < ow; ++oj) {
                        const std::int64_t cj = oj * factor + offset;
                        const R go = splane[oi * ow + oj];
                        for (std::int64_t u = -radius; u <= radius; ++u) {
                            const std::int64_t ri = detail::reflect_index(ci + u, H);
                            const double wu = (*taps)[static_cast<std::size_t>(u + radius)];
                            for (std::int64_t v = -radius; v <= radius; ++v) {
                                const std::int64_t rj = detail::reflect_index(cj + v, W);
                                gplane[ri * W + rj] += static_cast<R>(
                                    wu * (*taps)[static_cast<std::size_t>(v + radius)]) * go;
                            }
                        }
                    }
                }
            }
        });
}

// Differentiable spectral response application on a flattened (B, HW) tensor.
template <class R>
tensor<R> spectral_response_op(const tensor<R>& x, std::shared_ptr<std::vector<double>> m,
                               std::int64_t rows) {
    detail::check_rank2(x, "spectral_response_op");
    const std::int64_t bands = x.dim(0), pixels = x.dim(1);
    if (static_cast<std::int64_t>(m->size()) != rows * bands)
        throw shape_error("spectral_response_op: matrix size mismatch");
    std::vector<R> out(static_cast<std::size_t>(rows * pixels));
    detail::spectral_mix(m->data(), rows, bands, x.value().data(), pixels, out.data());
    return detail::make_op<R>({rows, pixels}, std::move(out), {x.node()},
        [m, rows, bands, pixels](tensor_node<R>& self) {
            auto& g = self.parents[0]->grad_buf();
            for (std::int64_t i = 0; i < rows; ++i) {
                const R* grow = self.grad.data() + i * pixels;
                for (std::int64_t k = 0; k < bands; ++k) {
                    const R w = static_cast<R>((*m)[i * bands + k]);
                    R* gout = g.data() + k * pixels;
                    for (std::int64_t p = 0; p < pixels; ++p) gout[p] += w * grow[p];
                }
            }
        });
}

}  // namespace hsrdiff

#endif  // HSRDIFF_IMAGE_OPS_HPP
