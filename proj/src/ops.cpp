#include "stainseg/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>

namespace stainseg::ops {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what)
{
    if (t.rank() != rank)
        throw std::invalid_argument(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                                    ", got " + shape_str(t.shape()));
}

bool recording(const Tape* tape, std::initializer_list<const Tensor*> inputs)
{
    if (tape == nullptr)
        return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad())
            return true;
    return false;
}

struct ConvGeometry {
    std::size_t n, cin, h, w, cout, kh, kw, pad, ho, wo;
    std::size_t k() const { return cin * kh * kw; }
    std::size_t p() const { return ho * wo; }
    bool pointwise() const { return kh == 1 && kw == 1 && pad == 0; }
};

// Output columns ox with 0 <= ox + kj - pad < w.
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t kj)
{
    const std::size_t lo = std::min(g.wo, g.pad > kj ? g.pad - kj : std::size_t{0});
    const std::size_t hi = std::min(g.wo, g.w + g.pad > kj ? g.w + g.pad - kj : std::size_t{0});
    return {lo, std::max(lo, hi)};
}

void im2col(const double* x, const ConvGeometry& g, double* cols)
{
    const auto P = g.p();
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ki = 0; ki < g.kh; ++ki)
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                double* row = cols + ((c * g.kh + ki) * g.kw + kj) * P;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    double* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                        std::fill(dst, dst + g.wo, 0.0);
                        continue;
                    }
                    const double* src = x + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
                    const auto [lo, hi] = valid_columns(g, kj);
                    std::fill(dst, dst + lo, 0.0);
                    std::copy(src + (lo + kj - g.pad), src + (hi + kj - g.pad), dst + lo);
                    std::fill(dst + hi, dst + g.wo, 0.0);
                }
            }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* dx)
{
    const auto P = g.p();
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ki = 0; ki < g.kh; ++ki)
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const double* row = cols + ((c * g.kh + ki) * g.kw + kj) * P;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h))
                        continue;
                    const double* src = row + oy * g.wo;
                    double* dst = dx + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
                    const auto [lo, hi] = valid_columns(g, kj);
                    for (std::size_t ox = lo; ox < hi; ++ox)
                        dst[ox + kj - g.pad] += src[ox];
                }
            }
}

} // namespace

Tensor conv2d(Tape* tape, const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t padding)
{
    require_rank(input, 4, "conv2d", "input");
    require_rank(weight, 4, "conv2d", "weight");
    require_rank(bias, 1, "conv2d", "bias");
    ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0), weight.dim(2),
                   weight.dim(3), padding, 0, 0};
    if (weight.dim(1) != g.cin)
        throw std::invalid_argument("conv2d: input has " + std::to_string(g.cin) + " channels but weight " +
                                    shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
    if (bias.dim(0) != g.cout)
        throw std::invalid_argument("conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                                    std::to_string(g.cout) + " output channels");
    if (g.kh % 2 == 0 || g.kw % 2 == 0)
        throw std::invalid_argument("conv2d: kernel sizes must be odd, got " + shape_str(weight.shape()));
    if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw)
        throw std::invalid_argument("conv2d: padded input " + shape_str(input.shape()) + " smaller than kernel");
    g.ho = g.h + 2 * padding - g.kh + 1;
    g.wo = g.w + 2 * padding - g.kw + 1;

    const auto K = g.k();
    const auto P = g.p();
    const bool rec = recording(tape, {&input, &weight, &bias});

    Tensor out({g.n, g.cout, g.ho, g.wo}, 0.0, rec);
    // Uninitialized on purpose: im2col writes every entry.
    std::shared_ptr<double[]> cols;
    if (!g.pointwise())
        cols.reset(new double[(rec ? g.n : 1) * K * P]);

    CMapR wm(weight.data().data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(K));
    CVecMap bv(bias.data().data(), static_cast<Eigen::Index>(g.cout));
    for (std::size_t n = 0; n < g.n; ++n) {
        const double* xn = input.data().data() + n * g.cin * g.h * g.w;
        const double* cn = xn;
        if (!g.pointwise()) {
            double* dst = cols.get() + (rec ? n * K * P : 0);
            im2col(xn, g, dst);
            cn = dst;
        }
        CMapR cm(cn, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
        MapR om(out.data().data() + n * g.cout * P, static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(P));
        om.noalias() = wm * cm;
        om.colwise() += bv;
    }

    if (rec) {
        tape->record({input, weight, bias}, out, [input = Tensor(input), weight = Tensor(weight), bias = Tensor(bias), out, cols, g]() mutable {
            const auto K = g.k();
            const auto P = g.p();
            const auto gout = std::as_const(out).grad();
            CMapR wm(weight.data().data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(K));
            std::unique_ptr<double[]> dcols(input.requires_grad() && !g.pointwise() ? new double[K * P] : nullptr);
            for (std::size_t n = 0; n < g.n; ++n) {
                CMapR gm(gout.data() + n * g.cout * P, static_cast<Eigen::Index>(g.cout),
                         static_cast<Eigen::Index>(P));
                const double* cn = g.pointwise() ? input.data().data() + n * g.cin * g.h * g.w
                                                 : cols.get() + n * K * P;
                CMapR cm(cn, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
                if (weight.requires_grad()) {
                    MapR dw(weight.grad().data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(K));
                    dw.noalias() += gm * cm.transpose();
                }
                if (bias.requires_grad()) {
                    VecMap db(bias.grad().data(), static_cast<Eigen::Index>(g.cout));
                    db += gm.rowwise().sum();
                }
                if (input.requires_grad()) {
                    double* dxn = input.grad().data() + n * g.cin * g.h * g.w;
                    if (g.pointwise()) {
                        MapR dx(dxn, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
                        dx.noalias() += wm.transpose() * gm;
                    } else {
                        MapR dc(dcols.get(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
                        dc.noalias() = wm.transpose() * gm;
                        col2im_add(dcols.get(), g, dxn);
                    }
                }
            }
        });
    }
    return out;
}

Tensor conv_transpose2d(Tape* tape, const Tensor& input, const Tensor& weight, const Tensor& bias)
{
    require_rank(input, 4, "conv_transpose2d", "input");
    require_rank(weight, 4, "conv_transpose2d", "weight");
    require_rank(bias, 1, "conv_transpose2d", "bias");
    const auto N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (weight.dim(0) != C || weight.dim(2) != 2 || weight.dim(3) != 2)
        throw std::invalid_argument("conv_transpose2d: weight " + shape_str(weight.shape()) +
                                    " must be [" + std::to_string(C) + ", Cout, 2, 2]");
    const auto Cout = weight.dim(1);
    if (bias.dim(0) != Cout)
        throw std::invalid_argument("conv_transpose2d: bias " + shape_str(bias.shape()) + " does not match Cout");

    const bool rec = recording(tape, {&input, &weight, &bias});
    Tensor out({N, Cout, 2 * H, 2 * W}, 0.0, rec);
    const auto HW = H * W;
    const auto R = Cout * 4;
    CMapR wm(weight.data().data(), static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(R));
    MatR y(static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(HW));
    for (std::size_t n = 0; n < N; ++n) {
        CMapR xm(input.data().data() + n * C * HW, static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(HW));
        y.noalias() = wm.transpose() * xm;
        double* on = out.data().data() + n * Cout * 4 * HW;
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t a = 0; a < 2; ++a)
                for (std::size_t b = 0; b < 2; ++b) {
                    const double* yr = y.data() + (co * 4 + a * 2 + b) * HW;
                    for (std::size_t i = 0; i < H; ++i)
                        for (std::size_t j = 0; j < W; ++j)
                            on[(co * 2 * H + 2 * i + a) * 2 * W + 2 * j + b] = yr[i * W + j] + bias[co];
                }
    }

    if (rec) {
        tape->record({input, weight, bias}, out, [input = Tensor(input), weight = Tensor(weight), bias = Tensor(bias), out, N, C, H, W, Cout]() mutable {
            const auto HW = H * W;
            const auto R = Cout * 4;
            const auto gout = std::as_const(out).grad();
            MatR gy(static_cast<Eigen::Index>(R), static_cast<Eigen::Index>(HW));
            CMapR wm(weight.data().data(), static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(R));
            for (std::size_t n = 0; n < N; ++n) {
                const double* gn = gout.data() + n * Cout * 4 * HW;
                for (std::size_t co = 0; co < Cout; ++co)
                    for (std::size_t a = 0; a < 2; ++a)
                        for (std::size_t b = 0; b < 2; ++b) {
                            double* row = gy.data() + (co * 4 + a * 2 + b) * HW;
                            for (std::size_t i = 0; i < H; ++i)
                                for (std::size_t j = 0; j < W; ++j)
                                    row[i * W + j] = gn[(co * 2 * H + 2 * i + a) * 2 * W + 2 * j + b];
                        }
                CMapR xm(input.data().data() + n * C * HW, static_cast<Eigen::Index>(C),
                         static_cast<Eigen::Index>(HW));
                if (input.requires_grad()) {
                    MapR dx(input.grad().data() + n * C * HW, static_cast<Eigen::Index>(C),
                            static_cast<Eigen::Index>(HW));
                    dx.noalias() += wm * gy;
                }
                if (weight.requires_grad()) {
                    MapR dw(weight.grad().data(), static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(R));
                    dw.noalias() += xm * gy.transpose();
                }
                if (bias.requires_grad()) {
                    auto db = bias.grad();
                    for (std::size_t co = 0; co < Cout; ++co) {
                        const double* row = gy.data() + co * 4 * HW;
                        double s = 0.0;
                        for (std::size_t k = 0; k < 4 * HW; ++k)
                            s += row[k];
                        db[co] += s;
                    }
                }
            }
        });
    }
    return out;
}

Tensor maxpool2(Tape* tape, const Tensor& input)
{
    require_rank(input, 4, "maxpool2", "input");
    const auto N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
        throw std::invalid_argument("maxpool2: spatial dims must be even, got " + shape_str(input.shape()));
    const auto Ho = H / 2, Wo = W / 2;
    const bool rec = recording(tape, {&input});
    Tensor out({N, C, Ho, Wo}, 0.0, rec);
    auto argmax = std::make_shared<std::vector<std::size_t>>(rec ? out.numel() : 0);

    const double* x = input.data().data();
    double* o = out.data().data();
    for (std::size_t nc = 0; nc < N * C; ++nc)
        for (std::size_t i = 0; i < Ho; ++i)
            for (std::size_t j = 0; j < Wo; ++j) {
                const std::size_t base = nc * H * W + 2 * i * W + 2 * j;
                const std::size_t cand[4] = {base, base + 1, base + W, base + W + 1};
                std::size_t best = cand[0];
                for (int k = 1; k < 4; ++k)
                    if (x[cand[k]] > x[best] || std::isnan(x[cand[k]]))
                        best = cand[k];
                const std::size_t oi = (nc * Ho + i) * Wo + j;
                o[oi] = x[best];
                if (rec)
                    (*argmax)[oi] = best;
            }

    if (rec) {
        tape->record({input}, out, [input = Tensor(input), out, argmax]() mutable {
            const auto gout = std::as_const(out).grad();
            auto dx = input.grad();
            for (std::size_t i = 0; i < gout.size(); ++i)
                dx[(*argmax)[i]] += gout[i];
        });
    }
    return out;
}

Tensor relu(Tape* tape, const Tensor& input)
{
    const bool rec = recording(tape, {&input});
    Tensor out(input.shape(), 0.0, rec);
    const auto x = input.data();
    auto o = out.data();
    for (std::size_t i = 0; i < x.size(); ++i)
        o[i] = x[i] < 0.0 ? 0.0 : x[i]; // NaN passes through
    if (rec) {
        tape->record({input}, out, [input = Tensor(input), out]() mutable {
            const auto gout = std::as_const(out).grad();
            const auto x = input.data();
            auto dx = input.grad();
            for (std::size_t i = 0; i < x.size(); ++i)
                if (x[i] > 0.0)
                    dx[i] += gout[i];
        });
    }
    return out;
}

Tensor batchnorm(Tape* tape, const Tensor& input, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                 Mode mode)
{
    require_rank(input, 4, "batchnorm", "input");
    const auto N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
    if (gamma.numel() != C || beta.numel() != C || state.running_mean.size() != C || state.running_var.size() != C)
        throw std::invalid_argument("batchnorm: parameter/state sizes do not match " + std::to_string(C) +
                                    " channels");
    const std::size_t M = N * HW;
    if (mode == Mode::train && M < 2)
        throw std::invalid_argument("batchnorm: train mode needs at least 2 values per channel");

    const bool rec = recording(tape, {&input, &gamma, &beta});
    Tensor out(input.shape(), 0.0, rec);
    auto xhat = std::make_shared<std::vector<double>>(input.numel());
    auto inv_std = std::make_shared<std::vector<double>>(C);

    const double* x = input.data().data();
    double* o = out.data().data();
    for (std::size_t c = 0; c < C; ++c) {
        double mean = 0.0, var = 0.0;
        if (mode == Mode::train) {
            for (std::size_t n = 0; n < N; ++n) {
                const double* xc = x + (n * C + c) * HW;
                for (std::size_t k = 0; k < HW; ++k)
                    mean += xc[k];
            }
            mean /= static_cast<double>(M);
            // Second-pass correction makes the mean exact for constant channels.
            double resid = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const double* xc = x + (n * C + c) * HW;
                for (std::size_t k = 0; k < HW; ++k)
                    resid += xc[k] - mean;
            }
            mean += resid / static_cast<double>(M);
            for (std::size_t n = 0; n < N; ++n) {
                const double* xc = x + (n * C + c) * HW;
                for (std::size_t k = 0; k < HW; ++k) {
                    const double d = xc[k] - mean;
                    var += d * d;
                }
            }
            var /= static_cast<double>(M);
            state.running_mean[c] = (1.0 - state.momentum) * state.running_mean[c] + state.momentum * mean;
            state.running_var[c] = (1.0 - state.momentum) * state.running_var[c] + state.momentum * var;
        } else {
            mean = state.running_mean[c];
            var = state.running_var[c];
        }
        const double is = 1.0 / std::sqrt(var + state.eps);
        (*inv_std)[c] = is;
        for (std::size_t n = 0; n < N; ++n) {
            const std::size_t off = (n * C + c) * HW;
            for (std::size_t k = 0; k < HW; ++k) {
                const double xh = (x[off + k] - mean) * is;
                (*xhat)[off + k] = xh;
                o[off + k] = gamma[c] * xh + beta[c];
            }
        }
    }

    if (rec) {
        tape->record({input, gamma, beta}, out, [input = Tensor(input), gamma = Tensor(gamma), beta = Tensor(beta), out, xhat, inv_std, N, C, HW, M, mode]() mutable {
            const auto gout = std::as_const(out).grad();
            for (std::size_t c = 0; c < C; ++c) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t off = (n * C + c) * HW;
                    for (std::size_t k = 0; k < HW; ++k) {
                        sum_dy += gout[off + k];
                        sum_dy_xhat += gout[off + k] * (*xhat)[off + k];
                    }
                }
                if (gamma.requires_grad())
                    gamma.grad()[c] += sum_dy_xhat;
                if (beta.requires_grad())
                    beta.grad()[c] += sum_dy;
                if (!input.requires_grad())
                    continue;
                auto dx = input.grad();
                const double g = gamma[c];
                const double is = (*inv_std)[c];
                if (mode == Mode::eval) {
                    for (std::size_t n = 0; n < N; ++n) {
                        const std::size_t off = (n * C + c) * HW;
                        for (std::size_t k = 0; k < HW; ++k)
                            dx[off + k] += gout[off + k] * g * is;
                    }
                    continue;
                }
                const double m = static_cast<double>(M);
                const double scale = g * is / m;
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t off = (n * C + c) * HW;
                    for (std::size_t k = 0; k < HW; ++k)
                        dx[off + k] += scale * (m * gout[off + k] - sum_dy - (*xhat)[off + k] * sum_dy_xhat);
                }
            }
        });
    }
    return out;
}

Tensor softmax_channels(Tape* tape, const Tensor& input)
{
    require_rank(input, 4, "softmax_channels", "input");
    const auto N = input.dim(0), K = input.dim(1), HW = input.dim(2) * input.dim(3);
    if (K < 2)
        throw std::invalid_argument("softmax_channels: needs at least 2 channels");
    const bool rec = recording(tape, {&input});
    Tensor out(input.shape(), 0.0, rec);
    const double* x = input.data().data();
    double* p = out.data().data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t s = 0; s < HW; ++s) {
            const std::size_t base = n * K * HW + s;
            double mx = x[base];
            for (std::size_t k = 1; k < K; ++k)
                mx = std::max(mx, x[base + k * HW]);
            double z = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
                const double e = std::exp(x[base + k * HW] - mx);
                p[base + k * HW] = e;
                z += e;
            }
            for (std::size_t k = 0; k < K; ++k)
                p[base + k * HW] /= z;
        }

    if (rec) {
        tape->record({input}, out, [input = Tensor(input), out, N, K, HW]() mutable {
            const auto gout = std::as_const(out).grad();
            const auto p = std::as_const(out).data();
            auto dx = input.grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t s = 0; s < HW; ++s) {
                    const std::size_t base = n * K * HW + s;
                    double dot = 0.0;
                    for (std::size_t k = 0; k < K; ++k)
                        dot += p[base + k * HW] * gout[base + k * HW];
                    for (std::size_t k = 0; k < K; ++k)
                        dx[base + k * HW] += p[base + k * HW] * (gout[base + k * HW] - dot);
                }
        });
    }
    return out;
}

Tensor weighted_cross_entropy(Tape* tape, const Tensor& probs, std::span<const std::uint8_t> labels,
                              std::span<const double> class_weights, std::uint8_t ignore_id)
{
    require_rank(probs, 4, "weighted_cross_entropy", "probs");
    const auto N = probs.dim(0), K = probs.dim(1), HW = probs.dim(2) * probs.dim(3);
    if (labels.size() != N * HW)
        throw std::invalid_argument("weighted_cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for probability map " + shape_str(probs.shape()));
    if (class_weights.size() != K)
        throw std::invalid_argument("weighted_cross_entropy: expected " + std::to_string(K) + " class weights");

    // Floor keeps -log finite when a probability underflows to zero.
    static constexpr double kFloor = std::numeric_limits<double>::min();
    std::size_t count = 0;
    double total = 0.0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t s = 0; s < HW; ++s) {
            const auto l = labels[n * HW + s];
            if (l == ignore_id)
                continue;
            if (l >= K)
                throw std::invalid_argument("weighted_cross_entropy: label " + std::to_string(l) + " at pixel " +
                                            std::to_string(n * HW + s) + " is neither a class nor the ignore id");
            const double p = std::max(probs[n * K * HW + l * HW + s], kFloor);
            total += class_weights[l] * -std::log(p);
            ++count;
        }

    const bool rec = recording(tape, {&probs});
    Tensor loss = Tensor::scalar(count ? total / static_cast<double>(count) : 0.0, rec);
    if (rec) {
        std::vector<std::uint8_t> lab(labels.begin(), labels.end());
        std::vector<double> w(class_weights.begin(), class_weights.end());
        tape->record({probs}, loss, [probs = Tensor(probs), loss, lab = std::move(lab), w = std::move(w), N, K, HW, count,
                                     ignore_id]() mutable {
            if (count == 0)
                return;
            const double g = std::as_const(loss).grad()[0] / static_cast<double>(count);
            auto dp = probs.grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t s = 0; s < HW; ++s) {
                    const auto l = lab[n * HW + s];
                    if (l == ignore_id)
                        continue;
                    const std::size_t idx = n * K * HW + l * HW + s;
                    dp[idx] -= g * w[l] / std::max(probs[idx], kFloor);
                }
        });
    }
    return loss;
}

Tensor concat_channels(Tape* tape, const Tensor& a, const Tensor& b)
{
    require_rank(a, 4, "concat_channels", "first input");
    require_rank(b, 4, "concat_channels", "second input");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw std::invalid_argument("concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    const auto N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
    const bool rec = recording(tape, {&a, &b});
    Tensor out({N, Ca + Cb, a.dim(2), a.dim(3)}, 0.0, rec);
    for (std::size_t n = 0; n < N; ++n) {
        std::copy_n(a.data().data() + n * Ca * HW, Ca * HW, out.data().data() + n * (Ca + Cb) * HW);
        std::copy_n(b.data().data() + n * Cb * HW, Cb * HW, out.data().data() + (n * (Ca + Cb) + Ca) * HW);
    }
    if (rec) {
        tape->record({a, b}, out, [a = Tensor(a), b = Tensor(b), out, N, Ca, Cb, HW]() mutable {
            const auto gout = std::as_const(out).grad();
            for (std::size_t n = 0; n < N; ++n) {
                const double* gn = gout.data() + n * (Ca + Cb) * HW;
                if (a.requires_grad()) {
                    double* da = a.grad().data() + n * Ca * HW;
                    for (std::size_t k = 0; k < Ca * HW; ++k)
                        da[k] += gn[k];
                }
                if (b.requires_grad()) {
                    double* db = b.grad().data() + n * Cb * HW;
                    for (std::size_t k = 0; k < Cb * HW; ++k)
                        db[k] += gn[Ca * HW + k];
                }
            }
        });
    }
    return out;
}

Tensor sum(Tape* tape, const Tensor& input)
{
    double s = 0.0;
    for (double v : input.data())
        s += v;
    const bool rec = recording(tape, {&input});
    Tensor out = Tensor::scalar(s, rec);
    if (rec) {
        tape->record({input}, out, [input = Tensor(input), out]() mutable {
            const double g = std::as_const(out).grad()[0];
            for (double& d : input.grad())
                d += g;
        });
    }
    return out;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b)
{
    if (a.shape() != b.shape())
        throw std::invalid_argument("mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                                    " differ");
    const bool rec = recording(tape, {&a, &b});
    Tensor out(a.shape(), 0.0, rec);
    for (std::size_t i = 0; i < a.numel(); ++i)
        out[i] = a[i] * b[i];
    if (rec) {
        tape->record({a, b}, out, [a = Tensor(a), b = Tensor(b), out]() mutable {
            const auto gout = std::as_const(out).grad();
            // Read both operands before writing, so mul(x, x) sees unmodified values.
            if (a.requires_grad()) {
                auto da = a.grad();
                for (std::size_t i = 0; i < gout.size(); ++i)
                    da[i] += gout[i] * b[i];
            }
            if (b.requires_grad()) {
                auto db = b.grad();
                for (std::size_t i = 0; i < gout.size(); ++i)
                    db[i] += gout[i] * a[i];
            }
        });
    }
    return out;
}

Tensor channel_mean(Tape* tape, const Tensor& input, std::size_t channel)
{
    require_rank(input, 4, "channel_mean", "input");
    const auto N = input.dim(0), C = input.dim(1), HW = input.dim(2) * input.dim(3);
    if (channel >= C)
        throw std::invalid_argument("channel_mean: channel " + std::to_string(channel) + " out of range for " +
                                    shape_str(input.shape()));
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t k = 0; k < HW; ++k)
            s += input[(n * C + channel) * HW + k];
    const double m = static_cast<double>(N * HW);
    const bool rec = recording(tape, {&input});
    Tensor out = Tensor::scalar(s / m, rec);
    if (rec) {
        tape->record({input}, out, [input = Tensor(input), out, N, C, HW, channel, m]() mutable {
            const double g = std::as_const(out).grad()[0] / m;
            auto dx = input.grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t k = 0; k < HW; ++k)
                    dx[(n * C + channel) * HW + k] += g;
        });
    }
    return out;
}

Tensor element(Tape* tape, const Tensor& input, std::size_t index)
{
    if (index >= input.numel())
        throw std::invalid_argument("element: index " + std::to_string(index) + " out of range for " +
                                    shape_str(input.shape()));
    const bool rec = recording(tape, {&input});
    Tensor out = Tensor::scalar(input[index], rec);
    if (rec) {
        tape->record({input}, out, [input = Tensor(input), out, index]() mutable {
            input.grad()[index] += std::as_const(out).grad()[0];
        });
    }
    return out;
}

} // namespace stainseg::ops
