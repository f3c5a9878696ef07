#include "nsi/nn.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace nsi {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;
using StrideRM = Eigen::OuterStride<>;

// ---- linear / broadcast (declared in tensor.hpp) ---------------------------

Tensor linear(Graph& g, const Tensor& x, const Tensor& w) {
    if (x.rank() != 2 || w.rank() != 2)
        throw dim_error("linear: expected rank-2 inputs, got " + shape_str(x.shape()) + " and " +
                        shape_str(w.shape()));
    if (x.dim(1) != w.dim(1))
        throw dim_error("linear: inner axis mismatch, x axis 1 = " + std::to_string(x.dim(1)) +
                        " vs w axis 1 = " + std::to_string(w.dim(1)));
    const std::int64_t B = x.dim(0), D = x.dim(1), N = w.dim(0);
    Tensor out({B, N}, x.requires_grad() || w.requires_grad());
    CMapRM xm(x.data(), B, D), wm(w.data(), N, D);
    MapRM om(out.data(), B, N);
    om.noalias() = xm * wm.transpose();
    NSI_DEBUG_CHECK_FINITE(out, "linear");
    if (out.requires_grad()) {
        g.record(out, [x, w, out, B, D, N]() {
            CMapRM go(out.grad(), B, N);
            if (x.requires_grad()) {
                MapRM gx(const_cast<Tensor&>(x).grad(), B, D);
                CMapRM wm(w.data(), N, D);
                gx.noalias() += go * wm;
            }
            if (w.requires_grad()) {
                MapRM gw(const_cast<Tensor&>(w).grad(), N, D);
                CMapRM xm(x.data(), B, D);
                gw.noalias() += go.transpose() * xm;
            }
        });
    }
    return out;
}

Tensor add_rowvec(Graph& g, const Tensor& x, const Tensor& v) {
    if (x.rank() != 2 || v.rank() != 1 || x.dim(1) != v.dim(0))
        throw dim_error("add_rowvec: " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
    const std::int64_t B = x.dim(0), N = x.dim(1);
    Tensor out({B, N}, x.requires_grad() || v.requires_grad());
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t n = 0; n < N; ++n) out.data()[b * N + n] = x.data()[b * N + n] + v.data()[n];
    if (out.requires_grad()) {
        g.record(out, [x, v, out, B, N]() {
            const double* go = out.grad();
            if (x.requires_grad()) {
                double* gx = const_cast<Tensor&>(x).grad();
                for (std::int64_t i = 0; i < B * N; ++i) gx[i] += go[i];
            }
            if (v.requires_grad()) {
                double* gv = const_cast<Tensor&>(v).grad();
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t n = 0; n < N; ++n) gv[n] += go[b * N + n];
            }
        });
    }
    return out;
}

// ---- conv2d ----------------------------------------------------------------

namespace {

// col[(c*kh+u)*kw+v, i*Wo+j] = input[b,c,i+u,j+v]
void im2col(const double* in, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
            std::int64_t kw, std::int64_t Ho, std::int64_t Wo, MatRM& col) {
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t u = 0; u < kh; ++u)
            for (std::int64_t v = 0; v < kw; ++v) {
                double* dst = col.data() + ((c * kh + u) * kw + v) * (Ho * Wo);
                const double* src = in + c * H * W + u * W + v;
                for (std::int64_t i = 0; i < Ho; ++i)
                    for (std::int64_t j = 0; j < Wo; ++j) dst[i * Wo + j] = src[i * W + j];
            }
}

void col2im_add(const MatRM& col, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
                std::int64_t kw, std::int64_t Ho, std::int64_t Wo, double* out) {
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t u = 0; u < kh; ++u)
            for (std::int64_t v = 0; v < kw; ++v) {
                const double* src = col.data() + ((c * kh + u) * kw + v) * (Ho * Wo);
                double* dst = out + c * H * W + u * W + v;
                for (std::int64_t i = 0; i < Ho; ++i)
                    for (std::int64_t j = 0; j < Wo; ++j) dst[i * W + j] += src[i * Wo + j];
            }
}

}  // namespace

Tensor conv2d(Graph& g, const Tensor& input, const Tensor& kernel) {
    if (input.rank() != 4)
        throw dim_error("conv2d: input must be [B,C,H,W], got " + shape_str(input.shape()));
    if (kernel.rank() != 4)
        throw dim_error("conv2d: kernel must be [O,C,kh,kw], got " + shape_str(kernel.shape()));
    const std::int64_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::int64_t O = kernel.dim(0), Ck = kernel.dim(1), kh = kernel.dim(2),
                       kw = kernel.dim(3);
    if (C != Ck)
        throw dim_error("conv2d: channel mismatch, input axis 1 = " + std::to_string(C) +
                        " vs kernel axis 1 = " + std::to_string(Ck));
    if (kh > H || kw > W)
        throw dim_error("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                        " exceeds input " + std::to_string(H) + "x" + std::to_string(W) +
                        " on spatial axes 2,3");
    const std::int64_t Ho = H - kh + 1, Wo = W - kw + 1;
    Tensor out({B, O, Ho, Wo}, input.requires_grad() || kernel.requires_grad());

    CMapRM km(kernel.data(), O, C * kh * kw);
    MatRM col(C * kh * kw, Ho * Wo);
    for (std::int64_t b = 0; b < B; ++b) {
        im2col(input.data() + b * C * H * W, C, H, W, kh, kw, Ho, Wo, col);
        MapRM om(out.data() + b * O * Ho * Wo, O, Ho * Wo);
        om.noalias() = km * col;
    }
    NSI_DEBUG_CHECK_FINITE(out, "conv2d");

    if (out.requires_grad()) {
        g.record(out, [input, kernel, out, B, C, H, W, O, kh, kw, Ho, Wo]() {
            MatRM col(C * kh * kw, Ho * Wo);
            for (std::int64_t b = 0; b < B; ++b) {
                CMapRM go(out.grad() + b * O * Ho * Wo, O, Ho * Wo);
                if (kernel.requires_grad()) {
                    im2col(input.data() + b * C * H * W, C, H, W, kh, kw, Ho, Wo, col);
                    MapRM gk(const_cast<Tensor&>(kernel).grad(), O, C * kh * kw);
                    gk.noalias() += go * col.transpose();
                }
                if (input.requires_grad()) {
                    CMapRM km(kernel.data(), O, C * kh * kw);
                    col.noalias() = km.transpose() * go;
                    col2im_add(col, C, H, W, kh, kw, Ho, Wo,
                               const_cast<Tensor&>(input).grad() + b * C * H * W);
                }
            }
        });
    }
    return out;
}

// ---- batchnorm ---------------------------------------------------------------

BatchNorm::BatchNorm(std::int64_t channels) {
    gamma = Tensor::full({channels}, 1.0, true);
    beta = Tensor::zeros({channels}, true);
    running_mean = Tensor::zeros({channels});
    running_var = Tensor::full({channels}, 1.0);
}

Tensor batchnorm(Graph& g, const Tensor& x, BatchNorm& bn, Mode mode) {
    if (x.rank() != 4)
        throw dim_error("batchnorm: input must be [B,C,H,W], got " + shape_str(x.shape()));
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (C != bn.gamma.dim(0))
        throw dim_error("batchnorm: channel axis 1 = " + std::to_string(C) + " vs " +
                        std::to_string(bn.gamma.dim(0)) + " configured channels");
    const std::int64_t M = B * H * W;
    const std::int64_t HW = H * W;

    std::vector<double> mean(C), invstd(C);
    if (mode == Mode::train) {
        if (M < 2) throw contract_error("batchnorm: train mode needs B*H*W >= 2");
        for (std::int64_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::int64_t b = 0; b < B; ++b) {
                const double* p = x.data() + (b * C + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) s += p[i];
            }
            const double mu = s / M;
            double v = 0.0;
            for (std::int64_t b = 0; b < B; ++b) {
                const double* p = x.data() + (b * C + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) v += (p[i] - mu) * (p[i] - mu);
            }
            v /= M;
            mean[c] = mu;
            invstd[c] = 1.0 / std::sqrt(v + bn.eps);
            bn.running_mean.data()[c] = (1.0 - bn.momentum) * bn.running_mean.data()[c] +
                                        bn.momentum * mu;
            bn.running_var.data()[c] = (1.0 - bn.momentum) * bn.running_var.data()[c] +
                                       bn.momentum * v;
        }
        bn.initialized = true;
    } else {
        if (!bn.initialized)
            throw contract_error("batchnorm: eval mode before any train-mode call "
                                 "(uninitialized running statistics)");
        for (std::int64_t c = 0; c < C; ++c) {
            mean[c] = bn.running_mean.data()[c];
            invstd[c] = 1.0 / std::sqrt(bn.running_var.data()[c] + bn.eps);
        }
    }

    Tensor out(x.shape(),
               x.requires_grad() || bn.gamma.requires_grad() || bn.beta.requires_grad());
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const double* p = x.data() + (b * C + c) * HW;
            double* q = out.data() + (b * C + c) * HW;
            const double gm = bn.gamma.data()[c], bt = bn.beta.data()[c];
            const double mu = mean[c], is = invstd[c];
            for (std::int64_t i = 0; i < HW; ++i) q[i] = gm * (p[i] - mu) * is + bt;
        }
    NSI_DEBUG_CHECK_FINITE(out, "batchnorm");

    if (out.requires_grad()) {
        Tensor gamma = bn.gamma, beta = bn.beta;
        g.record(out, [x, gamma, beta, out, mean, invstd, mode, B, C, HW, M]() {
            const double* go = out.grad();
            for (std::int64_t c = 0; c < C; ++c) {
                const double mu = mean[c], is = invstd[c], gm = gamma.data()[c];
                double sum_go = 0.0, sum_go_xh = 0.0;
                for (std::int64_t b = 0; b < B; ++b) {
                    const double* p = x.data() + (b * C + c) * HW;
                    const double* q = go + (b * C + c) * HW;
                    for (std::int64_t i = 0; i < HW; ++i) {
                        sum_go += q[i];
                        sum_go_xh += q[i] * (p[i] - mu) * is;
                    }
                }
                if (gamma.requires_grad()) const_cast<Tensor&>(gamma).grad()[c] += sum_go_xh;
                if (beta.requires_grad()) const_cast<Tensor&>(beta).grad()[c] += sum_go;
                if (x.requires_grad()) {
                    double* gx = const_cast<Tensor&>(x).grad();
                    if (mode == Mode::train) {
                        for (std::int64_t b = 0; b < B; ++b) {
                            const double* p = x.data() + (b * C + c) * HW;
                            const double* q = go + (b * C + c) * HW;
                            double* r = gx + (b * C + c) * HW;
                            for (std::int64_t i = 0; i < HW; ++i) {
                                const double xh = (p[i] - mu) * is;
                                r[i] += gm * is *
                                        (q[i] - sum_go / M - xh * sum_go_xh / M);
                            }
                        }
                    } else {
                        // running stats are constants in eval mode
                        for (std::int64_t b = 0; b < B; ++b) {
                            const double* q = go + (b * C + c) * HW;
                            double* r = gx + (b * C + c) * HW;
                            for (std::int64_t i = 0; i < HW; ++i) r[i] += gm * is * q[i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---- factorized readout ------------------------------------------------------

Tensor readout_factorized(Graph& g, const Tensor& c, const Tensor& masks,
                          const Tensor& weights) {
    if (c.rank() != 4 || masks.rank() != 3 || weights.rank() != 2)
        throw config_error("readout_factorized: ranks must be c[B,K,Ho,Wo] masks[N,Ho,Wo] "
                           "weights[N,K], got " +
                           shape_str(c.shape()) + " " + shape_str(masks.shape()) + " " +
                           shape_str(weights.shape()));
    const std::int64_t B = c.dim(0), K = c.dim(1), Ho = c.dim(2), Wo = c.dim(3);
    const std::int64_t N = masks.dim(0);
    if (masks.dim(1) != Ho || masks.dim(2) != Wo)
        throw config_error("readout_factorized: mask grid " + std::to_string(masks.dim(1)) + "x" +
                           std::to_string(masks.dim(2)) + " does not match feature map grid " +
                           std::to_string(Ho) + "x" + std::to_string(Wo));
    if (weights.dim(0) != N || weights.dim(1) != K)
        throw config_error("readout_factorized: weights " + shape_str(weights.shape()) +
                           " vs N=" + std::to_string(N) + " K=" + std::to_string(K));
    const std::int64_t G = Ho * Wo;

    bool rg = c.requires_grad() || masks.requires_grad() || weights.requires_grad();
    Tensor out({B, N}, rg);
    MapRM om(out.data(), B, N);
    CMapRM mm(masks.data(), N, G);
    // spatial contraction per feature channel, kept for the backward pass
    auto t_k = std::make_shared<std::vector<MatRM>>();
    t_k->reserve(K);
    om.setZero();
    for (std::int64_t k = 0; k < K; ++k) {
        Eigen::Map<const MatRM, 0, StrideRM> ck(c.data() + k * G, B, G, StrideRM(K * G));
        t_k->emplace_back(ck * mm.transpose());  // [B,N]
        const MatRM& t = t_k->back();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t n = 0; n < N; ++n) om(b, n) += t(b, n) * weights.data()[n * K + k];
    }
    NSI_DEBUG_CHECK_FINITE(out, "readout_factorized");

    if (rg) {
        g.record(out, [c, masks, weights, out, t_k, B, K, N, G]() {
            CMapRM go(out.grad(), B, N);
            CMapRM mm(masks.data(), N, G);
            MatRM dt(B, N);
            for (std::int64_t k = 0; k < K; ++k) {
                const MatRM& t = (*t_k)[k];
                if (weights.requires_grad()) {
                    double* gw = const_cast<Tensor&>(weights).grad();
                    for (std::int64_t n = 0; n < N; ++n) {
                        double s = 0.0;
                        for (std::int64_t b = 0; b < B; ++b) s += go(b, n) * t(b, n);
                        gw[n * K + k] += s;
                    }
                }
                for (std::int64_t b = 0; b < B; ++b)
                    for (std::int64_t n = 0; n < N; ++n)
                        dt(b, n) = go(b, n) * weights.data()[n * K + k];
                if (masks.requires_grad()) {
                    MapRM gm(const_cast<Tensor&>(masks).grad(), N, G);
                    Eigen::Map<const MatRM, 0, StrideRM> ck(c.data() + k * G, B, G,
                                                            StrideRM(K * G));
                    gm.noalias() += dt.transpose() * ck;
                }
                if (c.requires_grad()) {
                    Eigen::Map<MatRM, 0, StrideRM> gc(const_cast<Tensor&>(c).grad() + k * G, B, G,
                                                      StrideRM(K * G));
                    gc.noalias() += dt * mm;
                }
            }
        });
    }
    return out;
}

// ---- kernel regularizers -----------------------------------------------------

namespace {

constexpr double kLaplacian[3][3] = {{0.5, 1.0, 0.5}, {1.0, -6.0, 1.0}, {0.5, 1.0, 0.5}};

// SAME-size convolution of one [kh,kw] slice with the 3x3 stencil, zero padding.
void same_conv3(const double* w, std::int64_t kh, std::int64_t kw, std::vector<double>& out) {
    out.assign(kh * kw, 0.0);
    for (std::int64_t i = 0; i < kh; ++i)
        for (std::int64_t j = 0; j < kw; ++j) {
            double s = 0.0;
            for (int du = -1; du <= 1; ++du)
                for (int dv = -1; dv <= 1; ++dv) {
                    const std::int64_t a = i + du, b = j + dv;
                    if (a < 0 || a >= kh || b < 0 || b >= kw) continue;
                    s += w[a * kw + b] * kLaplacian[du + 1][dv + 1];
                }
            out[i * kw + j] = s;
        }
}

}  // namespace

Tensor laplace_penalty(Graph& g, const Tensor& kernel, double lambda) {
    if (kernel.rank() != 4)
        throw dim_error("laplace_penalty: kernel must be [O,C,kh,kw], got " +
                        shape_str(kernel.shape()));
    const std::int64_t O = kernel.dim(0), C = kernel.dim(1), kh = kernel.dim(2),
                       kw = kernel.dim(3);
    if (kh < 3 || kw < 3)
        throw contract_error("laplace_penalty: kernel spatial extent must be >= 3, got " +
                             std::to_string(kh) + "x" + std::to_string(kw));
    double p = 0.0;
    std::vector<double> s;
    for (std::int64_t oc = 0; oc < O * C; ++oc) {
        same_conv3(kernel.data() + oc * kh * kw, kh, kw, s);
        for (double v : s) p += v * v;
    }
    Tensor out = Tensor::scalar(lambda * p);
    out.set_requires_grad(kernel.requires_grad());
    if (out.requires_grad()) {
        g.record(out, [kernel, out, lambda, O, C, kh, kw]() {
            const double go = out.grad()[0];
            double* gk = const_cast<Tensor&>(kernel).grad();
            std::vector<double> s, ss;
            for (std::int64_t oc = 0; oc < O * C; ++oc) {
                same_conv3(kernel.data() + oc * kh * kw, kh, kw, s);
                same_conv3(s.data(), kh, kw, ss);  // stencil is symmetric
                for (std::int64_t i = 0; i < kh * kw; ++i)
                    gk[oc * kh * kw + i] += go * 2.0 * lambda * ss[i];
            }
        });
    }
    return out;
}

Tensor group_sparsity(Graph& g, const Tensor& kernel, double lambda, GroupAxes axes) {
    if (kernel.rank() != 4)
        throw dim_error("group_sparsity: kernel must be [O,C,kh,kw], got " +
                        shape_str(kernel.shape()));
    const std::int64_t O = kernel.dim(0), C = kernel.dim(1), kh = kernel.dim(2),
                       kw = kernel.dim(3);
    const std::int64_t S = kh * kw, P = O * C;
    double total = 0.0;
    if (axes == GroupAxes::spatial) {
        for (std::int64_t s = 0; s < S; ++s) {
            double q = 0.0;
            for (std::int64_t p = 0; p < P; ++p) {
                const double v = kernel.data()[p * S + s];
                q += v * v;
            }
            total += std::sqrt(q);
        }
    } else {
        for (std::int64_t p = 0; p < P; ++p) {
            double q = 0.0;
            for (std::int64_t s = 0; s < S; ++s) {
                const double v = kernel.data()[p * S + s];
                q += v * v;
            }
            total += std::sqrt(q);
        }
    }
    Tensor out = Tensor::scalar(lambda * total);
    out.set_requires_grad(kernel.requires_grad());
    if (out.requires_grad()) {
        g.record(out, [kernel, out, lambda, S, P, axes]() {
            const double go = out.grad()[0];
            double* gk = const_cast<Tensor&>(kernel).grad();
            if (axes == GroupAxes::spatial) {
                for (std::int64_t s = 0; s < S; ++s) {
                    double q = 0.0;
                    for (std::int64_t p = 0; p < P; ++p) {
                        const double v = kernel.data()[p * S + s];
                        q += v * v;
                    }
                    const double norm = std::sqrt(q);
                    if (norm == 0.0) continue;
                    for (std::int64_t p = 0; p < P; ++p)
                        gk[p * S + s] += go * lambda * kernel.data()[p * S + s] / norm;
                }
            } else {
                for (std::int64_t p = 0; p < P; ++p) {
                    double q = 0.0;
                    for (std::int64_t s = 0; s < S; ++s) {
                        const double v = kernel.data()[p * S + s];
                        q += v * v;
                    }
                    const double norm = std::sqrt(q);
                    if (norm == 0.0) continue;
                    for (std::int64_t s = 0; s < S; ++s)
                        gk[p * S + s] += go * lambda * kernel.data()[p * S + s] / norm;
                }
            }
        });
    }
    return out;
}

}  // namespace nsi
