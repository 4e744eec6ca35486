#pragma once

// Dense NN primitives on Eigen matrices. Feature maps are stored as
// (batch*height*width) x channels matrices, column-major, so per-channel
// operations (normalization, masking, pooling) are column operations and
// convolution becomes one GEMM against an im2col matrix.

#include "trustcore/common.hpp"

#include <algorithm>
#include <cmath>

namespace trustcore {

template <class S>
struct FeatureMapT {
    MatT<S> act;  // (batch*h*w) x channels, row index (b*h + y)*w + x
    int batch = 0, h = 0, w = 0;
    int channels() const { return static_cast<int>(act.cols()); }
    Eigen::Index positions() const { return act.rows(); }
};

using FeatureMap = FeatureMapT<Real>;

// ---------------------------------------------------------------------------
// im2col / col2im for stride-1 convolutions with symmetric zero padding.
// Column j of the output corresponds to kernel tap (ky, kx) and input
// channel c with j = (ky*k + kx)*Cin + c.
// ---------------------------------------------------------------------------
template <class S>
void im2col(const MatT<S>& in, int B, int H, int W, int k, int pad, MatT<S>& col) {
    const int cin = static_cast<int>(in.cols());
    const std::size_t plane = static_cast<std::size_t>(B) * H * W;
    col.resize(static_cast<Eigen::Index>(plane), static_cast<Eigen::Index>(cin) * k * k);
    for (int ky = 0; ky < k; ++ky) {
        const int dy = ky - pad;
        for (int kx = 0; kx < k; ++kx) {
            const int dx = kx - pad;
            const int lo = std::max(0, -dx);
            const int hi = std::min(W, W - dx);
            for (int c = 0; c < cin; ++c) {
                S* dst = col.data() + (static_cast<std::size_t>((ky * k + kx) * cin + c)) * plane;
                const S* src = in.data() + static_cast<std::size_t>(c) * plane;
                for (int b = 0; b < B; ++b) {
                    for (int y = 0; y < H; ++y) {
                        S* drow = dst + (static_cast<std::size_t>(b) * H + y) * W;
                        const int yin = y + dy;
                        if (yin < 0 || yin >= H) {
                            std::fill(drow, drow + W, S(0));
                            continue;
                        }
                        const S* srow = src + (static_cast<std::size_t>(b) * H + yin) * W;
                        if (lo > 0) std::fill(drow, drow + lo, S(0));
                        if (hi > lo) std::copy(srow + lo + dx, srow + hi + dx, drow + lo);
                        if (hi < W) std::fill(drow + hi, drow + W, S(0));
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add gradient columns back onto the input map.
template <class S>
void col2im_add(const MatT<S>& dcol, int B, int H, int W, int k, int pad, MatT<S>& din) {
    const int cin = static_cast<int>(din.cols());
    const std::size_t plane = static_cast<std::size_t>(B) * H * W;
    for (int ky = 0; ky < k; ++ky) {
        const int dy = ky - pad;
        for (int kx = 0; kx < k; ++kx) {
            const int dx = kx - pad;
            const int lo = std::max(0, -dx);
            const int hi = std::min(W, W - dx);
            for (int c = 0; c < cin; ++c) {
                const S* src = dcol.data() + (static_cast<std::size_t>((ky * k + kx) * cin + c)) * plane;
                S* dst = din.data() + static_cast<std::size_t>(c) * plane;
                for (int b = 0; b < B; ++b) {
                    for (int y = 0; y < H; ++y) {
                        const int yin = y + dy;
                        if (yin < 0 || yin >= H) continue;
                        const S* srow = src + (static_cast<std::size_t>(b) * H + y) * W;
                        S* drow = dst + (static_cast<std::size_t>(b) * H + yin) * W;
                        for (int x = lo; x < hi; ++x) drow[x + dx] += srow[x];
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution (square kernel, stride 1, zero padding k/2, no bias; a
// normalization layer always follows). Weight layout (Cin*k*k) x Cout so
// one output channel is one column.
// ---------------------------------------------------------------------------
template <class S>
struct Conv2dT {
    MatT<S> weight;  // (in_c*k*k) x out_c
    int in_c = 0, out_c = 0, k = 3;

    Conv2dT() = default;
    Conv2dT(int in_channels, int out_channels, int kernel, Rng& rng)
        : in_c(in_channels), out_c(out_channels), k(kernel) {
        weight.resize(in_c * k * k, out_c);
        const S stddev = std::sqrt(S(2) / static_cast<S>(in_c * k * k));
        fill_normal(weight, rng, stddev);
    }

    struct Cache {
        MatT<S> col;  // im2col of the input
        int B = 0, H = 0, W = 0;
    };

    FeatureMapT<S> forward(const FeatureMapT<S>& in, Cache* cache) const {
        if (in.channels() != in_c) throw ShapeError("conv: channel mismatch");
        FeatureMapT<S> out;
        out.batch = in.batch;
        out.h = in.h;
        out.w = in.w;
        MatT<S> local;
        MatT<S>& col = cache ? cache->col : local;
        im2col(in.act, in.batch, in.h, in.w, k, k / 2, col);
        if (cache) {
            cache->B = in.batch;
            cache->H = in.h;
            cache->W = in.w;
        }
        out.act.noalias() = col * weight;
        return out;
    }

    // dweight is accumulated; din (optional) receives the input gradient.
    void backward(const Cache& cache, const MatT<S>& dout, MatT<S>& dweight,
                  MatT<S>* din) const {
        dweight.noalias() += cache.col.transpose() * dout;
        if (din) {
            MatT<S> dcol;
            dcol.noalias() = dout * weight.transpose();
            din->setZero(cache.col.rows(), in_c);
            col2im_add(dcol, cache.B, cache.H, cache.W, k, k / 2, *din);
        }
    }
};

// ---------------------------------------------------------------------------
// Per-channel batch normalization with affine (gamma, beta) and running
// statistics. Variance is biased everywhere.
// ---------------------------------------------------------------------------
template <class S>
struct BatchNormT {
    MatT<S> gamma, beta;          // C x 1
    MatT<S> run_mean, run_var;    // C x 1
    S momentum = S(0.1);
    S eps = S(1e-5);

    BatchNormT() = default;
    explicit BatchNormT(int channels) {
        gamma = MatT<S>::Ones(channels, 1);
        beta = MatT<S>::Zero(channels, 1);
        run_mean = MatT<S>::Zero(channels, 1);
        run_var = MatT<S>::Ones(channels, 1);
    }

    struct Cache {
        MatT<S> xhat;      // normalized input
        VecT<S> inv_std;   // per channel
        bool train = false;
    };

    void forward(MatT<S>& x, bool train_mode, Cache* cache) {
        if (!train_mode) {
            forward_eval(x, cache);
            return;
        }
        const auto n = static_cast<S>(x.rows());
        const int c = static_cast<int>(x.cols());
        if (cache) {
            cache->train = true;
            cache->inv_std.resize(c);
        }
        for (int j = 0; j < c; ++j) {
            auto colv = x.col(j);
            const S mu = colv.mean();
            const S var = (colv.array() - mu).square().sum() / n;
            run_mean(j, 0) = (S(1) - momentum) * run_mean(j, 0) + momentum * mu;
            run_var(j, 0) = (S(1) - momentum) * run_var(j, 0) + momentum * var;
            const S inv = S(1) / std::sqrt(var + eps);
            colv = (colv.array() - mu) * inv;
            if (cache) cache->inv_std(j) = inv;
        }
        if (cache) cache->xhat = x;
        for (int j = 0; j < c; ++j)
            x.col(j) = x.col(j).array() * gamma(j, 0) + beta(j, 0);
    }

    void forward_eval(MatT<S>& x, Cache* cache) const {
        const int c = static_cast<int>(x.cols());
        if (cache) {
            cache->train = false;
            cache->inv_std.resize(c);
        }
        for (int j = 0; j < c; ++j) {
            const S inv = S(1) / std::sqrt(run_var(j, 0) + eps);
            x.col(j) = (x.col(j).array() - run_mean(j, 0)) * inv;
            if (cache) cache->inv_std(j) = inv;
        }
        if (cache) cache->xhat = x;
        for (int j = 0; j < c; ++j)
            x.col(j) = x.col(j).array() * gamma(j, 0) + beta(j, 0);
    }

    void backward(const Cache& cache, const MatT<S>& dy, MatT<S>& dgamma, MatT<S>& dbeta,
                  MatT<S>* dx) const {
        const int c = static_cast<int>(dy.cols());
        const auto n = static_cast<S>(dy.rows());
        for (int j = 0; j < c; ++j) {
            const auto dyj = dy.col(j);
            const auto xh = cache.xhat.col(j);
            const S sum_dy = dyj.sum();
            const S sum_dy_xh = dyj.dot(xh);
            dgamma(j, 0) += sum_dy_xh;
            dbeta(j, 0) += sum_dy;
            if (!dx) continue;
            const S g = gamma(j, 0) * cache.inv_std(j);
            if (cache.train) {
                dx->col(j) = g * (dyj.array() - sum_dy / n - xh.array() * (sum_dy_xh / n));
            } else {
                dx->col(j) = g * dyj.array();
            }
        }
    }
};

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2 (odd remainders discarded).
// ---------------------------------------------------------------------------
template <class S>
struct PoolCacheT {
    Eigen::MatrixXi argmax;  // flat input row per output row, per channel
    int in_rows = 0;
};

template <class S>
FeatureMapT<S> maxpool2(const FeatureMapT<S>& in, PoolCacheT<S>* cache) {
    const int ho = in.h / 2, wo = in.w / 2, c = in.channels();
    FeatureMapT<S> out;
    out.batch = in.batch;
    out.h = ho;
    out.w = wo;
    out.act.resize(static_cast<Eigen::Index>(in.batch) * ho * wo, c);
    if (cache) {
        cache->argmax.resize(out.act.rows(), c);
        cache->in_rows = static_cast<int>(in.act.rows());
    }
    for (int j = 0; j < c; ++j) {
        const S* src = in.act.data() + static_cast<std::size_t>(j) * in.act.rows();
        S* dst = out.act.data() + static_cast<std::size_t>(j) * out.act.rows();
        for (int b = 0; b < in.batch; ++b) {
            for (int yo = 0; yo < ho; ++yo) {
                for (int xo = 0; xo < wo; ++xo) {
                    int best = (b * in.h + 2 * yo) * in.w + 2 * xo;
                    S bv = src[best];
                    const int cand[3] = {best + 1, best + in.w, best + in.w + 1};
                    for (int q : cand) {
                        if (src[q] > bv) {
                            bv = src[q];
                            best = q;
                        }
                    }
                    const int orow = (b * ho + yo) * wo + xo;
                    dst[orow] = bv;
                    if (cache) cache->argmax(orow, j) = best;
                }
            }
        }
    }
    return out;
}

template <class S>
void maxpool2_backward(const PoolCacheT<S>& cache, const MatT<S>& dout, MatT<S>& din) {
    const int c = static_cast<int>(dout.cols());
    din.setZero(cache.in_rows, c);
    for (int j = 0; j < c; ++j) {
        for (Eigen::Index r = 0; r < dout.rows(); ++r) {
            din(cache.argmax(r, j), j) += dout(r, j);
        }
    }
}

// Global average pooling: (B*H*W) x C -> B x C.
template <class S>
MatT<S> global_avg_pool(const FeatureMapT<S>& in) {
    const int hw = in.h * in.w, c = in.channels();
    MatT<S> emb(in.batch, c);
    for (int j = 0; j < c; ++j) {
        const S* src = in.act.data() + static_cast<std::size_t>(j) * in.act.rows();
        for (int b = 0; b < in.batch; ++b) {
            S s = 0;
            const S* p = src + static_cast<std::size_t>(b) * hw;
            for (int i = 0; i < hw; ++i) s += p[i];
            emb(b, j) = s / static_cast<S>(hw);
        }
    }
    return emb;
}

template <class S>
void global_avg_pool_backward(const MatT<S>& demb, int h, int w, MatT<S>& din) {
    const int hw = h * w;
    const int c = static_cast<int>(demb.cols());
    din.resize(static_cast<Eigen::Index>(demb.rows()) * hw, c);
    const S scale = S(1) / static_cast<S>(hw);
    for (int j = 0; j < c; ++j) {
        S* dst = din.data() + static_cast<std::size_t>(j) * din.rows();
        for (Eigen::Index b = 0; b < demb.rows(); ++b) {
            const S v = demb(b, j) * scale;
            std::fill(dst + b * hw, dst + (b + 1) * hw, v);
        }
    }
}

template <class S>
void relu_inplace(MatT<S>& x) {
    x = x.cwiseMax(S(0));
}

// dX = dY masked by (out > 0); uses the stored output.
template <class S>
void relu_backward(const MatT<S>& out, MatT<S>& dy) {
    dy = (out.array() > S(0)).select(dy, MatT<S>::Zero(dy.rows(), dy.cols()));
}

// ---------------------------------------------------------------------------
// Linear layer: y = x * W + b, W is in x out.
// ---------------------------------------------------------------------------
template <class S>
struct LinearT {
    MatT<S> weight;  // in x out
    MatT<S> bias;    // out x 1

    LinearT() = default;
    LinearT(int in, int out, Rng& rng) {
        weight.resize(in, out);
        fill_normal(weight, rng, std::sqrt(S(2) / static_cast<S>(in)));
        bias = MatT<S>::Zero(out, 1);
    }

    MatT<S> forward(const MatT<S>& x) const {
        MatT<S> y = x * weight;
        y.rowwise() += bias.col(0).transpose();
        return y;
    }

    void backward(const MatT<S>& x, const MatT<S>& dy, MatT<S>& dweight, MatT<S>& dbias,
                  MatT<S>* dx) const {
        dweight.noalias() += x.transpose() * dy;
        dbias.col(0) += dy.colwise().sum().transpose();
        if (dx) dx->noalias() = dy * weight.transpose();
    }
};

// ---------------------------------------------------------------------------
// Softmax cross-entropy.
// ---------------------------------------------------------------------------
template <class S>
VecT<S> cross_entropy_per_sample(const MatT<S>& logits, const VecXi& labels) {
    VecT<S> out(logits.rows());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const S mx = logits.row(i).maxCoeff();
        const S lse = std::log((logits.row(i).array() - mx).exp().sum()) + mx;
        out(i) = lse - logits(i, labels(static_cast<int>(i)));
    }
    return out;
}

// Mean loss over the batch; dlogits = (softmax - onehot) * scale / batch.
template <class S>
S cross_entropy_backward(const MatT<S>& logits, const VecXi& labels, MatT<S>& dlogits,
                         S scale = S(1)) {
    const auto b = logits.rows();
    dlogits.resize(b, logits.cols());
    S total = 0;
    for (Eigen::Index i = 0; i < b; ++i) {
        const S mx = logits.row(i).maxCoeff();
        Eigen::Array<S, 1, Eigen::Dynamic> e = (logits.row(i).array() - mx).exp();
        const S sum = e.sum();
        total += std::log(sum) + mx - logits(i, labels(static_cast<int>(i)));
        dlogits.row(i) = (e / sum).matrix() * (scale / static_cast<S>(b));
        dlogits(i, labels(static_cast<int>(i))) -= scale / static_cast<S>(b);
    }
    return total / static_cast<S>(b);
}

}  // namespace trustcore
