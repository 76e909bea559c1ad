#pragma once

#include <cmath>

#include "smoe/tensor.hpp"

namespace smoe {

// Layer primitives as free functions over Tensor. Forward routines return
// fresh tensors; backward routines take the upstream gradient plus whatever
// the forward cached and fill gradients for inputs and parameters. Conv and
// transpose conv lower onto im2col/col2im plus one Eigen product each way.

// ---- dense -----------------------------------------------------------------

// x: [N x in], w: [out x in], b: [out] -> [N x out]
template <typename S>
Tensor<S> dense_forward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
        throw DimensionError("dense_forward: x " + x.shape_string() + " does not conform with w " +
                             w.shape_string());
    if (b.size() != w.dim(0))
        throw DimensionError("dense_forward: bias " + b.shape_string() + " does not match w " +
                             w.shape_string());
    Tensor<S> y({x.dim(0), w.dim(0)});
    y.mat().noalias() = x.mat() * w.mat().transpose();
    y.mat().rowwise() += b.vec().transpose();
    return y;
}

template <typename S>
void dense_backward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& dy,
                    Tensor<S>& dx, Tensor<S>& dw, Tensor<S>& db) {
    dx = Tensor<S>(x.shape());
    dx.mat().noalias() = dy.mat() * w.mat();
    dw.mat().noalias() += dy.mat().transpose() * x.mat();
    db.vec().noalias() += dy.mat().colwise().sum().transpose();
}

// ---- activations -----------------------------------------------------------

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
    Tensor<S> y(x.shape());
    y.array() = x.array().max(S(0));
    return y;
}

// Uses the forward output; the mask (y > 0) equals (x > 0) except on the
// measure-zero kink.
template <typename S>
Tensor<S> relu_backward(const Tensor<S>& y, const Tensor<S>& dy) {
    Tensor<S> dx(y.shape());
    dx.array() = (y.array() > S(0)).template cast<S>() * dy.array();
    return dx;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
    Tensor<S> y(x.shape());
    y.array() = x.array().unaryExpr([](S v) {
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        const S e = std::exp(v);
        return e / (S(1) + e);
    });
    return y;
}

template <typename S>
Tensor<S> sigmoid_backward(const Tensor<S>& y, const Tensor<S>& dy) {
    Tensor<S> dx(y.shape());
    dx.array() = dy.array() * y.array() * (S(1) - y.array());
    return dx;
}

// Row-wise softmax with max subtraction; rows sum to one and stay strictly
// positive.
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
    Tensor<S> p(x.shape());
    auto xm = x.mat();
    auto pm = p.mat();
    for (Index r = 0; r < xm.rows(); ++r) {
        const S mx = xm.row(r).maxCoeff();
        pm.row(r) = (xm.row(r).array() - mx).exp();
        pm.row(r) /= pm.row(r).sum();
    }
    return p;
}

template <typename S>
Tensor<S> softmax_rows_backward(const Tensor<S>& p, const Tensor<S>& dp) {
    Tensor<S> dlogits(p.shape());
    auto pm = p.mat();
    auto dpm = dp.mat();
    auto dl = dlogits.mat();
    for (Index r = 0; r < pm.rows(); ++r) {
        const S inner = dpm.row(r).dot(pm.row(r));
        dl.row(r) = pm.row(r).array() * (dpm.row(r).array() - inner);
    }
    return dlogits;
}

// ---- conv geometry ---------------------------------------------------------

struct ConvGeom {
    Index channels, h, w;      // source image extents
    Index kh, kw, stride, pad; // kernel
    Index oh, ow;              // positions the kernel is placed at

    static ConvGeom forward(Index c, Index h, Index w, Index kh, Index kw, Index stride, Index pad) {
        if (h + 2 * pad < kh || w + 2 * pad < kw)
            throw DimensionError("conv geometry: padded input smaller than kernel");
        ConvGeom g{c, h, w, kh, kw, stride, pad, 0, 0};
        g.oh = (h + 2 * pad - kh) / stride + 1;
        g.ow = (w + 2 * pad - kw) / stride + 1;
        return g;
    }
    Index cols() const { return channels * kh * kw; }
    Index rows(Index n) const { return n * oh * ow; }
};

// Gather: src [N x C x H x W] -> [(N*oh*ow) x (C*kh*kw)], zero padding.
template <typename S>
Tensor<S> im2col(const Tensor<S>& src, const ConvGeom& g) {
    const Index n = src.dim(0);
    Tensor<S> cols({g.rows(n), g.cols()});
    S* out = cols.data();
    const S* in = src.data();
    const Index chw = g.channels * g.h * g.w;
    for (Index b = 0; b < n; ++b) {
        const S* img = in + b * chw;
        for (Index oy = 0; oy < g.oh; ++oy) {
            for (Index ox = 0; ox < g.ow; ++ox) {
                const Index y0 = oy * g.stride - g.pad;
                const Index x0 = ox * g.stride - g.pad;
                for (Index c = 0; c < g.channels; ++c) {
                    const S* plane = img + c * g.h * g.w;
                    for (Index i = 0; i < g.kh; ++i) {
                        const Index y = y0 + i;
                        for (Index j = 0; j < g.kw; ++j) {
                            const Index x = x0 + j;
                            *out++ = (y >= 0 && y < g.h && x >= 0 && x < g.w) ? plane[y * g.w + x] : S(0);
                        }
                    }
                }
            }
        }
    }
    return cols;
}

// Scatter-add: exact adjoint of im2col.
template <typename S>
Tensor<S> col2im(const Tensor<S>& cols, Index n, const ConvGeom& g) {
    Tensor<S> dst({n, g.channels, g.h, g.w});
    const S* in = cols.data();
    S* out = dst.data();
    const Index chw = g.channels * g.h * g.w;
    for (Index b = 0; b < n; ++b) {
        S* img = out + b * chw;
        for (Index oy = 0; oy < g.oh; ++oy) {
            for (Index ox = 0; ox < g.ow; ++ox) {
                const Index y0 = oy * g.stride - g.pad;
                const Index x0 = ox * g.stride - g.pad;
                for (Index c = 0; c < g.channels; ++c) {
                    S* plane = img + c * g.h * g.w;
                    for (Index i = 0; i < g.kh; ++i) {
                        const Index y = y0 + i;
                        for (Index j = 0; j < g.kw; ++j) {
                            const Index x = x0 + j;
                            if (y >= 0 && y < g.h && x >= 0 && x < g.w) plane[y * g.w + x] += *in;
                            ++in;
                        }
                    }
                }
            }
        }
    }
    return dst;
}

// [N x C x H x W] <-> [(N*H*W) x C] position-major views used by the
// transpose conv lowering.
template <typename S>
Tensor<S> nchw_to_pos_rows(const Tensor<S>& x) {
    const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<S> rows({n * h * w, c});
    for (Index b = 0; b < n; ++b)
        for (Index ch = 0; ch < c; ++ch) {
            const S* src = x.data() + (b * c + ch) * h * w;
            S* dst = rows.data() + b * h * w * c + ch;
            for (Index p = 0; p < h * w; ++p) dst[p * c] = src[p];
        }
    return rows;
}

template <typename S>
Tensor<S> pos_rows_to_nchw(const Tensor<S>& rows, Index n, Index c, Index h, Index w) {
    Tensor<S> x({n, c, h, w});
    for (Index b = 0; b < n; ++b)
        for (Index ch = 0; ch < c; ++ch) {
            S* dst = x.data() + (b * c + ch) * h * w;
            const S* src = rows.data() + b * h * w * c + ch;
            for (Index p = 0; p < h * w; ++p) dst[p] = src[p * c];
        }
    return x;
}

// ---- conv2d ----------------------------------------------------------------

// x: [N x C x H x W], kernel: [OC x C x kh x kw], bias: [OC].
// Cross-correlation; output extent floor((H + 2*pad - k) / stride) + 1.
template <typename S>
Tensor<S> conv2d_forward(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias,
                         Index stride, Index pad, Tensor<S>* cols_cache = nullptr) {
    if (x.rank() != 4 || kernel.rank() != 4)
        throw DimensionError("conv2d_forward: need rank-4 x and kernel, got x " + x.shape_string() +
                             ", kernel " + kernel.shape_string());
    if (x.dim(1) != kernel.dim(1))
        throw DimensionError("conv2d_forward: channel mismatch, x " + x.shape_string() + " vs kernel " +
                             kernel.shape_string());
    const Index n = x.dim(0), oc = kernel.dim(0);
    const auto g = ConvGeom::forward(x.dim(1), x.dim(2), x.dim(3), kernel.dim(2), kernel.dim(3), stride, pad);
    Tensor<S> cols = im2col(x, g);

    Tensor<S> ymat({g.rows(n), oc});
    ymat.mat().noalias() = cols.mat() * kernel.mat(oc, g.cols()).transpose();

    Tensor<S> y = pos_rows_to_nchw(ymat, n, oc, g.oh, g.ow);
    auto yrows = y.mat(n * oc, g.oh * g.ow);
    for (Index b = 0; b < n; ++b)
        for (Index c = 0; c < oc; ++c) yrows.row(b * oc + c).array() += bias[c];
    if (cols_cache) *cols_cache = std::move(cols);
    return y;
}

template <typename S>
void conv2d_backward(const std::vector<Index>& x_shape, const Tensor<S>& kernel, const Tensor<S>& cols,
                     const Tensor<S>& dy, Index stride, Index pad,
                     Tensor<S>& dx, Tensor<S>& dkernel, Tensor<S>& dbias) {
    const Index n = x_shape[0], oc = kernel.dim(0);
    const auto g = ConvGeom::forward(x_shape[1], x_shape[2], x_shape[3], kernel.dim(2), kernel.dim(3), stride, pad);
    Tensor<S> dymat = nchw_to_pos_rows(dy);

    dkernel.mat(oc, g.cols()).noalias() += dymat.mat().transpose() * cols.mat();
    dbias.vec().noalias() += dymat.mat().colwise().sum().transpose();

    Tensor<S> dcols({g.rows(n), g.cols()});
    dcols.mat().noalias() = dymat.mat() * kernel.mat(oc, g.cols());
    dx = col2im(dcols, n, g);
}

// ---- transpose conv --------------------------------------------------------

// x: [N x C x H x W], kernel: [C x OC x kh x kw], bias: [OC].
// Output extent (H - 1) * stride - 2*pad + kh; adjoint of conv2d with the
// same geometry, so it lowers onto col2im of one product.
template <typename S>
Tensor<S> tconv2d_forward(const Tensor<S>& x, const Tensor<S>& kernel, const Tensor<S>& bias,
                          Index stride, Index pad, Tensor<S>* pos_cache = nullptr) {
    if (x.rank() != 4 || kernel.rank() != 4 || x.dim(1) != kernel.dim(0))
        throw DimensionError("tconv2d_forward: channel mismatch, x " + x.shape_string() + " vs kernel " +
                             kernel.shape_string());
    const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const Index oc = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    const Index oh = (h - 1) * stride - 2 * pad + kh;
    const Index ow = (w - 1) * stride - 2 * pad + kw;
    const auto g = ConvGeom::forward(oc, oh, ow, kh, kw, stride, pad);
    if (g.oh != h || g.ow != w)
        throw DimensionError("tconv2d_forward: geometry does not invert a conv of the same parameters");

    Tensor<S> xrows = nchw_to_pos_rows(x);
    Tensor<S> prod({n * h * w, oc * kh * kw});
    prod.mat().noalias() = xrows.mat() * kernel.mat(c, oc * kh * kw);

    Tensor<S> y = col2im(prod, n, g);
    auto yrows = y.mat(n * oc, oh * ow);
    for (Index b = 0; b < n; ++b)
        for (Index ch = 0; ch < oc; ++ch) yrows.row(b * oc + ch).array() += bias[ch];
    if (pos_cache) *pos_cache = std::move(xrows);
    return y;
}

template <typename S>
void tconv2d_backward(const std::vector<Index>& x_shape, const Tensor<S>& kernel, const Tensor<S>& xrows,
                      const Tensor<S>& dy, Index stride, Index pad,
                      Tensor<S>& dx, Tensor<S>& dkernel, Tensor<S>& dbias) {
    const Index n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3];
    const Index oc = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    const auto g = ConvGeom::forward(oc, dy.dim(2), dy.dim(3), kh, kw, stride, pad);

    Tensor<S> dprod = im2col(dy, g);

    dkernel.mat(c, oc * kh * kw).noalias() += xrows.mat().transpose() * dprod.mat();
    auto dyrows = dy.mat(n * oc, dy.dim(2) * dy.dim(3));
    for (Index b = 0; b < n; ++b)
        for (Index ch = 0; ch < oc; ++ch) dbias[ch] += dyrows.row(b * oc + ch).sum();

    Tensor<S> dxrows({n * h * w, c});
    dxrows.mat().noalias() = dprod.mat() * kernel.mat(c, oc * kh * kw).transpose();
    dx = pos_rows_to_nchw(dxrows, n, c, h, w);
}

} // namespace smoe
