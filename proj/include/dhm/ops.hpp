#pragma once

#include <algorithm>
#include <type_traits>
#include <cmath>
#include <limits>
#include <vector>

#include "dhm/gemm.hpp"
#include "dhm/tensor.hpp"

namespace dhm::ops {

namespace detail_ops {

template <class T>
bool recording() {
    return Tape<T>::current() != nullptr;
}

template <class T>
void record(std::function<void()> fn) {
    Tape<T>::current()->record(std::move(fn));
}

struct ConvDims {
    int n, c, h, w, o, kh, kw, stride, pad, oh, ow;
    int patch() const { return c * kh * kw; }
    int pixels() const { return oh * ow; }
};

template <class T>
ConvDims conv_dims(const Tensor<T>& input, const Tensor<T>& kernel, int stride, int padding) {
    if (input.ndim() != 4) throw ShapeError("conv2d input must be [N,C,H,W], got " + shape_str(input.shape()));
    if (kernel.ndim() != 4) throw ShapeError("conv2d kernel must be [O,C,kH,kW], got " + shape_str(kernel.shape()));
    if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
    if (padding < 0) throw ShapeError("conv2d padding must be >= 0");
    ConvDims d{input.dim(0), input.dim(1), input.dim(2), input.dim(3),
               kernel.dim(0), kernel.dim(2), kernel.dim(3), stride, padding, 0, 0};
    if (kernel.dim(1) != d.c)
        throw ShapeError("conv2d channels: input " + shape_str(input.shape()) + " vs kernel " +
                         shape_str(kernel.shape()));
    if (d.kh > d.h + 2 * d.pad || d.kw > d.w + 2 * d.pad)
        throw ShapeError("conv2d kernel larger than padded input");
    d.oh = (d.h + 2 * d.pad - d.kh) / d.stride + 1;
    d.ow = (d.w + 2 * d.pad - d.kw) / d.stride + 1;
    return d;
}

// col[C*kH*kW, N*oh*ow], one column per output pixel of every sample.
template <class T>
void im2col(const ConvDims& d, const T* in, T* col) {
    const int P = d.pixels();
    const std::size_t NP = static_cast<std::size_t>(d.n) * P;
    for (int c = 0; c < d.c; ++c) {
        for (int ky = 0; ky < d.kh; ++ky) {
            for (int kx = 0; kx < d.kw; ++kx) {
                T* row = col + (static_cast<std::size_t>((c * d.kh + ky) * d.kw + kx)) * NP;
                for (int b = 0; b < d.n; ++b) {
                    const T* img = in + (static_cast<std::size_t>(b) * d.c + c) * d.h * d.w;
                    T* dst = row + static_cast<std::size_t>(b) * P;
                    for (int oy = 0; oy < d.oh; ++oy) {
                        const int iy = oy * d.stride + ky - d.pad;
                        if (iy < 0 || iy >= d.h) {
                            for (int ox = 0; ox < d.ow; ++ox) dst[oy * d.ow + ox] = T(0);
                            continue;
                        }
                        const T* src = img + static_cast<std::size_t>(iy) * d.w;
                        for (int ox = 0; ox < d.ow; ++ox) {
                            const int ix = ox * d.stride + kx - d.pad;
                            dst[oy * d.ow + ox] = (ix < 0 || ix >= d.w) ? T(0) : src[ix];
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const ConvDims& d, const T* col, T* in_grad) {
    const int P = d.pixels();
    const std::size_t NP = static_cast<std::size_t>(d.n) * P;
    for (int c = 0; c < d.c; ++c) {
        for (int ky = 0; ky < d.kh; ++ky) {
            for (int kx = 0; kx < d.kw; ++kx) {
                const T* row = col + (static_cast<std::size_t>((c * d.kh + ky) * d.kw + kx)) * NP;
                for (int b = 0; b < d.n; ++b) {
                    T* img = in_grad + (static_cast<std::size_t>(b) * d.c + c) * d.h * d.w;
                    const T* src = row + static_cast<std::size_t>(b) * P;
                    for (int oy = 0; oy < d.oh; ++oy) {
                        const int iy = oy * d.stride + ky - d.pad;
                        if (iy < 0 || iy >= d.h) continue;
                        for (int ox = 0; ox < d.ow; ++ox) {
                            const int ix = ox * d.stride + kx - d.pad;
                            if (ix >= 0 && ix < d.w) img[iy * d.w + ix] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail_ops

// Cross-correlation, realized as im2col + matrix multiply so the executed
// multiply count is exactly oh*ow*O*C*kH*kW.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<std::type_identity_t<T>>* bias,
                 int stride, int padding) {
    using namespace detail_ops;
    const ConvDims d = conv_dims(input, kernel, stride, padding);
    if (bias && (bias->ndim() != 1 || bias->dim(0) != d.o))
        throw ShapeError("conv2d bias must be [O]");

    const int P = d.pixels();
    const std::size_t NP = static_cast<std::size_t>(d.n) * P;
    std::vector<T> col(static_cast<std::size_t>(d.patch()) * NP);
    im2col(d, input.data(), col.data());

    std::vector<T> out_mat(static_cast<std::size_t>(d.o) * NP, T(0));
    dhm::detail::gemm_nn(d.o, static_cast<int>(NP), d.patch(), kernel.data(), col.data(),
                         out_mat.data());

    Tensor<T> out({d.n, d.o, d.oh, d.ow});
    T* op = out.data();
    for (int b = 0; b < d.n; ++b)
        for (int o = 0; o < d.o; ++o) {
            const T* src = out_mat.data() + static_cast<std::size_t>(o) * NP + static_cast<std::size_t>(b) * P;
            const T bv = bias ? bias->data()[o] : T(0);
            T* dst = op + (static_cast<std::size_t>(b) * d.o + o) * P;
            for (int p = 0; p < P; ++p) dst[p] = src[p] + bv;
        }

    const bool needs = recording<T>() &&
                       (input.requires_grad() || kernel.requires_grad() || (bias && bias->requires_grad()));
    if (needs) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, k_c = kernel, out_c = out;
        Tensor<T> bias_c = bias ? *bias : Tensor<T>();
        record<T>([d, in_c, k_c, bias_c, out_c]() mutable {
            const int P = d.pixels();
            const std::size_t NP = static_cast<std::size_t>(d.n) * P;
            // gather output grad back into [O, N*P]
            std::vector<T> gout(static_cast<std::size_t>(d.o) * NP);
            const T* og = out_c.grad();
            for (int b = 0; b < d.n; ++b)
                for (int o = 0; o < d.o; ++o) {
                    const T* src = og + (static_cast<std::size_t>(b) * d.o + o) * P;
                    T* dst = gout.data() + static_cast<std::size_t>(o) * NP + static_cast<std::size_t>(b) * P;
                    for (int p = 0; p < P; ++p) dst[p] = src[p];
                }
            if (k_c.requires_grad()) {
                // col is recomputed rather than cached: keeps tape memory flat
                std::vector<T> col(static_cast<std::size_t>(d.patch()) * NP);
                im2col(d, in_c.data(), col.data());
                dhm::detail::gemm_nt(d.o, d.patch(), static_cast<int>(NP), gout.data(), col.data(),
                                     k_c.grad());
            }
            if (bias_c.defined() && bias_c.requires_grad()) {
                T* bg = bias_c.grad();
                for (int o = 0; o < d.o; ++o) {
                    T acc = T(0);
                    const T* row = gout.data() + static_cast<std::size_t>(o) * NP;
                    for (std::size_t p = 0; p < NP; ++p) acc += row[p];
                    bg[o] += acc;
                }
            }
            if (in_c.requires_grad()) {
                std::vector<T> colg(static_cast<std::size_t>(d.patch()) * NP, T(0));
                dhm::detail::gemm_tn(d.patch(), static_cast<int>(NP), d.o, k_c.data(), gout.data(),
                                     colg.data());
                col2im_add(d, colg.data(), in_c.grad());
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<std::type_identity_t<T>>* bias) {
    using namespace detail_ops;
    if (input.ndim() != 2) throw ShapeError("linear input must be [N,F], got " + shape_str(input.shape()));
    if (weight.ndim() != 2) throw ShapeError("linear weight must be [F,G]");
    const int N = input.dim(0), F = input.dim(1), G = weight.dim(1);
    if (weight.dim(0) != F)
        throw ShapeError("linear inner dims: input " + shape_str(input.shape()) + " vs weight " +
                         shape_str(weight.shape()));
    if (bias && (bias->ndim() != 1 || bias->dim(0) != G)) throw ShapeError("linear bias must be [G]");

    Tensor<T> out({N, G});
    dhm::detail::gemm_nn(N, G, F, input.data(), weight.data(), out.data());
    if (bias) {
        T* op = out.data();
        const T* b = bias->data();
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < G; ++j) op[static_cast<std::size_t>(i) * G + j] += b[j];
    }

    const bool needs = recording<T>() &&
                       (input.requires_grad() || weight.requires_grad() || (bias && bias->requires_grad()));
    if (needs) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, w_c = weight, out_c = out;
        Tensor<T> bias_c = bias ? *bias : Tensor<T>();
        record<T>([N, F, G, in_c, w_c, bias_c, out_c]() mutable {
            const T* og = out_c.grad();
            if (in_c.requires_grad())
                dhm::detail::gemm_nt(N, F, G, og, w_c.data(), in_c.grad());
            if (w_c.requires_grad())
                dhm::detail::gemm_tn(F, G, N, in_c.data(), og, w_c.grad());
            if (bias_c.defined() && bias_c.requires_grad()) {
                T* bg = bias_c.grad();
                for (int i = 0; i < N; ++i)
                    for (int j = 0; j < G; ++j) bg[j] += og[static_cast<std::size_t>(i) * G + j];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& input) {
    using namespace detail_ops;
    Tensor<T> out(input.shape());
    const T* x = input.data();
    T* y = out.data();
    // Outputs are kept strictly inside (0,1): recommendation scores end up in
    // gradient denominators, so saturation must never round to 0 or 1 exactly.
    const T eps = std::numeric_limits<T>::epsilon();
    for (std::size_t i = 0; i < input.size(); ++i) {
        const T v = x[i];
        T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                        : std::exp(v) / (T(1) + std::exp(v));
        y[i] = std::clamp(s, eps, T(1) - eps);
    }
    if (recording<T>() && input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, out_c = out;
        record<T>([in_c, out_c]() mutable {
            const T* y = out_c.data();
            const T* og = out_c.grad();
            T* ig = in_c.grad();
            for (std::size_t i = 0; i < in_c.size(); ++i) ig[i] += og[i] * y[i] * (T(1) - y[i]);
        });
    }
    return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& input) {
    using namespace detail_ops;
    Tensor<T> out(input.shape());
    const T* x = input.data();
    T* y = out.data();
    for (std::size_t i = 0; i < input.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    if (recording<T>() && input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, out_c = out;
        record<T>([in_c, out_c]() mutable {
            const T* x = in_c.data();
            const T* og = out_c.grad();
            T* ig = in_c.grad();
            // subgradient 0 at exactly 0
            for (std::size_t i = 0; i < in_c.size(); ++i)
                if (x[i] > T(0)) ig[i] += og[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> maxpool2d(const Tensor<T>& input, int window, int stride) {
    using namespace detail_ops;
    if (input.ndim() != 4) throw ShapeError("maxpool2d input must be [N,C,H,W]");
    if (window < 1 || stride < 1) throw ShapeError("maxpool2d window/stride must be >= 1");
    const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (window > H || window > W)
        throw ShapeError("maxpool2d window " + std::to_string(window) + " larger than feature map " +
                         shape_str(input.shape()));
    const int OH = (H - window) / stride + 1, OW = (W - window) / stride + 1;
    Tensor<T> out({N, C, OH, OW});
    auto argmax = std::make_shared<std::vector<int>>(out.size());
    const T* x = input.data();
    T* y = out.data();
    std::size_t oi = 0;
    for (int b = 0; b < N; ++b)
        for (int c = 0; c < C; ++c) {
            const T* img = x + (static_cast<std::size_t>(b) * C + c) * H * W;
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox, ++oi) {
                    int best = (oy * stride) * W + ox * stride;
                    T bv = img[best];
                    for (int ky = 0; ky < window; ++ky)
                        for (int kx = 0; kx < window; ++kx) {
                            const int idx = (oy * stride + ky) * W + ox * stride + kx;
                            if (img[idx] > bv) {
                                bv = img[idx];
                                best = idx;
                            }
                        }
                    y[oi] = bv;
                    (*argmax)[oi] = static_cast<int>((static_cast<std::size_t>(b) * C + c) * H * W) + best;
                }
        }
    if (recording<T>() && input.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> in_c = input, out_c = out;
        record<T>([in_c, out_c, argmax]() mutable {
            const T* og = out_c.grad();
            T* ig = in_c.grad();
            for (std::size_t i = 0; i < out_c.size(); ++i) ig[(*argmax)[i]] += og[i];
        });
    }
    return out;
}

// [N, ...] -> [N, prod(rest)]; a view, grads flow through shared storage.
template <class T>
Tensor<T> flatten(const Tensor<T>& input) {
    if (input.ndim() < 2) throw ShapeError("flatten needs rank >= 2");
    int rest = 1;
    for (int i = 1; i < input.ndim(); ++i) rest *= input.dim(i);
    return input.reshaped({input.dim(0), rest});
}

// ---- elementwise / reduction ops (used to express losses on the tape) ----

namespace detail_ops {

template <class T, class Fwd, class Bwd>
Tensor<T> unary(const Tensor<T>& a, Fwd fwd, Bwd bwd) {
    Tensor<T> out(a.shape());
    const T* x = a.data();
    T* y = out.data();
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = fwd(x[i]);
    if (recording<T>() && a.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> a_c = a, out_c = out;
        record<T>([a_c, out_c, bwd]() mutable {
            const T* x = a_c.data();
            const T* og = out_c.grad();
            T* ig = a_c.grad();
            for (std::size_t i = 0; i < a_c.size(); ++i) ig[i] += og[i] * bwd(x[i]);
        });
    }
    return out;
}

}  // namespace detail_ops

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    using namespace detail_ops;
    if (a.shape() != b.shape()) throw ShapeError("add shape mismatch");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (recording<T>() && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> a_c = a, b_c = b, out_c = out;
        record<T>([a_c, b_c, out_c]() mutable {
            const T* og = out_c.grad();
            if (a_c.requires_grad()) {
                T* g = a_c.grad();
                for (std::size_t i = 0; i < a_c.size(); ++i) g[i] += og[i];
            }
            if (b_c.requires_grad()) {
                T* g = b_c.grad();
                for (std::size_t i = 0; i < b_c.size(); ++i) g[i] += og[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    using namespace detail_ops;
    if (a.shape() != b.shape()) throw ShapeError("mul shape mismatch");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (recording<T>() && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        Tensor<T> a_c = a, b_c = b, out_c = out;
        record<T>([a_c, b_c, out_c]() mutable {
            const T* og = out_c.grad();
            if (a_c.requires_grad()) {
                T* g = a_c.grad();
                for (std::size_t i = 0; i < a_c.size(); ++i) g[i] += og[i] * b_c.data()[i];
            }
            if (b_c.requires_grad()) {
                T* g = b_c.grad();
                for (std::size_t i = 0; i < b_c.size(); ++i) g[i] += og[i] * a_c.data()[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
    return detail_ops::unary(a, [s](T x) { return x * s; }, [s](T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return detail_ops::unary(a, [s](T x) { return x + s; }, [](T) { return T(1); });
}

// s - a (e.g. the right-branch score 1 - s_i)
template <class T>
Tensor<T> sub_from_scalar(T s, const Tensor<T>& a) {
    return detail_ops::unary(a, [s](T x) { return s - x; }, [](T) { return T(-1); });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
    return detail_ops::unary(a, [](T x) { return std::log(x); }, [](T x) { return T(1) / x; });
}

// Column j of a [N,G] matrix as an [N] vector.
template <class T>
Tensor<T> select_col(const Tensor<T>& a, int j) {
    using namespace detail_ops;
    if (a.ndim() != 2) throw ShapeError("select_col needs a [N,G] matrix");
    const int N = a.dim(0), G = a.dim(1);
    if (j < 0 || j >= G) throw ShapeError("select_col column out of range");
    Tensor<T> out({N});
    for (int i = 0; i < N; ++i) out.data()[i] = a.data()[static_cast<std::size_t>(i) * G + j];
    if (recording<T>() && a.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> a_c = a, out_c = out;
        record<T>([a_c, out_c, N, G, j]() mutable {
            const T* og = out_c.grad();
            T* ig = a_c.grad();
            for (int i = 0; i < N; ++i) ig[static_cast<std::size_t>(i) * G + j] += og[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
    using namespace detail_ops;
    Tensor<T> out({1});
    T acc = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i];
    out.data()[0] = acc;
    if (recording<T>() && a.requires_grad()) {
        out.set_requires_grad(true);
        Tensor<T> a_c = a, out_c = out;
        record<T>([a_c, out_c]() mutable {
            const T g = out_c.grad()[0];
            T* ig = a_c.grad();
            for (std::size_t i = 0; i < a_c.size(); ++i) ig[i] += g;
        });
    }
    return out;
}

}  // namespace dhm::ops
