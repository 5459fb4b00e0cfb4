#include "ofa/nn.h"

#ifdef _OPENMP
#include <omp.h>
#endif

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace ofa {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;
using StridedMap = Eigen::Map<MatRM, 0, Eigen::OuterStride<>>;
using StridedCMap = Eigen::Map<const MatRM, 0, Eigen::OuterStride<>>;

std::vector<float>& thread_scratch(int which) {
    static thread_local std::vector<float> bufs[2];
    return bufs[which];
}

// Column tiles follow output rows so im2col stays memcpy-friendly.
constexpr int kTileElems = 4096;

// cols[(ci*9 + ky*3 + kx), (y - y0)*W + x] = x[ci, y+ky-1, x+kx-1], zero outside.
void im2col_rows(const float* x, int cin, int h, int w, int y0, int y1, float* dst) {
    const int n = (y1 - y0) * w;
    for (int ci = 0; ci < cin; ++ci) {
        const float* xc = x + static_cast<size_t>(ci) * h * w;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                float* row = dst + static_cast<size_t>(ci * 9 + ky * 3 + kx) * n;
                const int shift = kx - 1;
                for (int y = y0; y < y1; ++y) {
                    float* out = row + static_cast<size_t>(y - y0) * w;
                    const int yy = y + ky - 1;
                    if (yy < 0 || yy >= h) {
                        std::memset(out, 0, sizeof(float) * static_cast<size_t>(w));
                        continue;
                    }
                    const float* src = xc + static_cast<size_t>(yy) * w;
                    if (shift == 0) {
                        std::memcpy(out, src, sizeof(float) * static_cast<size_t>(w));
                    } else if (shift < 0) {
                        out[0] = 0.0f;
                        std::memcpy(out + 1, src, sizeof(float) * static_cast<size_t>(w - 1));
                    } else {
                        std::memcpy(out, src + 1, sizeof(float) * static_cast<size_t>(w - 1));
                        out[w - 1] = 0.0f;
                    }
                }
            }
        }
    }
}

// Transpose of im2col_rows: scatter-adds g back into dx.
void col2im_add_rows(const float* g, int cin, int h, int w, int y0, int y1, float* dx) {
    const int n = (y1 - y0) * w;
    for (int ci = 0; ci < cin; ++ci) {
        float* xc = dx + static_cast<size_t>(ci) * h * w;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const float* row = g + static_cast<size_t>(ci * 9 + ky * 3 + kx) * n;
                const int shift = kx - 1;
                for (int y = y0; y < y1; ++y) {
                    const float* src = row + static_cast<size_t>(y - y0) * w;
                    const int yy = y + ky - 1;
                    if (yy < 0 || yy >= h) continue;
                    float* out = xc + static_cast<size_t>(yy) * w;
                    if (shift == 0) {
                        for (int xi = 0; xi < w; ++xi) out[xi] += src[xi];
                    } else if (shift < 0) {
                        for (int xi = 1; xi < w; ++xi) out[xi - 1] += src[xi];
                    } else {
                        for (int xi = 0; xi < w - 1; ++xi) out[xi + 1] += src[xi];
                    }
                }
            }
        }
    }
}


// Frees an op output's gradient once its producer backward has consumed it:
// in reverse replay no later closure can read it again.
struct GradRelease {
    const TensorPtr& t;
    ~GradRelease() { std::vector<float>().swap(t->grad); }
};

bool grad_wanted(const TensorPtr& a) {
    return GradTape::recording() && a->requires_grad;
}

void accum(std::vector<float>& dst, const float* src, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] += src[i];
}

}  // namespace

TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, int out_channels, int in_channels) {
    if (x->ndim() != 4) throw DimError("conv2d input must be [B,C,H,W], got " + shape_str(x->shape));
    if (w->ndim() != 4 || w->dim(2) != 3 || w->dim(3) != 3)
        throw DimError("conv2d weight must be [Cout,Cin,3,3], got " + shape_str(w->shape));
    const int batch = x->dim(0), cin_x = x->dim(1), h = x->dim(2), wdt = x->dim(3);
    const int cout_full = w->dim(0), cin_full = w->dim(1);
    const int cout = out_channels < 0 ? cout_full : out_channels;
    const int cin = in_channels < 0 ? cin_full : in_channels;
    if (cout < 1 || cout > cout_full || cin < 1 || cin > cin_full)
        throw DimError("conv2d channel slice [" + std::to_string(cout) + "," + std::to_string(cin) +
                       "] outside weight " + shape_str(w->shape));
    if (cin_x != cin)
        throw DimError("conv2d input has " + std::to_string(cin_x) + " channels, weight slice expects " +
                       std::to_string(cin));

    const int hw = h * wdt;
    const int kdim = cin * 9;
    const int tile_rows = std::max(1, kTileElems / wdt);
    auto y = Tensor::zeros({batch, cout, h, wdt});

    // For a fixed output channel the first cin*9 weight entries are exactly the
    // leading input-channel slice, so the slice is a strided view, not a copy.
    StridedCMap wm(w->data.data(), cout, kdim, Eigen::OuterStride<>(cin_full * 9));

#pragma omp parallel for schedule(static)
    for (int b = 0; b < batch; ++b) {
        auto& cols = thread_scratch(0);
        cols.resize(static_cast<size_t>(kdim) * std::min(hw, tile_rows * wdt));
        const float* xb = x->data.data() + static_cast<size_t>(b) * cin * hw;
        MapRM ym(y->data.data() + static_cast<size_t>(b) * cout * hw, cout, hw);
        for (int y0 = 0; y0 < h; y0 += tile_rows) {
            const int y1 = std::min(h, y0 + tile_rows);
            const int n = (y1 - y0) * wdt;
            im2col_rows(xb, cin, h, wdt, y0, y1, cols.data());
            ym.middleCols(y0 * wdt, n).noalias() = wm * CMapRM(cols.data(), kdim, n);
        }
    }

    if (GradTape::recording() && (x->requires_grad || w->requires_grad)) {
        y->requires_grad = true;
        GradTape::active()->record([=]() {
            if (!y->has_grad()) return;
            GradRelease release_y{y};
            if (w->requires_grad) {
                w->ensure_grad();
                // Chunked by item index (not by thread), partials merged in
                // chunk order: accumulation order per element is fixed for any
                // thread count.
                constexpr int kChunkItems = 8;
                const int nchunks = (batch + kChunkItems - 1) / kChunkItems;
                std::vector<std::vector<float>> partials(static_cast<size_t>(nchunks));
#pragma omp parallel for schedule(static)
                for (int chunk = 0; chunk < nchunks; ++chunk) {
                    auto& part = partials[static_cast<size_t>(chunk)];
                    part.assign(static_cast<size_t>(cout) * kdim, 0.0f);
                    MapRM pm(part.data(), cout, kdim);
                    auto& cols = thread_scratch(0);
                    cols.resize(static_cast<size_t>(kdim) * std::min(hw, tile_rows * wdt));
                    const int b_end = std::min(batch, (chunk + 1) * kChunkItems);
                    for (int b = chunk * kChunkItems; b < b_end; ++b) {
                        const float* xb = x->data.data() + static_cast<size_t>(b) * cin * hw;
                        CMapRM dym(y->grad.data() + static_cast<size_t>(b) * cout * hw, cout, hw);
                        for (int y0 = 0; y0 < h; y0 += tile_rows) {
                            const int y1 = std::min(h, y0 + tile_rows);
                            const int n = (y1 - y0) * wdt;
                            im2col_rows(xb, cin, h, wdt, y0, y1, cols.data());
                            pm.noalias() += dym.middleCols(y0 * wdt, n) *
                                            CMapRM(cols.data(), kdim, n).transpose();
                        }
                    }
                }
                StridedMap gw(w->grad.data(), cout, kdim, Eigen::OuterStride<>(cin_full * 9));
                for (const auto& part : partials) gw += CMapRM(part.data(), cout, kdim);
            }
            if (x->requires_grad) {
                x->ensure_grad();
#pragma omp parallel for schedule(static)
                for (int b = 0; b < batch; ++b) {
                    auto& gbuf = thread_scratch(1);
                    gbuf.resize(static_cast<size_t>(kdim) * std::min(hw, tile_rows * wdt));
                    CMapRM dym(y->grad.data() + static_cast<size_t>(b) * cout * hw, cout, hw);
                    float* dxb = x->grad.data() + static_cast<size_t>(b) * cin * hw;
                    for (int y0 = 0; y0 < h; y0 += tile_rows) {
                        const int y1 = std::min(h, y0 + tile_rows);
                        const int n = (y1 - y0) * wdt;
                        MapRM gm(gbuf.data(), kdim, n);
                        gm.noalias() = wm.transpose() * dym.middleCols(y0 * wdt, n);
                        col2im_add_rows(gbuf.data(), cin, h, wdt, y0, y1, dxb);
                    }
                }
            }
        });
    }
    return y;
}

TensorPtr avg_pool_2x2(const TensorPtr& x) {
    if (x->ndim() != 4) throw DimError("avg_pool_2x2 input must be [B,C,H,W], got " + shape_str(x->shape));
    const int batch = x->dim(0), ch = x->dim(1), h = x->dim(2), wdt = x->dim(3);
    if (h < 1 || wdt < 1) throw DimError("avg_pool_2x2 needs non-empty spatial dims");
    const int ho = (h + 1) / 2, wo = (wdt + 1) / 2;
    auto y = Tensor::zeros({batch, ch, ho, wo});

    const int planes = batch * ch;
#pragma omp parallel for schedule(static)
    for (int p = 0; p < planes; ++p) {
        const float* src = x->data.data() + static_cast<size_t>(p) * h * wdt;
        float* dst = y->data.data() + static_cast<size_t>(p) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
            const int y0 = 2 * oy, y1 = std::min(2 * oy + 1, h - 1);
            for (int ox = 0; ox < wo; ++ox) {
                const int x0 = 2 * ox, x1 = std::min(2 * ox + 1, wdt - 1);
                dst[oy * wo + ox] = 0.25f * (src[y0 * wdt + x0] + src[y0 * wdt + x1] +
                                             src[y1 * wdt + x0] + src[y1 * wdt + x1]);
            }
        }
    }

    if (grad_wanted(x)) {
        y->requires_grad = true;
        GradTape::active()->record([=]() {
            if (!y->has_grad()) return;
            GradRelease release_y{y};
            x->ensure_grad();
#pragma omp parallel for schedule(static)
            for (int p = 0; p < planes; ++p) {
                const float* dy = y->grad.data() + static_cast<size_t>(p) * ho * wo;
                float* dx = x->grad.data() + static_cast<size_t>(p) * h * wdt;
                for (int oy = 0; oy < ho; ++oy) {
                    const int y0 = 2 * oy, y1 = std::min(2 * oy + 1, h - 1);
                    for (int ox = 0; ox < wo; ++ox) {
                        const int x0 = 2 * ox, x1 = std::min(2 * ox + 1, wdt - 1);
                        const float g = 0.25f * dy[oy * wo + ox];
                        dx[y0 * wdt + x0] += g;
                        dx[y0 * wdt + x1] += g;
                        dx[y1 * wdt + x0] += g;
                        dx[y1 * wdt + x1] += g;
                    }
                }
            }
        });
    }
    return y;
}

namespace {

// Per-channel sum(a) and sum(a*b) over [B,C,H,W] (sum(a) and sum(a*a) when
// a == b). Chunked by item index with an ordered merge, so sums are
// bit-identical for any thread count.
void bn_channel_sums(const float* base_a, const float* base_b, int batch, int ch, int c_used, int64_t hw,
                     std::vector<double>& out_a, std::vector<double>& out_b) {
    constexpr int kChunkItems = 4;
    const int nchunks = (batch + kChunkItems - 1) / kChunkItems;
    std::vector<std::vector<double>> pa(static_cast<size_t>(nchunks)), pb(static_cast<size_t>(nchunks));
#pragma omp parallel for schedule(static)
    for (int chunk = 0; chunk < nchunks; ++chunk) {
        auto& sa = pa[static_cast<size_t>(chunk)];
        auto& sb = pb[static_cast<size_t>(chunk)];
        sa.assign(static_cast<size_t>(c_used), 0.0);
        sb.assign(static_cast<size_t>(c_used), 0.0);
        const int b_end = std::min(batch, (chunk + 1) * kChunkItems);
        for (int b = chunk * kChunkItems; b < b_end; ++b)
            for (int c = 0; c < c_used; ++c) {
                const float* ra = base_a + (static_cast<size_t>(b) * ch + c) * hw;
                const float* rb = base_b + (static_cast<size_t>(b) * ch + c) * hw;
                double s = 0.0, t = 0.0;
                if (base_a == base_b) {
                    for (int64_t i = 0; i < hw; ++i) {
                        s += ra[i];
                        t += static_cast<double>(ra[i]) * ra[i];
                    }
                } else {
                    for (int64_t i = 0; i < hw; ++i) {
                        s += ra[i];
                        t += static_cast<double>(ra[i]) * rb[i];
                    }
                }
                sa[static_cast<size_t>(c)] += s;
                sb[static_cast<size_t>(c)] += t;
            }
    }
    out_a.assign(static_cast<size_t>(c_used), 0.0);
    out_b.assign(static_cast<size_t>(c_used), 0.0);
    for (int chunk = 0; chunk < nchunks; ++chunk)
        for (int c = 0; c < c_used; ++c) {
            out_a[static_cast<size_t>(c)] += pa[static_cast<size_t>(chunk)][static_cast<size_t>(c)];
            out_b[static_cast<size_t>(c)] += pb[static_cast<size_t>(chunk)][static_cast<size_t>(c)];
        }
}

}  // namespace

TensorPtr batch_norm2d(const TensorPtr& x, const TensorPtr& gamma, const TensorPtr& beta,
                       const TensorPtr& running_mean, const TensorPtr& running_var, BnMode mode,
                       int channels, float momentum, float eps) {
    if (x->ndim() != 4) throw DimError("batch_norm2d input must be [B,C,H,W], got " + shape_str(x->shape));
    const int batch = x->dim(0), ch = x->dim(1), h = x->dim(2), wdt = x->dim(3);
    const int c_used = channels < 0 ? static_cast<int>(gamma->numel()) : channels;
    if (ch != c_used)
        throw DimError("batch_norm2d input has " + std::to_string(ch) + " channels, slice expects " +
                       std::to_string(c_used));
    if (gamma->numel() < c_used || beta->numel() < c_used || running_mean->numel() < c_used ||
        running_var->numel() < c_used)
        throw DimError("batch_norm2d parameter tensors shorter than channel slice");
    const int64_t hw = static_cast<int64_t>(h) * wdt;
    const int64_t count = static_cast<int64_t>(batch) * hw;
    if (mode == BnMode::kTrain && count < 2) throw DimError("batch_norm2d train mode needs B*H*W >= 2");

    auto y = Tensor::zeros({batch, ch, h, wdt});
    std::vector<float> mean(static_cast<size_t>(c_used)), invstd(static_cast<size_t>(c_used));

    if (mode == BnMode::kTrain) {
        std::vector<double> sum, sumsq;
        bn_channel_sums(x->data.data(), x->data.data(), batch, ch, c_used, hw, sum, sumsq);
        for (int c = 0; c < c_used; ++c) {
            const double mu = sum[static_cast<size_t>(c)] / static_cast<double>(count);
            const double var =
                std::max(0.0, sumsq[static_cast<size_t>(c)] / static_cast<double>(count) - mu * mu);
            mean[static_cast<size_t>(c)] = static_cast<float>(mu);
            invstd[static_cast<size_t>(c)] = static_cast<float>(1.0 / std::sqrt(var + eps));
            running_mean->data[c] = momentum * running_mean->data[c] + (1.0f - momentum) * static_cast<float>(mu);
            running_var->data[c] = momentum * running_var->data[c] + (1.0f - momentum) * static_cast<float>(var);
        }
    } else {
        for (int c = 0; c < c_used; ++c) {
            mean[static_cast<size_t>(c)] = running_mean->data[c];
            invstd[static_cast<size_t>(c)] = 1.0f / std::sqrt(running_var->data[c] + eps);
        }
    }

    const int planes = batch * ch;
#pragma omp parallel for schedule(static)
    for (int p = 0; p < planes; ++p) {
        const int c = p % ch;
        const float g = gamma->data[c], bta = beta->data[c], mu = mean[static_cast<size_t>(c)],
                    is = invstd[static_cast<size_t>(c)];
        const float* src = x->data.data() + static_cast<size_t>(p) * hw;
        float* dst = y->data.data() + static_cast<size_t>(p) * hw;
        for (int64_t i = 0; i < hw; ++i) dst[i] = g * (src[i] - mu) * is + bta;
    }

    if (GradTape::recording() && (x->requires_grad || gamma->requires_grad || beta->requires_grad)) {
        y->requires_grad = true;
        const bool train = mode == BnMode::kTrain;
        GradTape::active()->record([=]() {
            if (!y->has_grad()) return;
            GradRelease release_y{y};
            if (gamma->requires_grad) gamma->ensure_grad();
            if (beta->requires_grad) beta->ensure_grad();
            if (x->requires_grad) x->ensure_grad();

            // per-channel sum(dy) and sum(dy * xhat); xhat folded in on the fly
            std::vector<double> sum_dy(static_cast<size_t>(c_used), 0.0),
                sum_dy_x(static_cast<size_t>(c_used), 0.0);
            bn_channel_sums(y->grad.data(), x->data.data(), batch, ch, c_used, hw, sum_dy, sum_dy_x);
            std::vector<float> dbeta(static_cast<size_t>(c_used)), dgamma(static_cast<size_t>(c_used));
            for (int c = 0; c < c_used; ++c) {
                // sum(dy*xhat) = (sum(dy*x) - mu*sum(dy)) * invstd
                const double s_xhat = (sum_dy_x[static_cast<size_t>(c)] -
                                       static_cast<double>(mean[static_cast<size_t>(c)]) *
                                           sum_dy[static_cast<size_t>(c)]) *
                                      invstd[static_cast<size_t>(c)];
                dbeta[static_cast<size_t>(c)] = static_cast<float>(sum_dy[static_cast<size_t>(c)]);
                dgamma[static_cast<size_t>(c)] = static_cast<float>(s_xhat);
            }
            for (int c = 0; c < c_used; ++c) {
                if (gamma->requires_grad) gamma->grad[c] += dgamma[static_cast<size_t>(c)];
                if (beta->requires_grad) beta->grad[c] += dbeta[static_cast<size_t>(c)];
            }
            if (!x->requires_grad) return;
#pragma omp parallel for schedule(static)
            for (int p = 0; p < planes; ++p) {
                const int c = p % ch;
                const float mu = mean[static_cast<size_t>(c)], is = invstd[static_cast<size_t>(c)],
                            g = gamma->data[c];
                const float* src = x->data.data() + static_cast<size_t>(p) * hw;
                const float* dy = y->grad.data() + static_cast<size_t>(p) * hw;
                float* dx = x->grad.data() + static_cast<size_t>(p) * hw;
                if (train) {
                    const float mean_dy =
                        static_cast<float>(dbeta[static_cast<size_t>(c)] / static_cast<double>(count));
                    const float mean_dy_xhat =
                        static_cast<float>(dgamma[static_cast<size_t>(c)] / static_cast<double>(count));
                    for (int64_t i = 0; i < hw; ++i) {
                        const float xhat = (src[i] - mu) * is;
                        dx[i] += g * is * (dy[i] - mean_dy - xhat * mean_dy_xhat);
                    }
                } else {
                    for (int64_t i = 0; i < hw; ++i) dx[i] += g * is * dy[i];
                }
            }
        });
    }
    return y;
}

TensorPtr relu(const TensorPtr& x) {
    auto y = Tensor::zeros(x->shape);
    const int64_t n = x->numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) y->data[i] = x->data[i] > 0.0f ? x->data[i] : 0.0f;

    if (grad_wanted(x)) {
        y->requires_grad = true;
        GradTape::active()->record([=]() {
            if (!y->has_grad()) return;
            GradRelease release_y{y};
            x->ensure_grad();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < n; ++i)
                if (x->data[i] > 0.0f) x->grad[i] += y->grad[i];
        });
    }
    return y;
}

TensorPtr sigmoid(const TensorPtr& x) {
    auto y = Tensor::zeros(x->shape);
    const int64_t n = x->numel();
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) y->data[i] = 1.0f / (1.0f + std::exp(-x->data[i]));

    if (grad_wanted(x)) {
        y->requires_grad = true;
        GradTape::active()->record([=]() {
            if (!y->has_grad()) return;
            GradRelease release_y{y};
            x->ensure_grad();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < n; ++i) x->grad[i] += y->grad[i] * y->data[i] * (1.0f - y->data[i]);
        });
    }
    return y;
}

TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int out_features,
                 int in_features) {
    if (x->ndim() != 2) throw DimError("linear input must be [B,Din], got " + shape_str(x->shape));
    if (w->ndim() != 2) throw DimError("linear weight must be [Dout,Din], got " + shape_str(w->shape));
    const int batch = x->dim(0), din_x = x->dim(1);
    const int dout_full = w->dim(0), din_full = w->dim(1);
    const int dout = out_features < 0 ? dout_full : out_features;
    const int din = in_features < 0 ? din_full : in_features;
    if (dout < 1 || dout > dout_full || din < 1 || din > din_full)
        throw DimError("linear slice outside weight " + shape_str(w->shape));
    if (din_x != din)
        throw DimError("linear input features " + std::to_string(din_x) + " != slice " + std::to_string(din));
    if (b->numel() < dout) throw DimError("linear bias shorter than output slice");

    auto y = Tensor::zeros({batch, dout});
    StridedCMap wm(w->data.data(), dout, din, Eigen::OuterStride<>(din_full));
    CMapRM xm(x->data.data(), batch, din);
    MapRM ym(y->data.data(), batch, dout);
    ym.noalias() = xm * wm.transpose();
    for (int i = 0; i < batch; ++i)
        for (int j = 0; j < dout; ++j) y->data[static_cast<size_t>(i) * dout + j] += b->data[j];

    if (GradTape::recording() && (x->requires_grad || w->requires_grad || b->requires_grad)) {
        y->requires_grad = true;
        GradTape::active()->record([=]() {
            if (!y->has_grad()) return;
            GradRelease release_y{y};
            CMapRM dym(y->grad.data(), batch, dout);
            if (w->requires_grad) {
                w->ensure_grad();
                StridedMap gw(w->grad.data(), dout, din, Eigen::OuterStride<>(din_full));
                gw.noalias() += dym.transpose() * CMapRM(x->data.data(), batch, din);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (int i = 0; i < batch; ++i)
                    for (int j = 0; j < dout; ++j) b->grad[j] += y->grad[static_cast<size_t>(i) * dout + j];
            }
            if (x->requires_grad) {
                x->ensure_grad();
                MapRM gx(x->grad.data(), batch, din);
                gx.noalias() += dym * StridedCMap(w->data.data(), dout, din, Eigen::OuterStride<>(din_full));
            }
        });
    }
    return y;
}

TensorPtr global_avg_pool(const TensorPtr& x) {
    if (x->ndim() != 4) throw DimError("global_avg_pool input must be [B,C,H,W], got " + shape_str(x->shape));
    const int batch = x->dim(0), ch = x->dim(1);
    const int64_t hw = static_cast<int64_t>(x->dim(2)) * x->dim(3);
    auto y = Tensor::zeros({batch, ch});
    const int planes = batch * ch;
#pragma omp parallel for schedule(static)
    for (int p = 0; p < planes; ++p) {
        const float* src = x->data.data() + static_cast<size_t>(p) * hw;
        double s = 0.0;
        for (int64_t i = 0; i < hw; ++i) s += src[i];
        y->data[p] = static_cast<float>(s / static_cast<double>(hw));
    }

    if (grad_wanted(x)) {
        y->requires_grad = true;
        GradTape::active()->record([=]() {
            if (!y->has_grad()) return;
            GradRelease release_y{y};
            x->ensure_grad();
            const float inv = 1.0f / static_cast<float>(hw);
#pragma omp parallel for schedule(static)
            for (int p = 0; p < planes; ++p) {
                const float g = y->grad[p] * inv;
                float* dx = x->grad.data() + static_cast<size_t>(p) * hw;
                for (int64_t i = 0; i < hw; ++i) dx[i] += g;
            }
        });
    }
    return y;
}

TensorPtr bce_soft(const TensorPtr& predicted, const TensorPtr& target) {
    if (predicted->shape != target->shape)
        throw DimError("bce_soft shapes differ: " + shape_str(predicted->shape) + " vs " +
                       shape_str(target->shape));
    const int64_t n = predicted->numel();
    if (n == 0) throw DimError("bce_soft on empty tensor");
    constexpr float kLo = 1e-7f, kHi = 1.0f - 1e-7f;

    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const float p = std::min(kHi, std::max(kLo, predicted->data[i]));
        const float t = target->data[i];
        total -= t * std::log(p) + (1.0f - t) * std::log(1.0f - p);
    }
    auto y = Tensor::from_data({1}, {static_cast<float>(total / static_cast<double>(n))});

    if (grad_wanted(predicted)) {
        y->requires_grad = true;
        GradTape::active()->record([=]() {
            if (!y->has_grad()) return;
            GradRelease release_y{y};
            predicted->ensure_grad();
            const float scale = y->grad[0] / static_cast<float>(n);
            for (int64_t i = 0; i < n; ++i) {
                const float p = predicted->data[i];
                if (p < kLo || p > kHi) continue;  // clamped region, zero subgradient
                const float t = target->data[i];
                predicted->grad[i] += scale * (-(t / p) + (1.0f - t) / (1.0f - p));
            }
        });
    }
    return y;
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    if (a->shape != b->shape)
        throw DimError("add shapes differ: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    auto y = Tensor::zeros(a->shape);
    const int64_t n = a->numel();
    for (int64_t i = 0; i < n; ++i) y->data[i] = a->data[i] + b->data[i];

    if (GradTape::recording() && (a->requires_grad || b->requires_grad)) {
        y->requires_grad = true;
        GradTape::active()->record([=]() {
            if (!y->has_grad()) return;
            GradRelease release_y{y};
            if (a->requires_grad) {
                a->ensure_grad();
                accum(a->grad, y->grad.data(), static_cast<size_t>(n));
            }
            if (b->requires_grad) {
                b->ensure_grad();
                accum(b->grad, y->grad.data(), static_cast<size_t>(n));
            }
        });
    }
    return y;
}

Adam::Adam(std::vector<TensorPtr> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.emplace_back(p->data.size(), 0.0f);
        v_.emplace_back(p->data.size(), 0.0f);
    }
}

void Adam::step() {
    for (size_t i = 0; i < params_.size(); ++i)
        if (!params_[i]->has_grad())
            throw StateError("adam step with missing gradient on parameter " + std::to_string(i));
    ++t_;
    const float bc1 = 1.0f - static_cast<float>(std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_)));
    const float bc2 = 1.0f - static_cast<float>(std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_)));
    for (size_t i = 0; i < params_.size(); ++i) {
        auto& p = *params_[i];
        float* m = m_[i].data();
        float* v = v_[i].data();
        const int64_t n = p.numel();
#pragma omp parallel for schedule(static)
        for (int64_t j = 0; j < n; ++j) {
            const float g = p.grad[j];
            // exact no-op under the update rule; keeps never-touched slices frozen
            if (g == 0.0f && m[j] == 0.0f && v[j] == 0.0f) continue;
            m[j] = cfg_.beta1 * m[j] + (1.0f - cfg_.beta1) * g;
            v[j] = cfg_.beta2 * v[j] + (1.0f - cfg_.beta2) * g * g;
            const float mhat = m[j] / bc1;
            const float vhat = v[j] / bc2;
            p.data[j] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
        p.zero_grad();
    }
}

}  // namespace ofa
