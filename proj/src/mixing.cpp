#include "umoe/mixing.hpp"

#include <cmath>

namespace umoe {

static Vec rope_apply(std::span<const double> x, int64_t position, double base, double sign) {
    const size_t d = x.size();
    if (d % 2 != 0) fail("OddDim", "rope requires an even dimension, got " + std::to_string(d));
    Vec out(d);
    for (size_t j = 0; j < d / 2; ++j) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(d));
        const double theta = sign * static_cast<double>(position) * freq;
        const double c = std::cos(theta), s = std::sin(theta);
        const double a = x[2 * j], b = x[2 * j + 1];
        out[2 * j] = a * c - b * s;
        out[2 * j + 1] = a * s + b * c;
    }
    return out;
}

Vec rope(std::span<const double> x, int64_t position, double base) {
    return rope_apply(x, position, base, 1.0);
}

Vec rope_inverse(std::span<const double> x, int64_t position, double base) {
    return rope_apply(x, position, base, -1.0);
}

Vec attn_weights(std::span<const double> q, const Mat& keys, int key_dim, int causal_limit) {
    const int t = keys.rows;
    if (t < 1) fail("EmptyKeys", "attention needs at least one key");
    const int visible = std::min(causal_limit, t - 1);
    if (visible < 0) fail("EmptyKeys", "causal limit leaves no visible positions");
    const double scale = 1.0 / std::sqrt(static_cast<double>(key_dim));
    Vec a(t, 0.0);
    for (int s = 0; s <= visible; ++s) a[s] = dot(q, keys.row(s)) * scale;
    softmax_inplace(std::span<double>(a.data(), visible + 1));
    return a;
}

std::vector<Mat> mha_attn_rows(const DenseAttnParams& p, const Mat& x) {
    const int n = x.rows;
    const int h = p.n_heads, dk = p.key_dim;
    // Per-head rope'd projections.
    Mat q_all(n, h * dk), k_all(n, h * dk);
    for (int t = 0; t < n; ++t) {
        Vec q = vecmat(x.row(t), p.w_q);
        Vec k = vecmat(x.row(t), p.w_k);
        for (int i = 0; i < h; ++i) {
            Vec qh = rope(std::span<const double>(q.data() + i * dk, dk), t, p.rope_base);
            Vec kh = rope(std::span<const double>(k.data() + i * dk, dk), t, p.rope_base);
            std::copy(qh.begin(), qh.end(), q_all.row(t).begin() + i * dk);
            std::copy(kh.begin(), kh.end(), k_all.row(t).begin() + i * dk);
        }
    }
    std::vector<Mat> rows(h, Mat(n, n));
    for (int i = 0; i < h; ++i) {
        Mat keys(n, dk);
        for (int t = 0; t < n; ++t)
            std::copy(k_all.row(t).begin() + i * dk, k_all.row(t).begin() + (i + 1) * dk,
                      keys.row(t).begin());
        for (int t = 0; t < n; ++t) {
            Vec a = attn_weights(std::span<const double>(q_all.row(t).data() + i * dk, dk), keys,
                                 dk, t);
            std::copy(a.begin(), a.end(), rows[i].row(t).begin());
        }
    }
    return rows;
}

Mat vanilla_mha(const DenseAttnParams& p, const Mat& x) {
    if (x.cols != p.w_q.rows) fail("ShapeMismatch", "input width does not match W_q");
    const int n = x.rows;
    const int h = p.n_heads, dv = p.value_dim;
    std::vector<Mat> a = mha_attn_rows(p, x);

    Mat v(n, h * dv);
    for (int t = 0; t < n; ++t) {
        Vec vt = vecmat(x.row(t), p.w_v);
        std::copy(vt.begin(), vt.end(), v.row(t).begin());
    }

    Mat out(n, x.cols);
    for (int t = 0; t < n; ++t) {
        Vec concat(h * dv, 0.0);
        for (int i = 0; i < h; ++i) {
            for (int s = 0; s <= t; ++s) {
                const double w = a[i].at(t, s);
                if (w == 0.0) continue;
                const double* vs = v.row(s).data() + i * dv;
                for (int c = 0; c < dv; ++c) concat[i * dv + c] += w * vs[c];
            }
        }
        Vec y = vecmat(concat, p.w_o);
        std::copy(y.begin(), y.end(), out.row(t).begin());
    }
    return out;
}

Vec premix(std::span<const double> a, const Mat& x) {
    Vec out(x.cols, 0.0);
    for (int j = 0; j < x.rows && j < static_cast<int>(a.size()); ++j) {
        if (a[j] == 0.0) continue;
        axpy(a[j], x.row(j), out);
    }
    return out;
}

Vec postmix(std::span<const double> a, const Mat& y) { return premix(a, y); }

void cache_step(MixState& state, std::span<const double> new_key,
                std::span<const double> new_hidden) {
    if (state.t >= state.capacity)
        fail("ContextOverflow", "cache is full at t=" + std::to_string(state.t));
    std::copy(new_key.begin(), new_key.end(), state.keys.row(state.t).begin());
    std::copy(new_hidden.begin(), new_hidden.end(), state.hidden.row(state.t).begin());
    ++state.t;
}

}  // namespace umoe
