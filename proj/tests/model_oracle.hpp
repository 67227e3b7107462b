#pragma once

// Scalar-loop recomputation of the fusion model. Reads parameter values only;
// every operation is written out with plain loops over std::vector.

#include <cmath>
#include <vector>

#include "emi/fusion.hpp"

namespace emi::testing {

struct Mat {
    std::size_t r = 0, c = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(std::size_t rows, std::size_t cols, double fill = 0.0) : r(rows), c(cols), v(rows * cols, fill) {}
    explicit Mat(const Tensor& t) : r(t.rows()), c(t.cols()), v(t.values()) {}
    double& operator()(std::size_t i, std::size_t j) { return v[i * c + j]; }
    double operator()(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

inline Mat mat_mul(const Mat& a, const Mat& b)
{
    Mat out(a.r, b.c);
    for (std::size_t i = 0; i < a.r; ++i) {
        for (std::size_t j = 0; j < b.c; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.c; ++k) {
                s += a(i, k) * b(k, j);
            }
            out(i, j) = s;
        }
    }
    return out;
}

inline Mat affine(const Mat& x, const Linear& lin)
{
    Mat y = mat_mul(x, Mat(lin.weight));
    if (lin.bias.defined()) {
        for (std::size_t i = 0; i < y.r; ++i) {
            for (std::size_t j = 0; j < y.c; ++j) {
                y(i, j) += lin.bias.data()[j];
            }
        }
    }
    return y;
}

inline double act(double x, Activation a)
{
    switch (a) {
    case Activation::Tanh:
        return std::tanh(x);
    case Activation::Relu:
        return x > 0 ? x : 0.0;
    case Activation::Identity:
        break;
    }
    return x;
}

inline Mat mlp(const Mat& x, const Mlp& m)
{
    Mat h = affine(x, m.first);
    for (auto& v : h.v) {
        v = act(v, m.activation);
    }
    return affine(h, m.second);
}

inline double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Mat tcn(const Mat& x, const TcnStack& s)
{
    Mat h = affine(x, s.projection);
    const std::size_t T = h.r, C = h.c;
    for (std::size_t layer = 0; layer < s.kernels.size(); ++layer) {
        const std::size_t d = std::size_t{1} << layer;
        const std::size_t kw = s.kernels[layer].dim(0);
        auto K = s.kernels[layer].data();
        Mat next = h;
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t co = 0; co < C; ++co) {
                double acc = s.biases[layer].data()[co];
                for (std::size_t j = 0; j < kw; ++j) {
                    if (t < j * d) {
                        continue;
                    }
                    for (std::size_t ci = 0; ci < C; ++ci) {
                        acc += K[(j * C + ci) * C + co] * h(t - j * d, ci);
                    }
                }
                next(t, co) += acc > 0 ? acc : 0.0;
            }
        }
        h = next;
    }
    return h;
}

inline Mat lstm_dir(const Mat& x, const LstmCell& cell, bool reverse)
{
    const std::size_t T = x.r, H = cell.hidden();
    Mat wx(cell.w_x), wh(cell.w_h), b(cell.bias);
    std::vector<double> h(H, 0.0), c(H, 0.0);
    Mat out(T, H);
    for (std::size_t s = 0; s < T; ++s) {
        const std::size_t t = reverse ? T - 1 - s : s;
        std::vector<double> z(4 * H);
        for (std::size_t g = 0; g < 4 * H; ++g) {
            double acc = b(0, g);
            for (std::size_t k = 0; k < x.c; ++k) {
                acc += x(t, k) * wx(k, g);
            }
            for (std::size_t k = 0; k < H; ++k) {
                acc += h[k] * wh(k, g);
            }
            z[g] = acc;
        }
        for (std::size_t k = 0; k < H; ++k) {
            double i = sigm(z[k]), f = sigm(z[H + k]), g = std::tanh(z[2 * H + k]), o = sigm(z[3 * H + k]);
            c[k] = f * c[k] + i * g;
            h[k] = o * std::tanh(c[k]);
            out(t, k) = h[k];
        }
    }
    return out;
}

inline Mat bilstm(const Mat& x, const BiLstmParams& p)
{
    Mat f = lstm_dir(x, p.forward, false), b = lstm_dir(x, p.backward, true);
    Mat out(x.r, f.c + b.c);
    for (std::size_t t = 0; t < x.r; ++t) {
        for (std::size_t k = 0; k < f.c; ++k) {
            out(t, k) = f(t, k);
            out(t, f.c + k) = b(t, k);
        }
    }
    return out;
}

inline Mat segment_means_upsampled(const Mat& h, std::size_t M)
{
    const std::size_t T = h.r;
    Mat out(T, h.c);
    std::size_t start = 0;
    for (std::size_t m = 0; m < M; ++m) {
        std::size_t len = T / M + (m < T % M ? 1 : 0);
        for (std::size_t k = 0; k < h.c; ++k) {
            double s = 0.0;
            for (std::size_t t = start; t < start + len; ++t) {
                s += h(t, k);
            }
            for (std::size_t t = start; t < start + len; ++t) {
                out(t, k) = s / static_cast<double>(len);
            }
        }
        start += len;
    }
    return out;
}

inline Mat gate(const Mat& h, const GatedAttention& g)
{
    Mat w(g.w_g);
    Mat out(h.r, h.c);
    for (std::size_t t = 0; t < h.r; ++t) {
        for (std::size_t j = 0; j < h.c; ++j) {
            double z = 0.0;
            for (std::size_t k = 0; k < h.c; ++k) {
                double prev = t == 0 ? h(t, k) : h(t - 1, k);
                z += h(t, k) * w(k, j) + (h(t, k) - prev) * w(h.c + k, j);
            }
            out(t, j) = sigm(z) * h(t, j);
        }
    }
    return out;
}

inline Mat layer_norm(const Mat& x, const Tensor& gamma, const Tensor& beta)
{
    Mat out(x.r, x.c);
    for (std::size_t i = 0; i < x.r; ++i) {
        double mu = 0.0;
        for (std::size_t k = 0; k < x.c; ++k) {
            mu += x(i, k);
        }
        mu /= static_cast<double>(x.c);
        double var = 0.0;
        for (std::size_t k = 0; k < x.c; ++k) {
            var += (x(i, k) - mu) * (x(i, k) - mu);
        }
        var /= static_cast<double>(x.c);
        for (std::size_t k = 0; k < x.c; ++k) {
            out(i, k) = (x(i, k) - mu) / std::sqrt(var + 1e-5) * gamma.data()[k] + beta.data()[k];
        }
    }
    return out;
}

inline Mat transformer_layer(const Mat& x, const TransformerLayer& L)
{
    const std::size_t T = x.r, D = x.c, dh = D / L.heads;
    Mat q = mat_mul(x, Mat(L.wq)), k = mat_mul(x, Mat(L.wk)), v = mat_mul(x, Mat(L.wv));
    Mat heads(T, D);
    for (std::size_t hd = 0; hd < L.heads; ++hd) {
        for (std::size_t i = 0; i < T; ++i) {
            std::vector<double> s(T);
            double mx = -1e300;
            for (std::size_t j = 0; j < T; ++j) {
                double dot = 0.0;
                for (std::size_t e = 0; e < dh; ++e) {
                    dot += q(i, hd * dh + e) * k(j, hd * dh + e);
                }
                s[j] = dot / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, s[j]);
            }
            double z = 0.0;
            for (auto& sj : s) {
                sj = std::exp(sj - mx);
                z += sj;
            }
            for (std::size_t e = 0; e < dh; ++e) {
                double acc = 0.0;
                for (std::size_t j = 0; j < T; ++j) {
                    acc += s[j] / z * v(j, hd * dh + e);
                }
                heads(i, hd * dh + e) = acc;
            }
        }
    }
    Mat a = affine(heads, L.wo);
    Mat r1(T, D);
    for (std::size_t i = 0; i < r1.v.size(); ++i) {
        r1.v[i] = x.v[i] + a.v[i];
    }
    Mat x1 = layer_norm(r1, L.ln1_gamma, L.ln1_beta);
    Mat f = affine(x1, L.ff1);
    for (auto& e : f.v) {
        e = e > 0 ? e : 0.0;
    }
    f = affine(f, L.ff2);
    for (std::size_t i = 0; i < f.v.size(); ++i) {
        f.v[i] += x1.v[i];
    }
    return layer_norm(f, L.ln2_gamma, L.ln2_beta);
}

struct OracleOutput {
    std::vector<double> prediction;
    Mat beta;  // [T x k]
};

inline OracleOutput model_forward(const FusionModel& m, const ModelInputs& in)
{
    const auto& cfg = m.config();
    const std::size_t T = in.frames();
    std::vector<Mat> streams;
    std::vector<const Mlp*> scorers;
    if (cfg.modalities.visual) {
        Mat h = tcn(Mat(in.visual), m.tcn);
        if (cfg.tfe) {
            h = segment_means_upsampled(h, cfg.segments);
        }
        streams.push_back(mlp(h, m.map_visual));
        scorers.push_back(&m.score_visual);
    }
    if (cfg.modalities.audio) {
        Mat h = bilstm(Mat(in.audio), m.lstm);
        if (cfg.tfe) {
            h = gate(h, m.gate);
        }
        streams.push_back(mlp(h, m.map_audio));
        scorers.push_back(&m.score_audio);
    }
    if (cfg.modalities.text) {
        Mat s = mlp(Mat(in.text), m.map_text);
        Mat spread(T, s.c);
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t k = 0; k < s.c; ++k) {
                spread(t, k) = s(0, k);
            }
        }
        streams.push_back(spread);
        scorers.push_back(&m.score_text);
    }
    const std::size_t K = streams.size();
    Mat beta(T, K, 1.0 / static_cast<double>(K));
    if (cfg.qam) {
        for (std::size_t t = 0; t < T; ++t) {
            std::vector<double> q(K);
            double mx = -1e300;
            for (std::size_t i = 0; i < K; ++i) {
                Mat row(1, streams[i].c);
                for (std::size_t k = 0; k < row.c; ++k) {
                    row(0, k) = streams[i](t, k);
                }
                q[i] = mlp(row, *scorers[i])(0, 0);
                mx = std::max(mx, q[i]);
            }
            double z = 0.0;
            for (auto& e : q) {
                e = std::exp(e - mx);
                z += e;
            }
            for (std::size_t i = 0; i < K; ++i) {
                beta(t, i) = q[i] / z;
            }
        }
    }
    const std::size_t d = cfg.d_shared;
    const std::size_t D = cfg.mode == FusionMode::Sum ? d : d * K;
    Mat x(T, D);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t i = 0; i < K; ++i) {
            for (std::size_t k = 0; k < d; ++k) {
                const double val = beta(t, i) * streams[i](t, k);
                if (cfg.mode == FusionMode::Sum) {
                    x(t, k) += val;
                } else {
                    x(t, i * d + k) = val;
                }
            }
        }
        for (std::size_t k = 0; k < D; ++k) {
            const double i2 = static_cast<double>(k - k % 2);
            const double angle = static_cast<double>(t) / std::pow(10000.0, i2 / static_cast<double>(D));
            x(t, k) += k % 2 == 0 ? std::sin(angle) : std::cos(angle);
        }
    }
    for (const auto& layer : m.encoder) {
        x = transformer_layer(x, layer);
    }
    Mat pooled(1, D);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t k = 0; k < D; ++k) {
            pooled(0, k) += x(t, k) / static_cast<double>(T);
        }
    }
    Mat y = affine(pooled, m.head);
    OracleOutput out;
    for (double v : y.v) {
        out.prediction.push_back(sigm(v));
    }
    out.beta = beta;
    return out;
}

} // namespace emi::testing
