#pragma once

// Reference implementations used only by tests. Each one takes a different
// route from the library code it checks: explicit loops instead of matrix
// expressions, the primal ridge system instead of the dual one, finite
// differences instead of analytic gradients.

#include "taskaug/embed.hpp"
#include "taskaug/heads.hpp"

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

namespace taskaug::oracle {

using Mat = Matrix<double>;

inline Mat random_matrix(Eigen::Index rows, Eigen::Index cols, DrawSource& rng, double scale = 1.0) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
    return m;
}

inline std::vector<int> balanced_labels(int ways, int per_class) {
    std::vector<int> out;
    for (int n = 0; n < ways; ++n)
        for (int k = 0; k < per_class; ++k) out.push_back(n);
    return out;
}

inline Mat naive_proto_logits(const Mat& support, std::span<const int> labels, int ways, const Mat& query,
                              double scale) {
    const auto d = support.cols();
    std::vector<std::vector<double>> centers(static_cast<std::size_t>(ways), std::vector<double>(static_cast<std::size_t>(d), 0.0));
    std::vector<int> counts(static_cast<std::size_t>(ways), 0);
    for (Eigen::Index i = 0; i < support.rows(); ++i) {
        const auto y = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
        for (Eigen::Index j = 0; j < d; ++j) centers[y][static_cast<std::size_t>(j)] += support(i, j);
        ++counts[y];
    }
    Mat out(query.rows(), ways);
    for (Eigen::Index q = 0; q < query.rows(); ++q)
        for (int n = 0; n < ways; ++n) {
            double dist = 0.0;
            for (Eigen::Index j = 0; j < d; ++j) {
                const double diff = query(q, j) - centers[static_cast<std::size_t>(n)][static_cast<std::size_t>(j)] / counts[static_cast<std::size_t>(n)];
                dist += diff * diff;
            }
            out(q, n) = -scale * dist;
        }
    return out;
}

// Primal normal equations W = (X^T X + lambda I)^-1 X^T Y, solved by LU.
inline Mat primal_ridge_logits(const Mat& support, std::span<const int> labels, int ways, const Mat& query,
                               double scale, double bias, double lambda) {
    Mat y = Mat::Zero(support.rows(), ways);
    for (Eigen::Index i = 0; i < support.rows(); ++i) y(i, labels[static_cast<std::size_t>(i)]) = 1.0;
    Mat normal = support.transpose() * support;
    normal += lambda * Mat::Identity(support.cols(), support.cols());
    const Mat w = normal.fullPivLu().solve(Mat(support.transpose() * y));
    Mat out = scale * (query * w);
    out.array() += bias;
    return out;
}

// Plain nested-loop 3x3 convolution (pad 1) of one HWC double image for one
// block: returns pre-activations [out][y][x].
inline std::vector<double> naive_conv3x3(const std::vector<double>& input_chw, int in_ch, int h, int w,
                                         const ParamSet<double>& params, int block) {
    const int out_ch = params.config().channels;
    const auto values = params.values();
    std::vector<double> out(static_cast<std::size_t>(out_ch * h * w), 0.0);
    for (int o = 0; o < out_ch; ++o)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = values[params.bias_offset(block) + static_cast<std::size_t>(o)];
                for (int c = 0; c < in_ch; ++c)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int yy = y + ky - 1, xx = x + kx - 1;
                            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                            acc += values[params.weight_index(block, o, c, ky, kx)] *
                                   input_chw[static_cast<std::size_t>((c * h + yy) * w + xx)];
                        }
                out[static_cast<std::size_t>((o * h + y) * w + x)] = acc;
            }
    return out;
}

// Full naive embedding of a single image given in CHW double layout.
inline std::vector<double> naive_embed(std::vector<double> act, const ParamSet<double>& params) {
    const auto& cfg = params.config();
    int h = cfg.height, w = cfg.width, c = cfg.in_channels;
    for (int b = 0; b < cfg.blocks; ++b) {
        auto pre = naive_conv3x3(act, c, h, w, params, b);
        c = cfg.channels;
        std::vector<double> pooled(static_cast<std::size_t>(c * (h / 2) * (w / 2)));
        for (int o = 0; o < c; ++o)
            for (int y = 0; y < h / 2; ++y)
                for (int x = 0; x < w / 2; ++x) {
                    double m = -1e300;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const double v = pre[static_cast<std::size_t>((o * h + 2 * y + dy) * w + 2 * x + dx)];
                            const double act_v = v > 0 ? v : 0.1 * v;
                            m = std::max(m, act_v);
                        }
                    pooled[static_cast<std::size_t>((o * (h / 2) + y) * (w / 2) + x)] = m;
                }
        act = std::move(pooled);
        h /= 2;
        w /= 2;
    }
    return act;
}

// Central differences of f at theta along every coordinate.
inline std::vector<double> finite_difference(const std::function<double(std::span<const double>)>& f,
                                             std::vector<double> theta, double step) {
    std::vector<double> grad(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double saved = theta[i];
        theta[i] = saved + step;
        const double up = f(theta);
        theta[i] = saved - step;
        const double down = f(theta);
        theta[i] = saved;
        grad[i] = (up - down) / (2.0 * step);
    }
    return grad;
}

// ||a - b|| / max(||a||, ||b||), the norm-wise relative error.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
    double diff = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::max(std::sqrt(na), std::sqrt(nb));
    return denom == 0.0 ? std::sqrt(diff) : std::sqrt(diff) / denom;
}

inline std::vector<double> to_vector(const Mat& m) {
    return std::vector<double>(m.data(), m.data() + m.size());
}

} // namespace taskaug::oracle
