#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace taskaug {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class HeadKind { proto, ridge };

HeadKind parse_head_kind(std::string_view name);
std::string_view to_string(HeadKind kind);

template <typename T>
struct HeadParams {
    T scale = T(1);
    T bias = T(0);     // ridge only
    T lambda = T(50);  // ridge only, fixed
};

template <typename T>
struct HeadGradients {
    Matrix<T> support;
    Matrix<T> query;
    T scale = T(0);
    T bias = T(0);
};

class HeadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline void check_labels(std::span<const int> labels, int ways, Eigen::Index rows) {
    if (static_cast<Eigen::Index>(labels.size()) != rows)
        throw HeadError("head: support label count does not match support rows");
    for (int y : labels)
        if (y < 0 || y >= ways) throw HeadError("head: label outside 0..N-1");
}

template <typename T>
Matrix<T> one_hot(std::span<const int> labels, int ways) {
    Matrix<T> y = Matrix<T>::Zero(static_cast<Eigen::Index>(labels.size()), ways);
    for (std::size_t i = 0; i < labels.size(); ++i) y(static_cast<Eigen::Index>(i), labels[i]) = T(1);
    return y;
}

template <typename T>
struct Prototypes {
    Matrix<T> centers;        // N x d
    std::vector<int> counts;  // support rows per class
};

template <typename T>
Prototypes<T> prototypes(const Matrix<T>& support, std::span<const int> labels, int ways) {
    check_labels(labels, ways, support.rows());
    Prototypes<T> p{Matrix<T>::Zero(ways, support.cols()), std::vector<int>(static_cast<std::size_t>(ways), 0)};
    for (Eigen::Index i = 0; i < support.rows(); ++i) {
        p.centers.row(labels[static_cast<std::size_t>(i)]) += support.row(i);
        ++p.counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
    }
    for (int n = 0; n < ways; ++n) {
        if (p.counts[static_cast<std::size_t>(n)] == 0) throw HeadError("proto head: a class has no support rows");
        p.centers.row(n) /= T(p.counts[static_cast<std::size_t>(n)]);
    }
    return p;
}

// Squared distances ||q - c_n||^2, Q x N.
template <typename T>
Matrix<T> squared_distances(const Matrix<T>& query, const Matrix<T>& centers) {
    Matrix<T> d(query.rows(), centers.rows());
    for (Eigen::Index q = 0; q < query.rows(); ++q)
        for (Eigen::Index n = 0; n < centers.rows(); ++n) d(q, n) = (query.row(q) - centers.row(n)).squaredNorm();
    return d;
}

template <typename T>
struct RidgeSolution {
    Eigen::LLT<Matrix<T>> factor;  // of X X^T + lambda I
    Matrix<T> alpha;               // (X X^T + lambda I)^-1 Y, NK x N
    Matrix<T> weights;             // X^T alpha, d x N
};

template <typename T>
RidgeSolution<T> solve_ridge(const Matrix<T>& support, std::span<const int> labels, int ways, T lambda) {
    check_labels(labels, ways, support.rows());
    if (lambda < T(0)) throw HeadError("ridge head: lambda must be >= 0");
    const Eigen::Index rows = support.rows();
    Matrix<T> gram = support * support.transpose();
    gram.diagonal().array() += lambda;
    RidgeSolution<T> s;
    s.factor.compute(gram);
    if (s.factor.info() != Eigen::Success)
        throw HeadError("ridge head: X X^T + lambda I is singular (lambda = 0 with rank-deficient support)");
    s.alpha = s.factor.solve(one_hot<T>(labels, ways));
    if (!s.alpha.allFinite() || rows == 0) throw HeadError("ridge head: singular system");
    s.weights = support.transpose() * s.alpha;
    return s;
}

} // namespace detail

// logit(q, n) = -scale * ||q - c_n||^2 with c_n the class-n support mean.
template <typename T>
Matrix<T> proto_logits(const Matrix<T>& support, std::span<const int> support_labels, int ways,
                       const Matrix<T>& query, const HeadParams<T>& params) {
    const auto protos = detail::prototypes(support, support_labels, ways);
    return -params.scale * detail::squared_distances(query, protos.centers);
}

template <typename T>
HeadGradients<T> proto_backward(const Matrix<T>& support, std::span<const int> support_labels, int ways,
                                const Matrix<T>& query, const HeadParams<T>& params, const Matrix<T>& grad_logits) {
    const auto protos = detail::prototypes(support, support_labels, ways);
    const Matrix<T> dist = detail::squared_distances(query, protos.centers);
    HeadGradients<T> g;
    g.scale = -(grad_logits.array() * dist.array()).sum();

    // d logit(q,n) / d q = -2 s (q - c_n); d / d c_n = +2 s (q - c_n).
    const Matrix<T> weighted = -T(2) * params.scale * grad_logits;  // Q x N
    const Eigen::Matrix<T, Eigen::Dynamic, 1> row_sum = weighted.rowwise().sum();
    g.query = row_sum.asDiagonal() * query - weighted * protos.centers;

    const Eigen::Matrix<T, 1, Eigen::Dynamic> col_sum = weighted.colwise().sum();
    Matrix<T> grad_centers = col_sum.transpose().asDiagonal() * protos.centers - weighted.transpose() * query;
    g.support.resize(support.rows(), support.cols());
    for (Eigen::Index i = 0; i < support.rows(); ++i) {
        const int y = support_labels[static_cast<std::size_t>(i)];
        g.support.row(i) = grad_centers.row(y) / T(protos.counts[static_cast<std::size_t>(y)]);
    }
    return g;
}

// Dual-form ridge regression onto one-hot targets:
//   W = X^T (X X^T + lambda I)^-1 Y,  logits = scale * (Q W) + bias.
template <typename T>
Matrix<T> ridge_logits(const Matrix<T>& support, std::span<const int> support_labels, int ways,
                       const Matrix<T>& query, const HeadParams<T>& params) {
    const auto s = detail::solve_ridge(support, support_labels, ways, params.lambda);
    Matrix<T> logits = params.scale * (query * s.weights);
    logits.array() += params.bias;
    return logits;
}

template <typename T>
HeadGradients<T> ridge_backward(const Matrix<T>& support, std::span<const int> support_labels, int ways,
                                const Matrix<T>& query, const HeadParams<T>& params, const Matrix<T>& grad_logits) {
    const auto s = detail::solve_ridge(support, support_labels, ways, params.lambda);
    const Matrix<T> projected = query * s.weights;
    HeadGradients<T> g;
    g.scale = (grad_logits.array() * projected.array()).sum();
    g.bias = grad_logits.sum();

    const Matrix<T> grad_proj = params.scale * grad_logits;       // Q x N
    g.query = grad_proj * s.weights.transpose();                    // Q x d
    const Matrix<T> grad_w = query.transpose() * grad_proj;         // d x N
    // W = X^T alpha, alpha = A^-1 Y, A = X X^T + lambda I (symmetric).
    g.support = s.alpha * grad_w.transpose();                       // via X^T
    const Matrix<T> grad_alpha = support * grad_w;                  // NK x N
    const Matrix<T> z = s.factor.solve(grad_alpha);
    const Matrix<T> grad_a = -(z * s.alpha.transpose());
    g.support += (grad_a + grad_a.transpose()) * support;
    return g;
}

template <typename T>
Matrix<T> head_logits(HeadKind kind, const Matrix<T>& support, std::span<const int> support_labels, int ways,
                      const Matrix<T>& query, const HeadParams<T>& params) {
    return kind == HeadKind::proto ? proto_logits(support, support_labels, ways, query, params)
                                   : ridge_logits(support, support_labels, ways, query, params);
}

template <typename T>
HeadGradients<T> head_backward(HeadKind kind, const Matrix<T>& support, std::span<const int> support_labels,
                               int ways, const Matrix<T>& query, const HeadParams<T>& params,
                               const Matrix<T>& grad_logits) {
    HeadGradients<T> g = kind == HeadKind::proto
                             ? proto_backward(support, support_labels, ways, query, params, grad_logits)
                             : ridge_backward(support, support_labels, ways, query, params, grad_logits);
    if (kind == HeadKind::proto) g.bias = T(0);
    return g;
}

template <typename T>
struct LossResult {
    T loss = T(0);
    Matrix<T> grad_logits;
};

// Mean over rows of -log softmax(logits)[label], with max subtraction.
template <typename T>
LossResult<T> cross_entropy_loss(const Matrix<T>& logits, std::span<const int> labels) {
    if (static_cast<Eigen::Index>(labels.size()) != logits.rows())
        throw HeadError("cross_entropy_loss: label count does not match logit rows");
    LossResult<T> out{T(0), Matrix<T>(logits.rows(), logits.cols())};
    const T inv_rows = T(1) / T(logits.rows());
    for (Eigen::Index q = 0; q < logits.rows(); ++q) {
        const int y = labels[static_cast<std::size_t>(q)];
        if (y < 0 || y >= logits.cols()) throw HeadError("cross_entropy_loss: label out of range");
        const T peak = logits.row(q).maxCoeff();
        auto shifted = (logits.row(q).array() - peak).eval();
        auto e = shifted.exp().eval();
        const T total = e.sum();
        out.loss += (std::log(total) - shifted(y)) * inv_rows;
        out.grad_logits.row(q) = (e / total) * inv_rows;
        out.grad_logits(q, y) -= inv_rows;
    }
    return out;
}

// Row-wise softmax, numerically stabilized.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
    Matrix<T> p(logits.rows(), logits.cols());
    for (Eigen::Index q = 0; q < logits.rows(); ++q) {
        auto e = (logits.row(q).array() - logits.row(q).maxCoeff()).exp().eval();
        p.row(q) = e / e.sum();
    }
    return p;
}

// Argmax with ties going to the lowest class index.
template <typename Derived>
int argmax_row(const Eigen::DenseBase<Derived>& row) {
    int best = 0;
    for (Eigen::Index n = 1; n < row.size(); ++n)
        if (row(n) > row(best)) best = static_cast<int>(n);
    return best;
}

template <typename T>
double episode_accuracy(const Matrix<T>& scores, std::span<const int> labels) {
    if (static_cast<Eigen::Index>(labels.size()) != scores.rows())
        throw HeadError("episode_accuracy: label count does not match rows");
    if (scores.rows() == 0) return 0.0;
    int correct = 0;
    for (Eigen::Index q = 0; q < scores.rows(); ++q)
        if (argmax_row(scores.row(q)) == labels[static_cast<std::size_t>(q)]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(scores.rows());
}

} // namespace taskaug
