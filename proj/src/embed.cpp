#include "taskaug/embed.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>

namespace taskaug {

namespace {
std::atomic<std::uint64_t> next_instance{1};
} // namespace

void EmbedConfig::validate() const {
    if (blocks < 1) throw EmbedError("embed: blocks must be >= 1");
    if (channels < 1) throw EmbedError("embed: channels must be >= 1");
    if (in_channels < 1) throw EmbedError("embed: input channels must be >= 1");
    if (height < 1 || width < 1) throw EmbedError("embed: input height/width must be positive");
    const int div = 1 << blocks;
    if (height % div != 0 || width % div != 0)
        throw EmbedError("embed: input " + std::to_string(height) + "x" + std::to_string(width) +
                         " not divisible by 2^blocks = " + std::to_string(div));
    if (!(dropout >= 0.0 && dropout < 1.0)) throw EmbedError("embed: dropout must be in [0, 1)");
}

template <typename T>
ParamSet<T>::ParamSet(const EmbedConfig& config) : config_(config), instance_(next_instance++) {
    config_.validate();
    std::size_t offset = 0;
    for (int b = 0; b < config_.blocks; ++b) {
        offsets_.push_back(offset);
        offset += static_cast<std::size_t>(config_.channels) * 9 * config_.block_in_channels(b) +
                  static_cast<std::size_t>(config_.channels);
    }
    values_.assign(offset, T(0));
}

template <typename T>
ParamSet<T>::ParamSet(const ParamSet& other)
    : config_(other.config_), values_(other.values_), offsets_(other.offsets_), instance_(next_instance++) {}

template <typename T>
ParamSet<T>& ParamSet<T>::operator=(const ParamSet& other) {
    if (this != &other) {
        config_ = other.config_;
        values_ = other.values_;
        offsets_ = other.offsets_;
        ++generation_;
    }
    return *this;
}

template <typename T>
void ParamSet<T>::assign(std::span<const T> flat) {
    if (flat.size() != values_.size()) throw EmbedError("ParamSet::assign: length mismatch");
    std::copy(flat.begin(), flat.end(), values_.begin());
    ++generation_;
}

template <typename T>
std::size_t ParamSet<T>::bias_offset(int block) const {
    return weight_offset(block) + static_cast<std::size_t>(config_.channels) * 9 * config_.block_in_channels(block);
}

template <typename T>
std::size_t ParamSet<T>::weight_index(int block, int out, int in, int ky, int kx) const {
    const int cin = config_.block_in_channels(block);
    return weight_offset(block) + static_cast<std::size_t>(out) * 9 * cin +
           static_cast<std::size_t>(ky * 3 + kx) * cin + static_cast<std::size_t>(in);
}

template <typename T>
void ParamSet<T>::initialize(std::uint64_t seed) {
    RandomSource rng(seed, "init", 0);
    for (int b = 0; b < config_.blocks; ++b) {
        const int cin = config_.block_in_channels(b);
        const double stddev = std::sqrt(2.0 / (9.0 * cin));
        const std::size_t w0 = weight_offset(b);
        const std::size_t b0 = bias_offset(b);
        for (std::size_t i = w0; i < b0; ++i) values_[i] = static_cast<T>(stddev * rng.normal());
        for (int o = 0; o < config_.channels; ++o) values_[b0 + static_cast<std::size_t>(o)] = T(0);
    }
    ++generation_;
}

template class ParamSet<float>;
template class ParamSet<double>;

template <typename T>
Activation<T> images_to_activation(std::span<const Image> images, const EmbedConfig& config) {
    const int h = config.height, w = config.width, c = config.in_channels;
    Activation<T> a(c, static_cast<Eigen::Index>(images.size()) * h * w);
    for (std::size_t b = 0; b < images.size(); ++b) {
        const Image& img = images[b];
        if (img.height != h || img.width != w || img.channels != c)
            throw EmbedError("embed: image shape " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                             "x" + std::to_string(img.channels) + " does not match config " + std::to_string(h) +
                             "x" + std::to_string(w) + "x" + std::to_string(c));
        const Eigen::Index base = static_cast<Eigen::Index>(b) * h * w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int ch = 0; ch < c; ++ch)
                    a(ch, base + y * w + x) = static_cast<T>(img.at(y, x, ch)) / T(255);
    }
    return a;
}

template Activation<float> images_to_activation<float>(std::span<const Image>, const EmbedConfig&);
template Activation<double> images_to_activation<double>(std::span<const Image>, const EmbedConfig&);

namespace {

template <typename T>
using RowMajorMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Column p of `cols` stacks the 3x3 neighbourhood of pixel p, tap-major:
// rows [k*C, (k+1)*C) hold tap k = ky*3 + kx.
template <typename T>
void im2col(const Activation<T>& input, int batch, int h, int w, Activation<T>& cols) {
    const Eigen::Index c = input.rows();
    cols.setZero(9 * c, input.cols());
    for (int b = 0; b < batch; ++b)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const Eigen::Index p = (static_cast<Eigen::Index>(b) * h + y) * w + x;
                T* dst = cols.col(p).data();
                for (int ky = 0; ky < 3; ++ky) {
                    const int yy = y + ky - 1;
                    if (yy < 0 || yy >= h) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int xx = x + kx - 1;
                        if (xx < 0 || xx >= w) continue;
                        const Eigen::Index src = (static_cast<Eigen::Index>(b) * h + yy) * w + xx;
                        std::memcpy(dst + (ky * 3 + kx) * c, input.col(src).data(), sizeof(T) * static_cast<std::size_t>(c));
                    }
                }
            }
}

template <typename T>
void col2im_add(const Activation<T>& cols, int batch, int h, int w, Activation<T>& grad_input) {
    const Eigen::Index c = grad_input.rows();
    for (int b = 0; b < batch; ++b)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const Eigen::Index p = (static_cast<Eigen::Index>(b) * h + y) * w + x;
                for (int ky = 0; ky < 3; ++ky) {
                    const int yy = y + ky - 1;
                    if (yy < 0 || yy >= h) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int xx = x + kx - 1;
                        if (xx < 0 || xx >= w) continue;
                        const Eigen::Index dst = (static_cast<Eigen::Index>(b) * h + yy) * w + xx;
                        grad_input.col(dst) += cols.col(p).segment((ky * 3 + kx) * c, c);
                    }
                }
            }
}

} // namespace

template <typename T>
ForwardResult<T> forward(const ParamSet<T>& params, const Activation<T>& input, int batch, DrawSource* dropout_rng) {
    const EmbedConfig& cfg = params.config();
    if (input.rows() != cfg.in_channels ||
        input.cols() != static_cast<Eigen::Index>(batch) * cfg.height * cfg.width)
        throw EmbedError("embed: input activation shape does not match config");

    ForwardResult<T> result;
    result.cache.instance = params.instance();
    result.cache.generation = params.generation();
    result.cache.batch = batch;
    result.cache.blocks.resize(static_cast<std::size_t>(cfg.blocks));

    const auto values = params.values();
    const bool use_dropout = dropout_rng != nullptr && cfg.dropout > 0.0;
    Activation<T> current = input;
    int h = cfg.height, w = cfg.width;
    for (int blk = 0; blk < cfg.blocks; ++blk) {
        auto& bc = result.cache.blocks[static_cast<std::size_t>(blk)];
        const int cin = cfg.block_in_channels(blk);
        const int cout = cfg.channels;
        im2col(current, batch, h, w, bc.columns);

        RowMajorMap<T> weights(values.data() + params.weight_offset(blk), cout, 9 * cin);
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bias(values.data() + params.bias_offset(blk), cout);
        bc.pre_activation.noalias() = weights * bc.columns;
        bc.pre_activation.colwise() += bias;

        const int ph = h / 2, pw = w / 2;
        Activation<T> pooled(cout, static_cast<Eigen::Index>(batch) * ph * pw);
        bc.argmax.assign(static_cast<std::size_t>(pooled.size()), 0);
        for (int b = 0; b < batch; ++b)
            for (int y = 0; y < ph; ++y)
                for (int x = 0; x < pw; ++x) {
                    const Eigen::Index q = (static_cast<Eigen::Index>(b) * ph + y) * pw + x;
                    const Eigen::Index src[4] = {
                        (static_cast<Eigen::Index>(b) * h + 2 * y) * w + 2 * x,
                        (static_cast<Eigen::Index>(b) * h + 2 * y) * w + 2 * x + 1,
                        (static_cast<Eigen::Index>(b) * h + 2 * y + 1) * w + 2 * x,
                        (static_cast<Eigen::Index>(b) * h + 2 * y + 1) * w + 2 * x + 1,
                    };
                    for (int o = 0; o < cout; ++o) {
                        // leaky ReLU is monotone, so pool the pre-activations and
                        // activate the winner; strict > keeps the first maximum.
                        Eigen::Index best = src[0];
                        T best_val = bc.pre_activation(o, src[0]);
                        for (int k = 1; k < 4; ++k) {
                            const T v = bc.pre_activation(o, src[k]);
                            if (v > best_val) {
                                best_val = v;
                                best = src[k];
                            }
                        }
                        pooled(o, q) = leaky_relu(best_val);
                        bc.argmax[static_cast<std::size_t>(q * cout + o)] = static_cast<std::int32_t>(best);
                    }
                }
        if (use_dropout) {
            const T keep = T(1) / T(1.0 - cfg.dropout);
            bc.dropout_mask.resize(static_cast<std::size_t>(pooled.size()));
            for (Eigen::Index i = 0; i < pooled.size(); ++i) {
                const T m = dropout_rng->bernoulli(cfg.dropout) ? T(0) : keep;
                bc.dropout_mask[static_cast<std::size_t>(i)] = m;
                pooled.data()[i] *= m;
            }
        }
        current = std::move(pooled);
        h = ph;
        w = pw;
    }

    const int hw = h * w;
    result.embeddings.resize(batch, cfg.output_dim());
    for (int b = 0; b < batch; ++b)
        for (int c = 0; c < cfg.channels; ++c)
            for (int s = 0; s < hw; ++s)
                result.embeddings(b, c * hw + s) = current(c, static_cast<Eigen::Index>(b) * hw + s);
    return result;
}

template <typename T>
std::vector<T> backward(const ParamSet<T>& params, const ForwardCache<T>& cache, const Matrix<T>& grad_embeddings) {
    if (cache.instance != params.instance() || cache.generation != params.generation())
        throw EmbedError("embed: stale forward cache (parameters changed since forward)");
    const EmbedConfig& cfg = params.config();
    const int batch = cache.batch;
    if (grad_embeddings.rows() != batch || grad_embeddings.cols() != cfg.output_dim())
        throw EmbedError("embed: gradient shape does not match embeddings");

    std::vector<T> grads(params.size(), T(0));
    const auto values = params.values();

    int h = cfg.out_height(), w = cfg.out_width();
    const int hw = h * w;
    Activation<T> grad_out(cfg.channels, static_cast<Eigen::Index>(batch) * hw);
    for (int b = 0; b < batch; ++b)
        for (int c = 0; c < cfg.channels; ++c)
            for (int s = 0; s < hw; ++s)
                grad_out(c, static_cast<Eigen::Index>(b) * hw + s) = grad_embeddings(b, c * hw + s);

    for (int blk = cfg.blocks - 1; blk >= 0; --blk) {
        const auto& bc = cache.blocks[static_cast<std::size_t>(blk)];
        const int cin = cfg.block_in_channels(blk);
        const int cout = cfg.channels;
        const int fh = h * 2, fw = w * 2;

        if (!bc.dropout_mask.empty())
            for (Eigen::Index i = 0; i < grad_out.size(); ++i)
                grad_out.data()[i] *= bc.dropout_mask[static_cast<std::size_t>(i)];

        Activation<T> grad_pre = Activation<T>::Zero(cout, static_cast<Eigen::Index>(batch) * fh * fw);
        for (Eigen::Index q = 0; q < grad_out.cols(); ++q)
            for (int o = 0; o < cout; ++o) {
                const Eigen::Index src = bc.argmax[static_cast<std::size_t>(q * cout + o)];
                const T slope = bc.pre_activation(o, src) > T(0) ? T(1) : T(kLeakySlope);
                grad_pre(o, src) += slope * grad_out(o, q);
            }

        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> grad_w(
            grads.data() + params.weight_offset(blk), cout, 9 * cin);
        grad_w.noalias() += grad_pre * bc.columns.transpose();
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> grad_b(grads.data() + params.bias_offset(blk), cout);
        grad_b += grad_pre.rowwise().sum();

        if (blk > 0) {
            RowMajorMap<T> weights(values.data() + params.weight_offset(blk), cout, 9 * cin);
            Activation<T> grad_cols = weights.transpose() * grad_pre;
            Activation<T> grad_in = Activation<T>::Zero(cin, grad_pre.cols());
            col2im_add(grad_cols, batch, fh, fw, grad_in);
            grad_out = std::move(grad_in);
        }
        h = fh;
        w = fw;
    }
    return grads;
}

template ForwardResult<float> forward<float>(const ParamSet<float>&, const Activation<float>&, int, DrawSource*);
template ForwardResult<double> forward<double>(const ParamSet<double>&, const Activation<double>&, int, DrawSource*);
template std::vector<float> backward<float>(const ParamSet<float>&, const ForwardCache<float>&, const Matrix<float>&);
template std::vector<double> backward<double>(const ParamSet<double>&, const ForwardCache<double>&,
                                              const Matrix<double>&);

template <typename T>
void sgd_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity, double lr, double momentum,
              double weight_decay) {
    if (params.size() != grads.size() || params.size() != velocity.size())
        throw std::invalid_argument("sgd_step: parameter, gradient and velocity lengths differ");
    for (T g : grads)
        if (!std::isfinite(static_cast<double>(g))) throw std::domain_error("sgd_step: non-finite gradient");
    const T m = static_cast<T>(momentum);
    const T wd = static_cast<T>(weight_decay);
    const T step = static_cast<T>(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const T g = grads[i] + wd * params[i];
        velocity[i] = m * velocity[i] + g;
        params[i] -= step * (g + m * velocity[i]);
    }
}

template void sgd_step<float>(std::span<float>, std::span<const float>, std::span<float>, double, double, double);
template void sgd_step<double>(std::span<double>, std::span<const double>, std::span<double>, double, double,
                               double);

void sgd_step(std::span<float> params, std::span<const float> grads, OptimState& state) {
    if (state.velocity.size() != params.size()) throw std::invalid_argument("sgd_step: velocity length mismatch");
    sgd_step<float>(params, grads, state.velocity, state.lr, state.momentum, state.weight_decay);
}

double clip_gradient_norm(std::span<float> grads, double max_norm) {
    double sum_sq = 0.0;
    for (float g : grads) sum_sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sum_sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const float factor = static_cast<float>(max_norm / norm);
        for (auto& g : grads) g *= factor;
    }
    return norm;
}

void LrSchedule::validate() const {
    if (!(base > 0.0)) throw std::invalid_argument("lr schedule: base rate must be > 0");
    if (milestones.size() != multipliers.size())
        throw std::invalid_argument("lr schedule: milestones and multipliers differ in length");
    for (std::size_t i = 1; i < milestones.size(); ++i)
        if (milestones[i] <= milestones[i - 1])
            throw std::invalid_argument("lr schedule: milestones must be strictly increasing");
    for (double m : multipliers)
        if (!(m > 0.0)) throw std::invalid_argument("lr schedule: multipliers must be > 0");
}

double lr_at(const LrSchedule& schedule, int epoch) {
    double factor = 1.0;
    for (std::size_t i = 0; i < schedule.milestones.size(); ++i)
        if (epoch >= schedule.milestones[i]) factor = schedule.multipliers[i];
    return schedule.base * factor;
}

} // namespace taskaug
