#pragma once

#include "taskaug/dataset.hpp"
#include "taskaug/heads.hpp"
#include "taskaug/random.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace taskaug {

// Conv-N embedding: each block is 3x3 conv (stride 1, pad 1) -> leaky ReLU
// (slope 0.1) -> 2x2 max-pool. The final feature map is flattened (c, y, x)
// without global pooling, so d = channels * (side / 2^blocks)^2.
struct EmbedConfig {
    int blocks = 4;
    int channels = 32;
    int height = 32;
    int width = 32;
    int in_channels = 3;
    // Inverted dropout after each block's pooling; 0 disables it.
    double dropout = 0.0;

    void validate() const;
    int out_height() const { return height >> blocks; }
    int out_width() const { return width >> blocks; }
    int output_dim() const { return channels * out_height() * out_width(); }
    int block_in_channels(int block) const { return block == 0 ? in_channels : channels; }

    friend bool operator==(const EmbedConfig&, const EmbedConfig&) = default;
};

inline constexpr double kLeakySlope = 0.1;

template <typename T>
T leaky_relu(T x) {
    return x > T(0) ? x : T(kLeakySlope) * x;
}

class EmbedError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Flat parameter vector with a per-block layout. Conv weights are stored
// [out][ky][kx][in], followed by that block's biases [out].
template <typename T>
class ParamSet {
public:
    ParamSet() = default;
    explicit ParamSet(const EmbedConfig& config);
    ParamSet(const ParamSet& other);
    ParamSet& operator=(const ParamSet& other);
    ParamSet(ParamSet&&) noexcept = default;
    ParamSet& operator=(ParamSet&&) noexcept = default;

    const EmbedConfig& config() const { return config_; }
    std::size_t size() const { return values_.size(); }
    std::span<const T> values() const { return values_; }
    // Mutable access invalidates forward caches taken before it.
    std::span<T> mutable_values() {
        ++generation_;
        return values_;
    }
    void assign(std::span<const T> flat);

    std::size_t weight_offset(int block) const { return offsets_.at(static_cast<std::size_t>(block)); }
    std::size_t bias_offset(int block) const;
    std::size_t weight_index(int block, int out, int in, int ky, int kx) const;

    std::uint64_t instance() const { return instance_; }
    std::uint64_t generation() const { return generation_; }

    // Kaiming fan-in normal weights, zero biases.
    void initialize(std::uint64_t seed);

private:
    EmbedConfig config_;
    std::vector<T> values_;
    std::vector<std::size_t> offsets_;
    std::uint64_t instance_ = 0;
    std::uint64_t generation_ = 0;
};

// Activations for a batch: rows are channels, columns are pixels ordered
// (image, row, column).
template <typename T>
using Activation = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

// Converts 8-bit HWC images to unit-interval activations (value / 255).
template <typename T>
Activation<T> images_to_activation(std::span<const Image> images, const EmbedConfig& config);

template <typename T>
struct ForwardCache {
    std::uint64_t instance = 0;
    std::uint64_t generation = 0;
    int batch = 0;
    struct Block {
        Activation<T> columns;            // im2col of the block input, (9*C_in) x pixels
        Activation<T> pre_activation;     // C_out x pixels
        std::vector<std::int32_t> argmax; // pooled position -> source pixel
        std::vector<T> dropout_mask;      // empty when dropout is off
    };
    std::vector<Block> blocks;
};

template <typename T>
struct ForwardResult {
    Matrix<T> embeddings;  // batch x d
    ForwardCache<T> cache;
};

// `dropout_rng` enables training-mode dropout when config.dropout > 0.
template <typename T>
ForwardResult<T> forward(const ParamSet<T>& params, const Activation<T>& input, int batch,
                         DrawSource* dropout_rng = nullptr);

template <typename T>
ForwardResult<T> forward(const ParamSet<T>& params, std::span<const Image> images,
                         DrawSource* dropout_rng = nullptr) {
    return forward(params, images_to_activation<T>(images, params.config()), static_cast<int>(images.size()),
                   dropout_rng);
}

// Returns the gradient w.r.t. the flat parameter vector. Throws EmbedError
// if `params` changed (or is a different object) since the forward pass.
template <typename T>
std::vector<T> backward(const ParamSet<T>& params, const ForwardCache<T>& cache, const Matrix<T>& grad_embeddings);

struct OptimState {
    std::vector<float> velocity;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 0.0005;
};

// Nesterov SGD with coupled weight decay:
//   g' = g + wd*theta;  v = m*v + g';  theta -= lr * (g' + m*v).
// Throws std::domain_error on a non-finite gradient, leaving params untouched.
template <typename T>
void sgd_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity, double lr, double momentum,
              double weight_decay);

void sgd_step(std::span<float> params, std::span<const float> grads, OptimState& state);

// Rescales `grads` in place so its L2 norm is at most max_norm (0 disables).
// Returns the norm before rescaling.
double clip_gradient_norm(std::span<float> grads, double max_norm);

struct LrSchedule {
    double base = 0.1;
    std::vector<int> milestones{20, 40, 50};
    std::vector<double> multipliers{0.06, 0.012, 0.0024};

    void validate() const;
};

// Piecewise constant: base * multipliers[i] from milestones[i] onward.
double lr_at(const LrSchedule& schedule, int epoch);

extern template class ParamSet<float>;
extern template class ParamSet<double>;

} // namespace taskaug
