#pragma once

#include "taskaug/embed.hpp"
#include "taskaug/heads.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace taskaug {

// Everything that fixes the shape and meaning of a parameter vector.
struct ModelSpec {
    EmbedConfig embed;
    HeadKind head = HeadKind::proto;
    double lambda = 50.0;

    std::string canonical() const;
    // FNV-1a of canonical(); stored in checkpoints to reject foreign configs.
    std::uint64_t hash() const;
};

template <typename T>
struct Model {
    ParamSet<T> embed;
    HeadParams<T> head;

    // Embedding parameters followed by [scale, bias].
    std::vector<T> flatten() const;
    void unflatten(std::span<const T> flat);
    std::size_t flat_size() const { return embed.size() + 2; }
};

// Builds a freshly initialized model (Kaiming weights, scale 1, bias 0).
Model<float> make_model(const ModelSpec& spec, std::uint64_t seed, float init_scale = 1.0f, float init_bias = 0.0f);

// Head-level forward and gradient for one episode through the shared
// embedding: support and query images go through one batched forward pass.
template <typename T>
struct EpisodeOutcome {
    T loss = T(0);
    double accuracy = 0.0;
    Matrix<T> logits;
    std::vector<T> grads;  // same layout as Model::flatten(); empty unless requested
};

// `images` holds the support images followed by the query images.
template <typename T>
EpisodeOutcome<T> run_episode(const Model<T>& model, HeadKind head, const Activation<T>& images,
                              std::span<const int> support_labels, std::span<const int> query_labels, int ways,
                              bool with_grads, DrawSource* dropout_rng = nullptr);

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    int epoch = 0;
    std::uint64_t config_hash = 0;
    std::uint64_t ramp_t = 0;
    Model<float> model;
};

inline constexpr char kCheckpointMagic[8] = {'T', 'A', 'U', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (little endian): magic[8], version u32, config_hash u64, epoch u32,
// ramp_t u64, count u64, then `count` IEEE-754 float32 parameters.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const ModelSpec& spec);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelSpec& spec);

// Raw float32 vector file (same little-endian encoding), used for optimizer velocity.
void save_floats(const std::filesystem::path& path, std::span<const float> values, int epoch);
std::vector<float> load_floats(const std::filesystem::path& path, int& epoch);

} // namespace taskaug
