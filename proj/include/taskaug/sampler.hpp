#pragma once

#include "taskaug/dataset.hpp"
#include "taskaug/random.hpp"

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace taskaug {

// The novel classes are the 3M rotated copies of M originals, so p_max must
// stay below their share (3M / 4M) for each novel class to be drawn less
// often than each original one.
inline constexpr double kMaxNovelProbability = 0.75;

struct SamplerParams {
    int ways = 5;
    int shots = 1;
    int queries = 6;
    double p_max = 0.0;
    std::uint64_t ramp_episodes = 1;

    // Throws std::invalid_argument on the first violated bound.
    void validate() const;
    // Also checks N <= M and K+H <= smallest class.
    void validate_for(std::span<const std::size_t> class_sizes) const;
};

// Episode counter owned by the training loop; advanced once per sampled episode.
struct RampState {
    std::uint64_t t = 0;
};

double ramp_probability(std::uint64_t t, std::uint64_t ramp_episodes, double p_max);

// A class slot in an episode. base_class is 1-based into the split's class
// list; rotation is the number of counter-clockwise quarter turns.
struct ClassDescriptor {
    int base_class = 1;
    int rotation = 0;

    friend bool operator==(const ClassDescriptor&, const ClassDescriptor&) = default;
};

// Maps an augmented class id u in [M, 4M-1] to (v, r) with v in [1, M], r in {1, 2, 3}.
ClassDescriptor decode_novel_class(int u, int class_count);

struct ExampleRef {
    int slot = 0;        // episode-local label, index into Episode::classes
    int image_index = 0; // index within the base class
    int rotation = 0;    // total quarter turns applied to this image

    friend bool operator==(const ExampleRef&, const ExampleRef&) = default;
};

struct Episode {
    std::uint64_t seed = 0;
    std::uint64_t episode_index = 0;
    std::vector<ClassDescriptor> classes;
    std::vector<ExampleRef> support;
    std::vector<ExampleRef> query;

    int ways() const { return static_cast<int>(classes.size()); }
    int novel_count() const;
    std::vector<int> support_labels() const;
    std::vector<int> query_labels() const;

    friend bool operator==(const Episode&, const Episode&) = default;
};

// Checks the structural episode invariants: counts per label, support/query
// disjointness, distinct (v, r) descriptors and rotation codes in range.
void check_episode(const Episode& episode, int shots, int queries, std::span<const std::size_t> class_sizes);

// Task augmentation by rotation. Advances state.t, derives p from the ramp,
// draws n ~ Binomial(N, p), takes N-n originals and n novel classes without
// replacement, then K+H distinct images per class (first K support, last H query).
Episode sample_episode(std::span<const std::size_t> class_sizes, const SamplerParams& params, RampState& state,
                       DrawSource& draws, std::uint64_t seed = 0);

// Control variant: classes are always originals; each image independently is
// rotated by r ~ U{1,2,3} with probability p. Labels are unchanged.
Episode sample_episode_imageaug(std::span<const std::size_t> class_sizes, const SamplerParams& params,
                                RampState& state, DrawSource& draws, std::uint64_t seed = 0);

enum class AugmentMode { task, image };

AugmentMode parse_augment_mode(std::string_view name);
std::string_view to_string(AugmentMode mode);

// Seeded entry point: the draw stream is keyed on (seed, state.t), so the
// episode only depends on (class sizes, params, seed, episode index).
Episode sample_seeded(const ClassDataset& dataset, const SamplerParams& params, RampState& state,
                      std::uint64_t seed, AugmentMode mode = AugmentMode::task);

class ManifestError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string dump_episode(const Episode& episode);
Episode load_episode(std::string_view manifest);

// Per-example transforms applied after the class-defining rotation.
struct AugmentOptions {
    bool flip = false;
    int crop_pad = 0;
};

struct EpisodeImages {
    std::vector<Image> support;
    std::vector<int> support_labels;
    std::vector<Image> query;
    std::vector<int> query_labels;
};

// Resolves an episode against the dataset: rotates each image by its
// rotation code, then applies flip/crop drawn from the (seed, index) augment stream.
EpisodeImages materialize_episode(const ClassDataset& dataset, const Episode& episode,
                                  const AugmentOptions& augment = {});

} // namespace taskaug
