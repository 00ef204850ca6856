#pragma once

#include "taskaug/dataset.hpp"
#include "taskaug/embed.hpp"
#include "taskaug/model.hpp"
#include "taskaug/sampler.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace taskaug {

struct EvalConfig {
    int episodes = 1000;
    int queries = 15;
    Split split = Split::test;
};

struct TrainConfig {
    std::uint64_t seed = 0;
    // ramp_episodes == 0 resolves to half the total episode count.
    SamplerParams sampler{5, 1, 6, 0.0, 0};
    AugmentMode mode = AugmentMode::task;
    bool flip = true;
    int crop_pad = -1;  // -1 resolves from the image side
    int blocks = 4;
    int channels = 32;
    double dropout = 0.0;
    HeadKind head = HeadKind::proto;
    double lambda = 50.0;
    double init_scale = 1.0;
    double init_bias = 0.0;
    // Empty milestones resolve to the 20/60, 40/60, 50/60 fractions of `epochs`.
    LrSchedule schedule{0.1, {}, {0.06, 0.012, 0.0024}};
    double momentum = 0.9;
    double weight_decay = 0.0005;
    // Global L2 bound on each mini-batch gradient; 0 disables clipping.
    double clip_norm = 5.0;
    int epochs = 10;
    int batches_per_epoch = 100;
    int episodes_per_batch = 8;
    int threads = 1;
    EvalConfig eval;
    bool ens = false;
    bool val = false;

    std::uint64_t total_episodes() const;
    // Fills the auto-valued fields for a dataset of the given image shape.
    TrainConfig resolved(int height, int width, int channels) const;
    void validate() const;
    ModelSpec model_spec(int height, int width, int channels) const;
};

struct EpochStats {
    int epoch = 0;
    double mean_loss = 0.0;
    double mean_accuracy = 0.0;
    double lr = 0.0;
};

// Raised when a mini-batch produces a non-finite loss; carries the offending
// episode manifest so the failure can be replayed.
class TrainingError : public std::runtime_error {
public:
    TrainingError(const std::string& message, std::string manifest)
        : std::runtime_error(message), manifest_(std::move(manifest)) {}
    const std::string& manifest() const { return manifest_; }

private:
    std::string manifest_;
};

// State needed to continue a run after its last completed epoch.
struct ResumePoint {
    Checkpoint checkpoint;
    std::vector<float> velocity;
};

struct TrainHooks {
    // Called after every epoch with the new checkpoint and optimizer state.
    std::function<void(const Checkpoint&, const OptimState&, const EpochStats&)> on_epoch;
    // Called after every mini-batch with (epoch, batch, mean loss).
    std::function<void(int, int, double)> on_batch;
    // Ends training early once it returns true for a finished epoch. The
    // schedule and ramp still follow config.epochs.
    std::function<bool(int)> stop_after;
};

// Meta-training: per mini-batch, sample episodes (advancing t per episode),
// average the episode losses and take one Nesterov step on embedding + head.
// One checkpoint per epoch. Deterministic given config.seed and independent
// of config.threads.
std::vector<Checkpoint> train(const TrainConfig& config, const ClassDataset& data, const TrainHooks& hooks = {},
                              const std::optional<ResumePoint>& resume = std::nullopt);

struct EvalReport {
    int episodes = 0;
    double mean = 0.0;  // percent
    double ci95 = 0.0;  // half-width, percent
    std::vector<double> accuracies;  // per episode, fractions
};

// mean and 1.96 * sample sd / sqrt(n), both in percent; ci95 = 0 for n < 2.
EvalReport summarize_accuracies(std::vector<double> accuracies);

struct EvalOptions {
    int ways = 5;
    int shots = 1;
    int queries = 15;
    int episodes = 1000;
    std::uint64_t seed = 0;
    int threads = 1;
};

// Evaluates one checkpoint, or an ensemble (per-query softmax probabilities
// averaged over checkpoints before the argmax). The sampler never uses novel
// classes here.
EvalReport evaluate(std::span<const Checkpoint> checkpoints, const ModelSpec& spec, const ClassDataset& data,
                    const EvalOptions& options);

EvalOptions eval_options(const TrainConfig& config);

struct ValSelection {
    int best_epoch = 0;
    std::vector<double> val_means;
};

// Picks the epoch with the highest validation mean (earliest on ties).
ValSelection select_best_epoch(std::span<const Checkpoint> checkpoints, const ModelSpec& spec,
                               const ClassDataset& val_data, const EvalOptions& options);

struct SweepRow {
    AugmentMode mode = AugmentMode::task;
    double p_max = 0.0;
    std::uint64_t seed = 0;
    double mean = 0.0;
    double ci95 = 0.0;
};

std::uint64_t sweep_seed(std::uint64_t base_seed, int index);

// Trains and evaluates every (mode, p_max, seed). With image_aug, each grid
// point is also run with the Image-Aug sampler.
std::vector<SweepRow> sweep_pmax(const TrainConfig& base, const ClassDataset& train_data,
                                 const ClassDataset& eval_data, std::span<const double> grid, int seeds,
                                 bool image_aug, const std::function<void(const SweepRow&)>& on_row = {});

std::string sweep_csv_header();
std::string sweep_csv_row(const SweepRow& row);

} // namespace taskaug
