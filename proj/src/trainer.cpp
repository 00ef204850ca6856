#include "taskaug/trainer.hpp"

#include "taskaug/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace taskaug {

std::uint64_t TrainConfig::total_episodes() const {
    return static_cast<std::uint64_t>(epochs) * static_cast<std::uint64_t>(batches_per_epoch) *
           static_cast<std::uint64_t>(episodes_per_batch);
}

TrainConfig TrainConfig::resolved(int height, int /*width*/, int /*channels*/) const {
    TrainConfig out = *this;
    if (out.sampler.ramp_episodes == 0) out.sampler.ramp_episodes = std::max<std::uint64_t>(1, total_episodes() / 2);
    if (out.crop_pad < 0) out.crop_pad = default_crop_pad(height);
    if (out.schedule.milestones.empty()) {
        int previous = 0;
        for (int fraction : {20, 40, 50}) {
            const int m = std::max(previous + 1, static_cast<int>(std::lround(out.epochs * fraction / 60.0)));
            out.schedule.milestones.push_back(m);
            previous = m;
        }
    }
    return out;
}

void TrainConfig::validate() const {
    sampler.validate();
    schedule.validate();
    if (epochs < 1 || batches_per_epoch < 1 || episodes_per_batch < 1)
        throw std::invalid_argument("train: epochs, batches_per_epoch and episodes_per_batch must be >= 1");
    if (threads < 1) throw std::invalid_argument("train: threads must be >= 1");
    if (crop_pad < 0) throw std::invalid_argument("train: crop_pad must be >= 0 once resolved");
    if (head == HeadKind::ridge && !(lambda > 0.0))
        throw std::invalid_argument("train: ridge lambda must be > 0");
    if (!(init_scale > 0.0)) throw std::invalid_argument("train: initial head scale must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train: momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("train: weight_decay must be >= 0");
    if (!(clip_norm >= 0.0) || !std::isfinite(clip_norm)) throw std::invalid_argument("train: clip_norm must be >= 0");
    if (eval.episodes < 1 || eval.queries < 1) throw std::invalid_argument("eval: episodes and queries must be >= 1");
    if (eval.split != Split::val && eval.split != Split::test)
        throw std::invalid_argument("eval: split must be val or test (never the training classes)");
    if (val && eval.split != Split::test)
        throw std::invalid_argument("eval: the +val protocol trains on train+val, so evaluation must use test");
}

ModelSpec TrainConfig::model_spec(int height, int width, int in_channels) const {
    ModelSpec spec;
    spec.embed.blocks = blocks;
    spec.embed.channels = channels;
    spec.embed.height = height;
    spec.embed.width = width;
    spec.embed.in_channels = in_channels;
    spec.embed.dropout = dropout;
    spec.head = head;
    spec.lambda = lambda;
    return spec;
}

namespace {

std::vector<Image> concat_images(EpisodeImages& imgs) {
    std::vector<Image> all = std::move(imgs.support);
    all.insert(all.end(), std::make_move_iterator(imgs.query.begin()), std::make_move_iterator(imgs.query.end()));
    return all;
}

} // namespace

std::vector<Checkpoint> train(const TrainConfig& config, const ClassDataset& data, const TrainHooks& hooks,
                              const std::optional<ResumePoint>& resume) {
    const TrainConfig cfg = config.resolved(data.height(), data.width(), data.channels());
    cfg.validate();
    const auto sizes = data.class_sizes();
    cfg.sampler.validate_for(sizes);
    const ModelSpec spec = cfg.model_spec(data.height(), data.width(), data.channels());

    Model<float> model = resume ? resume->checkpoint.model
                                : make_model(spec, derive_seed(cfg.seed, "init", 0), static_cast<float>(cfg.init_scale),
                                             static_cast<float>(cfg.init_bias));
    OptimState opt;
    opt.momentum = cfg.momentum;
    opt.weight_decay = cfg.weight_decay;
    opt.velocity.assign(model.flat_size(), 0.0f);
    RampState ramp;
    int first_epoch = 0;
    if (resume) {
        if (resume->checkpoint.config_hash != spec.hash())
            throw CheckpointError("resume: checkpoint config hash does not match the run config");
        if (resume->velocity.size() != model.flat_size())
            throw CheckpointError("resume: optimizer state length does not match the model");
        opt.velocity = resume->velocity;
        ramp.t = resume->checkpoint.ramp_t;
        first_epoch = resume->checkpoint.epoch + 1;
    }

    const AugmentOptions augment{cfg.flip, cfg.crop_pad};
    const auto episodes_per_batch = static_cast<std::size_t>(cfg.episodes_per_batch);
    std::vector<Checkpoint> checkpoints;

    for (int epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
        opt.lr = lr_at(cfg.schedule, epoch);
        double epoch_loss = 0.0, epoch_acc = 0.0;
        for (int batch = 0; batch < cfg.batches_per_epoch; ++batch) {
            std::vector<Episode> episodes;
            episodes.reserve(episodes_per_batch);
            for (std::size_t e = 0; e < episodes_per_batch; ++e)
                episodes.push_back(sample_seeded(data, cfg.sampler, ramp, cfg.seed, cfg.mode));

            std::vector<EpisodeOutcome<float>> outcomes(episodes_per_batch);
            parallel_for(episodes_per_batch, cfg.threads, [&](std::size_t i) {
                EpisodeImages imgs = materialize_episode(data, episodes[i], augment);
                const auto all = concat_images(imgs);
                const auto act = images_to_activation<float>(all, spec.embed);
                RandomSource dropout_rng(cfg.seed, "dropout", episodes[i].episode_index);
                outcomes[i] = run_episode(model, cfg.head, act, imgs.support_labels, imgs.query_labels,
                                          cfg.sampler.ways, true, &dropout_rng);
            });

            std::vector<float> grads(model.flat_size(), 0.0f);
            double batch_loss = 0.0, batch_acc = 0.0;
            for (std::size_t i = 0; i < episodes_per_batch; ++i) {
                const auto& o = outcomes[i];
                bool finite = std::isfinite(o.loss);
                for (float g : o.grads) finite = finite && std::isfinite(g);
                if (!finite)
                    throw TrainingError("non-finite loss or gradient at episode " +
                                            std::to_string(episodes[i].episode_index) + " (epoch " +
                                            std::to_string(epoch) + ", batch " + std::to_string(batch) + ")",
                                        dump_episode(episodes[i]));
                for (std::size_t k = 0; k < grads.size(); ++k) grads[k] += o.grads[k];
                batch_loss += o.loss;
                batch_acc += o.accuracy;
            }
            const float inv = 1.0f / static_cast<float>(episodes_per_batch);
            for (auto& g : grads) g *= inv;
            batch_loss /= static_cast<double>(episodes_per_batch);
            batch_acc /= static_cast<double>(episodes_per_batch);

            clip_gradient_norm(grads, cfg.clip_norm);
            auto flat = model.flatten();
            sgd_step(flat, grads, opt);
            model.unflatten(flat);

            epoch_loss += batch_loss;
            epoch_acc += batch_acc;
            if (hooks.on_batch) hooks.on_batch(epoch, batch, batch_loss);
        }

        checkpoints.push_back(Checkpoint{epoch, spec.hash(), ramp.t, model});
        if (hooks.on_epoch) {
            EpochStats stats{epoch, epoch_loss / cfg.batches_per_epoch, epoch_acc / cfg.batches_per_epoch, opt.lr};
            hooks.on_epoch(checkpoints.back(), opt, stats);
        }
        if (hooks.stop_after && hooks.stop_after(epoch)) break;
    }
    return checkpoints;
}

EvalReport summarize_accuracies(std::vector<double> accuracies) {
    EvalReport r;
    r.episodes = static_cast<int>(accuracies.size());
    const double n = static_cast<double>(accuracies.size());
    if (accuracies.empty()) return r;
    // Deviations from the first value, so a constant sample has exactly zero spread.
    const double origin = accuracies.front();
    double sum = 0.0, sum_sq = 0.0;
    for (double a : accuracies) {
        sum += a - origin;
        sum_sq += (a - origin) * (a - origin);
    }
    const double mean = origin + sum / n;
    const double ss = std::max(0.0, sum_sq - sum * sum / n);
    const double sd = accuracies.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    r.mean = 100.0 * mean;
    r.ci95 = 100.0 * 1.96 * sd / std::sqrt(n);
    r.accuracies = std::move(accuracies);
    return r;
}

EvalOptions eval_options(const TrainConfig& config) {
    EvalOptions o;
    o.ways = config.sampler.ways;
    o.shots = config.sampler.shots;
    o.queries = config.eval.queries;
    o.episodes = config.eval.episodes;
    o.seed = config.seed;
    o.threads = config.threads;
    return o;
}

EvalReport evaluate(std::span<const Checkpoint> checkpoints, const ModelSpec& spec, const ClassDataset& data,
                    const EvalOptions& options) {
    if (checkpoints.empty()) throw std::invalid_argument("evaluate: no checkpoints given");
    for (const auto& c : checkpoints)
        if (c.config_hash != spec.hash())
            throw CheckpointError("evaluate: checkpoint of epoch " + std::to_string(c.epoch) +
                                  " has a config hash that does not match the model config");
    if (data.height() != spec.embed.height || data.width() != spec.embed.width ||
        data.channels() != spec.embed.in_channels)
        throw std::invalid_argument("evaluate: dataset image shape does not match the model input");
    if (options.episodes < 1) throw std::invalid_argument("evaluate: episodes must be >= 1");

    // Task augmentation is a training device only.
    const SamplerParams params{options.ways, options.shots, options.queries, 0.0, 1};
    const auto sizes = data.class_sizes();
    params.validate_for(sizes);

    const std::uint64_t eval_seed = derive_seed(options.seed, "eval", 0);
    std::vector<Episode> episodes;
    episodes.reserve(static_cast<std::size_t>(options.episodes));
    RampState ramp;
    for (int i = 0; i < options.episodes; ++i) episodes.push_back(sample_seeded(data, params, ramp, eval_seed));

    std::vector<double> accuracies(episodes.size(), 0.0);
    parallel_for(episodes.size(), options.threads, [&](std::size_t i) {
        EpisodeImages imgs = materialize_episode(data, episodes[i]);
        const auto all = concat_images(imgs);
        const auto act = images_to_activation<float>(all, spec.embed);
        // Running mean: identical members leave it bit-for-bit unchanged.
        Matrix<double> prob_mean;
        double members = 0.0;
        for (const auto& c : checkpoints) {
            const auto out = run_episode(c.model, spec.head, act, imgs.support_labels, imgs.query_labels,
                                         options.ways, false);
            const Matrix<double> probs = softmax_rows<double>(out.logits.cast<double>());
            members += 1.0;
            if (prob_mean.size() == 0)
                prob_mean = probs;
            else
                prob_mean += (probs - prob_mean) / members;
        }
        accuracies[i] = episode_accuracy(prob_mean, imgs.query_labels);
    });
    return summarize_accuracies(std::move(accuracies));
}

ValSelection select_best_epoch(std::span<const Checkpoint> checkpoints, const ModelSpec& spec,
                               const ClassDataset& val_data, const EvalOptions& options) {
    if (checkpoints.empty()) throw std::invalid_argument("select_best_epoch: no checkpoints");
    ValSelection sel;
    double best = -1.0;
    for (const auto& c : checkpoints) {
        const auto report = evaluate(std::span<const Checkpoint>(&c, 1), spec, val_data, options);
        sel.val_means.push_back(report.mean);
        if (report.mean > best) {
            best = report.mean;
            sel.best_epoch = c.epoch;
        }
    }
    return sel;
}

std::uint64_t sweep_seed(std::uint64_t base_seed, int index) {
    return derive_seed(base_seed, "sweep", static_cast<std::uint64_t>(index));
}

std::vector<SweepRow> sweep_pmax(const TrainConfig& base, const ClassDataset& train_data,
                                 const ClassDataset& eval_data, std::span<const double> grid, int seeds,
                                 bool image_aug, const std::function<void(const SweepRow&)>& on_row) {
    if (seeds < 1) throw std::invalid_argument("sweep: seeds must be >= 1");
    for (double p : grid)
        if (!(p >= 0.0 && p <= kMaxNovelProbability))
            throw std::invalid_argument("sweep: grid values must lie in [0, 0.75]");
    std::vector<AugmentMode> modes{AugmentMode::task};
    if (image_aug) modes.push_back(AugmentMode::image);

    std::vector<SweepRow> rows;
    for (AugmentMode mode : modes)
        for (double p : grid)
            for (int s = 0; s < seeds; ++s) {
                TrainConfig cfg = base;
                cfg.mode = mode;
                cfg.sampler.p_max = p;
                cfg.seed = sweep_seed(base.seed, s);
                const auto checkpoints = train(cfg, train_data);
                const ModelSpec spec = cfg.model_spec(train_data.height(), train_data.width(), train_data.channels());
                const auto report =
                    cfg.ens ? evaluate(checkpoints, spec, eval_data, eval_options(cfg))
                            : evaluate(std::span<const Checkpoint>(&checkpoints.back(), 1), spec, eval_data,
                                       eval_options(cfg));
                rows.push_back(SweepRow{mode, p, cfg.seed, report.mean, report.ci95});
                if (on_row) on_row(rows.back());
            }
    return rows;
}

std::string sweep_csv_header() {
    return "mode,p_max,seed,mean,ci95\n";
}

std::string sweep_csv_row(const SweepRow& row) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%.17g,%llu,%.17g,%.17g\n", std::string(to_string(row.mode)).c_str(), row.p_max,
                  static_cast<unsigned long long>(row.seed), row.mean, row.ci95);
    return buf;
}

} // namespace taskaug
