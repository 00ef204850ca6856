#include "doctest.h"

#include "taskaug/trainer.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace taskaug;
using taskaug::testing::TempDir;

namespace {

ClassDataset random_split(int classes, int per_class, int side, std::uint64_t seed, Split split = Split::train) {
    RandomSource rng(seed, "trainer-data", 0);
    std::vector<ImageClass> out;
    for (int k = 0; k < classes; ++k) {
        ImageClass cls{"k" + std::to_string(k), {}};
        for (int i = 0; i < per_class; ++i) cls.images.push_back(taskaug::testing::random_image(side, side, 1, rng));
        out.push_back(std::move(cls));
    }
    return ClassDataset("random", split, side, side, 1, std::move(out));
}

TrainConfig tiny_config() {
    TrainConfig c;
    c.seed = 3;
    c.sampler = SamplerParams{3, 1, 2, 0.5, 0};
    c.blocks = 2;
    c.channels = 4;
    c.epochs = 2;
    c.batches_per_epoch = 3;
    c.episodes_per_batch = 2;
    c.eval.episodes = 20;
    c.eval.queries = 3;
    return c;
}

std::vector<float> flat(const Checkpoint& c) {
    return c.model.flatten();
}

// Independent CI oracle: two-pass sample variance in long double.
double ci_oracle(const std::vector<double>& acc) {
    const long double n = static_cast<long double>(acc.size());
    long double mean = 0;
    for (double a : acc) mean += a;
    mean /= n;
    long double ss = 0;
    for (double a : acc) ss += (a - mean) * (a - mean);
    return static_cast<double>(100.0L * 1.96L * std::sqrt(ss / (n - 1)) / std::sqrt(n));
}

} // namespace

TEST_CASE("config resolution") {
    TrainConfig c;
    CHECK(c.total_episodes() == 10u * 100u * 8u);
    const auto r = c.resolved(32, 32, 3);
    CHECK(r.sampler.ramp_episodes == 4000u);
    CHECK(r.crop_pad == 4);
    CHECK(r.schedule.milestones == std::vector<int>{3, 7, 8});

    c.epochs = 60;
    CHECK(c.resolved(32, 32, 3).schedule.milestones == std::vector<int>{20, 40, 50});
    c.epochs = 1;
    CHECK(c.resolved(32, 32, 3).schedule.milestones == std::vector<int>{1, 2, 3});

    TrainConfig explicit_ramp;
    explicit_ramp.sampler.ramp_episodes = 17;
    CHECK(explicit_ramp.resolved(16, 16, 1).sampler.ramp_episodes == 17u);
}

TEST_CASE("config validation") {
    const auto base = TrainConfig{}.resolved(32, 32, 3);
    CHECK_NOTHROW(base.validate());
    auto c = base;
    c.eval.split = Split::train;
    CHECK_THROWS(c.validate());
    c = base;
    c.val = true;
    c.eval.split = Split::val;
    CHECK_THROWS(c.validate());
    c = base;
    c.head = HeadKind::ridge;
    c.lambda = 0.0;
    CHECK_THROWS(c.validate());
    c = base;
    c.sampler.p_max = 0.8;
    CHECK_THROWS(c.validate());
    c = base;
    c.clip_norm = -1.0;
    CHECK_THROWS(c.validate());
    c.clip_norm = 0.0;
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("training loop accounting") {
    const auto data = random_split(6, 4, 8, 1);
    SUBCASE("one epoch of one batch of one episode") {
        auto c = tiny_config();
        c.epochs = c.batches_per_epoch = c.episodes_per_batch = 1;
        int batches = 0;
        const auto ckpts = train(c, data, TrainHooks{{}, [&](int, int, double) { ++batches; }, {}});
        CHECK(ckpts.size() == 1);
        CHECK(batches == 1);
        CHECK(ckpts[0].ramp_t == 1u);
        CHECK(ckpts[0].epoch == 0);
    }
    SUBCASE("ramp counter advances once per episode") {
        const auto c = tiny_config();
        std::vector<double> lrs;
        const auto ckpts = train(c, data, TrainHooks{[&](const Checkpoint&, const OptimState&, const EpochStats& s) {
                                                         lrs.push_back(s.lr);
                                                     },
                                                     {}, {}});
        REQUIRE(ckpts.size() == 2);
        CHECK(ckpts[0].ramp_t == 6u);
        CHECK(ckpts[1].ramp_t == 12u);
        CHECK(lrs == std::vector<double>{0.1, 0.1 * 0.06});  // auto milestone at epoch 1
        CHECK(flat(ckpts[0]) != flat(ckpts[1]));
    }
    SUBCASE("clipping bounds the step length") {
        auto c = tiny_config();
        c.epochs = c.batches_per_epoch = c.episodes_per_batch = 1;
        c.momentum = 0.0;
        c.weight_decay = 0.0;
        c.clip_norm = 1e-3;
        const auto spec = c.model_spec(data.height(), data.width(), data.channels());
        const auto start = make_model(spec, derive_seed(c.seed, "init", 0)).flatten();
        const auto end = flat(train(c, data).front());
        double step = 0.0;
        for (std::size_t i = 0; i < end.size(); ++i) step += (end[i] - start[i]) * (end[i] - start[i]);
        CHECK(std::sqrt(step) == doctest::Approx(0.1 * 1e-3).epsilon(1e-3));
    }
}

TEST_CASE("training is deterministic and thread-count independent") {
    const auto data = random_split(6, 4, 8, 2);
    auto c = tiny_config();
    const auto a = train(c, data);
    const auto b = train(c, data);
    c.threads = 3;
    const auto d = train(c, data);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(encode_checkpoint(a[i]) == encode_checkpoint(b[i]));
        CHECK(encode_checkpoint(a[i]) == encode_checkpoint(d[i]));
    }
    c.threads = 1;
    c.seed = 4;
    CHECK(encode_checkpoint(train(c, data).back()) != encode_checkpoint(a.back()));
}

TEST_CASE("resuming from an epoch reproduces the uninterrupted run") {
    const auto data = random_split(6, 4, 8, 3);
    auto c = tiny_config();
    c.epochs = 3;
    std::vector<ResumePoint> points;
    const auto full = train(c, data, TrainHooks{[&](const Checkpoint& k, const OptimState& o, const EpochStats&) {
                                                    points.push_back(ResumePoint{k, o.velocity});
                                                },
                                                {}, {}});
    REQUIRE(points.size() == 3);
    const auto rest = train(c, data, {}, points[0]);
    REQUIRE(rest.size() == 2);
    CHECK(rest[0].epoch == 1);
    CHECK(encode_checkpoint(rest.back()) == encode_checkpoint(full.back()));

    auto other = c;
    other.channels = 5;
    CHECK_THROWS_AS(train(other, data, {}, points[0]), CheckpointError);
}

TEST_CASE("non-finite training reports the offending episode") {
    const auto data = random_split(6, 4, 8, 4);
    auto c = tiny_config();
    c.schedule.base = 1e30;
    c.schedule.multipliers = {1.0, 1.0, 1.0};
    try {
        train(c, data);
        FAIL("expected TrainingError");
    } catch (const TrainingError& e) {
        const Episode replay = load_episode(e.manifest());
        CHECK(replay.seed == c.seed);
        CHECK(std::string(e.what()).find("episode " + std::to_string(replay.episode_index)) != std::string::npos);
        RampState ramp{replay.episode_index};
        CHECK(load_episode(dump_episode(sample_seeded(data, c.resolved(8, 8, 1).sampler, ramp, c.seed))) == replay);
    }
}

TEST_CASE("checkpoint encoding") {
    const auto data = random_split(6, 4, 8, 5);
    const auto c = tiny_config();
    const auto spec = c.model_spec(8, 8, 1);
    const Checkpoint ck = train(c, data).back();
    const auto bytes = encode_checkpoint(ck);
    CHECK(bytes.size() == 8 + 4 + 8 + 4 + 8 + 8 + 4 * ck.model.flat_size());
    CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "TAUGCKPT");
    CHECK(bytes[8] == 1);
    CHECK(bytes[20] == 1);  // epoch, little endian

    const Checkpoint back = decode_checkpoint(bytes, spec);
    CHECK(encode_checkpoint(back) == bytes);
    CHECK(back.ramp_t == ck.ramp_t);

    auto other = spec;
    other.head = HeadKind::ridge;
    CHECK_THROWS_AS(decode_checkpoint(bytes, other), CheckpointError);
    CHECK_THROWS_AS(decode_checkpoint(std::span(bytes).first(bytes.size() - 1), spec), CheckpointError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(bad_magic, spec), CheckpointError);

    TempDir dir;
    save_checkpoint(dir.path() / "e.bin", ck);
    CHECK(taskaug::testing::read_bytes(dir.path() / "e.bin") == bytes);
    CHECK(encode_checkpoint(load_checkpoint(dir.path() / "e.bin", spec)) == bytes);

    const std::vector<float> v{1.5f, -2.0f, 0.0f};
    save_floats(dir.path() / "v.bin", v, 7);
    int epoch = 0;
    CHECK(load_floats(dir.path() / "v.bin", epoch) == v);
    CHECK(epoch == 7);
}

TEST_CASE("model spec hash separates configurations") {
    ModelSpec a, b;
    CHECK(a.hash() == b.hash());
    b.embed.channels = 64;
    CHECK(a.hash() != b.hash());
    b = a;
    b.lambda = 10;
    CHECK(a.hash() != b.hash());
}

TEST_CASE("accuracy summary") {
    const auto two = summarize_accuracies({1.0, 0.0});
    CHECK(two.mean == doctest::Approx(50.0));
    CHECK(two.ci95 == doctest::Approx(98.0).epsilon(1e-14));
    CHECK(summarize_accuracies({0.4, 0.4, 0.4}).ci95 == 0.0);
    CHECK(summarize_accuracies({0.7}).ci95 == 0.0);
    CHECK(summarize_accuracies({0.7}).mean == doctest::Approx(70.0));

    RandomSource rng(9, "ci", 0);
    std::vector<double> acc;
    for (int i = 0; i < 1000; ++i) acc.push_back(rng.uniform_int(0, 15) / 15.0);
    const auto r = summarize_accuracies(acc);
    CHECK(std::abs(r.ci95 - ci_oracle(acc)) < 1e-12);
}

TEST_CASE("evaluation") {
    const auto train_data = random_split(6, 4, 8, 6);
    const auto test_data = random_split(4, 5, 8, 7, Split::test);
    const auto c = tiny_config();
    const auto spec = c.model_spec(8, 8, 1);
    const auto ckpts = train(c, train_data);
    const auto opts = eval_options(c);

    SUBCASE("ensemble of copies equals the single checkpoint") {
        const std::vector<Checkpoint> copies(3, ckpts.back());
        const auto single = evaluate(std::span(&ckpts.back(), 1), spec, test_data, opts);
        const auto ens = evaluate(copies, spec, test_data, opts);
        CHECK(single.accuracies == ens.accuracies);
        CHECK(single.mean == ens.mean);
        CHECK(single.ci95 == ens.ci95);
    }
    SUBCASE("evaluation is deterministic and uses the requested episode count") {
        const auto a = evaluate(ckpts, spec, test_data, opts);
        auto threaded = opts;
        threaded.threads = 4;
        const auto b = evaluate(ckpts, spec, test_data, threaded);
        CHECK(a.episodes == 20);
        CHECK(a.accuracies == b.accuracies);
        for (double x : a.accuracies) CHECK(x * 9.0 == doctest::Approx(std::round(x * 9.0)));
    }
    SUBCASE("foreign checkpoints are rejected") {
        auto other = spec;
        other.lambda = 1.0;
        CHECK_THROWS_AS(evaluate(ckpts, other, test_data, opts), CheckpointError);
    }
    SUBCASE("best epoch selection") {
        const auto sel = select_best_epoch(ckpts, spec, test_data, opts);
        REQUIRE(sel.val_means.size() == 2);
        const int expected = sel.val_means[1] > sel.val_means[0] ? 1 : 0;
        CHECK(sel.best_epoch == expected);
    }
}

TEST_CASE("p_max sweep") {
    const auto train_data = random_split(6, 4, 8, 8);
    const auto test_data = random_split(4, 5, 8, 9, Split::test);
    auto c = tiny_config();
    c.epochs = c.batches_per_epoch = 1;
    c.eval.episodes = 4;
    const std::vector<double> grid{0.0, 0.5};
    int streamed = 0;
    const auto rows = sweep_pmax(c, train_data, test_data, grid, 2, true, [&](const SweepRow&) { ++streamed; });
    REQUIRE(rows.size() == 8);
    CHECK(streamed == 8);
    CHECK(rows[0].mode == AugmentMode::task);
    CHECK(rows[4].mode == AugmentMode::image);
    CHECK(rows[2].p_max == 0.5);
    CHECK(rows[0].seed == sweep_seed(c.seed, 0));
    CHECK(rows[1].seed == sweep_seed(c.seed, 1));
    // Both samplers coincide at p_max = 0.
    CHECK(rows[0].mean == rows[4].mean);

    CHECK(sweep_csv_header() == "mode,p_max,seed,mean,ci95\n");
    CHECK(sweep_csv_row(SweepRow{AugmentMode::image, 0.25, 12, 50.0, 1.5}) == "image,0.25,12,50,1.5\n");
    CHECK_THROWS(sweep_pmax(c, train_data, test_data, std::vector<double>{0.9}, 1, false));
}
