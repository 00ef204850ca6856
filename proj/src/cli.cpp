#include "taskaug/cli.hpp"

#include "taskaug/config.hpp"
#include "taskaug/glyphs.hpp"
#include "taskaug/trainer.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <ostream>

namespace taskaug {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot read " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << text;
        out.close();
        if (!out) throw std::runtime_error("write failed for " + tmp.string());
    }
    fs::rename(tmp, path);
}

bool non_empty(const fs::path& p) {
    return fs::exists(p) && (!fs::is_directory(p) || !fs::is_empty(p));
}

std::string epoch_file(const char* stem, int epoch) {
    return std::string(stem) + "_" + std::to_string(epoch) + ".bin";
}

// Number of leading epochs 0..k-1 whose checkpoint (and, if asked, optimizer
// state) exist on disk.
int complete_epochs(const fs::path& dir, bool need_optimizer) {
    int k = 0;
    while (fs::exists(dir / epoch_file("epoch", k)) && (!need_optimizer || fs::exists(dir / epoch_file("optim", k))))
        ++k;
    return k;
}

std::vector<std::size_t> split_sizes(const DatasetMeta& meta, Split split) {
    std::vector<std::size_t> sizes;
    for (const auto& name : meta.splits.classes_for(split)) sizes.push_back(meta.find_class(name)->count);
    return sizes;
}

// Fills auto values and checks everything that can be checked before
// touching image data.
DatasetMeta prepare(RunConfig& cfg) {
    if (cfg.data.empty()) throw UsageError("no dataset: pass --data or set \"data\" in the config");
    const DatasetMeta meta = read_meta(cfg.data);
    cfg.train = cfg.train.resolved(meta.height, meta.width, meta.channels);
    cfg.train.validate();
    try {
        cfg.train.model_spec(meta.height, meta.width, meta.channels).embed.validate();
    } catch (const EmbedError& e) {
        throw UsageError(e.what());
    }
    cfg.train.sampler.validate_for(split_sizes(meta, cfg.train.val ? Split::train_val : Split::train));
    if (cfg.train.val) cfg.train.sampler.validate_for(split_sizes(meta, Split::train));
    const SamplerParams eval_params{cfg.train.sampler.ways, cfg.train.sampler.shots, cfg.train.eval.queries, 0.0, 1};
    try {
        eval_params.validate_for(split_sizes(meta, cfg.train.eval.split));
        if (cfg.train.val) eval_params.validate_for(split_sizes(meta, Split::val));
    } catch (const std::invalid_argument& e) {
        throw UsageError(std::string("evaluation split: ") + e.what());
    }
    return meta;
}

ModelSpec spec_for(const RunConfig& cfg, const DatasetMeta& meta) {
    return cfg.train.model_spec(meta.height, meta.width, meta.channels);
}

struct ConfigArgs {
    std::string data;
    std::string config;
    std::vector<std::string> sets;
    std::uint64_t seed = 0;
    CLI::Option* seed_option = nullptr;
    int threads = 1;
};

void add_config_options(CLI::App* cmd, ConfigArgs& a) {
    cmd->add_option("--data", a.data, "Dataset directory (overrides \"data\" in the config)");
    cmd->add_option("--config", a.config, "JSON config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", a.sets, "Override a config value, e.g. --set sampler.p_max=0.5")->take_all();
    a.seed_option = cmd->add_option("--seed", a.seed, "Master seed (overrides \"seed\")");
    cmd->add_option("--threads", a.threads, "Worker threads; results do not depend on it")
        ->check(CLI::PositiveNumber);
}

bool config_args_given(const ConfigArgs& a) {
    return !a.data.empty() || !a.config.empty() || !a.sets.empty() || a.seed_option->count() > 0;
}

RunConfig load_config(const ConfigArgs& a) {
    RunConfig cfg = a.config.empty() ? default_config(a.sets) : parse_config(read_file(a.config), a.sets);
    if (a.seed_option->count() > 0) cfg.train.seed = a.seed;
    if (!a.data.empty()) cfg.data = a.data;
    if (!cfg.data.empty()) cfg.data = fs::absolute(cfg.data).lexically_normal().string();
    return cfg;
}

// ---- ingest ----

int cmd_ingest(const std::string& root, bool validate, std::ostream& out) {
    if (validate) {
        const auto s = validate_dataset(root);
        out << "train=" << s.train << " val=" << s.val << " test=" << s.test << "\n";
    } else {
        const auto meta = read_meta(root);
        out << "train=" << meta.splits.train_classes.size() << " val=" << meta.splits.val_classes.size()
            << " test=" << meta.splits.test_classes.size() << "\n";
    }
    return kExitOk;
}

// ---- sample ----

struct SampleArgs {
    std::string data;
    std::string split = "train";
    std::string mode = "task";
    std::string out;
    std::string stats;
    int ways = 5, shots = 1, queries = 6;
    double p_max = 0.0;
    std::uint64_t ramp = 1;
    std::uint64_t seed = 0;
    std::uint64_t count = 1;
    std::uint64_t bucket = 1000;
};

int cmd_sample(const SampleArgs& a, std::ostream& out) {
    const SamplerParams params{a.ways, a.shots, a.queries, a.p_max, a.ramp};
    params.validate();
    const AugmentMode mode = parse_augment_mode(a.mode);
    const Split split = parse_split(a.split);
    if (a.bucket < 1) throw UsageError("--bucket must be >= 1");
    const ClassDataset data = ingest_dataset(a.data, split);
    params.validate_for(data.class_sizes());

    if (!a.out.empty()) fs::create_directories(a.out);
    std::ofstream stats;
    if (!a.stats.empty()) {
        stats.open(a.stats, std::ios::binary | std::ios::trunc);
        if (!stats) throw std::runtime_error("cannot write " + a.stats);
        stats << "t_first,t_last,episodes,mean_novel,expected_novel\n";
    }

    RampState ramp;
    std::uint64_t in_bucket = 0, t_first = 0;
    double novel_sum = 0.0, expected_sum = 0.0;
    auto flush_bucket = [&] {
        const double n = static_cast<double>(in_bucket);
        stats << t_first << "," << ramp.t << "," << in_bucket << "," << format_double(novel_sum / n) << ","
              << format_double(expected_sum / n) << "\n";
        in_bucket = 0;
        novel_sum = expected_sum = 0.0;
    };
    for (std::uint64_t i = 0; i < a.count; ++i) {
        const Episode e = sample_seeded(data, params, ramp, a.seed, mode);
        if (!a.out.empty())
            write_text_atomic(fs::path(a.out) / ("episode_" + std::to_string(e.episode_index) + ".json"),
                              dump_episode(e));
        else if (a.stats.empty())
            out << dump_episode(e);
        if (stats.is_open()) {
            if (in_bucket == 0) t_first = ramp.t;
            ++in_bucket;
            novel_sum += e.novel_count();
            // Image-Aug never creates novel classes.
            if (mode == AugmentMode::task)
                expected_sum += a.ways * ramp_probability(ramp.t, params.ramp_episodes, params.p_max);
            if (in_bucket == a.bucket) flush_bucket();
        }
    }
    if (stats.is_open() && in_bucket > 0) flush_bucket();
    if (stats.is_open()) {
        stats.close();
        if (!stats) throw std::runtime_error("write failed for " + a.stats);
    }
    return kExitOk;
}

// ---- train ----

struct TrainArgs {
    ConfigArgs config;
    std::string out;
    bool resume = false;
};

void run_phase(const fs::path& dir, const TrainConfig& cfg, const ModelSpec& spec, const ClassDataset& data,
               int last_epoch, int threads, std::ostream& out) {
    const fs::path ckdir = dir / "checkpoints";
    fs::create_directories(ckdir);
    const int done = complete_epochs(ckdir, true);
    if (done > last_epoch) return;

    std::optional<ResumePoint> resume;
    if (done > 0) {
        const int epoch = done - 1;
        ResumePoint point{load_checkpoint(ckdir / epoch_file("epoch", epoch), spec), {}};
        int stored = -1;
        point.velocity = load_floats(ckdir / epoch_file("optim", epoch), stored);
        if (stored != epoch || point.checkpoint.epoch != epoch)
            throw CheckpointError("resume: files for epoch " + std::to_string(epoch) + " disagree on the epoch index");
        resume = std::move(point);
        out << "resuming " << dir.string() << " after epoch " << epoch << "\n";
    }

    TrainConfig run_cfg = cfg;
    run_cfg.threads = threads;
    TrainHooks hooks;
    hooks.on_epoch = [&](const Checkpoint& c, const OptimState& o, const EpochStats& s) {
        // Optimizer state first: a checkpoint without it is not resumable.
        save_floats(ckdir / epoch_file("optim", c.epoch), o.velocity, c.epoch);
        save_checkpoint(ckdir / epoch_file("epoch", c.epoch), c);
        char line[160];
        std::snprintf(line, sizeof line, "epoch %d loss %.6f accuracy %.4f lr %.6g\n", s.epoch, s.mean_loss,
                      s.mean_accuracy, s.lr);
        out << line << std::flush;
    };
    hooks.stop_after = [&](int epoch) { return epoch >= last_epoch; };
    try {
        train(run_cfg, data, hooks, resume);
    } catch (const TrainingError& e) {
        write_text_atomic(dir / "failed_episode.json", e.manifest());
        throw TrainingError(std::string(e.what()) + "; manifest written to " + (dir / "failed_episode.json").string(),
                            e.manifest());
    }
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
    const fs::path run = a.out;
    RunConfig cfg;
    if (a.resume) {
        if (config_args_given(a.config))
            throw UsageError("--resume reads config.json from the run directory; drop --config, --set, --seed and --data");
        if (!fs::exists(run / "config.json")) throw UsageError((run / "config.json").string() + " not found; nothing to resume");
        cfg = parse_config(read_file(run / "config.json"));
    } else {
        if (non_empty(run)) throw UsageError("run directory " + run.string() + " is not empty; pass --resume to continue it");
        cfg = load_config(a.config);
    }
    const DatasetMeta meta = prepare(cfg);
    const ModelSpec spec = spec_for(cfg, meta);
    fs::create_directories(run);
    if (!a.resume) write_text_atomic(run / "config.json", dump_config(cfg));

    const int threads = a.config.threads;
    if (!cfg.train.val) {
        run_phase(run, cfg.train, spec, ingest_dataset(cfg.data, Split::train), cfg.train.epochs - 1, threads, out);
        return kExitOk;
    }

    // +val: pick the best epoch on val, then retrain on train+val up to it.
    ValSelection selection;
    const fs::path selection_file = run / "selection.json";
    if (fs::exists(selection_file)) {
        const json doc = json::parse(read_file(selection_file));
        selection.best_epoch = doc.at("best_epoch").get<int>();
        selection.val_means = doc.at("val_means").get<std::vector<double>>();
    } else {
        const fs::path select_dir = run / "select";
        run_phase(select_dir, cfg.train, spec, ingest_dataset(cfg.data, Split::train), cfg.train.epochs - 1, threads,
                  out);
        std::vector<Checkpoint> checkpoints;
        for (int k = 0; k < cfg.train.epochs; ++k)
            checkpoints.push_back(load_checkpoint(select_dir / "checkpoints" / epoch_file("epoch", k), spec));
        EvalOptions options = eval_options(cfg.train);
        options.threads = threads;
        selection = select_best_epoch(checkpoints, spec, ingest_dataset(cfg.data, Split::val), options);
        json doc;
        doc["best_epoch"] = selection.best_epoch;
        doc["val_means"] = selection.val_means;
        write_text_atomic(selection_file, doc.dump(2) + "\n");
    }
    out << "selected epoch " << selection.best_epoch << " on val\n";
    run_phase(run, cfg.train, spec, ingest_dataset(cfg.data, Split::train_val), selection.best_epoch, threads, out);
    return kExitOk;
}

// ---- eval ----

struct EvalArgs {
    std::string run;
    std::string data;
    std::string out;
    bool ens = false;
    int epoch = -1;
    int threads = 1;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    const fs::path run = a.run;
    if (!fs::exists(run / "config.json")) throw UsageError((run / "config.json").string() + " not found");
    RunConfig cfg = parse_config(read_file(run / "config.json"));
    if (!a.data.empty()) cfg.data = fs::absolute(a.data).lexically_normal().string();
    const DatasetMeta meta = prepare(cfg);
    const ModelSpec spec = spec_for(cfg, meta);

    const fs::path ckdir = run / "checkpoints";
    const int available = complete_epochs(ckdir, false);
    if (available == 0) throw UsageError("no checkpoints in " + ckdir.string());
    std::vector<int> epochs;
    if (a.ens || (a.epoch < 0 && cfg.train.ens)) {
        for (int k = 0; k < available; ++k) epochs.push_back(k);
    } else if (a.epoch >= 0) {
        if (a.epoch >= available) throw UsageError("no checkpoint for epoch " + std::to_string(a.epoch));
        epochs.push_back(a.epoch);
    } else {
        epochs.push_back(available - 1);
    }
    std::vector<Checkpoint> checkpoints;
    for (int k : epochs) checkpoints.push_back(load_checkpoint(ckdir / epoch_file("epoch", k), spec));

    EvalOptions options = eval_options(cfg.train);
    options.threads = a.threads;
    const EvalReport report = evaluate(checkpoints, spec, ingest_dataset(cfg.data, cfg.train.eval.split), options);

    const fs::path dest = a.out.empty() ? run : fs::path(a.out);
    fs::create_directories(dest);
    std::string csv = "episode_index,accuracy\n";
    for (std::size_t i = 0; i < report.accuracies.size(); ++i)
        csv += std::to_string(i) + "," + format_double(report.accuracies[i]) + "\n";
    write_text_atomic(dest / "eval.csv", csv);
    json doc;
    doc["episodes"] = report.episodes;
    doc["mean"] = report.mean;
    doc["ci95"] = report.ci95;
    doc["epochs"] = epochs;
    doc["split"] = std::string(to_string(cfg.train.eval.split));
    write_text_atomic(dest / "report.json", doc.dump(2) + "\n");

    char line[160];
    std::snprintf(line, sizeof line, "mean %.2f%% +- %.2f over %d episodes (%zu checkpoint%s)\n", report.mean,
                  report.ci95, report.episodes, checkpoints.size(), checkpoints.size() == 1 ? "" : "s");
    out << line;
    return kExitOk;
}

// ---- sweep ----

struct SweepArgs {
    ConfigArgs config;
    std::string out;
    std::string grid = "0,0.25,0.5,0.75";
    int seeds = 3;
    bool image_aug = false;
};

std::vector<double> parse_grid(const std::string& text) {
    std::vector<double> grid;
    std::size_t begin = 0;
    while (begin <= text.size()) {
        const auto comma = text.find(',', begin);
        const std::string item = text.substr(begin, comma == std::string::npos ? std::string::npos : comma - begin);
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (item.empty() || used != item.size()) throw UsageError("--grid: cannot parse '" + item + "'");
        if (!(v >= 0.0 && v <= kMaxNovelProbability))
            throw UsageError("--grid: p_max " + item + " outside [0, 0.75]");
        grid.push_back(v);
        if (comma == std::string::npos) break;
        begin = comma + 1;
    }
    return grid;
}

int cmd_sweep(const SweepArgs& a, std::ostream& out) {
    const fs::path dest = a.out;
    if (non_empty(dest)) throw UsageError("output directory " + dest.string() + " is not empty");
    RunConfig cfg = load_config(a.config);
    const DatasetMeta meta = prepare(cfg);
    if (cfg.train.val) throw UsageError("sweep trains on the train split only; set protocol.val=false");
    const auto grid = parse_grid(a.grid);
    if (a.seeds < 1) throw UsageError("--seeds must be >= 1");

    fs::create_directories(dest);
    write_text_atomic(dest / "config.json", dump_config(cfg));
    const fs::path csv_path = dest / "sweep.csv";
    std::ofstream csv(csv_path, std::ios::binary | std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + csv_path.string());
    csv << sweep_csv_header() << std::flush;

    TrainConfig base = cfg.train;
    base.threads = a.config.threads;
    const auto train_data = ingest_dataset(cfg.data, Split::train);
    const auto eval_data = ingest_dataset(cfg.data, cfg.train.eval.split);
    sweep_pmax(base, train_data, eval_data, grid, a.seeds, a.image_aug, [&](const SweepRow& row) {
        csv << sweep_csv_row(row) << std::flush;
        char line[160];
        std::snprintf(line, sizeof line, "%s p_max=%g seed=%llu: %.2f%% +- %.2f\n", std::string(to_string(row.mode)).c_str(),
                      row.p_max, static_cast<unsigned long long>(row.seed), row.mean, row.ci95);
        out << line << std::flush;
    });
    csv.close();
    if (!csv) throw std::runtime_error("write failed for " + csv_path.string());
    return kExitOk;
}

// ---- make-glyphs ----

int cmd_make_glyphs(const std::string& dest, const GlyphOptions& options, std::ostream& out) {
    if (non_empty(dest)) throw UsageError("output directory " + dest + " is not empty");
    const auto meta = write_glyph_dataset(dest, options);
    out << "wrote " << meta.classes.size() << " glyph classes (train=" << meta.splits.train_classes.size()
        << " val=" << meta.splits.val_classes.size() << " test=" << meta.splits.test_classes.size() << ") to " << dest
        << "\n";
    return kExitOk;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Episodic few-shot learning with rotation task augmentation", "taskaug"};
    app.require_subcommand(1);

    std::string ingest_root;
    bool ingest_validate = false;
    auto* ingest = app.add_subcommand("ingest", "Check a dataset directory and print class counts per split");
    ingest->add_option("root", ingest_root, "Dataset directory")->required();
    ingest->add_flag("--validate", ingest_validate, "Also verify every class file byte count");

    SampleArgs sample_args;
    auto* sample = app.add_subcommand("sample", "Write episode manifests and novel-class statistics");
    sample->add_option("--data", sample_args.data, "Dataset directory")->required();
    sample->add_option("--split", sample_args.split, "train, val, test or train+val");
    sample->add_option("--ways", sample_args.ways, "Classes per episode (N)");
    sample->add_option("--shots", sample_args.shots, "Support images per class (K)");
    sample->add_option("--queries", sample_args.queries, "Query images per class (H)");
    sample->add_option("--p-max", sample_args.p_max, "Final novel-class probability, at most 0.75");
    sample->add_option("--ramp", sample_args.ramp, "Episodes until p reaches p_max (T)");
    sample->add_option("--mode", sample_args.mode, "task or image");
    sample->add_option("--seed", sample_args.seed, "Master seed");
    sample->add_option("--count", sample_args.count, "Episodes to sample");
    sample->add_option("--out", sample_args.out, "Directory for episode_<t>.json manifests");
    sample->add_option("--stats", sample_args.stats, "CSV of novel-class counts per bucket of t");
    sample->add_option("--bucket", sample_args.bucket, "Episodes per --stats row");

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "Meta-train and write one checkpoint per epoch");
    add_config_options(train_cmd, train_args.config);
    train_cmd->add_option("--out", train_args.out, "Run directory")->required();
    train_cmd->add_flag("--resume", train_args.resume, "Continue a partial run from its last complete epoch");

    EvalArgs eval_args;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a run's checkpoints on its evaluation split");
    eval_cmd->add_option("run", eval_args.run, "Run directory")->required();
    auto* ens_flag = eval_cmd->add_flag("--ens", eval_args.ens, "Ensemble every checkpoint");
    eval_cmd->add_option("--epoch", eval_args.epoch, "Evaluate this epoch only")->check(CLI::NonNegativeNumber)->excludes(ens_flag);
    eval_cmd->add_option("--data", eval_args.data, "Dataset directory (default: the one in config.json)");
    eval_cmd->add_option("--out", eval_args.out, "Directory for eval.csv and report.json (default: the run)");
    eval_cmd->add_option("--threads", eval_args.threads, "Worker threads")->check(CLI::PositiveNumber);

    SweepArgs sweep_args;
    auto* sweep = app.add_subcommand("sweep", "Train and evaluate over a grid of p_max values and seeds");
    add_config_options(sweep, sweep_args.config);
    sweep->add_option("--out", sweep_args.out, "Output directory")->required();
    sweep->add_option("--grid", sweep_args.grid, "Comma-separated p_max values");
    sweep->add_option("--seeds", sweep_args.seeds, "Seeds per grid point");
    sweep->add_flag("--image-aug", sweep_args.image_aug, "Also run the per-image rotation sampler");

    std::string glyph_out;
    GlyphOptions glyphs;
    auto* glyph_cmd = app.add_subcommand("make-glyphs", "Generate the synthetic glyph dataset");
    glyph_cmd->add_option("out", glyph_out, "Output directory")->required();
    glyph_cmd->add_option("--side", glyphs.side, "Image side in pixels");
    glyph_cmd->add_option("--train", glyphs.train_classes, "Training classes");
    glyph_cmd->add_option("--val", glyphs.val_classes, "Validation classes");
    glyph_cmd->add_option("--test", glyphs.test_classes, "Test classes");
    glyph_cmd->add_option("--images", glyphs.images_per_class, "Images per class");
    glyph_cmd->add_option("--seed", glyphs.seed, "Generator seed");

    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*ingest) return cmd_ingest(ingest_root, ingest_validate, out);
        if (*sample) return cmd_sample(sample_args, out);
        if (*train_cmd) return cmd_train(train_args, out);
        if (*eval_cmd) return cmd_eval(eval_args, out);
        if (*sweep) return cmd_sweep(sweep_args, out);
        if (*glyph_cmd) return cmd_make_glyphs(glyph_out, glyphs, out);
    } catch (const DatasetError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ManifestError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

} // namespace taskaug
