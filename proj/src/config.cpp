#include "taskaug/config.hpp"

#include "json.hpp"

#include <limits>

namespace taskaug {

using nlohmann::json;

namespace {

json to_json(const RunConfig& c) {
    const TrainConfig& t = c.train;
    json j;
    j["schema_version"] = kConfigSchemaVersion;
    j["data"] = c.data;
    j["seed"] = t.seed;
    j["sampler"] = {{"ways", t.sampler.ways},
                    {"shots", t.sampler.shots},
                    {"queries", t.sampler.queries},
                    {"p_max", t.sampler.p_max},
                    {"ramp_episodes", t.sampler.ramp_episodes},
                    {"mode", std::string(to_string(t.mode))}};
    j["augment"] = {{"flip", t.flip}, {"crop_pad", t.crop_pad}};
    j["model"] = {{"blocks", t.blocks}, {"channels", t.channels}, {"dropout", t.dropout}};
    j["head"] = {{"kind", std::string(to_string(t.head))},
                 {"lambda", t.lambda},
                 {"init_scale", t.init_scale},
                 {"init_bias", t.init_bias}};
    j["optim"] = {{"lr", t.schedule.base},
                  {"milestones", t.schedule.milestones},
                  {"multipliers", t.schedule.multipliers},
                  {"momentum", t.momentum},
                  {"weight_decay", t.weight_decay},
                  {"clip_norm", t.clip_norm}};
    j["train"] = {{"epochs", t.epochs},
                  {"batches_per_epoch", t.batches_per_epoch},
                  {"episodes_per_batch", t.episodes_per_batch}};
    j["eval"] = {{"episodes", t.eval.episodes},
                 {"queries", t.eval.queries},
                 {"split", std::string(to_string(t.eval.split))}};
    j["protocol"] = {{"ens", t.ens}, {"val", t.val}};
    return j;
}

[[noreturn]] void fail(const std::string& key, const std::string& what) {
    throw ConfigError("config key '" + key + "': " + what);
}

// Element kinds of the array-valued keys (their defaults may be empty).
bool array_of_integers(const std::string& key) {
    return key == "optim.milestones";
}

void check_type(const std::string& key, const json& schema, const json& value) {
    if (schema.is_boolean()) {
        if (!value.is_boolean()) fail(key, "expected true or false");
    } else if (schema.is_string()) {
        if (!value.is_string()) fail(key, "expected a string");
    } else if (schema.is_number_unsigned()) {
        if (!value.is_number_unsigned()) fail(key, "expected a non-negative integer");
    } else if (schema.is_number_integer()) {
        if (!value.is_number_integer()) fail(key, "expected an integer");
        const auto v = value.is_number_unsigned() ? static_cast<long double>(value.get<std::uint64_t>())
                                                  : static_cast<long double>(value.get<std::int64_t>());
        if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) fail(key, "out of range");
    } else if (schema.is_number()) {
        if (!value.is_number()) fail(key, "expected a number");
    } else if (schema.is_array()) {
        if (!value.is_array()) fail(key, "expected an array");
        for (const auto& e : value) {
            if (array_of_integers(key) ? !e.is_number_integer() : !e.is_number())
                fail(key, array_of_integers(key) ? "expected an array of integers" : "expected an array of numbers");
        }
    }
}

// Copies `input` over `target`, rejecting keys the schema does not have.
void merge_checked(json& target, const json& input, const std::string& prefix) {
    if (!input.is_object()) fail(prefix.empty() ? "<root>" : prefix, "expected an object");
    for (const auto& [name, value] : input.items()) {
        const std::string key = prefix.empty() ? name : prefix + "." + name;
        if (!target.contains(name)) fail(key, "unknown key");
        json& slot = target[name];
        if (slot.is_object()) {
            merge_checked(slot, value, key);
        } else {
            check_type(key, slot, value);
            slot = value;
        }
    }
}

void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override '" + assignment + "' must look like key.path=value");
    const std::string key = assignment.substr(0, eq);
    const std::string text = assignment.substr(eq + 1);
    json* slot = &doc;
    std::size_t begin = 0;
    while (true) {
        const auto dot = key.find('.', begin);
        const std::string part = key.substr(begin, dot == std::string::npos ? std::string::npos : dot - begin);
        if (!slot->is_object() || !slot->contains(part)) fail(key, "unknown key");
        slot = &(*slot)[part];
        if (dot == std::string::npos) break;
        begin = dot + 1;
    }
    if (slot->is_object()) fail(key, "names a section, not a value");
    if (key == "schema_version") fail(key, "cannot be overridden");

    json value;
    if (slot->is_string()) {
        value = text;
    } else {
        value = json::parse(text, nullptr, false);
        if (value.is_discarded() && slot->is_array()) value = json::parse("[" + text + "]", nullptr, false);
        if (value.is_discarded()) fail(key, "cannot parse value '" + text + "'");
    }
    check_type(key, *slot, value);
    *slot = value;
}

template <typename T>
T get_as(const json& section, const char* name) {
    return section.at(name).get<T>();
}

RunConfig from_json(const json& j) {
    RunConfig c;
    TrainConfig& t = c.train;
    c.data = j.at("data").get<std::string>();
    t.seed = j.at("seed").get<std::uint64_t>();
    const auto& s = j.at("sampler");
    t.sampler.ways = get_as<int>(s, "ways");
    t.sampler.shots = get_as<int>(s, "shots");
    t.sampler.queries = get_as<int>(s, "queries");
    t.sampler.p_max = get_as<double>(s, "p_max");
    t.sampler.ramp_episodes = get_as<std::uint64_t>(s, "ramp_episodes");
    const auto& a = j.at("augment");
    t.flip = get_as<bool>(a, "flip");
    t.crop_pad = get_as<int>(a, "crop_pad");
    const auto& m = j.at("model");
    t.blocks = get_as<int>(m, "blocks");
    t.channels = get_as<int>(m, "channels");
    t.dropout = get_as<double>(m, "dropout");
    const auto& h = j.at("head");
    t.lambda = get_as<double>(h, "lambda");
    t.init_scale = get_as<double>(h, "init_scale");
    t.init_bias = get_as<double>(h, "init_bias");
    const auto& o = j.at("optim");
    t.schedule.base = get_as<double>(o, "lr");
    t.schedule.milestones = get_as<std::vector<int>>(o, "milestones");
    t.schedule.multipliers = get_as<std::vector<double>>(o, "multipliers");
    t.momentum = get_as<double>(o, "momentum");
    t.weight_decay = get_as<double>(o, "weight_decay");
    t.clip_norm = get_as<double>(o, "clip_norm");
    const auto& tr = j.at("train");
    t.epochs = get_as<int>(tr, "epochs");
    t.batches_per_epoch = get_as<int>(tr, "batches_per_epoch");
    t.episodes_per_batch = get_as<int>(tr, "episodes_per_batch");
    const auto& e = j.at("eval");
    t.eval.episodes = get_as<int>(e, "episodes");
    t.eval.queries = get_as<int>(e, "queries");
    const auto& p = j.at("protocol");
    t.ens = get_as<bool>(p, "ens");
    t.val = get_as<bool>(p, "val");
    try {
        t.mode = parse_augment_mode(get_as<std::string>(s, "mode"));
    } catch (const std::invalid_argument& ex) {
        fail("sampler.mode", ex.what());
    }
    try {
        t.head = parse_head_kind(get_as<std::string>(h, "kind"));
    } catch (const std::invalid_argument& ex) {
        fail("head.kind", ex.what());
    }
    try {
        t.eval.split = parse_split(get_as<std::string>(e, "split"));
    } catch (const std::invalid_argument& ex) {
        fail("eval.split", ex.what());
    }
    return c;
}

RunConfig build(const json* input, std::span<const std::string> overrides) {
    json doc = to_json(RunConfig{});
    if (input) {
        if (!input->is_object()) throw ConfigError("config: top level must be a JSON object");
        if (!input->contains("schema_version")) throw ConfigError("config: schema_version is required");
        const auto& v = input->at("schema_version");
        if (!v.is_number_integer() || v.get<std::int64_t>() != kConfigSchemaVersion)
            throw ConfigError("config: unsupported schema_version " + v.dump() + " (this build reads " +
                              std::to_string(kConfigSchemaVersion) + ")");
        merge_checked(doc, *input, "");
    }
    for (const auto& o : overrides) apply_override(doc, o);
    return from_json(doc);
}

} // namespace

std::string dump_config(const RunConfig& config) {
    return to_json(config).dump(2) + "\n";
}

RunConfig parse_config(std::string_view text, std::span<const std::string> overrides) {
    const json input = json::parse(text, nullptr, false);
    if (input.is_discarded()) throw ConfigError("config: not valid JSON");
    return build(&input, overrides);
}

RunConfig default_config(std::span<const std::string> overrides) {
    return build(nullptr, overrides);
}

} // namespace taskaug
