#include "taskaug/sampler.hpp"

#include "json.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace taskaug {

using nlohmann::json;

void SamplerParams::validate() const {
    if (ways < 2) throw std::invalid_argument("sampler: ways (N) must be >= 2");
    if (shots < 1) throw std::invalid_argument("sampler: shots (K) must be >= 1");
    if (queries < 1) throw std::invalid_argument("sampler: queries (H) must be >= 1");
    if (!(p_max >= 0.0))
        throw std::invalid_argument("sampler: p_max must be >= 0");
    if (p_max > kMaxNovelProbability)
        throw std::invalid_argument(
            "sampler: p_max must be <= 0.75, the proportion of novel (rotated) classes among all 4M classes; "
            "above it a novel class would be drawn more often than an original one");
    if (ramp_episodes < 1) throw std::invalid_argument("sampler: ramp length T must be >= 1");
}

void SamplerParams::validate_for(std::span<const std::size_t> class_sizes) const {
    validate();
    if (static_cast<std::size_t>(ways) > class_sizes.size())
        throw std::invalid_argument("sampler: ways N=" + std::to_string(ways) + " exceeds class count M=" +
                                    std::to_string(class_sizes.size()));
    const std::size_t need = static_cast<std::size_t>(shots + queries);
    for (std::size_t i = 0; i < class_sizes.size(); ++i)
        if (class_sizes[i] < need)
            throw std::invalid_argument("sampler: class " + std::to_string(i) + " holds " +
                                        std::to_string(class_sizes[i]) + " images, K+H=" + std::to_string(need) +
                                        " required");
}

double ramp_probability(std::uint64_t t, std::uint64_t ramp_episodes, double p_max) {
    if (t >= ramp_episodes) return p_max;
    return p_max * (static_cast<double>(t) / static_cast<double>(ramp_episodes));
}

ClassDescriptor decode_novel_class(int u, int class_count) {
    if (class_count < 1) throw std::invalid_argument("decode_novel_class: M must be >= 1");
    if (u < class_count || u > 4 * class_count - 1)
        throw std::out_of_range("decode_novel_class: u=" + std::to_string(u) + " outside [M, 4M-1] for M=" +
                                std::to_string(class_count));
    return {u % class_count + 1, u / class_count};
}

int Episode::novel_count() const {
    return static_cast<int>(std::count_if(classes.begin(), classes.end(),
                                          [](const ClassDescriptor& c) { return c.rotation != 0; }));
}

std::vector<int> Episode::support_labels() const {
    std::vector<int> out;
    out.reserve(support.size());
    for (const auto& e : support) out.push_back(e.slot);
    return out;
}

std::vector<int> Episode::query_labels() const {
    std::vector<int> out;
    out.reserve(query.size());
    for (const auto& e : query) out.push_back(e.slot);
    return out;
}

void check_episode(const Episode& episode, int shots, int queries, std::span<const std::size_t> class_sizes) {
    const int n = episode.ways();
    auto fail = [](const std::string& what) { throw std::logic_error("episode invariant violated: " + what); };
    if (episode.support.size() != static_cast<std::size_t>(n * shots)) fail("support size != N*K");
    if (episode.query.size() != static_cast<std::size_t>(n * queries)) fail("query size != N*H");

    std::set<std::pair<int, int>> descriptors;
    for (const auto& c : episode.classes) {
        if (c.base_class < 1 || static_cast<std::size_t>(c.base_class) > class_sizes.size())
            fail("base class out of range");
        if (c.rotation < 0 || c.rotation > 3) fail("rotation code out of range");
        if (!descriptors.insert({c.base_class, c.rotation}).second) fail("duplicate (v, r) descriptor");
    }

    std::vector<int> support_count(static_cast<std::size_t>(n), 0), query_count(static_cast<std::size_t>(n), 0);
    std::vector<std::set<int>> used(static_cast<std::size_t>(n));
    auto visit = [&](const ExampleRef& e, std::vector<int>& counts) {
        if (e.slot < 0 || e.slot >= n) fail("label out of range");
        const auto& cls = episode.classes[static_cast<std::size_t>(e.slot)];
        if (e.image_index < 0 ||
            static_cast<std::size_t>(e.image_index) >= class_sizes[static_cast<std::size_t>(cls.base_class - 1)])
            fail("image index out of range");
        if (e.rotation < 0 || e.rotation > 3) fail("example rotation out of range");
        if (!used[static_cast<std::size_t>(e.slot)].insert(e.image_index).second)
            fail("image reused within a class (support/query overlap)");
        ++counts[static_cast<std::size_t>(e.slot)];
    };
    for (const auto& e : episode.support) visit(e, support_count);
    for (const auto& e : episode.query) visit(e, query_count);
    for (int i = 0; i < n; ++i) {
        if (support_count[static_cast<std::size_t>(i)] != shots) fail("support count per label != K");
        if (query_count[static_cast<std::size_t>(i)] != queries) fail("query count per label != H");
    }
}

namespace {

// Draws K+H images for every class slot; first K go to support, last H to query.
void draw_examples(Episode& episode, std::span<const std::size_t> class_sizes, const SamplerParams& params,
                   DrawSource& draws) {
    const int per_class = params.shots + params.queries;
    for (int slot = 0; slot < episode.ways(); ++slot) {
        const auto& cls = episode.classes[static_cast<std::size_t>(slot)];
        const int size = static_cast<int>(class_sizes[static_cast<std::size_t>(cls.base_class - 1)]);
        const std::vector<int> picks = draws.sample_without_replacement(per_class, 0, size - 1);
        for (int i = 0; i < per_class; ++i) {
            ExampleRef ref{slot, picks[static_cast<std::size_t>(i)], cls.rotation};
            (i < params.shots ? episode.support : episode.query).push_back(ref);
        }
    }
    // Keep support and query grouped by label in slot order.
    auto by_slot = [](const ExampleRef& a, const ExampleRef& b) { return a.slot < b.slot; };
    std::stable_sort(episode.support.begin(), episode.support.end(), by_slot);
    std::stable_sort(episode.query.begin(), episode.query.end(), by_slot);
}

} // namespace

Episode sample_episode(std::span<const std::size_t> class_sizes, const SamplerParams& params, RampState& state,
                       DrawSource& draws, std::uint64_t seed) {
    params.validate_for(class_sizes);
    const int m = static_cast<int>(class_sizes.size());

    Episode episode;
    episode.seed = seed;
    episode.episode_index = state.t;
    state.t += 1;
    const double p = ramp_probability(state.t, params.ramp_episodes, params.p_max);
    const int novel = draws.binomial(params.ways, p);

    for (int v : draws.sample_without_replacement(params.ways - novel, 1, m))
        episode.classes.push_back({v, 0});
    for (int u : draws.sample_without_replacement(novel, m, 4 * m - 1))
        episode.classes.push_back(decode_novel_class(u, m));

    // Images are drawn per class in descriptor order (originals, then novel).
    draw_examples(episode, class_sizes, params, draws);
    return episode;
}

Episode sample_episode_imageaug(std::span<const std::size_t> class_sizes, const SamplerParams& params,
                                RampState& state, DrawSource& draws, std::uint64_t seed) {
    params.validate_for(class_sizes);
    const int m = static_cast<int>(class_sizes.size());

    Episode episode;
    episode.seed = seed;
    episode.episode_index = state.t;
    state.t += 1;
    const double p = ramp_probability(state.t, params.ramp_episodes, params.p_max);

    for (int v : draws.sample_without_replacement(params.ways, 1, m)) episode.classes.push_back({v, 0});
    draw_examples(episode, class_sizes, params, draws);

    // Rotation decisions come last so that p = 0 leaves the stream, and hence
    // the episode, identical to the plain sampler.
    for (auto* set : {&episode.support, &episode.query})
        for (auto& e : *set)
            if (draws.bernoulli(p)) e.rotation = draws.uniform_int(1, 3);
    return episode;
}

AugmentMode parse_augment_mode(std::string_view name) {
    if (name == "task") return AugmentMode::task;
    if (name == "image") return AugmentMode::image;
    throw std::invalid_argument("unknown augmentation mode '" + std::string(name) + "' (expected task|image)");
}

std::string_view to_string(AugmentMode mode) {
    return mode == AugmentMode::task ? "task" : "image";
}

Episode sample_seeded(const ClassDataset& dataset, const SamplerParams& params, RampState& state,
                      std::uint64_t seed, AugmentMode mode) {
    const auto sizes = dataset.class_sizes();
    RandomSource draws(seed, "episode", state.t);
    return mode == AugmentMode::task ? sample_episode(sizes, params, state, draws, seed)
                                     : sample_episode_imageaug(sizes, params, state, draws, seed);
}

namespace {

json refs_to_json(const std::vector<ExampleRef>& refs) {
    json out = json::array();
    for (const auto& r : refs) out.push_back({r.slot, r.image_index, r.rotation});
    return out;
}

std::vector<ExampleRef> refs_from_json(const json& arr, int ways, const char* field) {
    if (!arr.is_array()) throw ManifestError(std::string("manifest: '") + field + "' must be an array");
    std::vector<ExampleRef> out;
    for (const auto& item : arr) {
        if (!item.is_array() || item.size() != 3)
            throw ManifestError(std::string("manifest: '") + field + "' entries must be [slot, image, rotation]");
        for (const auto& x : item)
            if (!x.is_number_integer()) throw ManifestError("manifest: entries must be integers");
        ExampleRef r{item[0].get<int>(), item[1].get<int>(), item[2].get<int>()};
        if (r.slot < 0 || r.slot >= ways) throw ManifestError("manifest: class slot out of range");
        if (r.image_index < 0) throw ManifestError("manifest: negative image index");
        if (r.rotation < 0 || r.rotation > 3) throw ManifestError("manifest: rotation code must be in 0..3");
        out.push_back(r);
    }
    return out;
}

} // namespace

std::string dump_episode(const Episode& episode) {
    json doc;
    doc["seed"] = episode.seed;
    doc["episode_index"] = episode.episode_index;
    doc["classes"] = json::array();
    for (const auto& c : episode.classes) doc["classes"].push_back({{"v", c.base_class}, {"r", c.rotation}});
    doc["support"] = refs_to_json(episode.support);
    doc["query"] = refs_to_json(episode.query);
    return doc.dump() + "\n";
}

Episode load_episode(std::string_view manifest) {
    json doc;
    try {
        doc = json::parse(manifest);
    } catch (const json::parse_error& e) {
        throw ManifestError("manifest: invalid JSON: " + std::string(e.what()));
    }
    if (!doc.is_object()) throw ManifestError("manifest: top level must be an object");
    for (const char* key : {"seed", "episode_index", "classes", "support", "query"})
        if (!doc.contains(key)) throw ManifestError(std::string("manifest: missing field '") + key + "'");
    if (!doc["seed"].is_number_unsigned() && !doc["seed"].is_number_integer())
        throw ManifestError("manifest: 'seed' must be an integer");
    if (!doc["episode_index"].is_number_integer()) throw ManifestError("manifest: 'episode_index' must be an integer");

    Episode e;
    e.seed = doc["seed"].get<std::uint64_t>();
    e.episode_index = doc["episode_index"].get<std::uint64_t>();
    if (!doc["classes"].is_array()) throw ManifestError("manifest: 'classes' must be an array");
    for (const auto& c : doc["classes"]) {
        if (!c.is_object() || !c.contains("v") || !c.contains("r") || !c["v"].is_number_integer() ||
            !c["r"].is_number_integer())
            throw ManifestError("manifest: class entries must be {v: int, r: int}");
        ClassDescriptor d{c["v"].get<int>(), c["r"].get<int>()};
        if (d.base_class < 1) throw ManifestError("manifest: base class index v must be >= 1");
        if (d.rotation < 0 || d.rotation > 3) throw ManifestError("manifest: rotation code must be in 0..3");
        e.classes.push_back(d);
    }
    e.support = refs_from_json(doc["support"], e.ways(), "support");
    e.query = refs_from_json(doc["query"], e.ways(), "query");
    return e;
}

EpisodeImages materialize_episode(const ClassDataset& dataset, const Episode& episode,
                                  const AugmentOptions& augment) {
    RandomSource rng(episode.seed, "augment", episode.episode_index);
    auto resolve = [&](const ExampleRef& ref) {
        const auto& cls = episode.classes.at(static_cast<std::size_t>(ref.slot));
        const auto& images = dataset.image_class(static_cast<std::size_t>(cls.base_class - 1)).images;
        Image img = rot90(images.at(static_cast<std::size_t>(ref.image_index)), ref.rotation);
        if (augment.flip && rng.bernoulli(0.5)) img = horizontal_flip(img);
        if (augment.crop_pad > 0) img = random_crop(img, augment.crop_pad, rng);
        return img;
    };
    EpisodeImages out;
    out.support.reserve(episode.support.size());
    out.query.reserve(episode.query.size());
    for (const auto& ref : episode.support) {
        out.support.push_back(resolve(ref));
        out.support_labels.push_back(ref.slot);
    }
    for (const auto& ref : episode.query) {
        out.query.push_back(resolve(ref));
        out.query_labels.push_back(ref.slot);
    }
    return out;
}

} // namespace taskaug
