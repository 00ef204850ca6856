#include "taskaug/glyphs.hpp"

#include "taskaug/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>
#include <stdexcept>

namespace taskaug {

namespace {

constexpr int kGrid = 4;

GlyphSkeleton canonical(GlyphSkeleton s) {
    for (auto& e : s)
        if (e[0] > e[1]) std::swap(e[0], e[1]);
    std::sort(s.begin(), s.end());
    return s;
}

GlyphSkeleton map_nodes(const GlyphSkeleton& s, int (*f)(int, int, int&, int&)) {
    GlyphSkeleton out;
    for (const auto& e : s) {
        GlyphEdge m{};
        for (int k = 0; k < 2; ++k) {
            int r = e[static_cast<std::size_t>(k)] / kGrid, c = e[static_cast<std::size_t>(k)] % kGrid, nr = 0, nc = 0;
            f(r, c, nr, nc);
            m[static_cast<std::size_t>(k)] = nr * kGrid + nc;
        }
        out.push_back(m);
    }
    return canonical(out);
}

// One random-walk skeleton of 3..5 strokes between 8-neighbouring nodes.
GlyphSkeleton random_skeleton(DrawSource& rng) {
    const int strokes = rng.uniform_int(3, 5);
    std::set<GlyphEdge> edges;
    int node = rng.uniform_int(0, kGrid * kGrid - 1);
    int guard = 0;
    while (static_cast<int>(edges.size()) < strokes && guard++ < 100) {
        const int r = node / kGrid, c = node % kGrid;
        const int nr = r + rng.uniform_int(-1, 1), nc = c + rng.uniform_int(-1, 1);
        if (nr < 0 || nr >= kGrid || nc < 0 || nc >= kGrid || (nr == r && nc == c)) continue;
        const int next = nr * kGrid + nc;
        edges.insert({std::min(node, next), std::max(node, next)});
        // Occasionally branch from an earlier node instead of extending the path.
        node = rng.bernoulli(0.25) ? (*std::next(edges.begin(), rng.uniform_int(0, static_cast<int>(edges.size()) - 1)))[0]
                                   : next;
    }
    return GlyphSkeleton(edges.begin(), edges.end());
}

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double vx = bx - ax, vy = by - ay;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

Image render(const GlyphSkeleton& skeleton, int side, DrawSource& rng) {
    const double margin = side * 0.2;
    const double step = (side - 2.0 * margin) / (kGrid - 1);
    const double center = (side - 1) / 2.0;

    const double angle = (rng.uniform01() - 0.5) * 2.0 * 12.0 * std::numbers::pi / 180.0;
    const double scale = 0.9 + 0.2 * rng.uniform01();
    const double shift_x = (rng.uniform01() - 0.5) * 2.4, shift_y = (rng.uniform01() - 0.5) * 2.4;
    const double width = 0.8 + 0.5 * rng.uniform01();
    const double intensity = 180.0 + 75.0 * rng.uniform01();
    const double ca = std::cos(angle), sa = std::sin(angle);

    std::array<std::array<double, 2>, kGrid * kGrid> nodes{};
    for (int n = 0; n < kGrid * kGrid; ++n) {
        const double x = margin + (n % kGrid) * step + (rng.uniform01() - 0.5) * 0.8 - center;
        const double y = margin + (n / kGrid) * step + (rng.uniform01() - 0.5) * 0.8 - center;
        nodes[static_cast<std::size_t>(n)] = {center + scale * (ca * x - sa * y) + shift_x,
                                              center + scale * (sa * x + ca * y) + shift_y};
    }

    Image img(side, side, 1);
    for (int i = 0; i < side; ++i)
        for (int j = 0; j < side; ++j) {
            double d = 1e9;
            for (const auto& e : skeleton) {
                const auto& a = nodes[static_cast<std::size_t>(e[0])];
                const auto& b = nodes[static_cast<std::size_t>(e[1])];
                d = std::min(d, segment_distance(j, i, a[0], a[1], b[0], b[1]));
            }
            const double coverage = std::clamp(width + 0.5 - d, 0.0, 1.0);
            const double v = intensity * coverage + 12.0 * rng.normal() + 10.0;
            img.at(i, j, 0) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
    return img;
}

} // namespace

GlyphSkeleton rotate_skeleton(const GlyphSkeleton& skeleton) {
    // Counter-clockwise: the node at (r, c) moves to (n-1-c, r).
    return map_nodes(skeleton, [](int r, int c, int& nr, int& nc) {
        nr = kGrid - 1 - c;
        nc = r;
        return 0;
    });
}

GlyphSkeleton mirror_skeleton(const GlyphSkeleton& skeleton) {
    return map_nodes(skeleton, [](int r, int c, int& nr, int& nc) {
        nr = r;
        nc = kGrid - 1 - c;
        return 0;
    });
}

std::vector<GlyphSkeleton> make_glyph_skeletons(int count, std::uint64_t seed) {
    RandomSource rng(seed, "glyph-skeletons", 0);
    std::set<GlyphSkeleton> taken;
    std::vector<GlyphSkeleton> out;
    int attempts = 0;
    while (static_cast<int>(out.size()) < count) {
        if (++attempts > 100000) throw std::runtime_error("glyphs: could not find enough asymmetric skeletons");
        const GlyphSkeleton s = canonical(random_skeleton(rng));
        std::set<GlyphSkeleton> orbit;
        GlyphSkeleton r = s;
        for (int k = 0; k < 4; ++k) {
            orbit.insert(r);
            orbit.insert(mirror_skeleton(r));
            r = rotate_skeleton(r);
        }
        if (orbit.size() != 8) continue;
        if (std::any_of(orbit.begin(), orbit.end(), [&](const GlyphSkeleton& g) { return taken.count(g) > 0; }))
            continue;
        taken.insert(orbit.begin(), orbit.end());
        out.push_back(s);
    }
    return out;
}

std::vector<ImageClass> make_glyph_classes(const GlyphOptions& options) {
    const int total = options.train_classes + options.val_classes + options.test_classes;
    if (options.side < 8) throw std::invalid_argument("glyphs: side must be >= 8");
    if (total < 1 || options.images_per_class < 1) throw std::invalid_argument("glyphs: empty dataset requested");
    const auto skeletons = make_glyph_skeletons(total, options.seed);
    std::vector<ImageClass> classes;
    for (int k = 0; k < total; ++k) {
        char name[32];
        std::snprintf(name, sizeof name, "glyph_%03d", k);
        ImageClass cls{name, {}};
        RandomSource rng(options.seed, "glyph-render", static_cast<std::uint64_t>(k));
        for (int i = 0; i < options.images_per_class; ++i)
            cls.images.push_back(render(skeletons[static_cast<std::size_t>(k)], options.side, rng));
        classes.push_back(std::move(cls));
    }
    return classes;
}

DatasetMeta write_glyph_dataset(const std::filesystem::path& root, const GlyphOptions& options) {
    const auto classes = make_glyph_classes(options);
    DatasetMeta meta;
    meta.name = "glyphs";
    meta.height = meta.width = options.side;
    meta.channels = 1;
    for (std::size_t k = 0; k < classes.size(); ++k) {
        const int i = static_cast<int>(k);
        auto& list = i < options.train_classes ? meta.splits.train_classes
                     : i < options.train_classes + options.val_classes ? meta.splits.val_classes
                                                                       : meta.splits.test_classes;
        list.push_back(classes[k].name);
    }
    write_dataset(root, meta, classes);
    return read_meta(root);
}

} // namespace taskaug
