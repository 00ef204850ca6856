#pragma once

#include "taskaug/dataset.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace taskaug {

// Synthetic stroke glyphs: each class is a small stroke skeleton on a 4x4
// node grid whose eight dihedral images are all distinct from each other
// and from every other class, so rotating a class yields a new class.
// Every image re-renders the skeleton with random jitter (node offsets,
// affine perturbation, stroke width, intensity, pixel noise).
struct GlyphOptions {
    int side = 16;
    int train_classes = 40;
    int val_classes = 0;
    int test_classes = 10;
    int images_per_class = 60;
    std::uint64_t seed = 7;
};

using GlyphEdge = std::array<int, 2>;  // node ids, row * 4 + col, sorted
using GlyphSkeleton = std::vector<GlyphEdge>;

GlyphSkeleton rotate_skeleton(const GlyphSkeleton& skeleton);  // 90 degrees counter-clockwise
GlyphSkeleton mirror_skeleton(const GlyphSkeleton& skeleton);  // horizontal flip

std::vector<GlyphSkeleton> make_glyph_skeletons(int count, std::uint64_t seed);

std::vector<ImageClass> make_glyph_classes(const GlyphOptions& options);

// Writes meta.json and one .bin per class; splits are consecutive class ranges.
DatasetMeta write_glyph_dataset(const std::filesystem::path& root, const GlyphOptions& options);

} // namespace taskaug
