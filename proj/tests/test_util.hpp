#pragma once

#include "taskaug/dataset.hpp"
#include "taskaug/random.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <unistd.h>
#include <vector>

namespace taskaug::testing {

class TempDir {
public:
    explicit TempDir(const std::string& tag = "taskaug") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline Image random_image(int h, int w, int c, DrawSource& rng) {
    Image img(h, w, c);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    return img;
}

// Dataset of `classes` classes x `per_class` random images, names c000.., with
// the given split sizes (consecutive ranges).
inline void write_random_dataset(const std::filesystem::path& root, int train, int val, int test, int per_class,
                                 int side = 4, int channels = 1, std::uint64_t seed = 1) {
    RandomSource rng(seed, "test-dataset", 0);
    DatasetMeta meta;
    meta.name = "random";
    meta.height = meta.width = side;
    meta.channels = channels;
    std::vector<ImageClass> classes;
    for (int k = 0; k < train + val + test; ++k) {
        ImageClass cls{"c" + std::to_string(1000 + k).substr(1), {}};
        for (int i = 0; i < per_class; ++i) cls.images.push_back(random_image(side, side, channels, rng));
        auto& list = k < train ? meta.splits.train_classes
                     : k < train + val ? meta.splits.val_classes
                                       : meta.splits.test_classes;
        list.push_back(cls.name);
        classes.push_back(std::move(cls));
    }
    write_dataset(root, meta, classes);
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Draw source whose draws are scripted by the test.
class ScriptedDraws : public DrawSource {
public:
    std::uint64_t next_u64() override { return ++state_ * 0x9e3779b97f4a7c15ULL; }

private:
    std::uint64_t state_ = 0;
};

} // namespace taskaug::testing
