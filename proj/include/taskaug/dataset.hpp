#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace taskaug {

class DrawSource;

// 8-bit image, row-major (row, column, channel).
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(int h, int w, int c);
    Image(int h, int w, int c, std::vector<std::uint8_t> data);

    std::uint8_t& at(int row, int col, int ch) {
        return pixels[(static_cast<std::size_t>(row) * width + col) * channels + ch];
    }
    std::uint8_t at(int row, int col, int ch) const {
        return pixels[(static_cast<std::size_t>(row) * width + col) * channels + ch];
    }
    std::size_t byte_size() const { return pixels.size(); }

    friend bool operator==(const Image&, const Image&) = default;
};

// Counter-clockwise rotation by 90*turns degrees; turns in 0..3.
Image rot90(const Image& image, int turns);
Image horizontal_flip(const Image& image);
// Zero-pad by `pad` on every side, then cut an HxW window whose top-left
// offsets (row first, then column) are drawn uniformly from [0, 2*pad].
Image random_crop(const Image& image, int pad, DrawSource& rng);
// Default crop padding: 4 px at 32x32, scaled with the image side.
int default_crop_pad(int side);

enum class Split { train, val, test, train_val };

std::string_view to_string(Split split);
Split parse_split(std::string_view name);

// Raised for malformed dataset directories. `file` and `offset` locate the
// problem (offset is a byte offset into `file`, when meaningful).
class DatasetError : public std::runtime_error {
public:
    DatasetError(const std::string& message, std::string file, std::optional<std::uint64_t> offset = {});

    const std::string& file() const { return file_; }
    std::optional<std::uint64_t> offset() const { return offset_; }

private:
    std::string file_;
    std::optional<std::uint64_t> offset_;
};

struct ClassEntry {
    std::string name;
    std::size_t count = 0;
    std::string file;
};

struct SplitSpec {
    std::vector<std::string> train_classes;
    std::vector<std::string> val_classes;
    std::vector<std::string> test_classes;

    // Throws std::invalid_argument naming the first class found in two splits.
    void check_disjoint() const;
    std::vector<std::string> classes_for(Split split) const;
};

// Parsed meta.json.
struct DatasetMeta {
    std::string name;
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<ClassEntry> classes;
    SplitSpec splits;

    const ClassEntry* find_class(std::string_view class_name) const;
    std::size_t image_bytes() const {
        return static_cast<std::size_t>(height) * width * channels;
    }
};

DatasetMeta read_meta(const std::filesystem::path& root);
void write_meta(const std::filesystem::path& root, const DatasetMeta& meta);

struct ImageClass {
    std::string name;
    std::vector<Image> images;

    friend bool operator==(const ImageClass&, const ImageClass&) = default;
};

// Immutable class-indexed store for one split.
class ClassDataset {
public:
    ClassDataset() = default;
    ClassDataset(std::string name, Split split, int height, int width, int channels,
                 std::vector<ImageClass> classes);

    const std::string& name() const { return name_; }
    Split split() const { return split_; }
    int height() const { return height_; }
    int width() const { return width_; }
    int channels() const { return channels_; }
    std::size_t class_count() const { return classes_.size(); }
    const ImageClass& image_class(std::size_t index) const { return classes_.at(index); }
    const std::vector<ImageClass>& classes() const { return classes_; }
    std::vector<std::size_t> class_sizes() const;
    std::size_t min_class_size() const;

    friend bool operator==(const ClassDataset&, const ClassDataset&) = default;

private:
    std::string name_;
    Split split_ = Split::train;
    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<ImageClass> classes_;
};

ClassDataset ingest_dataset(const std::filesystem::path& root, Split split);

// Summary of a full directory check (all splits, all class files).
struct ValidationSummary {
    std::size_t train = 0;
    std::size_t val = 0;
    std::size_t test = 0;
    std::size_t images = 0;
};
ValidationSummary validate_dataset(const std::filesystem::path& root);

// Writes a dataset directory in the on-disk format; used by generators and tests.
void write_dataset(const std::filesystem::path& root, const DatasetMeta& meta,
                   const std::vector<ImageClass>& classes);

} // namespace taskaug
