#include "taskaug/dataset.hpp"

#include "taskaug/random.hpp"

#include "json.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

namespace taskaug {

namespace fs = std::filesystem;
using nlohmann::json;

Image::Image(int h, int w, int c)
    : height(h), width(w), channels(c),
      pixels(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(c), 0) {}

Image::Image(int h, int w, int c, std::vector<std::uint8_t> data)
    : height(h), width(w), channels(c), pixels(std::move(data)) {
    if (pixels.size() != static_cast<std::size_t>(h) * w * c)
        throw std::invalid_argument("Image: pixel buffer length does not match height*width*channels");
}

Image rot90(const Image& image, int turns) {
    if (image.height != image.width) throw std::invalid_argument("rot90: image must be square");
    if (turns < 0 || turns > 3) throw std::invalid_argument("rot90: rotation code must be in 0..3");
    if (turns == 0) return image;
    const int n = image.height;
    const int c = image.channels;
    Image out(n, n, c);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            int si = i, sj = j;
            switch (turns) {
            case 1: si = j; sj = n - 1 - i; break;
            case 2: si = n - 1 - i; sj = n - 1 - j; break;
            case 3: si = n - 1 - j; sj = i; break;
            }
            for (int ch = 0; ch < c; ++ch) out.at(i, j, ch) = image.at(si, sj, ch);
        }
    }
    return out;
}

Image horizontal_flip(const Image& image) {
    Image out(image.height, image.width, image.channels);
    for (int i = 0; i < image.height; ++i)
        for (int j = 0; j < image.width; ++j)
            for (int ch = 0; ch < image.channels; ++ch)
                out.at(i, j, ch) = image.at(i, image.width - 1 - j, ch);
    return out;
}

Image random_crop(const Image& image, int pad, DrawSource& rng) {
    if (pad < 0) throw std::invalid_argument("random_crop: pad must be >= 0");
    if (pad == 0) return image;
    const int dy = rng.uniform_int(0, 2 * pad);
    const int dx = rng.uniform_int(0, 2 * pad);
    Image out(image.height, image.width, image.channels);
    for (int i = 0; i < image.height; ++i) {
        const int si = i + dy - pad;
        if (si < 0 || si >= image.height) continue;
        for (int j = 0; j < image.width; ++j) {
            const int sj = j + dx - pad;
            if (sj < 0 || sj >= image.width) continue;
            for (int ch = 0; ch < image.channels; ++ch) out.at(i, j, ch) = image.at(si, sj, ch);
        }
    }
    return out;
}

int default_crop_pad(int side) {
    return std::max(1, (side * 4 + 16) / 32);
}

std::string_view to_string(Split split) {
    switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::train_val: return "train+val";
    }
    return "?";
}

Split parse_split(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    if (name == "train+val" || name == "train_val") return Split::train_val;
    throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

DatasetError::DatasetError(const std::string& message, std::string file, std::optional<std::uint64_t> offset)
    : std::runtime_error(message), file_(std::move(file)), offset_(offset) {}

void SplitSpec::check_disjoint() const {
    std::set<std::string> seen;
    for (const auto* list : {&train_classes, &val_classes, &test_classes}) {
        std::set<std::string> local;
        for (const auto& name : *list) {
            if (!local.insert(name).second)
                throw std::invalid_argument("class '" + name + "' listed twice in one split");
            if (seen.count(name))
                throw std::invalid_argument("class '" + name + "' appears in more than one split");
        }
        seen.insert(local.begin(), local.end());
    }
}

std::vector<std::string> SplitSpec::classes_for(Split split) const {
    switch (split) {
    case Split::train: return train_classes;
    case Split::val: return val_classes;
    case Split::test: return test_classes;
    case Split::train_val: {
        std::vector<std::string> out = train_classes;
        out.insert(out.end(), val_classes.begin(), val_classes.end());
        return out;
    }
    }
    return {};
}

const ClassEntry* DatasetMeta::find_class(std::string_view class_name) const {
    for (const auto& c : classes)
        if (c.name == class_name) return &c;
    return nullptr;
}

DatasetMeta read_meta(const fs::path& root) {
    const fs::path meta_path = root / "meta.json";
    const std::string file = meta_path.string();
    std::ifstream in(meta_path, std::ios::binary);
    if (!in) throw DatasetError("meta.json missing in " + root.string(), file);

    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw DatasetError("meta.json is not valid JSON: " + std::string(e.what()), file, e.byte);
    }

    DatasetMeta meta;
    try {
        meta.name = doc.at("name").get<std::string>();
        meta.height = doc.at("height").get<int>();
        meta.width = doc.at("width").get<int>();
        meta.channels = doc.at("channels").get<int>();
        for (const auto& c : doc.at("classes")) {
            ClassEntry entry;
            entry.name = c.at("name").get<std::string>();
            entry.count = c.at("count").get<std::size_t>();
            entry.file = c.at("file").get<std::string>();
            meta.classes.push_back(std::move(entry));
        }
        const auto& splits = doc.at("splits");
        meta.splits.train_classes = splits.at("train").get<std::vector<std::string>>();
        meta.splits.val_classes = splits.at("val").get<std::vector<std::string>>();
        meta.splits.test_classes = splits.at("test").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw DatasetError("meta.json schema error: " + std::string(e.what()), file);
    }

    if (meta.height <= 0 || meta.width <= 0)
        throw DatasetError("meta.json: height and width must be positive", file);
    if (meta.height != meta.width)
        throw DatasetError("meta.json: images must be square (height == width)", file);
    if (meta.channels != 1 && meta.channels != 3)
        throw DatasetError("meta.json: channels must be 1 or 3", file);

    std::set<std::string> names;
    for (const auto& c : meta.classes)
        if (!names.insert(c.name).second)
            throw DatasetError("meta.json: duplicate class name '" + c.name + "'", file);
    try {
        meta.splits.check_disjoint();
    } catch (const std::invalid_argument& e) {
        throw DatasetError("meta.json: " + std::string(e.what()), file);
    }
    for (Split s : {Split::train, Split::val, Split::test})
        for (const auto& name : meta.splits.classes_for(s))
            if (!names.count(name))
                throw DatasetError("meta.json: split '" + std::string(to_string(s)) +
                                       "' names unknown class '" + name + "'",
                                   file);
    return meta;
}

void write_meta(const fs::path& root, const DatasetMeta& meta) {
    json doc;
    doc["name"] = meta.name;
    doc["height"] = meta.height;
    doc["width"] = meta.width;
    doc["channels"] = meta.channels;
    doc["classes"] = json::array();
    for (const auto& c : meta.classes)
        doc["classes"].push_back({{"name", c.name}, {"count", c.count}, {"file", c.file}});
    doc["splits"] = {{"train", meta.splits.train_classes},
                     {"val", meta.splits.val_classes},
                     {"test", meta.splits.test_classes}};
    std::ofstream out(root / "meta.json", std::ios::binary);
    out << doc.dump(2) << "\n";
    if (!out) throw DatasetError("cannot write meta.json", (root / "meta.json").string());
}

namespace {

ImageClass load_class(const fs::path& root, const DatasetMeta& meta, const ClassEntry& entry) {
    const fs::path path = root / entry.file;
    const std::string file = path.string();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DatasetError("class file missing: " + file, file);

    const std::size_t per_image = meta.image_bytes();
    const std::uint64_t expected = static_cast<std::uint64_t>(entry.count) * per_image;
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() != expected) {
        std::ostringstream msg;
        msg << "class file " << file << ": expected " << expected << " bytes (" << entry.count << " images of "
            << per_image << " bytes), found " << bytes.size();
        if (bytes.size() < expected)
            msg << "; truncated at byte offset " << bytes.size();
        else
            msg << "; unexpected trailing data at byte offset " << expected;
        throw DatasetError(msg.str(), file, std::min<std::uint64_t>(bytes.size(), expected));
    }

    ImageClass out;
    out.name = entry.name;
    out.images.reserve(entry.count);
    for (std::size_t i = 0; i < entry.count; ++i) {
        auto first = bytes.begin() + static_cast<std::ptrdiff_t>(i * per_image);
        out.images.emplace_back(meta.height, meta.width, meta.channels,
                                std::vector<std::uint8_t>(first, first + static_cast<std::ptrdiff_t>(per_image)));
    }
    return out;
}

} // namespace

ClassDataset::ClassDataset(std::string name, Split split, int height, int width, int channels,
                           std::vector<ImageClass> classes)
    : name_(std::move(name)), split_(split), height_(height), width_(width), channels_(channels),
      classes_(std::move(classes)) {
    std::set<std::string> names;
    for (const auto& c : classes_) {
        if (!names.insert(c.name).second)
            throw std::invalid_argument("ClassDataset: duplicate class name '" + c.name + "'");
        for (const auto& img : c.images)
            if (img.height != height_ || img.width != width_ || img.channels != channels_)
                throw std::invalid_argument("ClassDataset: image shape differs within split in class '" +
                                            c.name + "'");
    }
}

std::vector<std::size_t> ClassDataset::class_sizes() const {
    std::vector<std::size_t> out;
    out.reserve(classes_.size());
    for (const auto& c : classes_) out.push_back(c.images.size());
    return out;
}

std::size_t ClassDataset::min_class_size() const {
    std::size_t m = classes_.empty() ? 0 : classes_.front().images.size();
    for (const auto& c : classes_) m = std::min(m, c.images.size());
    return m;
}

ClassDataset ingest_dataset(const fs::path& root, Split split) {
    const DatasetMeta meta = read_meta(root);
    std::vector<ImageClass> classes;
    for (const auto& name : meta.splits.classes_for(split))
        classes.push_back(load_class(root, meta, *meta.find_class(name)));
    return ClassDataset(meta.name, split, meta.height, meta.width, meta.channels, std::move(classes));
}

ValidationSummary validate_dataset(const fs::path& root) {
    const DatasetMeta meta = read_meta(root);
    ValidationSummary summary;
    summary.train = meta.splits.train_classes.size();
    summary.val = meta.splits.val_classes.size();
    summary.test = meta.splits.test_classes.size();
    for (Split s : {Split::train, Split::val, Split::test})
        for (const auto& name : meta.splits.classes_for(s))
            summary.images += load_class(root, meta, *meta.find_class(name)).images.size();
    return summary;
}

void write_dataset(const fs::path& root, const DatasetMeta& meta, const std::vector<ImageClass>& classes) {
    fs::create_directories(root);
    DatasetMeta out_meta = meta;
    out_meta.classes.clear();
    for (const auto& c : classes) {
        ClassEntry entry{c.name, c.images.size(), meta.find_class(c.name) ? meta.find_class(c.name)->file
                                                                          : c.name + ".bin"};
        const fs::path path = root / entry.file;
        std::ofstream out(path, std::ios::binary);
        for (const auto& img : c.images) {
            if (img.height != meta.height || img.width != meta.width || img.channels != meta.channels)
                throw std::invalid_argument("write_dataset: image shape does not match meta");
            out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
        }
        if (!out) throw DatasetError("cannot write class file", path.string());
        out_meta.classes.push_back(std::move(entry));
    }
    write_meta(root, out_meta);
}

} // namespace taskaug
