#include "taskaug/model.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

namespace taskaug {

namespace fs = std::filesystem;

std::string ModelSpec::canonical() const {
    char lambda_buf[64];
    std::snprintf(lambda_buf, sizeof lambda_buf, "%.17g", lambda);
    return "embed:blocks=" + std::to_string(embed.blocks) + ",channels=" + std::to_string(embed.channels) +
           ",input=" + std::to_string(embed.height) + "x" + std::to_string(embed.width) + "x" +
           std::to_string(embed.in_channels) + ";head=" + std::string(to_string(head)) + ";lambda=" + lambda_buf;
}

std::uint64_t ModelSpec::hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : canonical()) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <typename T>
std::vector<T> Model<T>::flatten() const {
    std::vector<T> flat(embed.values().begin(), embed.values().end());
    flat.push_back(head.scale);
    flat.push_back(head.bias);
    return flat;
}

template <typename T>
void Model<T>::unflatten(std::span<const T> flat) {
    if (flat.size() != flat_size()) throw std::invalid_argument("Model::unflatten: length mismatch");
    embed.assign(flat.first(embed.size()));
    head.scale = flat[embed.size()];
    head.bias = flat[embed.size() + 1];
}

template struct Model<float>;
template struct Model<double>;

Model<float> make_model(const ModelSpec& spec, std::uint64_t seed, float init_scale, float init_bias) {
    if (!(init_scale > 0.0f)) throw std::invalid_argument("model: initial head scale must be > 0");
    Model<float> m{ParamSet<float>(spec.embed), HeadParams<float>{}};
    m.embed.initialize(seed);
    m.head.scale = init_scale;
    m.head.bias = spec.head == HeadKind::ridge ? init_bias : 0.0f;
    m.head.lambda = static_cast<float>(spec.lambda);
    return m;
}

template <typename T>
EpisodeOutcome<T> run_episode(const Model<T>& model, HeadKind head, const Activation<T>& images,
                              std::span<const int> support_labels, std::span<const int> query_labels, int ways,
                              bool with_grads, DrawSource* dropout_rng) {
    const int s_rows = static_cast<int>(support_labels.size());
    const int q_rows = static_cast<int>(query_labels.size());
    auto fwd = forward(model.embed, images, s_rows + q_rows, dropout_rng);
    const Matrix<T> support = fwd.embeddings.topRows(s_rows);
    const Matrix<T> query = fwd.embeddings.bottomRows(q_rows);

    EpisodeOutcome<T> out;
    out.logits = head_logits(head, support, support_labels, ways, query, model.head);
    auto ce = cross_entropy_loss(out.logits, query_labels);
    out.loss = ce.loss;
    out.accuracy = episode_accuracy(out.logits, query_labels);
    if (!with_grads) return out;

    const auto hg = head_backward(head, support, support_labels, ways, query, model.head, ce.grad_logits);
    Matrix<T> grad_emb(s_rows + q_rows, fwd.embeddings.cols());
    grad_emb.topRows(s_rows) = hg.support;
    grad_emb.bottomRows(q_rows) = hg.query;
    out.grads = backward(model.embed, fwd.cache, grad_emb);
    out.grads.push_back(hg.scale);
    out.grads.push_back(head == HeadKind::ridge ? hg.bias : T(0));
    return out;
}

template EpisodeOutcome<float> run_episode<float>(const Model<float>&, HeadKind, const Activation<float>&,
                                                  std::span<const int>, std::span<const int>, int, bool,
                                                  DrawSource*);
template EpisodeOutcome<double> run_episode<double>(const Model<double>&, HeadKind, const Activation<double>&,
                                                    std::span<const int>, std::span<const int>, int, bool,
                                                    DrawSource*);

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_floats(std::vector<std::uint8_t>& out, std::span<const float> values) {
    for (float f : values) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

class Reader {
public:
    Reader(std::span<const std::uint8_t> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}
    std::uint32_t u32() { return static_cast<std::uint32_t>(take(4)); }
    std::uint64_t u64() { return take(8); }
    float f32() { return std::bit_cast<float>(u32()); }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    std::size_t position() const { return pos_; }

private:
    std::uint64_t take(int n) {
        if (remaining() < static_cast<std::size_t>(n))
            throw CheckpointError(what_ + ": truncated at byte offset " + std::to_string(pos_));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    std::span<const std::uint8_t> bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
    // Write-then-rename so a crash never leaves a half-written checkpoint behind.
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw CheckpointError("cannot write " + tmp.string());
    }
    fs::rename(tmp, path);
}

} // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint) {
    std::vector<std::uint8_t> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    const auto flat = checkpoint.model.flatten();
    put_u32(out, kCheckpointVersion);
    put_u64(out, checkpoint.config_hash);
    put_u32(out, static_cast<std::uint32_t>(checkpoint.epoch));
    put_u64(out, checkpoint.ramp_t);
    put_u64(out, flat.size());
    put_floats(out, flat);
    return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const ModelSpec& spec) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw CheckpointError("checkpoint: bad magic");
    Reader r(bytes.subspan(8), "checkpoint");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint c{0, 0, 0, {ParamSet<float>(spec.embed), HeadParams<float>{}}};
    c.config_hash = r.u64();
    if (c.config_hash != spec.hash())
        throw CheckpointError("checkpoint: config hash mismatch (checkpoint was written for a different model)");
    c.epoch = static_cast<int>(r.u32());
    c.ramp_t = r.u64();
    const std::uint64_t count = r.u64();
    if (count != c.model.flat_size())
        throw CheckpointError("checkpoint: parameter count " + std::to_string(count) + " != expected " +
                              std::to_string(c.model.flat_size()));
    if (r.remaining() != count * 4)
        throw CheckpointError("checkpoint: payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                              std::to_string(count * 4));
    std::vector<float> flat(count);
    for (auto& f : flat) f = r.f32();
    c.model.unflatten(flat);
    c.model.head.lambda = static_cast<float>(spec.lambda);
    return c;
}

void save_checkpoint(const fs::path& path, const Checkpoint& checkpoint) {
    write_file(path, encode_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const fs::path& path, const ModelSpec& spec) {
    const auto bytes = read_file(path);
    try {
        return decode_checkpoint(bytes, spec);
    } catch (const CheckpointError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

void save_floats(const fs::path& path, std::span<const float> values, int epoch) {
    std::vector<std::uint8_t> out;
    put_u32(out, static_cast<std::uint32_t>(epoch));
    put_u64(out, values.size());
    put_floats(out, values);
    write_file(path, out);
}

std::vector<float> load_floats(const fs::path& path, int& epoch) {
    const auto bytes = read_file(path);
    Reader r(bytes, path.string());
    epoch = static_cast<int>(r.u32());
    std::vector<float> values(r.u64());
    if (r.remaining() != values.size() * 4) throw CheckpointError(path.string() + ": length mismatch");
    for (auto& v : values) v = r.f32();
    return values;
}

} // namespace taskaug
