// Copyright 2026 The pesc Authors
// SPDX-License-Identifier: Apache-2.0

#include "pesc/io/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_set>

#include "pesc/core/errors.hpp"

namespace pesc {

namespace {

constexpr std::size_t kPreamble = 8 + 4 + 8;

template <typename U>
void put_le(std::vector<std::uint8_t> &out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i)
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t *p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
        v |= static_cast<U>(p[i]) << (8 * i);
    return v;
}

template <typename Model>
Checkpoint collect(const Model &model, std::string kind, nlohmann::json config) {
    Checkpoint ck;
    ck.kind = std::move(kind);
    ck.config = std::move(config);
    for (const auto &p : model.parameters()) {
        const auto d = p.tensor.data();
        ck.tensors.push_back({p.name, p.tensor.shape(), std::vector<float>(d.begin(), d.end())});
    }
    return ck;
}

template <typename Model>
void assign(const Model &model, const Checkpoint &ck) {
    const auto params = model.parameters();
    if (params.size() != ck.tensors.size())
        throw DataError("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, model expects " +
                        std::to_string(params.size()));
    for (const auto &p : params) {
        const CheckpointTensor *t = ck.find(p.name);
        if (t == nullptr)
            throw DataError("checkpoint is missing tensor '" + p.name + "'");
        if (t->shape != p.tensor.shape())
            throw ShapeError("tensor '" + p.name + "' has shape " + shape_str(t->shape) + ", model expects " +
                             shape_str(p.tensor.shape()));
        Tensor<float> dst = p.tensor;
        std::copy(t->data.begin(), t->data.end(), dst.data().begin());
    }
}

void expect_kind(const Checkpoint &ck, std::string_view kind) {
    if (ck.kind != kind)
        throw ConfigError("expected a " + std::string(kind) + " checkpoint, got kind '" + ck.kind + "'");
}

} // namespace

const CheckpointTensor *Checkpoint::find(std::string_view name) const {
    for (const auto &t : tensors) {
        if (t.name == name)
            return &t;
    }
    return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint &ck) {
    nlohmann::json manifest = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto &t : ck.tensors) {
        if (t.data.size() != shape_numel(t.shape))
            throw ShapeError("tensor '" + t.name + "' holds " + std::to_string(t.data.size()) +
                             " values for shape " + shape_str(t.shape));
        const std::uint64_t nbytes = t.data.size() * sizeof(float);
        manifest.push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", "f32"}, {"offset", offset},
                            {"nbytes", nbytes}});
        offset += nbytes;
    }
    const nlohmann::json header{{"kind", ck.kind},         {"config", ck.config}, {"meta", ck.meta},
                                {"tensors", manifest},     {"payload_bytes", offset}};
    const std::string text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(kPreamble + text.size() + offset);
    out.insert(out.end(), kCheckpointMagic.begin(), kCheckpointMagic.end());
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto &t : ck.tensors) {
        for (float v : t.data)
            put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string &origin) {
    auto fail = [&](const std::string &what) { return IoError(origin, "corrupt checkpoint: " + what); };
    if (bytes.size() < kPreamble)
        throw fail("file shorter than the preamble");
    if (std::memcmp(bytes.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0)
        throw fail("bad magic");
    const auto version = get_le<std::uint32_t>(bytes.data() + 8);
    if (version != kCheckpointVersion)
        throw fail("unsupported format version " + std::to_string(version));
    const auto header_len = get_le<std::uint64_t>(bytes.data() + 12);
    if (header_len > bytes.size() - kPreamble)
        throw fail("header length exceeds file size");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + kPreamble,
                                       bytes.begin() + static_cast<std::ptrdiff_t>(kPreamble + header_len));
    } catch (const nlohmann::json::exception &e) {
        throw fail(std::string("header is not valid JSON: ") + e.what());
    }

    Checkpoint ck;
    const std::size_t payload_start = kPreamble + header_len;
    try {
        header.at("kind").get_to(ck.kind);
        ck.config = header.at("config");
        ck.meta = header.at("meta");
        const auto payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
        if (payload_bytes != bytes.size() - payload_start)
            throw fail("payload holds " + std::to_string(bytes.size() - payload_start) + " bytes, header declares " +
                       std::to_string(payload_bytes));
        std::uint64_t expected = 0;
        std::unordered_set<std::string> seen;
        for (const auto &m : header.at("tensors")) {
            CheckpointTensor t;
            m.at("name").get_to(t.name);
            m.at("shape").get_to(t.shape);
            if (m.at("dtype").get<std::string>() != "f32")
                throw fail("tensor '" + t.name + "' has unsupported dtype");
            const auto offset = m.at("offset").get<std::uint64_t>();
            const auto nbytes = m.at("nbytes").get<std::uint64_t>();
            if (!seen.insert(t.name).second)
                throw fail("duplicate tensor '" + t.name + "'");
            if (t.shape.empty() || offset != expected || nbytes != shape_numel(t.shape) * sizeof(float) ||
                nbytes > payload_bytes - offset)
                throw fail("inconsistent manifest entry for '" + t.name + "'");
            const std::uint8_t *p = bytes.data() + payload_start + offset;
            t.data.resize(nbytes / sizeof(float));
            for (std::size_t i = 0; i < t.data.size(); ++i)
                t.data[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i));
            expected += nbytes;
            ck.tensors.push_back(std::move(t));
        }
        if (expected != payload_bytes)
            throw fail("manifest covers " + std::to_string(expected) + " of " + std::to_string(payload_bytes) +
                       " payload bytes");
    } catch (const nlohmann::json::exception &e) {
        throw fail(std::string("malformed header: ") + e.what());
    }
    return ck;
}

void save_checkpoint(const Checkpoint &ck, const std::filesystem::path &path) {
    const auto bytes = encode_checkpoint(ck);
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw IoError(path.string(), "cannot open for writing");
        out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out)
            throw IoError(path.string(), "write failed");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec)
        throw IoError(path.string(), "rename failed: " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError(path.string(), "cannot open for reading");
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad())
        throw IoError(path.string(), "read failed");
    return decode_checkpoint(bytes, path.string());
}

Checkpoint to_checkpoint(const DenseModel<float> &model) {
    return collect(model, "dense", nlohmann::json{{"dense", model.config()}});
}

Checkpoint to_checkpoint(const SparseModel<float> &model) {
    return collect(model, "sparse",
                   nlohmann::json{{"dense", model.dense_config()}, {"craft", model.craft_config()}});
}

DenseModel<float> dense_from_checkpoint(const Checkpoint &ck) {
    expect_kind(ck, "dense");
    DenseConfig cfg;
    try {
        cfg = ck.config.at("dense").get<DenseConfig>();
    } catch (const nlohmann::json::exception &e) {
        throw ConfigError(std::string("checkpoint config: ") + e.what());
    }
    cfg.validate();
    DenseModel<float> model = DenseModel<float>::init(cfg);
    assign(model, ck);
    return model;
}

SparseModel<float> sparse_from_checkpoint(const Checkpoint &ck) {
    expect_kind(ck, "sparse");
    DenseConfig dc;
    CraftConfig cc;
    try {
        dc = ck.config.at("dense").get<DenseConfig>();
        cc = ck.config.at("craft").get<CraftConfig>();
    } catch (const nlohmann::json::exception &e) {
        throw ConfigError(std::string("checkpoint config: ") + e.what());
    }
    dc.validate();
    SparseModel<float> model = craft(DenseModel<float>::init(dc), cc);
    assign(model, ck);
    return model;
}

} // namespace pesc
