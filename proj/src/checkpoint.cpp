#include "rafl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <zlib.h>

#include "rafl/errors.hpp"

namespace rafl {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'R', 'A', 'F', 'L'};

template <class T>
void put(std::vector<std::uint8_t>& out, T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    out.insert(out.end(), p, p + sizeof(T));
}

template <class T>
T get(const std::vector<std::uint8_t>& in, std::size_t offset) {
    T value;
    std::memcpy(&value, in.data() + offset, sizeof(T));
    return value;
}

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size) {
    uLong crc = crc32(0L, Z_NULL, 0);
    while (size > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
        crc = crc32(crc, data, chunk);
        data += chunk;
        size -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

} // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    nlohmann::json arrays = nlohmann::json::array();
    std::uint64_t offset = 0;
    auto describe = [&](const ParameterStore& store, const char* group) {
        for (const auto& e : store.entries()) {
            arrays.push_back({{"name", e.path}, {"group", group}, {"shape", e.value.shape()}, {"offset", offset}});
            offset += e.value.size() * sizeof(double);
        }
    };
    describe(ckpt.params, "params");
    describe(ckpt.optimizer, "optimizer");

    nlohmann::json manifest = {
        {"config", to_json(ckpt.config)},
        {"step", ckpt.step},
        {"state", ckpt.state},
        {"arrays", arrays},
        {"payload_bytes", offset},
    };
    const std::string text = manifest.dump(1);

    std::vector<std::uint8_t> out;
    out.reserve(16 + text.size() + offset + 4);
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    const std::size_t payload_start = out.size();
    for (const ParameterStore* store : {&ckpt.params, &ckpt.optimizer}) {
        for (const auto& e : store->entries()) {
            const auto* p = reinterpret_cast<const std::uint8_t*>(e.value.data().data());
            out.insert(out.end(), p, p + e.value.size() * sizeof(double));
        }
    }
    put<std::uint32_t>(out, crc32_of(out.data() + payload_start, out.size() - payload_start));
    return out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    using Kind = CheckpointError::Kind;
    if (bytes.size() < 16) throw CheckpointError(Kind::truncated, "checkpoint truncated: header incomplete");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CheckpointError(Kind::bad_magic, "not a checkpoint (bad magic)");
    const auto version = get<std::uint32_t>(bytes, 4);
    if (version != kCheckpointVersion) {
        throw CheckpointError(Kind::bad_version, "unsupported checkpoint version " + std::to_string(version));
    }
    const auto manifest_len = get<std::uint64_t>(bytes, 8);
    if (manifest_len > bytes.size() - 16) throw CheckpointError(Kind::truncated, "checkpoint truncated inside manifest");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(manifest_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(Kind::malformed, std::string("checkpoint manifest is not valid JSON: ") + e.what());
    }

    Checkpoint ckpt;
    std::uint64_t payload_bytes = 0;
    try {
        ckpt.config = config_from_json(manifest.at("config"));
        ckpt.step = manifest.at("step").get<std::uint64_t>();
        ckpt.state = manifest.at("state");
        payload_bytes = manifest.at("payload_bytes").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(Kind::malformed, std::string("checkpoint manifest incomplete: ") + e.what());
    } catch (const ConfigError& e) {
        throw CheckpointError(Kind::malformed, std::string("checkpoint config invalid: ") + e.what());
    }

    const std::size_t payload_start = 16 + manifest_len;
    if (bytes.size() - payload_start < payload_bytes + 4) {
        throw CheckpointError(Kind::truncated, "checkpoint truncated: payload shorter than manifest declares");
    }
    if (bytes.size() - payload_start != payload_bytes + 4) {
        throw CheckpointError(Kind::malformed, "checkpoint has trailing bytes after the checksum");
    }
    const auto stored_crc = get<std::uint32_t>(bytes, payload_start + payload_bytes);
    if (crc32_of(bytes.data() + payload_start, payload_bytes) != stored_crc) {
        throw CheckpointError(Kind::checksum, "checkpoint payload checksum mismatch");
    }

    try {
        for (const auto& a : manifest.at("arrays")) {
            const auto name = a.at("name").get<std::string>();
            const auto group = a.at("group").get<std::string>();
            const auto shape = a.at("shape").get<Shape>();
            const auto offset = a.at("offset").get<std::uint64_t>();
            const std::size_t count = element_count(shape);
            if (offset + count * sizeof(double) > payload_bytes) {
                throw CheckpointError(Kind::malformed, "array " + name + " extends past the payload");
            }
            std::vector<double> values(count);
            std::memcpy(values.data(), bytes.data() + payload_start + offset, count * sizeof(double));
            Tensor t(shape, std::move(values));
            if (group == "params") {
                ckpt.params.add(name, std::move(t));
            } else if (group == "optimizer") {
                ckpt.optimizer.add(name, std::move(t));
            } else {
                throw CheckpointError(Kind::malformed, "unknown array group " + group);
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(Kind::malformed, std::string("checkpoint array table invalid: ") + e.what());
    } catch (const DimensionError& e) {
        throw CheckpointError(Kind::malformed, std::string("checkpoint array invalid: ") + e.what());
    }
    check_compatible(ckpt.params, ckpt.config);
    return ckpt;
}

void check_compatible(const ParameterStore& params, const ModelConfig& config) {
    using Kind = CheckpointError::Kind;
    const auto expected = parameter_shapes(config);
    for (const auto& [path, shape] : expected) {
        if (!params.contains(path)) {
            throw CheckpointError(Kind::shape_mismatch, "shape mismatch: parameter " + path + " missing");
        }
        if (params.at(path).shape() != shape) {
            throw CheckpointError(Kind::shape_mismatch, "shape mismatch at " + path + ": stored " +
                                                            to_string(params.at(path).shape()) + ", expected " +
                                                            to_string(shape));
        }
    }
    if (params.size() != expected.size()) {
        for (const auto& e : params.entries()) {
            bool known = false;
            for (const auto& [path, shape] : expected) known = known || path == e.path;
            if (!known) throw CheckpointError(Kind::shape_mismatch, "shape mismatch: unexpected parameter " + e.path);
        }
    }
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(read_file(path));
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
    Checkpoint ckpt = load_checkpoint(path);
    check_compatible(ckpt.params, expected);
    return ckpt;
}

std::string file_crc32_hex(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08x", crc32_of(bytes.data(), bytes.size()));
    return buf;
}

} // namespace rafl
