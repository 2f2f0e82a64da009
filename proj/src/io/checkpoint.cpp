#include "idfuse/checkpoint.hpp"

#include <bit>
#include <cstring>

#include <nlohmann/json.hpp>

#include "idfuse/io.hpp"

namespace idfuse {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint layout assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'I', 'D', 'F', 'U', 'S', 'E', 'C', 'K'};

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof v);
}

template <class T>
T get(const std::vector<std::uint8_t>& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw InputError("checkpoint: truncated");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof v);
    pos += sizeof v;
    return v;
}

json append_tensor(std::vector<std::uint8_t>& payload, const Matrix<float>& m) {
    json j{{"rows", m.rows()}, {"cols", m.cols()}, {"dtype", "f32"}, {"offset", payload.size()}};
    const auto* p = reinterpret_cast<const std::uint8_t*>(m.data());
    payload.insert(payload.end(), p, p + m.size() * sizeof(float));
    return j;
}

Matrix<float> read_tensor(const json& j, const std::uint8_t* payload, std::size_t payload_size) {
    if (j.at("dtype").get<std::string>() != "f32") throw InputError("checkpoint: unsupported dtype");
    const auto rows = j.at("rows").get<std::size_t>(), cols = j.at("cols").get<std::size_t>();
    const auto off = j.at("offset").get<std::size_t>();
    const std::size_t bytes = rows * cols * sizeof(float);
    if (off > payload_size || bytes > payload_size - off) throw InputError("checkpoint: tensor outside payload");
    Matrix<float> m(rows, cols);
    std::memcpy(m.data(), payload + off, bytes);
    return m;
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const CheckpointBundle& b) {
    std::vector<std::uint8_t> payload;
    json tensors = json::array();
    for (const auto& [name, p] : b.params.all()) {
        json t = append_tensor(payload, p.value);
        t["name"] = name;
        t["group"] = p.group;
        t["trainable"] = p.trainable;
        tensors.push_back(std::move(t));
    }
    json opt = nullptr;
    if (b.optimizer) {
        json m = json::array(), v = json::array();
        for (const auto& [name, t] : b.optimizer->m) {
            json e = append_tensor(payload, t);
            e["name"] = name;
            m.push_back(std::move(e));
        }
        for (const auto& [name, t] : b.optimizer->v) {
            json e = append_tensor(payload, t);
            e["name"] = name;
            v.push_back(std::move(e));
        }
        opt = {{"step", b.optimizer->step}, {"m", std::move(m)}, {"v", std::move(v)}};
    }
    const json header{
        {"format_version", kCheckpointVersion},
        {"config", json::parse(config_json(b.config))},
        {"config_digest", config_digest(b.config)},
        {"frozen_digest", b.params.frozen_digest()},
        {"trainable_digest", b.params.digest(true)},
        {"payload_sha256", sha256_hex({reinterpret_cast<const char*>(payload.data()), payload.size()})},
        {"tensors", std::move(tensors)},
        {"optimizer", std::move(opt)},
        {"seeds", b.seeds},
    };
    const std::string h = header.dump();
    std::vector<std::uint8_t> out(kMagic, kMagic + 8);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, h.size());
    out.insert(out.end(), h.begin(), h.end());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

CheckpointBundle deserialize_checkpoint(const std::vector<std::uint8_t>& in) {
    if (in.size() < 20 || std::memcmp(in.data(), kMagic, 8) != 0) throw InputError("checkpoint: bad magic");
    std::size_t pos = 8;
    const auto version = get<std::uint32_t>(in, pos);
    if (version != kCheckpointVersion) throw InputError("checkpoint: unsupported format version " + std::to_string(version));
    const auto hlen = get<std::uint64_t>(in, pos);
    if (hlen > in.size() - pos) throw InputError("checkpoint: truncated header");
    const std::uint8_t* payload = in.data() + pos + hlen;
    const std::size_t payload_size = in.size() - pos - hlen;

    CheckpointBundle b;
    try {
        const json h = json::parse(in.begin() + static_cast<std::ptrdiff_t>(pos),
                                   in.begin() + static_cast<std::ptrdiff_t>(pos + hlen));
        if (h.at("payload_sha256").get<std::string>() !=
            sha256_hex({reinterpret_cast<const char*>(payload), payload_size}))
            throw InputError("checkpoint: payload digest mismatch");
        b.config = parse_config(h.at("config").dump());
        for (const auto& t : h.at("tensors"))
            b.params.add(t.at("name").get<std::string>(), t.at("group").get<std::string>(), t.at("trainable").get<bool>(),
                         read_tensor(t, payload, payload_size));
        if (!h.at("optimizer").is_null()) {
            OptimizerState st;
            const json& o = h.at("optimizer");
            st.step = o.at("step").get<std::int64_t>();
            for (const auto& e : o.at("m")) st.m[e.at("name").get<std::string>()] = read_tensor(e, payload, payload_size);
            for (const auto& e : o.at("v")) st.v[e.at("name").get<std::string>()] = read_tensor(e, payload, payload_size);
            b.optimizer = std::move(st);
        }
        b.seeds = h.at("seeds").get<std::map<std::string, std::uint64_t>>();
        if (h.at("frozen_digest").get<std::string>() != b.params.frozen_digest())
            throw InputError("checkpoint: frozen-partition digest mismatch");
        if (h.at("trainable_digest").get<std::string>() != b.params.digest(true))
            throw InputError("checkpoint: trainable-partition digest mismatch");
    } catch (const json::exception& e) {
        throw InputError(std::string("checkpoint: malformed header: ") + e.what());
    }
    return b;
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointBundle& b) {
    write_file_atomic(path, serialize_checkpoint(b));
}

CheckpointBundle load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint(read_file_bytes(path));
}

}  // namespace idfuse
