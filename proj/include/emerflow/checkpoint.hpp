#ifndef EMERFLOW_CHECKPOINT_HPP
#define EMERFLOW_CHECKPOINT_HPP

#include <cstring>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "emerflow/common.hpp"

namespace emerflow {

// Binary container shared by backbone and alignment checkpoints:
//   magic "EMFC" | u32 version | u32 header length | header JSON (UTF-8)
//   | tensors as little-endian f32 in header order
// The header carries the model kind, dimensions and per-tensor shapes; the
// same JSON is mirrored to a `.json` sidecar for audit.

inline constexpr char kCheckpointMagic[4] = {'E', 'M', 'F', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
    if (pos + 4 > in.size()) fail("checkpoint: truncated u32");
    const auto b = [&](std::size_t i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])); };
    const std::uint32_t v = b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24);
    pos += 4;
    return v;
}

inline void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

inline float get_f32(const std::string& in, std::size_t& pos) {
    const std::uint32_t bits = get_u32(in, pos);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail

struct NamedTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> data;

    std::size_t count() const {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }
};

inline void write_checkpoint(const std::string& path, const std::string& kind,
                             const nlohmann::ordered_json& extra_meta,
                             const std::vector<NamedTensor>& tensors) {
    nlohmann::ordered_json header;
    header["kind"] = kind;
    for (const auto& [key, value] : extra_meta.items()) header[key] = value;
    header["tensors"] = nlohmann::ordered_json::array();
    for (const auto& t : tensors) {
        if (t.data.size() != t.count())
            fail("checkpoint tensor " + t.name + ": data size does not match shape");
        header["tensors"].push_back(nlohmann::ordered_json{{"name", t.name}, {"shape", t.shape}});
    }

    const std::string header_json = header.dump();
    std::string out;
    out.append(kCheckpointMagic, 4);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(header_json.size()));
    out += header_json;
    for (const auto& t : tensors)
        for (double v : t.data) detail::put_f32(out, static_cast<float>(v));

    write_text_file(path, out);
    write_text_file(path + ".json", header.dump(2) + "\n");
}

struct Checkpoint {
    nlohmann::json header;
    std::vector<NamedTensor> tensors;

    const NamedTensor& tensor(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        fail("checkpoint: missing tensor " + name);
    }
};

inline Checkpoint read_checkpoint(const std::string& path, const std::string& expected_kind) {
    const std::string in = read_text_file(path);
    if (in.size() < 12 || std::memcmp(in.data(), kCheckpointMagic, 4) != 0)
        fail(path + ": not a checkpoint file (bad magic)");
    std::size_t pos = 4;
    const std::uint32_t version = detail::get_u32(in, pos);
    if (version != kCheckpointVersion)
        fail(path + ": unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t header_len = detail::get_u32(in, pos);
    if (pos + header_len > in.size()) fail(path + ": truncated header");
    Checkpoint ckpt;
    try {
        ckpt.header = nlohmann::json::parse(in.substr(pos, header_len));
    } catch (const std::exception& e) {
        fail(path + ": bad checkpoint header: " + std::string{e.what()});
    }
    pos += header_len;

    const std::string kind = ckpt.header.at("kind").get<std::string>();
    if (!expected_kind.empty() && kind != expected_kind)
        fail(path + ": checkpoint kind is `" + kind + "`, expected `" + expected_kind + "`");

    for (const auto& spec : ckpt.header.at("tensors")) {
        NamedTensor t;
        t.name = spec.at("name").get<std::string>();
        for (const auto& d : spec.at("shape")) t.shape.push_back(d.get<std::size_t>());
        t.data.resize(t.count());
        for (double& v : t.data) v = static_cast<double>(detail::get_f32(in, pos));
        ckpt.tensors.push_back(std::move(t));
    }
    if (pos != in.size()) fail(path + ": trailing bytes after tensor payload");
    return ckpt;
}

}  // namespace emerflow

#endif  // EMERFLOW_CHECKPOINT_HPP
