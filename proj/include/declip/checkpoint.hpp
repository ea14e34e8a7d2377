#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "declip/encoder.hpp"
#include "declip/errors.hpp"
#include "declip/mat.hpp"

namespace declip {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

namespace detail {

inline uint32_t crc32(const uint8_t* data, size_t n) {
    static const std::array<uint32_t, 256> table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t c = 0xFFFFFFFFu;
    for (size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

inline void put_u32(std::ostream& out, uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
}

inline uint32_t get_u32(std::istream& in, const std::string& path) {
    uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (in.gcount() != 4) throw IoError(path + ": truncated checkpoint");
    return v;
}

} // namespace detail

constexpr uint32_t kCheckpointVersion = 1;

/// Named float32 tensors: "DCLP" magic, version, text manifest
/// (name rows cols offset per line, offset in floats), little-endian raw
/// payload, trailing CRC-32 of the payload bytes.
struct Checkpoint {
    std::vector<std::pair<std::string, Mat>> tensors;

    const Mat& get(const std::string& name) const {
        for (const auto& [n, m] : tensors)
            if (n == name) return m;
        throw IoError("checkpoint: missing tensor " + name);
    }
    bool has(const std::string& name) const {
        for (const auto& [n, m] : tensors)
            if (n == name) return true;
        return false;
    }
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ostringstream manifest;
    size_t offset = 0;
    for (const auto& [name, m] : ckpt.tensors) {
        manifest << name << " " << m.rows << " " << m.cols << " " << offset << "\n";
        offset += m.numel();
    }
    const std::string header = manifest.str();

    std::vector<uint8_t> payload(offset * 4);
    size_t pos = 0;
    for (const auto& [name, m] : ckpt.tensors) {
        std::memcpy(payload.data() + pos, m.data.data(), m.numel() * 4);
        pos += m.numel() * 4;
    }

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write("DCLP", 4);
    detail::put_u32(f, kCheckpointVersion);
    detail::put_u32(f, static_cast<uint32_t>(header.size()));
    detail::put_u32(f, static_cast<uint32_t>(ckpt.tensors.size()));
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    f.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    detail::put_u32(f, detail::crc32(payload.data(), payload.size()));
    if (!f) throw IoError("write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (f.gcount() != 4 || std::memcmp(magic, "DCLP", 4) != 0)
        throw IoError(path + ": bad checkpoint magic");
    const uint32_t version = detail::get_u32(f, path);
    if (version != kCheckpointVersion)
        throw IoError(path + ": unsupported checkpoint version " + std::to_string(version));
    const uint32_t header_size = detail::get_u32(f, path);
    const uint32_t count = detail::get_u32(f, path);
    std::string header(header_size, '\0');
    f.read(header.data(), header_size);
    if (f.gcount() != static_cast<std::streamsize>(header_size)) throw IoError(path + ": truncated manifest");

    struct Entry {
        std::string name;
        int rows, cols;
        size_t offset;
    };
    std::vector<Entry> entries;
    std::istringstream hs(header);
    std::string line;
    size_t total = 0;
    while (std::getline(hs, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        Entry e;
        if (!(ls >> e.name >> e.rows >> e.cols >> e.offset)) throw IoError(path + ": malformed manifest line '" + line + "'");
        total += static_cast<size_t>(e.rows) * e.cols;
        entries.push_back(std::move(e));
    }
    if (entries.size() != count) throw IoError(path + ": manifest count mismatch");

    std::vector<uint8_t> payload(total * 4);
    f.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (f.gcount() != static_cast<std::streamsize>(payload.size())) throw IoError(path + ": truncated payload");
    const uint32_t stored = detail::get_u32(f, path);
    const uint32_t computed = detail::crc32(payload.data(), payload.size());
    if (stored != computed)
        throw IoError(path + ": payload checksum mismatch (stored " + std::to_string(stored) + ", computed " +
                      std::to_string(computed) + ")");

    Checkpoint ckpt;
    for (const Entry& e : entries) {
        Mat m(e.rows, e.cols);
        std::memcpy(m.data.data(), payload.data() + e.offset * 4, m.numel() * 4);
        ckpt.tensors.emplace_back(e.name, std::move(m));
    }
    return ckpt;
}

inline Checkpoint params_to_checkpoint(const EncoderParams& p) {
    Checkpoint c;
    p.for_each_tensor([&](const std::string& name, const Mat& m) { c.tensors.emplace_back(name, m); });
    return c;
}

inline void save_encoder(const std::string& path, const EncoderParams& p) {
    save_checkpoint(path, params_to_checkpoint(p));
}

inline EncoderParams load_encoder(const std::string& path, const EncoderConfig& cfg) {
    const Checkpoint ckpt = load_checkpoint(path);
    EncoderParams p = init_encoder_params(cfg, 0); // shapes only; values overwritten below
    p.for_each_tensor([&](const std::string& name, Mat& m) {
        const Mat& src = ckpt.get(name);
        if (!src.same_shape(m))
            throw IoError(path + ": tensor " + name + " has shape " + std::to_string(src.rows) + "x" +
                          std::to_string(src.cols) + ", expected " + std::to_string(m.rows) + "x" +
                          std::to_string(m.cols));
        m = src;
    });
    return p;
}

} // namespace declip
