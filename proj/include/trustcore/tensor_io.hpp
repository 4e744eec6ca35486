#pragma once

// Raw little-endian tensor files + small JSON file helpers.

#include "trustcore/common.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>

namespace trustcore {

namespace fs = std::filesystem;
using Json = nlohmann::json;

inline void write_bytes(const fs::path& p, const void* data, std::size_t n) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for write: " + p.string());
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!f) throw IoError("write failed: " + p.string());
}

inline std::string read_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot open: " + p.string());
    std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return s;
}

template <class S>
void write_tensor(const fs::path& p, const MatT<S>& m) {
    write_bytes(p, m.data(), sizeof(S) * static_cast<std::size_t>(m.size()));
}

template <class S>
void read_tensor(const fs::path& p, MatT<S>& m) {
    const std::string bytes = read_bytes(p);
    if (bytes.size() != sizeof(S) * static_cast<std::size_t>(m.size()))
        throw IoError("tensor size mismatch: " + p.string());
    std::memcpy(m.data(), bytes.data(), bytes.size());
}

inline void write_json(const fs::path& p, const Json& j) {
    std::ofstream f(p, std::ios::trunc);
    if (!f) throw IoError("cannot open for write: " + p.string());
    f << j.dump(2) << '\n';
}

inline Json read_json(const fs::path& p) {
    std::ifstream f(p);
    if (!f) throw IoError("cannot open: " + p.string());
    Json j;
    f >> j;
    return j;
}

}  // namespace trustcore
