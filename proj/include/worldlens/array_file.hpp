#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "worldlens/common.hpp"

namespace worldlens {

// Binary container of named, typed, shaped arrays plus one JSON metadata
// object. All pipeline artifacts (episode dumps, codebooks, checkpoints,
// activation datasets) use this format.
//
// Layout, little-endian:
//   bytes 0..3   magic "WLAB"
//   bytes 4..7   u32 format version (currently 1)
//   bytes 8..15  u64 header length H
//   bytes 16..16+H  UTF-8 JSON header:
//     { "meta": <object>,
//       "arrays": [ {"name","dtype","shape":[...],"offset","nbytes"}, ... ] }
//   data region    concatenated raw array bytes; "offset" is relative to the
//                  start of the data region.
// dtype is one of "f32" "f64" "i32" "i64" "u8" "u16".
class ArrayFile {
public:
    struct Entry {
        std::string dtype;
        std::vector<int64_t> shape;
        std::vector<uint8_t> bytes;
        int64_t elements() const;
    };

    static constexpr uint32_t kVersion = 1;

    // meta is stored/loaded as serialized JSON text to keep the header
    // out of this translation unit's public types.
    std::string meta_json = "{}";

    void set_meta(const nlohmann::json& j);
    nlohmann::json meta() const;

    bool has(const std::string& name) const { return entries_.count(name) > 0; }
    std::vector<std::string> names() const;

    void add_f32(const std::string& name, std::vector<int64_t> shape, const float* data);
    void add_f64(const std::string& name, std::vector<int64_t> shape, const double* data);
    void add_i32(const std::string& name, std::vector<int64_t> shape, const int32_t* data);
    void add_i64(const std::string& name, std::vector<int64_t> shape, const int64_t* data);
    void add_u16(const std::string& name, std::vector<int64_t> shape, const uint16_t* data);
    void add_u8(const std::string& name, std::vector<int64_t> shape, const uint8_t* data);

    const Entry& entry(const std::string& name) const;
    std::vector<int64_t> shape(const std::string& name) const { return entry(name).shape; }

    std::vector<float> f32(const std::string& name) const;
    std::vector<double> f64(const std::string& name) const;
    std::vector<int32_t> i32(const std::string& name) const;
    std::vector<int64_t> i64(const std::string& name) const;
    std::vector<uint16_t> u16(const std::string& name) const;
    std::vector<uint8_t> u8(const std::string& name) const;

    void save(const std::string& path) const;
    static ArrayFile load(const std::string& path);

    // FNV-1a over the serialized bytes; stable content hash for provenance.
    uint64_t content_hash() const;

private:
    std::map<std::string, Entry> entries_;
    void add_raw(const std::string& name, const std::string& dtype,
                 std::vector<int64_t> shape, const void* data, size_t elem_size);
    template <typename T>
    std::vector<T> typed(const std::string& name, const std::string& dtype) const;
    std::vector<uint8_t> serialize() const;
};

// Convenience helpers for small JSON sidecar/manifest files.
void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);
bool file_exists(const std::string& path);

}  // namespace worldlens
