#include "worldlens/array_file.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace worldlens {

using json = nlohmann::json;

namespace {
constexpr char kMagic[4] = {'W', 'L', 'A', 'B'};

size_t dtype_size(const std::string& dt) {
    if (dt == "f32" || dt == "i32") return 4;
    if (dt == "f64" || dt == "i64") return 8;
    if (dt == "u16") return 2;
    if (dt == "u8") return 1;
    throw DataError("array file: unknown dtype '" + dt + "'");
}
}  // namespace

int64_t ArrayFile::Entry::elements() const {
    int64_t n = 1;
    for (int64_t s : shape) n *= s;
    return n;
}

void ArrayFile::set_meta(const json& j) { meta_json = j.dump(); }

json ArrayFile::meta() const { return json::parse(meta_json); }

std::vector<std::string> ArrayFile::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
}

void ArrayFile::add_raw(const std::string& name, const std::string& dtype,
                        std::vector<int64_t> shape, const void* data, size_t elem_size) {
    Entry e;
    e.dtype = dtype;
    e.shape = std::move(shape);
    size_t nbytes = static_cast<size_t>(e.elements()) * elem_size;
    e.bytes.resize(nbytes);
    if (nbytes > 0) std::memcpy(e.bytes.data(), data, nbytes);
    entries_[name] = std::move(e);
}

void ArrayFile::add_f32(const std::string& n, std::vector<int64_t> s, const float* d) { add_raw(n, "f32", std::move(s), d, 4); }
void ArrayFile::add_f64(const std::string& n, std::vector<int64_t> s, const double* d) { add_raw(n, "f64", std::move(s), d, 8); }
void ArrayFile::add_i32(const std::string& n, std::vector<int64_t> s, const int32_t* d) { add_raw(n, "i32", std::move(s), d, 4); }
void ArrayFile::add_i64(const std::string& n, std::vector<int64_t> s, const int64_t* d) { add_raw(n, "i64", std::move(s), d, 8); }
void ArrayFile::add_u16(const std::string& n, std::vector<int64_t> s, const uint16_t* d) { add_raw(n, "u16", std::move(s), d, 2); }
void ArrayFile::add_u8(const std::string& n, std::vector<int64_t> s, const uint8_t* d) { add_raw(n, "u8", std::move(s), d, 1); }

const ArrayFile::Entry& ArrayFile::entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw DataError("array file: no array named '" + name + "'");
    return it->second;
}

template <typename T>
std::vector<T> ArrayFile::typed(const std::string& name, const std::string& dtype) const {
    const Entry& e = entry(name);
    if (e.dtype != dtype)
        throw DataError("array file: '" + name + "' has dtype " + e.dtype + ", expected " + dtype);
    std::vector<T> out(static_cast<size_t>(e.elements()));
    if (!out.empty()) std::memcpy(out.data(), e.bytes.data(), e.bytes.size());
    return out;
}

std::vector<float> ArrayFile::f32(const std::string& n) const { return typed<float>(n, "f32"); }
std::vector<double> ArrayFile::f64(const std::string& n) const { return typed<double>(n, "f64"); }
std::vector<int32_t> ArrayFile::i32(const std::string& n) const { return typed<int32_t>(n, "i32"); }
std::vector<int64_t> ArrayFile::i64(const std::string& n) const { return typed<int64_t>(n, "i64"); }
std::vector<uint16_t> ArrayFile::u16(const std::string& n) const { return typed<uint16_t>(n, "u16"); }
std::vector<uint8_t> ArrayFile::u8(const std::string& n) const { return typed<uint8_t>(n, "u8"); }

std::vector<uint8_t> ArrayFile::serialize() const {
    json header;
    header["meta"] = json::parse(meta_json);
    header["arrays"] = json::array();
    int64_t offset = 0;
    for (const auto& [name, e] : entries_) {
        json a;
        a["name"] = name;
        a["dtype"] = e.dtype;
        a["shape"] = e.shape;
        a["offset"] = offset;
        a["nbytes"] = static_cast<int64_t>(e.bytes.size());
        header["arrays"].push_back(a);
        offset += static_cast<int64_t>(e.bytes.size());
    }
    std::string htext = header.dump();
    uint32_t version = kVersion;
    uint64_t hlen = htext.size();

    std::vector<uint8_t> out;
    out.reserve(16 + htext.size() + static_cast<size_t>(offset));
    out.insert(out.end(), kMagic, kMagic + 4);
    out.insert(out.end(), reinterpret_cast<uint8_t*>(&version), reinterpret_cast<uint8_t*>(&version) + 4);
    out.insert(out.end(), reinterpret_cast<uint8_t*>(&hlen), reinterpret_cast<uint8_t*>(&hlen) + 8);
    out.insert(out.end(), htext.begin(), htext.end());
    for (const auto& [name, e] : entries_) out.insert(out.end(), e.bytes.begin(), e.bytes.end());
    return out;
}

void ArrayFile::save(const std::string& path) const {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::vector<uint8_t> bytes = serialize();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("array file: cannot open for write: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("array file: write failed: " + path);
}

ArrayFile ArrayFile::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifactError("array file: cannot open: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw DataError("array file: bad magic in " + path);
    uint32_t version;
    uint64_t hlen;
    std::memcpy(&version, bytes.data() + 4, 4);
    std::memcpy(&hlen, bytes.data() + 8, 8);
    if (version != kVersion)
        throw DataError("array file: unsupported version " + std::to_string(version) + " in " + path);
    if (bytes.size() < 16 + hlen) throw DataError("array file: truncated header in " + path);
    json header = json::parse(std::string(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(hlen)));

    ArrayFile out;
    out.meta_json = header.at("meta").dump();
    size_t data_start = 16 + static_cast<size_t>(hlen);
    for (const auto& a : header.at("arrays")) {
        Entry e;
        e.dtype = a.at("dtype").get<std::string>();
        e.shape = a.at("shape").get<std::vector<int64_t>>();
        int64_t offset = a.at("offset").get<int64_t>();
        int64_t nbytes = a.at("nbytes").get<int64_t>();
        if (static_cast<int64_t>(e.elements() * dtype_size(e.dtype)) != nbytes)
            throw DataError("array file: shape/nbytes mismatch for '" + a.at("name").get<std::string>() + "'");
        if (data_start + offset + nbytes > bytes.size())
            throw DataError("array file: truncated data in " + path);
        e.bytes.assign(bytes.begin() + static_cast<long>(data_start + offset),
                       bytes.begin() + static_cast<long>(data_start + offset + nbytes));
        out.entries_[a.at("name").get<std::string>()] = std::move(e);
    }
    return out;
}

uint64_t ArrayFile::content_hash() const {
    std::vector<uint8_t> bytes = serialize();
    return fnv1a64(bytes.data(), bytes.size());
}

void write_text_file(const std::string& path, const std::string& text) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open for write: " + path);
    f << text;
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifactError("cannot open: " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

bool file_exists(const std::string& path) {
    return std::filesystem::exists(path);
}

}  // namespace worldlens
