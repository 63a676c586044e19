#include "cpl/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

namespace cpl {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

void save_checkpoint(const std::string& dir, std::span<const Param> params, Precision dtype) {
    fs::create_directories(dir);
    const char* dtype_name = precision_name(dtype);
    const size_t elem = dtype == Precision::f32 ? 4 : 8;

    ordered_json manifest = ordered_json::array();
    std::ofstream bin(fs::path(dir) / "weights.bin", std::ios::binary | std::ios::trunc);
    if (!bin) throw IntegrityError("cannot write weights.bin under '" + dir + "'");

    size_t offset = 0;
    for (const Param& p : params) {
        ordered_json entry;
        entry["name"] = p.name;
        entry["shape"] = p.tensor.shape();
        entry["dtype"] = dtype_name;
        entry["byte_offset"] = offset;
        entry["byte_length"] = p.tensor.size() * elem;
        manifest.push_back(entry);

        if (dtype == Precision::f32) {
            for (size_t i = 0; i < p.tensor.size(); ++i) {
                const float v = static_cast<float>(p.tensor.data()[i]);
                bin.write(reinterpret_cast<const char*>(&v), 4);
            }
        } else {
            bin.write(reinterpret_cast<const char*>(p.tensor.data()),
                      static_cast<std::streamsize>(p.tensor.size() * 8));
        }
        offset += p.tensor.size() * elem;
    }
    bin.close();

    std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::trunc);
    if (!mf) throw IntegrityError("cannot write manifest.json under '" + dir + "'");
    mf << manifest.dump(2) << "\n";
}

namespace {

ordered_json read_manifest(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw IntegrityError("missing manifest.json under '" + dir + "'");
    ordered_json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("manifest.json: ") + e.what());
    }
    if (!manifest.is_array()) throw IntegrityError("manifest.json: expected an array");
    return manifest;
}

} // namespace

Precision checkpoint_dtype(const std::string& dir) {
    ordered_json manifest = read_manifest(dir);
    if (manifest.empty()) throw IntegrityError("manifest.json: empty manifest");
    return parse_precision(manifest[0].at("dtype").get<std::string>());
}

void load_checkpoint(const std::string& dir, std::span<Param> params) {
    ordered_json manifest = read_manifest(dir);

    std::ifstream bin(fs::path(dir) / "weights.bin", std::ios::binary | std::ios::ate);
    if (!bin) throw IntegrityError("missing weights.bin under '" + dir + "'");
    const size_t file_size = static_cast<size_t>(bin.tellg());
    bin.seekg(0);

    struct Entry {
        std::vector<int> shape;
        Precision dtype;
        size_t offset, length;
    };
    std::map<std::string, Entry> entries;
    size_t expected_offset = 0;
    for (const auto& e : manifest) {
        Entry entry;
        entry.shape = e.at("shape").get<std::vector<int>>();
        entry.dtype = parse_precision(e.at("dtype").get<std::string>());
        entry.offset = e.at("byte_offset").get<size_t>();
        entry.length = e.at("byte_length").get<size_t>();
        if (entry.offset != expected_offset)
            throw IntegrityError("manifest.json: offsets are not contiguous at '" +
                                 e.at("name").get<std::string>() + "'");
        expected_offset = entry.offset + entry.length;
        entries.emplace(e.at("name").get<std::string>(), std::move(entry));
    }
    if (expected_offset != file_size)
        throw IntegrityError("weights.bin size " + std::to_string(file_size) +
                             " does not match manifest total " + std::to_string(expected_offset));

    for (Param& p : params) {
        auto it = entries.find(p.name);
        if (it == entries.end())
            throw IntegrityError("checkpoint has no tensor named '" + p.name + "'");
        const Entry& e = it->second;
        if (e.shape != p.tensor.shape())
            throw IntegrityError("checkpoint tensor '" + p.name + "' has shape " +
                                 shape_to_string(e.shape) + ", expected " + p.tensor.shape_str());
        const size_t elem = e.dtype == Precision::f32 ? 4 : 8;
        if (e.length != p.tensor.size() * elem)
            throw IntegrityError("checkpoint tensor '" + p.name + "' has byte length " +
                                 std::to_string(e.length) + ", expected " +
                                 std::to_string(p.tensor.size() * elem));
        bin.seekg(static_cast<std::streamoff>(e.offset));
        if (e.dtype == Precision::f32) {
            std::vector<float> buf(p.tensor.size());
            bin.read(reinterpret_cast<char*>(buf.data()),
                     static_cast<std::streamsize>(e.length));
            for (size_t i = 0; i < buf.size(); ++i)
                p.tensor.data()[i] = static_cast<double>(buf[i]);
        } else {
            bin.read(reinterpret_cast<char*>(p.tensor.data()),
                     static_cast<std::streamsize>(e.length));
        }
        if (!bin) throw IntegrityError("weights.bin: short read for '" + p.name + "'");
    }
}

} // namespace cpl
