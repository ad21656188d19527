#include "kgrl/blob.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "kgrl/errors.hpp"

namespace kgrl {

namespace {

constexpr char kMagic[] = {'K', 'G', 'R', 'L', 'P', 'B', '1'};
constexpr std::size_t kMagicLen = sizeof(kMagic);

void put_u32_le(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32_le(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32_le(out, bits);
}

std::uint32_t get_u32_le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

float get_f32_le(const unsigned char* p) {
    const std::uint32_t bits = get_u32_le(p);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

}  // namespace

void write_param_blob(const std::string& path,
                      const std::map<std::string, TensorBuf>& tensors) {
    nlohmann::json index = nlohmann::json::object();
    std::string data;
    for (const auto& [name, buf] : tensors) {
        buf.validate("blob tensor '" + name + "'");
        index[name] = {{"offset", data.size()}, {"shape", buf.shape}};
        for (double v : buf.data) put_f32_le(data, static_cast<float>(v));
    }
    const std::string index_text = index.dump();
    if (index_text.size() > UINT32_MAX) throw IoError("blob index too large");

    std::string out;
    out.append(kMagic, kMagicLen);
    put_u32_le(out, static_cast<std::uint32_t>(index_text.size()));
    out += index_text;
    out += data;

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write to '" + path + "'");
}

std::map<std::string, TensorBuf> read_param_blob(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (bytes.size() < kMagicLen + 4 || std::memcmp(bytes.data(), kMagic, kMagicLen) != 0)
        throw IoError("'" + path + "' is not a parameter blob (bad magic)");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint32_t index_len = get_u32_le(p + kMagicLen);
    const std::size_t data_start = kMagicLen + 4 + index_len;
    if (bytes.size() < data_start) throw IoError("'" + path + "': truncated index");

    nlohmann::json index;
    try {
        index = nlohmann::json::parse(bytes.begin() + kMagicLen + 4,
                                      bytes.begin() + static_cast<std::ptrdiff_t>(data_start));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("'" + path + "': bad index JSON: " + e.what());
    }
    if (!index.is_object()) throw IoError("'" + path + "': index is not an object");

    const std::size_t data_len = bytes.size() - data_start;
    std::map<std::string, TensorBuf> out;
    for (const auto& [name, entry] : index.items()) {
        std::size_t offset;
        std::vector<std::size_t> shape;
        try {
            offset = entry.at("offset").get<std::size_t>();
            shape = entry.at("shape").get<std::vector<std::size_t>>();
        } catch (const nlohmann::json::exception& e) {
            throw IoError("'" + path + "': bad entry for '" + name + "': " + e.what());
        }
        const std::size_t numel = shape_numel(shape);
        if (offset % 4 != 0 || offset + numel * 4 > data_len)
            throw IoError("'" + path + "': tensor '" + name + "' falls outside the data section");
        TensorBuf buf = TensorBuf::zeros(shape);
        for (std::size_t i = 0; i < numel; ++i)
            buf.data[i] = static_cast<double>(get_f32_le(p + data_start + offset + 4 * i));
        out.emplace(name, std::move(buf));
    }
    return out;
}

}  // namespace kgrl
