#include "superscopes/safetensors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <nlohmann/json.hpp>

#include "superscopes/error.hpp"

namespace superscopes {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

float half_to_float(uint16_t h) {
    const uint32_t sign = static_cast<uint32_t>(h & 0x8000u) << 16;
    uint32_t exp = (h >> 10) & 0x1fu;
    uint32_t mant = h & 0x3ffu;
    uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            // subnormal: renormalize
            exp = 127 - 15 + 1;
            while ((mant & 0x400u) == 0) {
                mant <<= 1;
                --exp;
            }
            mant &= 0x3ffu;
            bits = sign | (exp << 23) | (mant << 13);
        }
    } else if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

TensorMap parse_safetensors(std::span<const uint8_t> bytes) {
    check(bytes.size() >= 8, ErrorCode::SchemaViolation, "tensor container shorter than its header length field");
    uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data(), 8);
    check(header_len <= bytes.size() - 8, ErrorCode::SchemaViolation, "tensor container header length exceeds file size");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<ptrdiff_t>(header_len));
    } catch (const nlohmann::json::exception &e) {
        fail(ErrorCode::SchemaViolation, std::string("tensor container header is not valid JSON: ") + e.what());
    }
    check(header.is_object(), ErrorCode::SchemaViolation, "tensor container header must be a JSON object");

    const auto payload = bytes.subspan(8 + header_len);
    TensorMap out;
    for (const auto &[name, info] : header.items()) {
        if (name == "__metadata__") {
            continue;
        }
        try {
            const auto dtype = info.at("dtype").get<std::string>();
            auto shape = info.at("shape").get<std::vector<int64_t>>();
            const auto offsets = info.at("data_offsets").get<std::vector<uint64_t>>();
            check(offsets.size() == 2 && offsets[0] <= offsets[1] && offsets[1] <= payload.size(),
                  ErrorCode::SchemaViolation, "tensor '" + name + "' has out-of-range data_offsets");
            const auto n = static_cast<uint64_t>(Tensor::count(shape));
            const auto raw = payload.subspan(offsets[0], offsets[1] - offsets[0]);

            Tensor t(std::move(shape));
            if (dtype == "F32") {
                check(raw.size() == n * 4, ErrorCode::SchemaViolation, "tensor '" + name + "' byte size does not match shape");
                std::memcpy(t.data.data(), raw.data(), raw.size());
            } else if (dtype == "F16") {
                check(raw.size() == n * 2, ErrorCode::SchemaViolation, "tensor '" + name + "' byte size does not match shape");
                for (uint64_t i = 0; i < n; ++i) {
                    uint16_t h;
                    std::memcpy(&h, raw.data() + 2 * i, 2);
                    t.data[i] = half_to_float(h);
                }
            } else {
                fail(ErrorCode::SchemaViolation, "tensor '" + name + "' has unsupported dtype " + dtype);
            }
            out.emplace(name, std::move(t));
        } catch (const nlohmann::json::exception &e) {
            fail(ErrorCode::SchemaViolation, "malformed header entry for '" + name + "': " + e.what());
        }
    }
    return out;
}

TensorMap read_safetensors(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    check(static_cast<bool>(in), ErrorCode::MissingArtifact, "cannot open tensor container " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_safetensors(bytes);
}

void write_safetensors(const std::filesystem::path &path, const TensorMap &tensors) {
    nlohmann::json header = nlohmann::json::object();
    uint64_t offset = 0;
    for (const auto &[name, t] : tensors) {
        const uint64_t size = t.data.size() * sizeof(float);
        header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + size}}};
        offset += size;
    }
    std::string text = header.dump();
    // pad so the payload starts 8-byte aligned
    while ((text.size() + 8) % 8 != 0) {
        text.push_back(' ');
    }

    std::ofstream out(path, std::ios::binary);
    check(static_cast<bool>(out), ErrorCode::IoError, "cannot write " + path.string());
    const uint64_t len = text.size();
    out.write(reinterpret_cast<const char *>(&len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto &[name, t] : tensors) {
        out.write(reinterpret_cast<const char *>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
    check(static_cast<bool>(out), ErrorCode::IoError, "short write to " + path.string());
}

} // namespace superscopes
