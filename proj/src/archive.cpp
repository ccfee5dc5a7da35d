#include "enprobe/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace enprobe {

using nlohmann::json;

const char* dtype_name(DType d) {
    switch (d) {
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    }
    return "?";
}

static DType parse_dtype(const std::string& s, const std::string& tensor) {
    if (s == "F32") return DType::F32;
    if (s == "F16") return DType::F16;
    if (s == "BF16") return DType::BF16;
    throw LoadError("tensor '" + tensor + "': unsupported dtype " + s + " (expected F32, F16 or BF16)");
}

static std::size_t dtype_bytes(DType d) { return d == DType::F32 ? 4 : 2; }

std::size_t TensorEntry::numel() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = (h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t bits;
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

std::uint16_t float_to_half(float f) {
    const std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    const std::uint32_t sign = (x >> 16) & 0x8000u;
    const std::uint32_t abs = x & 0x7fffffffu;
    if (abs >= 0x7f800000u) { // inf / nan
        return static_cast<std::uint16_t>(sign | 0x7c00u | (abs > 0x7f800000u ? 0x200u : 0u));
    }
    if (abs >= 0x477ff000u) { // rounds to >= 65520 -> inf
        return static_cast<std::uint16_t>(sign | 0x7c00u);
    }
    if (abs < 0x38800000u) { // below the smallest normal half
        if (abs < 0x33000000u) return static_cast<std::uint16_t>(sign);
        const std::uint32_t e = abs >> 23;
        const std::uint32_t m = (abs & 0x7fffffu) | 0x800000u;
        const std::uint32_t shift = 126 - e; // 14..24
        std::uint32_t half_m = m >> shift;
        const std::uint32_t rem = m & ((1u << shift) - 1);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half_m & 1u))) ++half_m;
        return static_cast<std::uint16_t>(sign | half_m);
    }
    std::uint32_t h = ((abs >> 13) - ((127 - 15) << 10));
    const std::uint32_t rem = abs & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) ++h;
    return static_cast<std::uint16_t>(sign | h);
}

float bf16_to_float(std::uint16_t h) { return std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16); }

std::uint16_t float_to_bf16(float f) {
    std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    if ((x & 0x7fffffffu) > 0x7f800000u) return static_cast<std::uint16_t>((x >> 16) | 0x40u);
    x += 0x7fffu + ((x >> 16) & 1u);
    return static_cast<std::uint16_t>(x >> 16);
}

static std::uint64_t read_u64_le(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

TensorArchive TensorArchive::read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open weight archive " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse(bytes);
}

TensorArchive TensorArchive::parse(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8) throw LoadError("weight archive truncated: missing header length");
    const std::uint64_t header_len = read_u64_le(bytes.data());
    if (header_len > bytes.size() - 8) throw LoadError("weight archive truncated: header length exceeds file size");

    json header;
    try {
        header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
    } catch (const json::exception& e) {
        throw LoadError(std::string("weight archive header is not valid JSON: ") + e.what());
    }
    if (!header.is_object()) throw LoadError("weight archive header must be a JSON object");

    const std::uint8_t* data = bytes.data() + 8 + header_len;
    const std::size_t data_len = bytes.size() - 8 - header_len;

    TensorArchive archive;
    for (auto it = header.begin(); it != header.end(); ++it) {
        const std::string& name = it.key();
        if (name == "__metadata__") {
            for (auto m = it->begin(); m != it->end(); ++m) {
                archive.metadata[m.key()] = m->is_string() ? m->get<std::string>() : m->dump();
            }
            continue;
        }
        const json& info = *it;
        if (!info.contains("dtype") || !info.contains("shape") || !info.contains("data_offsets")) {
            throw LoadError("tensor '" + name + "': header entry needs dtype, shape and data_offsets");
        }
        TensorEntry entry;
        entry.stored = parse_dtype(info["dtype"].get<std::string>(), name);
        entry.shape = info["shape"].get<std::vector<std::size_t>>();
        const auto offsets = info["data_offsets"].get<std::vector<std::size_t>>();
        if (offsets.size() != 2 || offsets[0] > offsets[1] || offsets[1] > data_len) {
            throw LoadError("tensor '" + name + "': data offsets out of range");
        }
        const std::size_t n = entry.numel();
        if (offsets[1] - offsets[0] != n * dtype_bytes(entry.stored)) {
            throw LoadError("tensor '" + name + "': byte range does not match shape and dtype");
        }
        entry.values.resize(n);
        const std::uint8_t* src = data + offsets[0];
        switch (entry.stored) {
        case DType::F32:
            for (std::size_t i = 0; i < n; ++i) {
                std::uint32_t bits = 0;
                for (int b = 3; b >= 0; --b) bits = (bits << 8) | src[4 * i + b];
                entry.values[i] = std::bit_cast<float>(bits);
            }
            break;
        case DType::F16:
        case DType::BF16:
            for (std::size_t i = 0; i < n; ++i) {
                const auto bits = static_cast<std::uint16_t>(src[2 * i] | (src[2 * i + 1] << 8));
                entry.values[i] = entry.stored == DType::F16 ? half_to_float(bits) : bf16_to_float(bits);
            }
            break;
        }
        archive.tensors_.emplace(name, std::move(entry));
    }
    return archive;
}

std::vector<std::uint8_t> TensorArchive::serialize(DType storage) const {
    json header = json::object();
    std::size_t offset = 0;
    for (const auto& [name, entry] : tensors_) {
        const std::size_t len = entry.numel() * dtype_bytes(storage);
        header[name] = {{"dtype", dtype_name(storage)}, {"shape", entry.shape}, {"data_offsets", {offset, offset + len}}};
        offset += len;
    }
    if (!metadata.empty()) header["__metadata__"] = metadata;

    std::string text = header.dump();
    while ((8 + text.size()) % 8 != 0) text.push_back(' ');

    std::vector<std::uint8_t> out;
    out.reserve(8 + text.size() + offset);
    const std::uint64_t n = text.size();
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(n >> (8 * i)));
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& [name, entry] : tensors_) {
        for (float v : entry.values) {
            if (storage == DType::F32) {
                const auto bits = std::bit_cast<std::uint32_t>(v);
                for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
            } else {
                const std::uint16_t bits = storage == DType::F16 ? float_to_half(v) : float_to_bf16(v);
                out.push_back(static_cast<std::uint8_t>(bits & 0xff));
                out.push_back(static_cast<std::uint8_t>(bits >> 8));
            }
        }
    }
    return out;
}

void TensorArchive::write(const std::filesystem::path& path, DType storage) const {
    const auto bytes = serialize(storage);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write weight archive " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

const TensorEntry& TensorArchive::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw LoadError("missing tensor '" + name + "'");
    return it->second;
}

void TensorArchive::insert(const std::string& name, std::vector<std::size_t> shape, std::vector<float> values) {
    TensorEntry entry;
    entry.shape = std::move(shape);
    entry.values = std::move(values);
    if (entry.numel() != entry.values.size()) {
        throw std::invalid_argument("tensor '" + name + "': value count does not match shape");
    }
    tensors_[name] = std::move(entry);
}

std::vector<std::string> TensorArchive::names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& kv : tensors_) out.push_back(kv.first);
    return out;
}

} // namespace enprobe
