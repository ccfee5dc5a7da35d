#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace enprobe {

struct LoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class DType { F32, F16, BF16 };

const char* dtype_name(DType d);

// One named tensor. Values are always held as 32-bit floats; `stored` records
// the on-disk dtype (16-bit inputs are upcast on load).
struct TensorEntry {
    DType stored = DType::F32;
    std::vector<std::size_t> shape;
    std::vector<float> values;

    std::size_t numel() const;
};

// Single-file weight archive:
//   [u64 little-endian header length N][N bytes of JSON header][raw data]
// The header maps tensor name -> {"dtype", "shape", "data_offsets": [begin, end]}
// with offsets relative to the start of the data region, plus an optional
// "__metadata__" object of string -> string. This is the safetensors layout,
// so published GPT-2 checkpoints load without conversion.
class TensorArchive {
public:
    static TensorArchive read(const std::filesystem::path& path);
    static TensorArchive parse(std::span<const std::uint8_t> bytes);

    // Tensors are written in name order; `storage` selects the on-disk dtype.
    void write(const std::filesystem::path& path, DType storage = DType::F32) const;
    std::vector<std::uint8_t> serialize(DType storage = DType::F32) const;

    bool contains(const std::string& name) const { return tensors_.contains(name); }
    const TensorEntry& at(const std::string& name) const;
    void insert(const std::string& name, std::vector<std::size_t> shape, std::vector<float> values);
    void erase(const std::string& name) { tensors_.erase(name); }

    std::vector<std::string> names() const;
    std::size_t size() const { return tensors_.size(); }

    std::map<std::string, std::string> metadata;

private:
    std::map<std::string, TensorEntry> tensors_;
};

float half_to_float(std::uint16_t h);
std::uint16_t float_to_half(float f);
float bf16_to_float(std::uint16_t h);
std::uint16_t float_to_bf16(float f);

} // namespace enprobe
