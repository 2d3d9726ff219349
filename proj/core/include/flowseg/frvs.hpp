#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flowseg/tensor.hpp"

namespace flowseg::io {

/// On-disk element type codes of the FRVS container.
enum class DType : uint8_t { f32 = 0, f64 = 1, u8 = 2 };

size_t dtype_size(DType t);

/// One named tensor; the payload is raw little-endian row-major bytes.
struct FrvsTensor {
    std::string name;
    DType dtype = DType::f32;
    std::vector<uint32_t> dims;
    std::vector<uint8_t> payload;

    static FrvsTensor from_f32(std::string name, const nn::Tensor<float>& t);
    static FrvsTensor from_f64(std::string name, const nn::Tensor<double>& t);
    static FrvsTensor from_u8(std::string name, std::vector<uint32_t> dims, std::span<const uint8_t> values);

    uint64_t numel() const;
    nn::Dims tensor_dims() const;

    /// Converts f32 or f64 payloads to the requested real type.
    template <typename T>
    nn::Tensor<T> to_tensor() const;
    std::vector<uint8_t> to_u8() const;
};

/// FRVS container:
///   "FRVS" | version u32 | count u32 |
///   per tensor: name_len u16, name bytes, dtype u8, ndim u8, dims u32 x ndim, payload.
/// All integers little-endian.
class FrvsFile {
   public:
    static constexpr uint32_t kVersion = 1;

    void add(FrvsTensor t);
    bool contains(const std::string& name) const;
    const FrvsTensor& get(const std::string& name) const;
    const std::vector<FrvsTensor>& tensors() const { return tensors_; }
    size_t size() const { return tensors_.size(); }

    std::vector<uint8_t> serialize() const;
    static FrvsFile parse(std::span<const uint8_t> bytes);

    void write(const std::filesystem::path& path) const;
    static FrvsFile read(const std::filesystem::path& path);

   private:
    std::vector<FrvsTensor> tensors_;
};

/// Stores UTF-8 text as a 1-D u8 tensor (used for embedded configs).
FrvsTensor text_tensor(std::string name, const std::string& text);
std::string tensor_text(const FrvsTensor& t);

std::vector<uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const uint8_t> bytes);

}  // namespace flowseg::io
