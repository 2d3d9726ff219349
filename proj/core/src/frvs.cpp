#include "flowseg/frvs.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

namespace flowseg::io {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
void put_le(std::vector<uint8_t>& out, U value) {
    uint8_t bytes[sizeof(U)];
    std::memcpy(bytes, &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    out.insert(out.end(), bytes, bytes + sizeof(U));
}

class Reader {
   public:
    explicit Reader(std::span<const uint8_t> bytes) : bytes_(bytes) {}

    template <typename U>
    U get() {
        need(sizeof(U));
        uint8_t tmp[sizeof(U)];
        std::memcpy(tmp, bytes_.data() + pos_, sizeof(U));
        if constexpr (std::endian::native == std::endian::big) std::reverse(tmp, tmp + sizeof(U));
        pos_ += sizeof(U);
        U v;
        std::memcpy(&v, tmp, sizeof(U));
        return v;
    }

    std::span<const uint8_t> take(size_t n) {
        need(n);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

   private:
    void need(size_t n) const {
        if (pos_ + n > bytes_.size()) throw ContractError("frvs: truncated data");
    }

    std::span<const uint8_t> bytes_;
    size_t pos_ = 0;
};

template <typename T>
std::vector<uint8_t> encode_reals(const nn::Tensor<T>& t) {
    std::vector<uint8_t> out;
    out.reserve(static_cast<size_t>(t.numel()) * sizeof(T));
    for (T v : t.values()) put_le(out, v);
    return out;
}

std::vector<uint32_t> to_u32_dims(const nn::Dims& dims) {
    std::vector<uint32_t> out;
    for (auto d : dims) out.push_back(static_cast<uint32_t>(d));
    return out;
}

}  // namespace

size_t dtype_size(DType t) {
    switch (t) {
        case DType::f32: return 4;
        case DType::f64: return 8;
        case DType::u8: return 1;
    }
    throw ContractError("frvs: unknown dtype code");
}

FrvsTensor FrvsTensor::from_f32(std::string name, const nn::Tensor<float>& t) {
    return {std::move(name), DType::f32, to_u32_dims(t.dims()), encode_reals(t)};
}

FrvsTensor FrvsTensor::from_f64(std::string name, const nn::Tensor<double>& t) {
    return {std::move(name), DType::f64, to_u32_dims(t.dims()), encode_reals(t)};
}

FrvsTensor FrvsTensor::from_u8(std::string name, std::vector<uint32_t> dims, std::span<const uint8_t> values) {
    FrvsTensor t{std::move(name), DType::u8, std::move(dims), {values.begin(), values.end()}};
    if (t.payload.size() != t.numel()) throw ShapeError("frvs: u8 payload does not match dims for " + t.name);
    return t;
}

uint64_t FrvsTensor::numel() const {
    uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

nn::Dims FrvsTensor::tensor_dims() const {
    return nn::Dims(dims.begin(), dims.end());
}

template <typename T>
nn::Tensor<T> FrvsTensor::to_tensor() const {
    std::vector<T> values(numel());
    Reader r(payload);
    for (auto& v : values) {
        switch (dtype) {
            case DType::f32: v = static_cast<T>(r.get<float>()); break;
            case DType::f64: v = static_cast<T>(r.get<double>()); break;
            case DType::u8: v = static_cast<T>(r.get<uint8_t>()); break;
        }
    }
    return nn::Tensor<T>(tensor_dims(), std::move(values));
}

template nn::Tensor<float> FrvsTensor::to_tensor<float>() const;
template nn::Tensor<double> FrvsTensor::to_tensor<double>() const;

std::vector<uint8_t> FrvsTensor::to_u8() const {
    if (dtype != DType::u8) throw ContractError("frvs: tensor " + name + " is not u8");
    return payload;
}

void FrvsFile::add(FrvsTensor t) {
    if (t.name.size() > 0xFFFF) throw ContractError("frvs: tensor name too long");
    if (t.dims.size() > 0xFF) throw ContractError("frvs: too many dims for " + t.name);
    if (t.payload.size() != t.numel() * dtype_size(t.dtype)) {
        throw ShapeError("frvs: payload length does not match dims for " + t.name);
    }
    if (contains(t.name)) throw ContractError("frvs: duplicate tensor name " + t.name);
    tensors_.push_back(std::move(t));
}

bool FrvsFile::contains(const std::string& name) const {
    for (const auto& t : tensors_) {
        if (t.name == name) return true;
    }
    return false;
}

const FrvsTensor& FrvsFile::get(const std::string& name) const {
    for (const auto& t : tensors_) {
        if (t.name == name) return t;
    }
    throw ContractError("frvs: no tensor named " + name);
}

std::vector<uint8_t> FrvsFile::serialize() const {
    std::vector<uint8_t> out = {'F', 'R', 'V', 'S'};
    put_le<uint32_t>(out, kVersion);
    put_le<uint32_t>(out, static_cast<uint32_t>(tensors_.size()));
    for (const auto& t : tensors_) {
        put_le<uint16_t>(out, static_cast<uint16_t>(t.name.size()));
        out.insert(out.end(), t.name.begin(), t.name.end());
        out.push_back(static_cast<uint8_t>(t.dtype));
        out.push_back(static_cast<uint8_t>(t.dims.size()));
        for (auto d : t.dims) put_le<uint32_t>(out, d);
        out.insert(out.end(), t.payload.begin(), t.payload.end());
    }
    return out;
}

FrvsFile FrvsFile::parse(std::span<const uint8_t> bytes) {
    Reader r(bytes);
    auto magic = r.take(4);
    if (std::memcmp(magic.data(), "FRVS", 4) != 0) throw ContractError("frvs: bad magic");
    const auto version = r.get<uint32_t>();
    if (version != kVersion) throw ContractError("frvs: unsupported version " + std::to_string(version));
    const auto count = r.get<uint32_t>();
    FrvsFile file;
    for (uint32_t i = 0; i < count; ++i) {
        FrvsTensor t;
        const auto len = r.get<uint16_t>();
        auto name = r.take(len);
        t.name.assign(name.begin(), name.end());
        const auto code = r.get<uint8_t>();
        if (code > 2) throw ContractError("frvs: unknown dtype code " + std::to_string(code));
        t.dtype = static_cast<DType>(code);
        const auto ndim = r.get<uint8_t>();
        for (uint8_t d = 0; d < ndim; ++d) t.dims.push_back(r.get<uint32_t>());
        auto payload = r.take(t.numel() * dtype_size(t.dtype));
        t.payload.assign(payload.begin(), payload.end());
        file.add(std::move(t));
    }
    if (!r.done()) throw ContractError("frvs: trailing bytes");
    return file;
}

std::vector<uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileError(path.string(), "cannot open for reading");
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_bytes(const std::filesystem::path& path, std::span<const uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError(path.string(), "cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FileError(path.string(), "write failed");
}

void FrvsFile::write(const std::filesystem::path& path) const {
    write_bytes(path, serialize());
}

FrvsFile FrvsFile::read(const std::filesystem::path& path) {
    auto bytes = read_bytes(path);
    try {
        return parse(bytes);
    } catch (const ContractError& e) {
        throw FileError(path.string(), e.what());
    }
}

FrvsTensor text_tensor(std::string name, const std::string& text) {
    std::vector<uint8_t> bytes(text.begin(), text.end());
    if (bytes.empty()) bytes.push_back('\n');
    return FrvsTensor::from_u8(std::move(name), {static_cast<uint32_t>(bytes.size())}, bytes);
}

std::string tensor_text(const FrvsTensor& t) {
    auto bytes = t.to_u8();
    return std::string(bytes.begin(), bytes.end());
}

}  // namespace flowseg::io
