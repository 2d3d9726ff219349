#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowseg/errors.hpp"

namespace flowseg {

/// Binary T x H x W clip; each value is 0 or 1.
class MaskTensor {
   public:
    MaskTensor() = default;
    MaskTensor(int64_t frames, int64_t height, int64_t width)
        : frames_(frames), height_(height), width_(width), bits_(static_cast<size_t>(frames * height * width), 0) {
        if (frames <= 0 || height <= 0 || width <= 0) throw ShapeError("mask: extents must be positive");
    }
    MaskTensor(int64_t frames, int64_t height, int64_t width, std::vector<uint8_t> bits)
        : frames_(frames), height_(height), width_(width), bits_(std::move(bits)) {
        if (static_cast<int64_t>(bits_.size()) != frames * height * width) {
            throw ShapeError("mask: " + std::to_string(bits_.size()) + " values for " + shape_str());
        }
        for (auto& b : bits_) b = b ? 1 : 0;
    }

    int64_t frames() const { return frames_; }
    int64_t height() const { return height_; }
    int64_t width() const { return width_; }
    int64_t frame_size() const { return height_ * width_; }
    int64_t numel() const { return static_cast<int64_t>(bits_.size()); }

    uint8_t at(int64_t t, int64_t y, int64_t x) const { return bits_[index(t, y, x)]; }
    void set(int64_t t, int64_t y, int64_t x, bool on) { bits_[index(t, y, x)] = on ? 1 : 0; }

    const std::vector<uint8_t>& bits() const { return bits_; }
    int64_t count() const {
        int64_t n = 0;
        for (auto b : bits_) n += b;
        return n;
    }

    bool same_shape(const MaskTensor& o) const {
        return frames_ == o.frames_ && height_ == o.height_ && width_ == o.width_;
    }
    std::string shape_str() const {
        return "[" + std::to_string(frames_) + "," + std::to_string(height_) + "," + std::to_string(width_) + "]";
    }

    bool operator==(const MaskTensor& o) const = default;

   private:
    size_t index(int64_t t, int64_t y, int64_t x) const {
        return static_cast<size_t>((t * height_ + y) * width_ + x);
    }

    int64_t frames_ = 0, height_ = 0, width_ = 0;
    std::vector<uint8_t> bits_;
};

}  // namespace flowseg
