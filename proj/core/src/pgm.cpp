#include "flowseg/pgm.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>

#include "flowseg/frvs.hpp"

namespace flowseg::io {

std::vector<uint8_t> encode_pgm(const MaskTensor& mask, int64_t frame) {
    if (frame < 0 || frame >= mask.frames()) throw ContractError("pgm: frame index out of range");
    const std::string header = "P5\n" + std::to_string(mask.width()) + " " + std::to_string(mask.height()) + "\n255\n";
    std::vector<uint8_t> out(header.begin(), header.end());
    for (int64_t y = 0; y < mask.height(); ++y) {
        for (int64_t x = 0; x < mask.width(); ++x) out.push_back(mask.at(frame, y, x) ? 255 : 0);
    }
    return out;
}

MaskTensor decode_pgm(const std::vector<uint8_t>& bytes) {
    size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto number = [&] {
        skip_space();
        int64_t v = 0;
        const size_t start = pos;
        while (pos < bytes.size() && std::isdigit(bytes[pos]) && pos - start < 9) v = v * 10 + (bytes[pos++] - '0');
        if (pos == start) throw ContractError("pgm: malformed header");
        return v;
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw ContractError("pgm: not a binary (P5) image");
    pos = 2;
    const int64_t w = number(), h = number(), maxval = number();
    if (w < 1 || h < 1 || maxval < 1 || maxval > 255) throw ContractError("pgm: unsupported dimensions or maxval");
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw ContractError("pgm: malformed header");
    ++pos;
    if (bytes.size() - pos != static_cast<size_t>(w * h)) throw ContractError("pgm: pixel data length mismatch");
    MaskTensor m(1, h, w);
    for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) m.set(0, y, x, bytes[pos + static_cast<size_t>(y * w + x)] != 0);
    }
    return m;
}

void write_pgm(const std::filesystem::path& path, const MaskTensor& mask, int64_t frame) {
    write_bytes(path, encode_pgm(mask, frame));
}

MaskTensor read_pgm(const std::filesystem::path& path) {
    try {
        return decode_pgm(read_bytes(path));
    } catch (const ContractError& e) {
        throw FileError(path.string(), e.what());
    }
}

void write_pgm_frames(const std::filesystem::path& dir, const MaskTensor& mask) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw FileError(dir.string(), "cannot create directory: " + ec.message());
    for (int64_t f = 0; f < mask.frames(); ++f) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%03lld.pgm", static_cast<long long>(f));
        write_pgm(dir / name, mask, f);
    }
}

MaskTensor read_pgm_frames(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    std::error_code ec;
    for (const auto& entry : std::filesystem::directory_iterator(dir, ec)) {
        if (entry.path().extension() == ".pgm") files.push_back(entry.path());
    }
    if (ec) throw FileError(dir.string(), "cannot list directory: " + ec.message());
    if (files.empty()) throw FileError(dir.string(), "no .pgm frames");
    std::sort(files.begin(), files.end());
    std::vector<MaskTensor> frames;
    for (const auto& f : files) frames.push_back(read_pgm(f));
    MaskTensor out(static_cast<int64_t>(frames.size()), frames[0].height(), frames[0].width());
    for (size_t f = 0; f < frames.size(); ++f) {
        if (!frames[f].same_shape(frames[0])) throw FileError(files[f].string(), "frame size differs from the first frame");
        for (int64_t y = 0; y < out.height(); ++y) {
            for (int64_t x = 0; x < out.width(); ++x) out.set(static_cast<int64_t>(f), y, x, frames[f].at(0, y, x));
        }
    }
    return out;
}

}  // namespace flowseg::io
