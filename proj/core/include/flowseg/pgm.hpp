#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "flowseg/mask.hpp"

namespace flowseg::io {

/// Binary PGM (P5, maxval 255) of one mask frame; foreground is 255.
std::vector<uint8_t> encode_pgm(const MaskTensor& mask, int64_t frame);
/// Parses a P5 image into a single-frame mask (nonzero = foreground).
/// Accepts comments in the header; rejects maxval above 255.
MaskTensor decode_pgm(const std::vector<uint8_t>& bytes);

void write_pgm(const std::filesystem::path& path, const MaskTensor& mask, int64_t frame);
MaskTensor read_pgm(const std::filesystem::path& path);

/// Writes frame_000.pgm, frame_001.pgm, ... into `dir`.
void write_pgm_frames(const std::filesystem::path& dir, const MaskTensor& mask);
/// Stacks every *.pgm in `dir` in name order into one mask.
MaskTensor read_pgm_frames(const std::filesystem::path& dir);

}  // namespace flowseg::io
