#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "star/pipeline.hpp"

namespace star {

// Binary PGM (P5, maxval 255) writer; one byte per pixel, row-major.
void pgm_write(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& pixels);

// Grid mask over the original patch layout. Grey levels:
//   per-stage images: 255 kept, 0 dropped;
//   combined image:   255 kept, 64 dropped at stage 2, 0 dropped at stage 1.
constexpr std::uint8_t kMaskKept = 255;
constexpr std::uint8_t kMaskDroppedStage2 = 64;
constexpr std::uint8_t kMaskDroppedStage1 = 0;

std::vector<std::uint8_t> stage_mask(const std::vector<std::size_t>& kept,
                                     std::size_t cell_count);
std::vector<std::uint8_t> combined_mask(const PruneTrace& trace, std::size_t cell_count);

}  // namespace star
