#include "star/pgm.hpp"

#include <fstream>
#include <string>

namespace star {

void pgm_write(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& pixels) {
    if (pixels.size() != width * height) {
        throw ArgumentError("pgm_write: " + std::to_string(pixels.size()) + " pixels for a " +
                            std::to_string(width) + "x" + std::to_string(height) + " image");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("pgm_write: cannot open " + path.string());
    const std::string header =
        "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(pixels.data()),
              static_cast<std::streamsize>(pixels.size()));
    if (!out) throw FormatError("pgm_write: short write to " + path.string());
}

std::vector<std::uint8_t> stage_mask(const std::vector<std::size_t>& kept,
                                     std::size_t cell_count) {
    std::vector<std::uint8_t> px(cell_count, 0);
    for (std::size_t idx : kept) {
        if (idx >= cell_count) {
            throw ArgumentError("stage_mask: kept index " + std::to_string(idx) +
                                " outside grid of " + std::to_string(cell_count) + " cells");
        }
        px[idx] = kMaskKept;
    }
    return px;
}

std::vector<std::uint8_t> combined_mask(const PruneTrace& trace, std::size_t cell_count) {
    std::vector<std::uint8_t> px(cell_count, kMaskDroppedStage1);
    for (std::size_t idx : trace.stage1.kept) {
        if (idx >= cell_count) {
            throw ArgumentError("combined_mask: index " + std::to_string(idx) +
                                " outside grid of " + std::to_string(cell_count) + " cells");
        }
        px[idx] = kMaskDroppedStage2;
    }
    for (std::size_t idx : trace.stage2.kept) {
        if (idx >= cell_count) {
            throw ArgumentError("combined_mask: index " + std::to_string(idx) +
                                " outside grid of " + std::to_string(cell_count) + " cells");
        }
        px[idx] = kMaskKept;
    }
    return px;
}

}  // namespace star
