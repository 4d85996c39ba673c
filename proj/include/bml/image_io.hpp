#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "bml/tensor.hpp"

namespace bml {

// Netpbm images as H x W x C tensors in [0, 1] (C = 1 for PGM, 3 for PPM).
// Reading accepts P2, P3, P5 and P6 with maxval up to 65535; writing always
// produces binary 8-bit P5/P6.
Tensor read_pnm(std::istream& is);
Tensor load_pnm(const std::filesystem::path& path);
void write_pnm(std::ostream& os, const Tensor& image);
void save_pnm(const std::filesystem::path& path, const Tensor& image);

// round(clamp(v, 0, 1) * 255)
std::uint8_t to_byte(double v);
std::vector<std::uint8_t> to_bytes(const Tensor& image);

// One <rect> per pixel; no embedded binary data.
std::string image_to_svg(const Tensor& image);

}  // namespace bml
