#pragma once

// Binary PPM (P6) and PGM (P5) codecs with 8-bit samples.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "hdca/label_map.hpp"
#include "hdca/tensor.hpp"

namespace hdca {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// [3,H,W] image in [0,1] -> P6 bytes, rounding to the nearest 8-bit level.
std::vector<std::uint8_t> encode_ppm(const Tensor& image);
/// P6 bytes -> float32 [3,H,W] in [0,1].
Tensor decode_ppm(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_pgm(const LabelMap& labels);
LabelMap decode_pgm(std::span<const std::uint8_t> bytes);

/// Raw RGB bytes -> P6; used for colorized label output.
std::vector<std::uint8_t> encode_ppm_rgb(std::size_t height, std::size_t width,
                                         std::span<const std::uint8_t> rgb);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

Tensor read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor& image);
LabelMap read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const LabelMap& labels);

}  // namespace hdca
