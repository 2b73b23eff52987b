#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ctxseg {

/// Interleaved 8-bit RGB, row-major.
struct RgbImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

/// 8-bit single channel, row-major (used for label masks and heatmaps).
struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // height * width

  friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

/// Binary P6 / P5 with maxval 255. Decoding accepts `#` comments in the
/// header; ASCII variants and other maxvals raise unsupported_format, a bad
/// header raises parse, a short payload raises truncated.
std::string encode_ppm(const RgbImage& image);
std::string encode_pgm(const GrayImage& image);
RgbImage decode_ppm(const std::string& bytes);
GrayImage decode_pgm(const std::string& bytes);

void write_ppm(const std::string& path, const RgbImage& image);
void write_pgm(const std::string& path, const GrayImage& image);
RgbImage read_ppm(const std::string& path);
GrayImage read_pgm(const std::string& path);

/// Whole-file helpers; throw ErrorCode::io.
std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace ctxseg
