#include "ctxseg/netpbm.hpp"

#include <cctype>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "ctxseg/error.hpp"

namespace ctxseg {
namespace {

struct Header {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t offset = 0;
};

void skip_space(const std::string& b, std::size_t& pos) {
  while (pos < b.size()) {
    if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(b[pos]))) {
      ++pos;
    } else {
      break;
    }
  }
}

std::size_t read_number(const std::string& b, std::size_t& pos, const char* what) {
  skip_space(b, pos);
  if (pos >= b.size()) fail(ErrorCode::truncated, std::string("netpbm header ends before ") + what);
  if (!std::isdigit(static_cast<unsigned char>(b[pos]))) fail(ErrorCode::parse, std::string("netpbm header: bad ") + what);
  std::size_t v = 0;
  while (pos < b.size() && std::isdigit(static_cast<unsigned char>(b[pos]))) {
    v = v * 10 + static_cast<std::size_t>(b[pos] - '0');
    if (v > (1u << 24)) fail(ErrorCode::parse, std::string("netpbm header: ") + what + " too large");
    ++pos;
  }
  return v;
}

Header parse_header(const std::string& b, char binary_kind, char ascii_kind) {
  if (b.size() < 2) fail(ErrorCode::truncated, "netpbm: file shorter than magic");
  if (b[0] != 'P' || !std::isdigit(static_cast<unsigned char>(b[1]))) fail(ErrorCode::parse, "netpbm: bad magic");
  if (b[1] == ascii_kind) fail(ErrorCode::unsupported_format, std::string("netpbm: ASCII P") + ascii_kind + " not supported");
  if (b[1] != binary_kind) fail(ErrorCode::unsupported_format, std::string("netpbm: expected P") + binary_kind + ", got P" + b[1]);
  std::size_t pos = 2;
  if (pos < b.size() && !std::isspace(static_cast<unsigned char>(b[pos])) && b[pos] != '#') {
    fail(ErrorCode::parse, "netpbm: magic not followed by whitespace");
  }
  Header h;
  h.width = read_number(b, pos, "width");
  h.height = read_number(b, pos, "height");
  const std::size_t maxval = read_number(b, pos, "maxval");
  if (h.width == 0 || h.height == 0) fail(ErrorCode::parse, "netpbm: zero extent");
  if (maxval != 255) fail(ErrorCode::unsupported_format, "netpbm: maxval " + std::to_string(maxval) + " (only 255)");
  if (pos >= b.size()) fail(ErrorCode::truncated, "netpbm: missing payload");
  if (!std::isspace(static_cast<unsigned char>(b[pos]))) fail(ErrorCode::parse, "netpbm: maxval not followed by whitespace");
  h.offset = pos + 1;
  return h;
}

std::vector<std::uint8_t> payload(const std::string& b, const Header& h, std::size_t channels) {
  const std::size_t n = h.width * h.height * channels;
  if (b.size() - h.offset < n) {
    fail(ErrorCode::truncated, "netpbm: payload has " + std::to_string(b.size() - h.offset) + " of " +
                                   std::to_string(n) + " bytes");
  }
  if (b.size() - h.offset > n) fail(ErrorCode::parse, "netpbm: trailing bytes after payload");
  return {b.begin() + static_cast<std::ptrdiff_t>(h.offset), b.begin() + static_cast<std::ptrdiff_t>(h.offset + n)};
}

std::string encode(char kind, std::size_t w, std::size_t h, const std::vector<std::uint8_t>& px, std::size_t channels) {
  if (px.size() != w * h * channels) fail(ErrorCode::shape_mismatch, "netpbm: pixel buffer does not match extents");
  std::string out = std::string("P") + kind + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.append(px.begin(), px.end());
  return out;
}

}  // namespace

std::string encode_ppm(const RgbImage& image) { return encode('6', image.width, image.height, image.pixels, 3); }
std::string encode_pgm(const GrayImage& image) { return encode('5', image.width, image.height, image.pixels, 1); }

RgbImage decode_ppm(const std::string& bytes) {
  const auto h = parse_header(bytes, '6', '3');
  return {h.height, h.width, payload(bytes, h, 3)};
}

GrayImage decode_pgm(const std::string& bytes) {
  const auto h = parse_header(bytes, '5', '2');
  return {h.height, h.width, payload(bytes, h, 1)};
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorCode::io, "read failed: " + path);
  return data;
}

void write_file(const std::string& path, const std::string& bytes) {
  const auto parent = std::filesystem::path(path).parent_path();
  std::error_code ec;
  if (!parent.empty()) std::filesystem::create_directories(parent, ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::io, "write failed: " + path);
}

void write_ppm(const std::string& path, const RgbImage& image) { write_file(path, encode_ppm(image)); }
void write_pgm(const std::string& path, const GrayImage& image) { write_file(path, encode_pgm(image)); }

RgbImage read_ppm(const std::string& path) {
  try {
    return decode_ppm(read_file(path));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::io) throw;
    throw Error(e.code(), path + ": " + e.what());
  }
}

GrayImage read_pgm(const std::string& path) {
  try {
    return decode_pgm(read_file(path));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::io) throw;
    throw Error(e.code(), path + ": " + e.what());
  }
}

}  // namespace ctxseg
