#include "ctxseg/checkpoint.hpp"

#include <cstring>

#include <zlib.h>

#include "ctxseg/error.hpp"
#include "ctxseg/netpbm.hpp"

namespace ctxseg {
namespace {

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t crc_of(const std::string& bytes, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(n));
  return static_cast<std::uint32_t>(crc);
}

class Reader {
 public:
  Reader(const std::string& b, std::size_t pos, std::size_t end) : b_(b), pos_(pos), end_(end) {}

  void need(std::size_t n) const {
    if (end_ - pos_ < n) fail(ErrorCode::truncated, "checkpoint body ends early");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(b_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(b_[pos_++])) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(b_[pos_++])) << (8 * i);
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  const std::string& b_;
  std::size_t pos_;
  std::size_t end_;
};

template <typename T>
void put_payload(std::string& out, const Tensor<T>& t) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (const T v : t.data()) {
    Bits bits;
    std::memcpy(&bits, &v, sizeof v);
    if constexpr (sizeof(T) == 4) put_u32(out, bits);
    else put_u64(out, bits);
  }
}

template <typename T>
Tensor<T> get_payload(Reader& r, Shape shape) {
  std::size_t n = 1;
  for (const auto d : shape) {
    if (d != 0 && n > (std::size_t{1} << 40) / d) fail(ErrorCode::parse, "checkpoint tensor too large");
    n *= d;
  }
  r.need(n * sizeof(T));
  Tensor<T> t(std::move(shape));
  for (std::size_t i = 0; i < n; ++i) {
    T v;
    if constexpr (sizeof(T) == 4) {
      const std::uint32_t bits = r.u32();
      std::memcpy(&v, &bits, sizeof v);
    } else {
      const std::uint64_t bits = r.u64();
      std::memcpy(&v, &bits, sizeof v);
    }
    t[i] = v;
  }
  return t;
}

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string body;
  const std::string meta = ckpt.meta.dump();
  put_u32(body, static_cast<std::uint32_t>(meta.size()));
  body += meta;
  put_u32(body, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    put_u32(body, static_cast<std::uint32_t>(t.name.size()));
    body += t.name;
    std::visit(
        [&](const auto& tensor) {
          using T = typename std::decay_t<decltype(tensor)>::value_type;
          put_u8(body, std::is_same_v<T, float> ? 0 : 1);
          put_u32(body, static_cast<std::uint32_t>(tensor.rank()));
          for (const auto d : tensor.shape()) put_u64(body, d);
          put_payload(body, tensor);
        },
        t.value);
  }
  std::string out = "CSEG";
  put_u32(out, Checkpoint::kVersion);
  put_u64(out, body.size());
  out += body;
  put_u32(out, crc_of(out, out.size()));
  return out;
}

Checkpoint decode_checkpoint(const std::string& b) {
  if (b.size() < 4) fail(ErrorCode::truncated, "checkpoint shorter than its magic");
  if (b.compare(0, 4, "CSEG") != 0) fail(ErrorCode::bad_magic, "not a CSEG checkpoint");
  if (b.size() < 16) fail(ErrorCode::truncated, "checkpoint header incomplete");
  Reader head(b, 4, 16);
  const std::uint32_t version = head.u32();
  if (version != Checkpoint::kVersion) {
    fail(ErrorCode::unsupported_version, "checkpoint version " + std::to_string(version) + ", this build reads " +
                                             std::to_string(Checkpoint::kVersion));
  }
  const std::uint64_t body = head.u64();
  if (body > b.size() || b.size() - 16 < body + 4) fail(ErrorCode::truncated, "checkpoint payload incomplete");
  if (b.size() != 16 + body + 4) fail(ErrorCode::parse, "trailing bytes after checkpoint");
  Reader tail(b, 16 + body, b.size());
  if (tail.u32() != crc_of(b, 16 + body)) fail(ErrorCode::checksum, "checkpoint CRC32 mismatch");

  Reader r(b, 16, 16 + body);
  Checkpoint ckpt;
  try {
    ckpt.meta = nlohmann::ordered_json::parse(r.bytes(r.u32()));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::parse, std::string("checkpoint metadata: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.bytes(r.u32());
    const std::uint8_t dtype = r.u8();
    const std::uint32_t rank = r.u32();
    if (rank > 8) fail(ErrorCode::parse, "checkpoint tensor rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(r.u64());
    if (dtype == 0) t.value = get_payload<float>(r, shape);
    else if (dtype == 1) t.value = get_payload<double>(r, shape);
    else fail(ErrorCode::parse, "checkpoint dtype " + std::to_string(dtype));
    ckpt.tensors.push_back(std::move(t));
  }
  if (!r.done()) fail(ErrorCode::parse, "unread bytes in checkpoint body");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { write_file(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::io) throw;
    throw Error(e.code(), path + ": " + e.what());
  }
}

}  // namespace ctxseg
