#include "tfd/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace tfd {

namespace {

void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
  buf.push_back(static_cast<unsigned char>(v & 0xff));
  buf.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
  buf.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
  buf.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_f64(std::vector<unsigned char>& buf, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xff));
}

double get_f64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  const Shape s = t.shape();
  std::vector<unsigned char> buf;
  buf.reserve(16 + static_cast<std::size_t>(t.numel()) * 8);
  put_u32(buf, static_cast<std::uint32_t>(s.b));
  put_u32(buf, static_cast<std::uint32_t>(s.h));
  put_u32(buf, static_cast<std::uint32_t>(s.w));
  put_u32(buf, static_cast<std::uint32_t>(s.c));
  const double* d = t.data();
  for (std::int64_t i = 0; i < t.numel(); ++i) put_f64(buf, d[i]);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 16) throw std::runtime_error("truncated tensor file: " + path.string());

  const Shape s{static_cast<int>(get_u32(buf.data())), static_cast<int>(get_u32(buf.data() + 4)),
                static_cast<int>(get_u32(buf.data() + 8)), static_cast<int>(get_u32(buf.data() + 12))};
  if (s.b <= 0 || s.h <= 0 || s.w <= 0 || s.c <= 0) {
    throw std::runtime_error("bad tensor header in " + path.string());
  }
  const std::size_t want = 16 + static_cast<std::size_t>(s.numel()) * 8;
  if (buf.size() != want) {
    throw std::runtime_error("tensor payload size mismatch in " + path.string() + ": got " +
                             std::to_string(buf.size()) + " bytes, want " + std::to_string(want));
  }
  Tensor t(s);
  double* d = t.data();
  for (std::int64_t i = 0; i < s.numel(); ++i) d[i] = get_f64(buf.data() + 16 + i * 8);
  return t;
}

}  // namespace tfd
