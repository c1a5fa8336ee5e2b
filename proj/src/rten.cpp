#include "aligndet/rten.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace aligndet {

namespace {

constexpr char kMagic[4] = {'R', 'T', 'E', 'N'};
constexpr std::uint8_t kVersion = 1;

void put_u32le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
         (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

template <typename T>
void save_impl(const std::string& path, const TensorT<T>& t, std::uint8_t dtype) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("rten: cannot open for write: " + path);
  os.write(kMagic, 4);
  os.put(char(kVersion));
  os.put(char(dtype));
  if (t.rank() > 255) throw std::invalid_argument("rten: rank too large");
  os.put(char(t.rank()));
  for (std::size_t d : t.shape()) {
    if (d > 0xffffffffULL) throw std::invalid_argument("rten: dim exceeds u32");
    put_u32le(os, std::uint32_t(d));
  }
  // Little-endian host assumed; static_assert keeps this honest on exotica.
  static_assert(std::endian::native == std::endian::little);
  os.write(reinterpret_cast<const char*>(t.data()),
           std::streamsize(t.numel() * sizeof(T)));
  if (!os) throw std::runtime_error("rten: write failed: " + path);
}

}  // namespace

void save_rten(const std::string& path, const Tensor& t) { save_impl(path, t, 2); }
void save_rten(const std::string& path, const TensorF& t) { save_impl(path, t, 1); }

Tensor load_rten(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("rten: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("rten: bad magic in " + path);
  const int version = is.get();
  if (version != kVersion) throw std::runtime_error("rten: unsupported version");
  const int dtype = is.get();
  if (dtype != 1 && dtype != 2) throw std::runtime_error("rten: unknown dtype");
  const int rank = is.get();
  if (rank < 0) throw std::runtime_error("rten: truncated header");
  std::vector<std::size_t> shape(static_cast<std::size_t>(rank));
  for (auto& d : shape) d = get_u32le(is);
  if (!is) throw std::runtime_error("rten: truncated dims");
  const std::size_t n = Tensor::numel_of(shape);
  Tensor t(shape);
  if (dtype == 2) {
    is.read(reinterpret_cast<char*>(t.data()), std::streamsize(n * sizeof(double)));
  } else {
    std::vector<float> buf(n);
    is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(n * sizeof(float)));
    for (std::size_t i = 0; i < n; ++i) t[i] = double(buf[i]);
  }
  if (!is && n > 0) throw std::runtime_error("rten: truncated payload in " + path);
  return t;
}

}  // namespace aligndet
