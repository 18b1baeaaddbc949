#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stdsnn/tensor.hpp"

namespace stdsnn {

class io_error : public std::runtime_error {
 public:
  enum class kind { open_failed, bad_magic, truncated, dim_overflow };

  io_error(kind k, const std::string& msg) : std::runtime_error(msg), kind_(k) {}
  kind error_kind() const { return kind_; }

 private:
  kind kind_;
};

namespace io {

// All integers and floats are little-endian on disk.

inline void put_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  put_bytes(out, b, 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(out, b, 8);
}

inline void put_f32(std::ostream& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

inline void get_bytes(std::istream& in, void* p, std::size_t n, const char* what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw io_error(io_error::kind::truncated,
                   std::string("truncated file while reading ") + what);
}

inline std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  get_bytes(in, b, 4, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& in, const char* what) {
  unsigned char b[8];
  get_bytes(in, b, 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void put_f32_array(std::ostream& out, const float* p, std::int64_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    put_bytes(out, p, static_cast<std::size_t>(n) * sizeof(float));
  } else {
    for (std::int64_t i = 0; i < n; ++i) put_f32(out, p[i]);
  }
}

inline void get_f32_array(std::istream& in, float* p, std::int64_t n, const char* what) {
  if constexpr (std::endian::native == std::endian::little) {
    get_bytes(in, p, static_cast<std::size_t>(n) * sizeof(float), what);
  } else {
    for (std::int64_t i = 0; i < n; ++i) {
      const std::uint32_t u = get_u32(in, what);
      p[i] = std::bit_cast<float>(u);
    }
  }
}

inline void check_magic(std::istream& in, const char (&magic)[5], const char* what) {
  char got[4];
  get_bytes(in, got, 4, what);
  if (std::memcmp(got, magic, 4) != 0)
    throw io_error(io_error::kind::bad_magic, std::string("bad magic for ") + what +
                                                  ", expected \"" + magic + "\"");
}

// A header promising more than this many elements is treated as corrupt.
inline constexpr std::int64_t max_tensor_numel = std::int64_t(1) << 31;

inline Shape get_dims(std::istream& in, std::uint32_t rank, const char* what) {
  if (rank == 0 || rank > 8)
    throw io_error(io_error::kind::dim_overflow,
                   std::string(what) + ": rank " + std::to_string(rank) + " out of range");
  Shape s(rank);
  std::int64_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint64_t d = get_u64(in, what);
    if (d == 0 || d > static_cast<std::uint64_t>(max_tensor_numel))
      throw io_error(io_error::kind::dim_overflow,
                     std::string(what) + ": dim " + std::to_string(d) + " out of range");
    numel *= static_cast<std::int64_t>(d);
    if (numel > max_tensor_numel)
      throw io_error(io_error::kind::dim_overflow,
                     std::string(what) + ": total elements exceed sane bound");
    s[i] = static_cast<std::int64_t>(d);
  }
  return s;
}

}  // namespace io

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

/// On-disk model container: magic "STDW", u32 version, u32 tensor count, then
/// per tensor (u32 name_len, name, u32 rank, u64 dims, f32 data); an optional
/// u32-length-prefixed text block of "key = value" lines follows the tensors.
struct Checkpoint {
  std::vector<NamedTensor> tensors;
  std::string config_text;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t.value;
    return nullptr;
  }
};

inline constexpr std::uint32_t checkpoint_version = 1;

inline void save_checkpoint(std::ostream& out, const Checkpoint& cp) {
  io::put_bytes(out, "STDW", 4);
  io::put_u32(out, checkpoint_version);
  io::put_u32(out, static_cast<std::uint32_t>(cp.tensors.size()));
  for (const auto& t : cp.tensors) {
    io::put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    io::put_bytes(out, t.name.data(), t.name.size());
    io::put_u32(out, static_cast<std::uint32_t>(t.value.rank()));
    for (std::size_t i = 0; i < t.value.rank(); ++i)
      io::put_u64(out, static_cast<std::uint64_t>(t.value.dim(i)));
    io::put_f32_array(out, t.value.data(), t.value.numel());
  }
  if (!cp.config_text.empty()) {
    io::put_u32(out, static_cast<std::uint32_t>(cp.config_text.size()));
    io::put_bytes(out, cp.config_text.data(), cp.config_text.size());
  }
}

inline Checkpoint load_checkpoint(std::istream& in) {
  io::check_magic(in, "STDW", "checkpoint");
  const std::uint32_t ver = io::get_u32(in, "checkpoint version");
  if (ver != checkpoint_version)
    throw io_error(io_error::kind::bad_magic,
                   "unsupported checkpoint version " + std::to_string(ver));
  const std::uint32_t count = io::get_u32(in, "checkpoint tensor count");
  Checkpoint cp;
  cp.tensors.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint32_t name_len = io::get_u32(in, "tensor name length");
    if (name_len > 4096)
      throw io_error(io_error::kind::dim_overflow,
                     "tensor name length " + std::to_string(name_len) + " out of range");
    std::string name(name_len, '\0');
    io::get_bytes(in, name.data(), name_len, "tensor name");
    const std::uint32_t rank = io::get_u32(in, "tensor rank");
    Shape dims = io::get_dims(in, rank, "tensor dims");
    Tensor<float> t(dims);
    io::get_f32_array(in, t.data(), t.numel(), name.c_str());
    cp.tensors.push_back({std::move(name), std::move(t)});
  }
  // optional config trailer
  char probe[4];
  in.read(probe, 4);
  if (in.gcount() == 4) {
    std::uint32_t len = static_cast<std::uint32_t>(static_cast<unsigned char>(probe[0])) |
                        (static_cast<std::uint32_t>(static_cast<unsigned char>(probe[1])) << 8) |
                        (static_cast<std::uint32_t>(static_cast<unsigned char>(probe[2])) << 16) |
                        (static_cast<std::uint32_t>(static_cast<unsigned char>(probe[3])) << 24);
    if (len > (1u << 20))
      throw io_error(io_error::kind::dim_overflow, "config block length out of range");
    cp.config_text.resize(len);
    io::get_bytes(in, cp.config_text.data(), len, "config block");
  } else if (in.gcount() != 0) {
    throw io_error(io_error::kind::truncated, "truncated file while reading config block length");
  }
  return cp;
}

inline void save_checkpoint_file(const std::string& path, const Checkpoint& cp) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error(io_error::kind::open_failed, "cannot open " + path + " for writing");
  save_checkpoint(out, cp);
  out.flush();
  if (!out) throw io_error(io_error::kind::open_failed, "write failed for " + path);
}

inline Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error(io_error::kind::open_failed, "cannot open " + path);
  return load_checkpoint(in);
}

}  // namespace stdsnn
