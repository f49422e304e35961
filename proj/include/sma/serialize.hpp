#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <type_traits>

#include "sma/tensor.hpp"

namespace sma {

// SMT1 binary tensor format:
//   bytes 0-3  magic "SMT1"
//   byte  4    dtype code (1 = f32, 2 = f64)
//   byte  5    ndim
//   ndim x u32 dims, little endian
//   payload    row-major values, little endian, no padding
//
// Writers are byte-deterministic: identical tensors give identical files.

namespace detail {

template <class S>
constexpr std::uint8_t dtype_code() {
  if constexpr (std::is_same_v<S, float>) return 1;
  else return 2;
}

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

}  // namespace detail

template <class S>
std::string smt_encode(const Tensor<S>& t) {
  std::string buf;
  buf.reserve(6 + 4 * t.ndim() + t.size() * sizeof(S));
  buf += "SMT1";
  buf.push_back(static_cast<char>(detail::dtype_code<S>()));
  buf.push_back(static_cast<char>(t.ndim()));
  for (std::size_t d : t.shape()) detail::put_u32(buf, static_cast<std::uint32_t>(d));
  // assume little-endian host (x86/arm64); payload is memcpy'd
  const char* p = reinterpret_cast<const char*>(t.data().data());
  buf.append(p, p + t.size() * sizeof(S));
  return buf;
}

template <class S>
Tensor<S> smt_decode(const std::string& buf, const std::string& origin = "<buffer>") {
  auto fail = [&](const std::string& what, std::size_t offset) -> Tensor<S> {
    throw format_error("SMT1 " + origin + ": " + what + " at byte offset " +
                       std::to_string(offset));
  };
  if (buf.size() < 6) return fail("truncated header", buf.size());
  if (buf.compare(0, 4, "SMT1") != 0) return fail("bad magic", 0);
  std::uint8_t dtype = static_cast<std::uint8_t>(buf[4]);
  if (dtype != detail::dtype_code<S>())
    return fail("dtype code " + std::to_string(dtype) + " does not match requested scalar type", 4);
  std::size_t ndim = static_cast<std::uint8_t>(buf[5]);
  if (buf.size() < 6 + 4 * ndim) return fail("truncated dims", buf.size());
  Shape shape(ndim);
  for (std::size_t i = 0; i < ndim; ++i) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf[6 + 4 * i + b])) << (8 * b);
    shape[i] = v;
  }
  std::size_t payload_off = 6 + 4 * ndim;
  std::size_t n = numel(shape);
  if (buf.size() != payload_off + n * sizeof(S))
    return fail("payload size mismatch, expected " + std::to_string(n * sizeof(S)) + " bytes",
                buf.size());
  std::vector<S> data(n);
  std::memcpy(data.data(), buf.data() + payload_off, n * sizeof(S));
  return Tensor<S>::from(std::move(shape), std::move(data));
}

template <class S>
void smt_write(const Tensor<S>& t, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw format_error("cannot open " + path.string() + " for writing");
  std::string buf = smt_encode(t);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw format_error("short write to " + path.string());
}

template <class S>
Tensor<S> smt_read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw format_error("cannot open " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return smt_decode<S>(buf, path.filename().string());
}

}  // namespace sma
