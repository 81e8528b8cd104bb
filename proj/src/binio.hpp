#pragma once

// Little-endian binary IO helpers shared by the checkpoint and encoding-file
// writers. The build targets little-endian hosts; values are memcpy'd as-is.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ncv/tensor.hpp"

namespace ncv::binio {

template <typename T>
void write_pod(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw RuntimeError("unexpected end of file while reading binary record");
  }
  return v;
}

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& is, void* p, std::size_t n) {
  if (!is.read(static_cast<char*>(p), static_cast<std::streamsize>(n))) {
    throw RuntimeError("unexpected end of file while reading binary record");
  }
}

inline void write_doubles(std::ostream& os, const double* p, std::size_t n) {
  write_bytes(os, p, n * sizeof(double));
}

inline void read_doubles(std::istream& is, double* p, std::size_t n) {
  read_bytes(is, p, n * sizeof(double));
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw RuntimeError("cannot open '" + path + "' for writing");
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeError("cannot open '" + path + "' for reading");
  return is;
}

}  // namespace ncv::binio
