#pragma once

// Little-endian binary helpers shared by the latent container and the mapper
// checkpoint. Internal to the library.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "latentedit/error.hpp"

namespace latentedit::binio {

static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");

template <class T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void put_doubles(std::ostream& out, const std::vector<double>& v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

template <class T>
T get(std::istream& in, const char* what) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw CorruptFileError(std::string("truncated file while reading ") + what);
  }
  return value;
}

inline std::string get_string(std::istream& in, const char* what, std::uint32_t max_len = 1u << 24) {
  auto n = get<std::uint32_t>(in, what);
  if (n > max_len) throw CorruptFileError(std::string("implausible string length for ") + what);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (in.gcount() != static_cast<std::streamsize>(n)) {
    throw CorruptFileError(std::string("truncated file while reading ") + what);
  }
  return s;
}

inline std::vector<double> get_doubles(std::istream& in, std::size_t count, const char* what) {
  std::vector<double> v(count);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(count * sizeof(double))) {
    throw CorruptFileError(std::string("truncated file while reading ") + what);
  }
  return v;
}

}  // namespace latentedit::binio
