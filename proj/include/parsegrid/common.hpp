#pragma once

#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace pg {

using u8 = std::uint8_t;
using i64 = std::int64_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;

// Error taxonomy. Shape/geometry violations, config problems and I/O each
// get their own type so callers can map them to exit codes.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string strf(const char* fmt, ...) {
  va_list ap;
  va_start(ap, fmt);
  char buf[1024];
  vsnprintf(buf, sizeof(buf), fmt, ap);
  va_end(ap);
  return std::string(buf);
}

template <typename E = ShapeError>
inline void check(bool cond, const std::string& msg) {
  if (!cond) throw E(msg);
}

// splitmix64: seed mixer for deriving independent per-sample RNG streams.
inline u64 splitmix64(u64 x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline u64 mix_seed(u64 a, u64 b) { return splitmix64(splitmix64(a) ^ b); }
inline u64 mix_seed(u64 a, u64 b, u64 c) { return splitmix64(mix_seed(a, b) ^ c); }

}  // namespace pg
