#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace twinforge {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Error taxonomy. The CLI maps the caller-fault bucket to exit code 1 and
// the internal-fault bucket to exit code 2.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ArgumentError : Error { using Error::Error; };        // bad parameter value
struct DimensionError : Error { using Error::Error; };       // shape mismatch
struct ValidationError : Error { using Error::Error; };      // malformed data content
struct SchemaError : Error { using Error::Error; };          // malformed data structure
struct NormalizationError : Error { using Error::Error; };   // degenerate feature range
struct NotFoundError : Error { using Error::Error; };        // unknown id / uri / key
struct AuthorizationError : Error { using Error::Error; };   // caller lacks the role
struct StateError : Error { using Error::Error; };           // operation illegal in current state
struct FormatError : Error { using Error::Error; };          // corrupt or mismatched file

struct NumericError : Error { using Error::Error; };         // non-finite value mid-computation
struct TrainingError : Error { using Error::Error; };        // optimization diverged

// Stable derivation of independent RNG sub-streams from one root seed.
// splitmix64 finalizer over the combined words; identical on every platform.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t x = seed;
  x += 0x9e3779b97f4a7c15ULL * (a + 1);
  x += 0xbf58476d1ce4e5b9ULL * (b + 1);
  x ^= x >> 30; x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27; x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

namespace io {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw FormatError("write failed");
}

inline void read_bytes(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError("unexpected end of file");
}

inline void write_u8(std::ostream& os, std::uint8_t v) { write_bytes(os, &v, 1); }
inline std::uint8_t read_u8(std::istream& is) { std::uint8_t v; read_bytes(is, &v, 1); return v; }

inline void write_u32(std::ostream& os, std::uint32_t v) {
  std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                       static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 24)};
  write_bytes(os, b, 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  std::uint8_t b[4]; read_bytes(is, b, 4);
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}

inline void write_f64(std::ostream& os, double v) {
  std::uint64_t u; std::memcpy(&u, &v, 8);
  std::uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(u >> (8 * i));
  write_bytes(os, b, 8);
}

inline double read_f64(std::istream& is) {
  std::uint8_t b[8]; read_bytes(is, b, 8);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= std::uint64_t(b[i]) << (8 * i);
  double v; std::memcpy(&v, &u, 8);
  return v;
}

inline void write_magic(std::ostream& os, const char m[4]) { write_bytes(os, m, 4); }

inline void expect_magic(std::istream& is, const char m[4], const std::string& what) {
  char got[4]; read_bytes(is, got, 4);
  if (std::memcmp(got, m, 4) != 0) throw FormatError(what + ": bad magic");
}

}  // namespace io
}  // namespace twinforge
