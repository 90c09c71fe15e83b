#ifndef CSPEECH_UTIL_COMMON_H_
#define CSPEECH_UTIL_COMMON_H_

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace cspeech {

// Contract violations (bad shapes, bad arguments) and runtime failures
// (IO, numeric blow-ups) are reported with exceptions throughout.
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void check_runtime(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

using Rng = std::mt19937_64;

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent RNG from (seed, stream). Used to give every
// training update / stage its own deterministic stream so that runs can
// be resumed mid-stream and still reproduce bit-identically.
inline Rng make_rng(uint64_t seed, uint64_t stream = 0) {
  return Rng(splitmix64(splitmix64(seed) ^ splitmix64(stream * 0x9e3779b97f4a7c15ULL + 1)));
}

inline uint64_t stream_id(const char* tag) {
  uint64_t h = 1469598103934665603ULL;
  for (const char* p = tag; *p; ++p) {
    h ^= static_cast<uint64_t>(static_cast<unsigned char>(*p));
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace cspeech

#endif  // CSPEECH_UTIL_COMMON_H_
