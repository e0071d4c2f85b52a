#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace psieve {

// ---------------------------------------------------------------------------
// Error hierarchy. The CLI maps these onto exit codes.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParameterError : Error {
  using Error::Error;
};

// Malformed or truncated files; the message names the byte offset.
struct FormatError : Error {
  using Error::Error;
};

struct DataError : Error {
  using Error::Error;
};

struct PlanError : Error {
  using Error::Error;
};

struct NumericError : Error {
  using Error::Error;
};

struct PipelineError : Error {
  using Error::Error;
};

struct DegenerateMapError : Error {
  using Error::Error;
};

struct TrainingError : Error {
  using Error::Error;
};

struct ClusteringError : Error {
  using Error::Error;
};

struct PartialStatsError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 both as a stream seeder and as the core
// generator; all distributions are hand-rolled so streams are identical on
// every platform and standard library.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Collapse a list of seed words into one stream id.
inline uint64_t seed_mix(std::initializer_list<uint64_t> words) {
  uint64_t h = 0x243f6a8885a308d3ull;
  for (uint64_t w : words) {
    h ^= w + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    uint64_t s = h;
    h = splitmix64(s);
  }
  return h;
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1).
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, bound). bound > 0.
  uint64_t next_below(uint64_t bound) {
    // 128-bit multiply-shift; bias is < 2^-64 per draw, irrelevant here.
    return uint64_t((static_cast<unsigned __int128>(next_u64()) * bound) >> 64);
  }

  // Uniform in [lo, hi).
  double next_range(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Standard normal via Box-Muller (one value per call; cached pair).
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = next_double();
    double u2 = next_double();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// ---------------------------------------------------------------------------
// Little-endian binary IO on iostreams.
// ---------------------------------------------------------------------------

namespace io {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), std::streamsize(n));
}

inline void write_u8(std::ostream& os, uint8_t v) { write_bytes(os, &v, 1); }

inline void write_u16(std::ostream& os, uint16_t v) {
  uint8_t b[2] = {uint8_t(v), uint8_t(v >> 8)};
  write_bytes(os, b, 2);
}

inline void write_u32(std::ostream& os, uint32_t v) {
  uint8_t b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16), uint8_t(v >> 24)};
  write_bytes(os, b, 4);
}

inline void write_u64(std::ostream& os, uint64_t v) {
  uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = uint8_t(v >> (8 * i));
  write_bytes(os, b, 8);
}

inline void write_f32(std::ostream& os, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  write_u32(os, u);
}

// Readers throw FormatError naming the offset on short reads.

inline void read_bytes(std::istream& is, void* p, size_t n, const char* what) {
  std::streampos at = is.tellg();
  is.read(static_cast<char*>(p), std::streamsize(n));
  if (is.gcount() != std::streamsize(n)) {
    throw FormatError(std::string("truncated file: expected ") + what + " at offset " +
                      std::to_string(long(at)));
  }
}

inline uint8_t read_u8(std::istream& is, const char* what) {
  uint8_t v;
  read_bytes(is, &v, 1, what);
  return v;
}

inline uint16_t read_u16(std::istream& is, const char* what) {
  uint8_t b[2];
  read_bytes(is, b, 2, what);
  return uint16_t(b[0] | (uint16_t(b[1]) << 8));
}

inline uint32_t read_u32(std::istream& is, const char* what) {
  uint8_t b[4];
  read_bytes(is, b, 4, what);
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

inline uint64_t read_u64(std::istream& is, const char* what) {
  uint8_t b[8];
  read_bytes(is, b, 8, what);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
  return v;
}

inline float read_f32(std::istream& is, const char* what) {
  uint32_t u = read_u32(is, what);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

inline void expect_magic(std::istream& is, const char magic[4]) {
  char got[4];
  read_bytes(is, got, 4, "magic");
  if (std::memcmp(got, magic, 4) != 0) {
    throw FormatError(std::string("bad magic at offset 0: expected \"") +
                      std::string(magic, 4) + "\", got \"" + std::string(got, 4) + "\"");
  }
}

inline void expect_version(std::istream& is, uint16_t want) {
  uint16_t got = read_u16(is, "version");
  if (got != want) {
    throw FormatError("unsupported format version " + std::to_string(got) + " at offset 4 (expected " +
                      std::to_string(want) + ")");
  }
}

// Write a file atomically: stage to <path>.tmp, rename on success.
template <typename Fn>
void atomic_write(const std::string& path, Fn&& fn) {
  std::string tmp = path + ".tmp";
  {
    auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open for writing: " + tmp);
    fn(os);
    os.flush();
    if (!os) {
      std::remove(tmp.c_str());
      throw DataError("write failed: " + tmp);
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::remove(tmp.c_str());
    throw DataError("rename failed for " + path + ": " + ec.message());
  }
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  return is;
}

}  // namespace io

// FNV-1a, used for manifests and cache staleness checks.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const uint8_t* p = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open for hashing: " + path);
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof(buf));
    h = fnv1a64(buf, size_t(is.gcount()), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Deterministic parallel loop: fixed chunking per worker, so any reduction
// done per-worker and merged in worker order is reproducible for a given
// thread count; results written once per index are reproducible always.
// ---------------------------------------------------------------------------

inline int& thread_count() {
  static int n = []() {
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw);
  }();
  return n;
}

template <typename Fn>
void parallel_for(int64_t n, Fn&& fn, int threads = 0) {
  if (threads <= 0) threads = thread_count();
  if (threads <= 1 || n <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  const int64_t grain = std::max<int64_t>(1, n / (threads * 8));
  auto worker = [&]() {
    for (;;) {
      int64_t begin = next.fetch_add(grain);
      if (begin >= n) return;
      int64_t end = std::min(n, begin + grain);
      for (int64_t i = begin; i < end; ++i) fn(i);
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(size_t(threads - 1));
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
}

}  // namespace psieve
