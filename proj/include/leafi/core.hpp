#pragma once

// Series storage, Euclidean distance with early abandoning, synthetic
// RandWalk data, noisy query generation and the binary dataset format.

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "leafi/error.hpp"

namespace leafi {

using Series = std::vector<float>;
using SeriesView = std::span<const float>;
using SeriesId = std::uint32_t;

/// A collection of n equal-length series stored row-major. Series ids are
/// their row positions 0..n-1.
class Dataset {
 public:
  Dataset() = default;

  Dataset(std::size_t n, std::size_t m, std::vector<float> values)
      : n_(n), m_(m), values_(std::move(values)) {
    if (m_ < 2) throw InvalidInput("series length must be >= 2");
    if (values_.size() != n_ * m_)
      throw InvalidInput("dataset payload size does not match n*m");
    for (float v : values_)
      if (!std::isfinite(v)) throw InvalidInput("dataset contains non-finite values");
  }

  std::size_t size() const noexcept { return n_; }
  std::size_t length() const noexcept { return m_; }
  bool empty() const noexcept { return n_ == 0; }

  SeriesView series(std::size_t id) const noexcept {
    return {values_.data() + id * m_, m_};
  }
  SeriesView operator[](std::size_t id) const noexcept { return series(id); }

  std::span<const float> values() const noexcept { return values_; }

  friend bool operator==(const Dataset&, const Dataset&) = default;

 private:
  std::size_t n_ = 0;
  std::size_t m_ = 0;
  std::vector<float> values_;
};

struct QuerySet {
  Dataset queries;
  double noise_level = 0.0;
  std::uint64_t seed = 0;
  std::vector<SeriesId> source_ids;
};

namespace detail {

// Four interleaved 64-bit accumulators; the running sum is checked against
// the cap every 16 points. The accepted total is combined the same way with
// or without a cap, so abandoning never perturbs an accepted value.
inline double squared_distance(const float* a, const float* b, std::size_t m,
                               double cap) noexcept {
  double acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0;
  std::size_t i = 0;
  while (i + 16 <= m) {
    for (std::size_t stop = i + 16; i < stop; i += 4) {
      const double d0 = double(a[i]) - double(b[i]);
      const double d1 = double(a[i + 1]) - double(b[i + 1]);
      const double d2 = double(a[i + 2]) - double(b[i + 2]);
      const double d3 = double(a[i + 3]) - double(b[i + 3]);
      acc0 += d0 * d0;
      acc1 += d1 * d1;
      acc2 += d2 * d2;
      acc3 += d3 * d3;
    }
    const double partial = (acc0 + acc1) + (acc2 + acc3);
    if (partial > cap) return partial;
  }
  for (; i + 4 <= m; i += 4) {
    const double d0 = double(a[i]) - double(b[i]);
    const double d1 = double(a[i + 1]) - double(b[i + 1]);
    const double d2 = double(a[i + 2]) - double(b[i + 2]);
    const double d3 = double(a[i + 3]) - double(b[i + 3]);
    acc0 += d0 * d0;
    acc1 += d1 * d1;
    acc2 += d2 * d2;
    acc3 += d3 * d3;
  }
  for (; i < m; ++i) {
    const double d = double(a[i]) - double(b[i]);
    acc0 += d * d;
  }
  return (acc0 + acc1) + (acc2 + acc3);
}

inline void check_same_length(SeriesView a, SeriesView b) {
  if (a.size() != b.size())
    throw InvalidInput("series length mismatch: " + std::to_string(a.size()) +
                       " vs " + std::to_string(b.size()));
}

}  // namespace detail

/// Squared Euclidean distance; a result above `cap` means "abandoned, > cap".
inline double squared_distance(SeriesView a, SeriesView b,
                               double cap = std::numeric_limits<double>::infinity()) {
  detail::check_same_length(a, b);
  return detail::squared_distance(a.data(), b.data(), a.size(), cap);
}

/// Euclidean distance. With `abandon_at` (a squared-distance cap) returns
/// nullopt once the running squared sum exceeds the cap.
inline std::optional<double> euclidean_distance(
    SeriesView a, SeriesView b, std::optional<double> abandon_at = std::nullopt) {
  detail::check_same_length(a, b);
  const double cap = abandon_at.value_or(std::numeric_limits<double>::infinity());
  if (cap < 0) throw InvalidInput("abandon cap must be >= 0");
  const double sq = detail::squared_distance(a.data(), b.data(), a.size(), cap);
  if (sq > cap) return std::nullopt;
  return std::sqrt(sq);
}

inline double euclidean_distance_exact(SeriesView a, SeriesView b) {
  return *euclidean_distance(a, b);
}

/// Zero mean, unit sample standard deviation, computed in double.
inline std::vector<double> znormalize(std::span<const double> s) {
  if (s.size() < 2) throw InvalidInput("znormalize needs at least 2 values");
  double mean = 0;
  for (double v : s) mean += v;
  mean /= double(s.size());
  double ss = 0;
  for (double v : s) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / double(s.size() - 1));
  if (!(sd > 0)) throw DegenerateInput("constant series cannot be z-normalized");
  std::vector<double> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = (s[i] - mean) / sd;
  return out;
}

inline std::vector<double> znormalize(SeriesView s) {
  std::vector<double> tmp(s.begin(), s.end());
  return znormalize(std::span<const double>(tmp));
}

/// Cumulative sums of i.i.d. N(0,1) steps, z-normalized, stored as binary32.
inline Dataset generate_randwalk(std::size_t n, std::size_t m, std::uint64_t seed) {
  if (n < 1) throw InvalidInput("randwalk needs n >= 1");
  if (m < 2) throw InvalidInput("randwalk needs m >= 2");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> step(0.0, 1.0);
  std::vector<float> values;
  values.reserve(n * m);
  std::vector<double> walk(m);
  for (std::size_t s = 0; s < n; ++s) {
    for (;;) {
      double x = 0;
      for (auto& w : walk) w = (x += step(rng));
      try {
        for (double v : znormalize(std::span<const double>(walk)))
          values.push_back(static_cast<float>(v));
        break;
      } catch (const DegenerateInput&) {
        // Measure-zero event; redraw.
      }
    }
  }
  return Dataset(n, m, std::move(values));
}

/// Independent stream seed for (base, stream, index); splitmix64 finalizer.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream,
                                 std::uint64_t index = 0) noexcept {
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ stream) ^ index);
}

inline constexpr std::uint64_t kDefaultSeed = 42;

/// LEAFI_SEED when set, else `fallback`. A malformed value is an error, not
/// silently ignored.
inline std::uint64_t default_seed(std::uint64_t fallback = kDefaultSeed) {
  const char* env = std::getenv("LEAFI_SEED");
  if (env == nullptr || *env == '\0') return fallback;
  std::uint64_t v = 0;
  const char* end = env + std::strlen(env);
  const auto [ptr, ec] = std::from_chars(env, end, v);
  if (ec != std::errc() || ptr != end)
    throw InvalidInput(std::string("LEAFI_SEED is not an unsigned integer: ") + env);
  return v;
}

namespace detail {

inline void append_noisy(SeriesView src, double level, std::mt19937_64& rng,
                         std::vector<float>& out) {
  if (level == 0.0) {
    out.insert(out.end(), src.begin(), src.end());
    return;
  }
  std::normal_distribution<double> noise(0.0, level);
  for (float v : src) out.push_back(static_cast<float>(double(v) + noise(rng)));
}

}  // namespace detail

/// Uniformly sampled dataset members plus i.i.d. N(0, noise_level^2) noise.
/// Queries are not re-normalized.
inline QuerySet make_queries(const Dataset& src, std::size_t count,
                             double noise_level, std::uint64_t seed) {
  if (src.empty()) throw InvalidInput("cannot sample queries from an empty dataset");
  if (count < 1) throw InvalidInput("query count must be >= 1");
  if (!(noise_level >= 0.0 && noise_level <= 1.0))
    throw InvalidInput("noise level must be within [0, 1]");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, src.size() - 1);
  QuerySet qs;
  qs.noise_level = noise_level;
  qs.seed = seed;
  std::vector<float> values;
  values.reserve(count * src.length());
  for (std::size_t q = 0; q < count; ++q) {
    const auto id = pick(rng);
    qs.source_ids.push_back(static_cast<SeriesId>(id));
    detail::append_noisy(src.series(id), noise_level, rng, values);
  }
  qs.queries = Dataset(count, src.length(), std::move(values));
  return qs;
}

// ---------------------------------------------------------------------------
// Binary format: "LEAF", u32 version, u32 n, u32 m (all LE), then n*m LE f32.

inline constexpr std::array<char, 4> kDatasetMagic = {'L', 'E', 'A', 'F'};
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 16;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
         (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

inline float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace detail

inline std::string encode_dataset(const Dataset& d) {
  std::string out;
  out.reserve(kDatasetHeaderBytes + 4 * d.values().size());
  out.append(kDatasetMagic.data(), 4);
  detail::put_u32(out, kDatasetVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(d.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(d.length()));
  for (float v : d.values()) detail::put_f32(out, v);
  return out;
}

inline Dataset decode_dataset(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kDatasetHeaderBytes)
    throw FormatError("truncated header", bytes.size());
  if (std::memcmp(p, kDatasetMagic.data(), 4) != 0) throw FormatError("bad magic", 0);
  if (detail::get_u32(p + 4) != kDatasetVersion)
    throw FormatError("unsupported version " + std::to_string(detail::get_u32(p + 4)), 4);
  const std::uint64_t n = detail::get_u32(p + 8);
  const std::uint64_t m = detail::get_u32(p + 12);
  if (m < 2) throw FormatError("series length must be >= 2", 12);
  const std::uint64_t expected = kDatasetHeaderBytes + 4 * n * m;
  if (bytes.size() < expected)
    throw FormatError("truncated payload: expected " + std::to_string(expected) +
                          " bytes, found " + std::to_string(bytes.size()),
                      bytes.size());
  if (bytes.size() > expected)
    throw FormatError("trailing bytes after payload", expected);
  std::vector<float> values(n * m);
  for (std::uint64_t i = 0; i < n * m; ++i) {
    values[i] = detail::get_f32(p + kDatasetHeaderBytes + 4 * i);
    if (!std::isfinite(values[i]))
      throw FormatError("non-finite value", kDatasetHeaderBytes + 4 * i);
  }
  return Dataset(n, m, std::move(values));
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  detail::write_file(path, encode_dataset(d));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(detail::read_file(path));
}

}  // namespace leafi
