#pragma once

// Per-segment preprocessing for the sequence and image views: time-of-day
// binning, frequency-based event filtering, signal normalization and
// fixed-length padding.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "care/error.hpp"
#include "care/ingest.hpp"
#include "care/text.hpp"

namespace care {

struct TemperatureRange {
  double min = 0.0;
  double max = 1.0;
  friend bool operator==(const TemperatureRange&, const TemperatureRange&) = default;
};

struct PreprocessConfig {
  std::optional<double> bin_hours = 1.0;       // nullopt: no time information
  std::optional<double> theta = 0.01;          // nullopt: filtering off
  std::optional<std::size_t> fixed_length;     // nullopt: resolved from train lengths
  std::optional<TemperatureRange> temperature_range;  // overrides the fitted range
  bool cyclic_bins = false;

  void validate() const {
    if (bin_hours) {
      if (!(*bin_hours > 0.0)) throw UsageError("bin width must be > 0 hours");
      if (cyclic_bins) {
        const double n = 24.0 / *bin_hours;
        if (std::abs(n - std::round(n)) > 1e-9) {
          throw UsageError("cyclic bins need a bin width dividing 24 h");
        }
      }
    }
    if (theta && !(*theta > 0.0 && *theta < 1.0)) {
      throw UsageError("filter threshold must lie in (0,1)");
    }
    if (fixed_length && *fixed_length < 1) throw UsageError("fixed length must be >= 1");
  }
};

inline std::size_t bins_per_day(std::optional<double> bin_hours) {
  if (!bin_hours) return 1;
  return static_cast<std::size_t>(std::ceil(24.0 / *bin_hours - 1e-9));
}

// floor(time-of-day in hours / bin width); the date plays no part.
inline std::size_t bin_time(const DateTime& ts, double bin_hours) {
  return static_cast<std::size_t>(std::floor(ts.hours_of_day() / bin_hours));
}

// Keeps events whose sensor's count, relative to the most frequent sensor in
// the same segment, is at least theta. Survivors keep their relative order.
inline std::vector<SensorEvent> filter_events(const std::vector<SensorEvent>& events,
                                              double theta) {
  std::unordered_map<std::string, std::size_t> counts;
  std::size_t max_count = 0;
  for (const auto& ev : events) max_count = std::max(max_count, ++counts[ev.sensor_id]);
  std::vector<SensorEvent> out;
  out.reserve(events.size());
  for (const auto& ev : events) {
    const double rel = static_cast<double>(counts[ev.sensor_id]) / static_cast<double>(max_count);
    if (rel >= theta) out.push_back(ev);
  }
  return out;
}

inline bool is_on_token(std::string_view v) {
  const std::string u = text::upper(v);
  return u == "ON" || u == "OPEN" || u == "PRESENT";
}

inline bool is_off_token(std::string_view v) {
  const std::string u = text::upper(v);
  return u == "OFF" || u == "CLOSE" || u == "ABSENT";
}

// Binary states map to {0,1}; temperatures are scaled by the fitted range
// and clamped to [0,1].
inline double normalize_signal(std::string_view raw, Modality modality,
                               const std::optional<TemperatureRange>& range) {
  if (modality == Modality::kTemperature) {
    if (!range) throw DataError("temperature reading with no fitted range");
    auto v = text::parse_double(raw);
    if (!v) throw DataError("non-numeric temperature '" + std::string(raw) + "'");
    return std::clamp((*v - range->min) / (range->max - range->min), 0.0, 1.0);
  }
  return is_on_token(raw) ? 1.0 : 0.0;
}

inline constexpr double kDegenerateRangeWidth = 1e-6;

// Min/max over every temperature reading in the given (training) segments.
inline std::optional<TemperatureRange> fit_normalization_stats(
    const std::vector<ActivitySegment>& train) {
  std::optional<TemperatureRange> range;
  for (const auto& seg : train) {
    for (const auto& ev : seg.events) {
      if (ev.modality != Modality::kTemperature) continue;
      auto v = text::parse_double(ev.raw_value);
      if (!v) throw DataError("non-numeric temperature '" + ev.raw_value + "'");
      if (!range) {
        range = TemperatureRange{*v, *v};
      } else {
        range->min = std::min(range->min, *v);
        range->max = std::max(range->max, *v);
      }
    }
  }
  if (range && range->max == range->min) range->max = range->min + kDegenerateRangeWidth;
  return range;
}

struct BinnedEvent {
  std::size_t tau = 0;
  std::size_t sensor_index = 0;
  float signal = 0.0F;
  friend bool operator==(const BinnedEvent&, const BinnedEvent&) = default;
};

struct PaddedEvents {
  std::vector<BinnedEvent> events;
  std::vector<std::uint8_t> mask;
};

// Keeps the first L events (head truncation) or appends pad events with
// sensor index `pad_index`, tau 0 and signal 0.
inline PaddedEvents pad_truncate(const std::vector<BinnedEvent>& events, std::size_t length,
                                 std::size_t pad_index) {
  if (length < 1) throw UsageError("pad_truncate: length must be >= 1");
  PaddedEvents out;
  out.events.reserve(length);
  out.mask.reserve(length);
  for (std::size_t i = 0; i < length; ++i) {
    if (i < events.size()) {
      out.events.push_back(events[i]);
      out.mask.push_back(1);
    } else {
      out.events.push_back(BinnedEvent{0, pad_index, 0.0F});
      out.mask.push_back(0);
    }
  }
  return out;
}

inline constexpr std::size_t kMinAutoLength = 8;

// 95th percentile (nearest rank) of post-filter lengths, at least 8.
inline std::size_t resolve_auto_length(const std::vector<std::size_t>& lengths) {
  const auto p95 = static_cast<std::size_t>(nearest_rank_percentile(lengths, 95.0));
  return std::max(p95, kMinAutoLength);
}

struct ProcessedSegment {
  std::size_t label = 0;
  std::vector<BinnedEvent> events;  // exactly L
  std::vector<std::uint8_t> mask;   // 1 for real events, then 0 for pads
  double kept_fraction = 1.0;
  std::size_t filtered_length = 0;  // before truncation
};

// Everything fitted on the training split and reused unchanged on test data.
struct FittedPreprocessor {
  PreprocessConfig config;
  std::optional<TemperatureRange> temperature_range;
  std::size_t length = kMinAutoLength;
  std::size_t sensor_count = 0;

  std::size_t bins() const { return bins_per_day(config.bin_hours); }
  std::size_t pad_index() const { return sensor_count; }
};

inline std::vector<SensorEvent> apply_filter(const std::vector<SensorEvent>& events,
                                             const PreprocessConfig& cfg) {
  return cfg.theta ? filter_events(events, *cfg.theta) : events;
}

inline FittedPreprocessor fit_preprocessor(const std::vector<ActivitySegment>& train,
                                           const SensorRegistry& registry,
                                           const PreprocessConfig& cfg) {
  cfg.validate();
  FittedPreprocessor fp;
  fp.config = cfg;
  fp.sensor_count = registry.size();
  fp.temperature_range = cfg.temperature_range ? cfg.temperature_range
                                               : fit_normalization_stats(train);
  if (cfg.fixed_length) {
    fp.length = *cfg.fixed_length;
  } else {
    std::vector<std::size_t> lengths;
    lengths.reserve(train.size());
    for (const auto& seg : train) lengths.push_back(apply_filter(seg.events, cfg).size());
    fp.length = resolve_auto_length(lengths);
  }
  return fp;
}

// filter -> normalize -> bin -> pad/truncate
inline ProcessedSegment process_segment(const ActivitySegment& seg, const SensorRegistry& registry,
                                        const FittedPreprocessor& fp) {
  if (seg.events.empty()) throw DataError("cannot process an empty segment");
  const std::vector<SensorEvent> kept = apply_filter(seg.events, fp.config);
  std::vector<BinnedEvent> binned;
  binned.reserve(kept.size());
  for (const auto& ev : kept) {
    BinnedEvent b;
    b.sensor_index = registry.require(ev.sensor_id);
    b.tau = fp.config.bin_hours ? std::min(bin_time(ev.timestamp, *fp.config.bin_hours),
                                           fp.bins() - 1)
                                : 0;
    b.signal = static_cast<float>(
        normalize_signal(ev.raw_value, registry.at(b.sensor_index).modality,
                         fp.temperature_range));
    binned.push_back(b);
  }
  PaddedEvents padded = pad_truncate(binned, fp.length, fp.pad_index());
  ProcessedSegment out;
  out.label = seg.label;
  out.events = std::move(padded.events);
  out.mask = std::move(padded.mask);
  out.filtered_length = kept.size();
  out.kept_fraction = static_cast<double>(kept.size()) / static_cast<double>(seg.events.size());
  return out;
}

// ---------------------------------------------------------------------------
// Cached segment file. Little-endian:
//   "CAREP1" | u32 S | u32 L | u32 C | u32 count
//   per segment: u16 label | ceil(L/8) mask bytes (LSB first)
//                | L x (u16 sensor_index, u16 tau, f32 signal)

struct SegmentCache {
  std::size_t sensor_count = 0;
  std::size_t length = 0;
  std::size_t num_classes = 0;
  std::vector<ProcessedSegment> segments;
};

namespace detail {

inline void put_u16(std::ostream& os, std::uint32_t v) {
  const char b[2] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF)};
  os.write(b, 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

inline void put_f32(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(os, bits);
}

inline void read_exact(std::istream& is, char* dst, std::size_t n) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw DataError("unexpected EOF");
}

inline std::uint32_t get_u16(std::istream& is) {
  unsigned char b[2];
  read_exact(is, reinterpret_cast<char*>(b), 2);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  read_exact(is, reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline float get_f32(std::istream& is) {
  const std::uint32_t bits = get_u32(is);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline std::uint32_t checked_u16(std::size_t v, const char* what) {
  if (v > 0xFFFF) throw DataError(std::string(what) + " does not fit in u16");
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

inline constexpr std::string_view kCacheMagic = "CAREP1";

inline void write_segment_cache(std::ostream& os, const SegmentCache& cache) {
  os.write(kCacheMagic.data(), static_cast<std::streamsize>(kCacheMagic.size()));
  detail::put_u32(os, static_cast<std::uint32_t>(cache.sensor_count));
  detail::put_u32(os, static_cast<std::uint32_t>(cache.length));
  detail::put_u32(os, static_cast<std::uint32_t>(cache.num_classes));
  detail::put_u32(os, static_cast<std::uint32_t>(cache.segments.size()));
  const std::size_t mask_bytes = (cache.length + 7) / 8;
  for (const auto& seg : cache.segments) {
    if (seg.events.size() != cache.length || seg.mask.size() != cache.length) {
      throw DataError("cache: segment length differs from header L");
    }
    detail::put_u16(os, detail::checked_u16(seg.label, "label"));
    std::vector<char> bits(mask_bytes, 0);
    for (std::size_t i = 0; i < cache.length; ++i) {
      if (seg.mask[i]) bits[i / 8] = static_cast<char>(bits[i / 8] | (1 << (i % 8)));
    }
    os.write(bits.data(), static_cast<std::streamsize>(bits.size()));
    for (const auto& ev : seg.events) {
      detail::put_u16(os, detail::checked_u16(ev.sensor_index, "sensor index"));
      detail::put_u16(os, detail::checked_u16(ev.tau, "time bin"));
      detail::put_f32(os, ev.signal);
    }
  }
  if (!os) throw IoError("cache: write failed");
}

inline SegmentCache read_segment_cache(std::istream& is) {
  char magic[6];
  detail::read_exact(is, magic, 6);
  if (std::string_view(magic, 6) != kCacheMagic) throw DataError("cache: bad magic");
  SegmentCache cache;
  cache.sensor_count = detail::get_u32(is);
  cache.length = detail::get_u32(is);
  cache.num_classes = detail::get_u32(is);
  const std::size_t count = detail::get_u32(is);
  const std::size_t mask_bytes = (cache.length + 7) / 8;
  for (std::size_t s = 0; s < count; ++s) {
    ProcessedSegment seg;
    seg.label = detail::get_u16(is);
    std::vector<char> bits(mask_bytes);
    detail::read_exact(is, bits.data(), mask_bytes);
    std::size_t real = 0;
    for (std::size_t i = 0; i < cache.length; ++i) {
      const std::uint8_t m = (static_cast<unsigned char>(bits[i / 8]) >> (i % 8)) & 1U;
      seg.mask.push_back(m);
      real += m;
    }
    for (std::size_t i = 0; i < cache.length; ++i) {
      BinnedEvent ev;
      ev.sensor_index = detail::get_u16(is);
      ev.tau = detail::get_u16(is);
      ev.signal = detail::get_f32(is);
      seg.events.push_back(ev);
    }
    seg.filtered_length = real;
    seg.kept_fraction = 1.0;
    cache.segments.push_back(std::move(seg));
  }
  return cache;
}

inline void write_segment_cache(const std::string& path, const SegmentCache& cache) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write cache '" + path + "'");
  write_segment_cache(os, cache);
}

inline SegmentCache read_segment_cache(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open cache '" + path + "'");
  return read_segment_cache(is);
}

}  // namespace care
