#pragma once

// Test-time corruptions: sensor malfunctions (readings replaced by the
// modality's resting value) and sensor repositioning (Gaussian jitter of
// floorplan coordinates). Neither touches anything fitted on training data.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "care/error.hpp"
#include "care/ingest.hpp"
#include "care/preprocess.hpp"

namespace care {

struct MalfunctionSpec {
  double segment_pct = 10.0;  // a
  double event_pct = 5.0;     // b
  std::uint64_t seed = 0;

  void validate() const {
    if (!(segment_pct > 0.0 && segment_pct <= 100.0) || !(event_pct > 0.0 && event_pct <= 100.0)) {
      throw UsageError("malfunction percentages must lie in (0,100]");
    }
  }
};

struct RepositionSpec {
  double variance = 10.0;  // squared canvas pixels
  std::uint64_t seed = 0;

  void validate() const {
    if (!(variance > 0.0) || !std::isfinite(variance)) {
      throw UsageError("reposition variance must be > 0");
    }
  }
};

// Resting reading for a modality. Temperatures fall back to the fitted
// training minimum, which normalizes to 0.
inline std::string default_reading(Modality m, const std::optional<TemperatureRange>& range) {
  switch (m) {
    case Modality::kMotion: return "OFF";
    case Modality::kDoor: return "CLOSE";
    case Modality::kTemperature: {
      if (!range) throw DataError("temperature default needs a fitted range");
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", range->min);
      return buf;
    }
    case Modality::kOther: return "ABSENT";
  }
  return "ABSENT";
}

struct MalfunctionResult {
  std::vector<ActivitySegment> segments;
  std::vector<std::size_t> touched_segments;              // sorted
  std::vector<std::vector<std::size_t>> touched_events;  // per touched segment, sorted
};

inline std::size_t round_share(double pct, std::size_t n) {
  return static_cast<std::size_t>(std::llround(pct / 100.0 * static_cast<double>(n)));
}

// round(a% * N) segments are chosen uniformly; in each, round(b% * n) events
// (at least one) are chosen uniformly and their reading replaced. Lengths
// never change.
inline MalfunctionResult corrupt_malfunction(const std::vector<ActivitySegment>& segments,
                                             const MalfunctionSpec& spec,
                                             const std::optional<TemperatureRange>& range) {
  spec.validate();
  MalfunctionResult out;
  out.segments = segments;
  std::mt19937_64 rng(spec.seed);
  std::vector<std::size_t> order(segments.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(round_share(spec.segment_pct, segments.size()), segments.size()));
  std::sort(order.begin(), order.end());
  for (std::size_t s : order) {
    ActivitySegment& seg = out.segments[s];
    const std::size_t n = seg.events.size();
    std::vector<std::size_t> events;
    if (n > 0) {
      const std::size_t k = std::clamp<std::size_t>(round_share(spec.event_pct, n), 1, n);
      std::vector<std::size_t> idx(n);
      for (std::size_t i = 0; i < n; ++i) idx[i] = i;
      std::shuffle(idx.begin(), idx.end(), rng);
      events.assign(idx.begin(), idx.begin() + static_cast<long>(k));
      std::sort(events.begin(), events.end());
      for (std::size_t e : events) {
        seg.events[e].raw_value = default_reading(seg.events[e].modality, range);
      }
    }
    out.touched_segments.push_back(s);
    out.touched_events.push_back(std::move(events));
  }
  return out;
}

struct RepositionResult {
  SensorRegistry registry;
  std::vector<Coord> noise;  // draws before clamping, one per sensor
};

// Largest coordinate kept on the canvas.
inline constexpr double kCanvasMax = kCanvas - 1e-6;

// Independent N(0, variance) offsets on u and v, then clamped to the canvas.
inline RepositionResult perturb_positions(const SensorRegistry& registry, const RepositionSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> noise(0.0, std::sqrt(spec.variance));
  RepositionResult out;
  std::vector<Coord> coords;
  for (const SensorInfo& s : registry.entries()) {
    const Coord d{noise(rng), noise(rng)};
    out.noise.push_back(d);
    coords.push_back(Coord{std::clamp(s.coord.u + d.u, 0.0, kCanvasMax),
                           std::clamp(s.coord.v + d.v, 0.0, kCanvasMax)});
  }
  out.registry = registry.with_coords(coords);
  return out;
}

}  // namespace care
