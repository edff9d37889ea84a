#pragma once

// Image view of a segment: a temporal raster (sensor x event order), a
// floorplan rendering of sensor nodes and transitions, and their side-by-side
// composite.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <utility>
#include <vector>

#include "care/error.hpp"
#include "care/ingest.hpp"
#include "care/preprocess.hpp"

namespace care {

// Channel-major (C,H,W) float image with values in [0,1].
struct Image {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w)
      : channels(c), height(h), width(w), data(c * h * w, 0.0F) {}

  float& at(std::size_t c, std::size_t y, std::size_t x) {
    return data[(c * height + y) * width + x];
  }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

struct Rgb {
  float r = 0.0F, g = 0.0F, b = 0.0F;
};

// Modality hue scaled by intensity: motion blue, door yellow, temperature red.
inline Rgb modality_color(Modality m, float v) {
  switch (m) {
    case Modality::kMotion: return {0.0F, 0.0F, v};
    case Modality::kDoor: return {v, v, 0.0F};
    case Modality::kTemperature: return {v, 0.0F, 0.0F};
    case Modality::kOther: return {v, v, v};
  }
  return {v, v, v};
}

inline void put_rgb(Image& img, std::size_t y, std::size_t x, Rgb c) {
  img.at(0, y, x) = c.r;
  img.at(1, y, x) = c.g;
  img.at(2, y, x) = c.b;
}

struct TemporalImage {
  Image pixels;  // 3 x S x L
};

// Pixel (sensor row, event column) of every real event gets its modality
// color at intensity a_i * (tau_i + 1) / bins.
inline TemporalImage render_temporal_image(const ProcessedSegment& seg,
                                           const SensorRegistry& registry,
                                           std::size_t bins) {
  const std::size_t rows = registry.size();
  const std::size_t cols = seg.events.size();
  if (rows == 0 || cols == 0) throw DataError("temporal image needs sensors and events");
  TemporalImage out{Image(3, rows, cols)};
  for (std::size_t i = 0; i < cols; ++i) {
    if (!seg.mask[i]) continue;
    const BinnedEvent& ev = seg.events[i];
    if (ev.sensor_index >= rows) {
      throw DataError("temporal image: sensor index " + std::to_string(ev.sensor_index) +
                      " out of range");
    }
    const double v = static_cast<double>(ev.signal) * static_cast<double>(ev.tau + 1) /
                     static_cast<double>(bins);
    const float vf = static_cast<float>(std::clamp(v, 0.0, 1.0));
    put_rgb(out.pixels, ev.sensor_index, i, modality_color(registry.at(ev.sensor_index).modality, vf));
  }
  return out;
}

inline constexpr std::size_t kSpatialSide = 256;
inline constexpr double kNodeRadius = 4.0;
inline constexpr float kActivationLevel = 0.5F;

struct SpatialImage {
  Image pixels;                        // 3 x 256 x 256
  std::vector<double> node_frequency;  // f_j / max_k f_k, per sensor index
  std::map<std::pair<std::size_t, std::size_t>, double> edge_weights;  // (j<k) -> w_jk
};

namespace detail {

inline void plot_max(Image& img, long x, long y, float v) {
  if (x < 0 || y < 0 || x >= static_cast<long>(img.width) || y >= static_cast<long>(img.height)) {
    return;
  }
  for (std::size_t c = 0; c < img.channels; ++c) {
    float& p = img.at(c, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
    p = std::max(p, v);
  }
}

// Xiaolin Wu anti-aliased line; pixel centers sit on integer coordinates.
inline void draw_line(Image& img, double x0, double y0, double x1, double y1, float intensity) {
  auto fpart = [](double x) { return x - std::floor(x); };
  auto rfpart = [&](double x) { return 1.0 - fpart(x); };
  const bool steep = std::abs(y1 - y0) > std::abs(x1 - x0);
  if (steep) {
    std::swap(x0, y0);
    std::swap(x1, y1);
  }
  if (x0 > x1) {
    std::swap(x0, x1);
    std::swap(y0, y1);
  }
  auto plot = [&](long a, long b, double cov) {
    const float v = static_cast<float>(intensity * std::clamp(cov, 0.0, 1.0));
    if (steep) {
      plot_max(img, b, a, v);
    } else {
      plot_max(img, a, b, v);
    }
  };
  const double dx = x1 - x0;
  const double gradient = dx == 0.0 ? 1.0 : (y1 - y0) / dx;

  double xend = std::round(x0);
  double yend = y0 + gradient * (xend - x0);
  double xgap = rfpart(x0 + 0.5);
  const long xpxl1 = static_cast<long>(xend);
  const long ypxl1 = static_cast<long>(std::floor(yend));
  plot(xpxl1, ypxl1, rfpart(yend) * xgap);
  plot(xpxl1, ypxl1 + 1, fpart(yend) * xgap);
  double intery = yend + gradient;

  xend = std::round(x1);
  yend = y1 + gradient * (xend - x1);
  xgap = fpart(x1 + 0.5);
  const long xpxl2 = static_cast<long>(xend);
  const long ypxl2 = static_cast<long>(std::floor(yend));
  plot(xpxl2, ypxl2, rfpart(yend) * xgap);
  plot(xpxl2, ypxl2 + 1, fpart(yend) * xgap);

  for (long x = xpxl1 + 1; x < xpxl2; ++x) {
    const long y = static_cast<long>(std::floor(intery));
    plot(x, y, rfpart(intery));
    plot(x, y + 1, fpart(intery));
    intery += gradient;
  }
}

inline void draw_disc(Image& img, Coord center, double radius, Rgb color) {
  const long x0 = static_cast<long>(std::floor(center.u - radius));
  const long x1 = static_cast<long>(std::ceil(center.u + radius));
  const long y0 = static_cast<long>(std::floor(center.v - radius));
  const long y1 = static_cast<long>(std::ceil(center.v + radius));
  for (long y = y0; y <= y1; ++y) {
    for (long x = x0; x <= x1; ++x) {
      if (x < 0 || y < 0 || x >= static_cast<long>(img.width) || y >= static_cast<long>(img.height)) {
        continue;
      }
      const double dx = static_cast<double>(x) + 0.5 - center.u;
      const double dy = static_cast<double>(y) + 0.5 - center.v;
      if (dx * dx + dy * dy <= radius * radius) {
        put_rgb(img, static_cast<std::size_t>(y), static_cast<std::size_t>(x), color);
      }
    }
  }
}

}  // namespace detail

// Nodes at sensor floorplan positions with intensity f~_j; undirected edges
// between consecutive activations with intensity w_jk = c_jk / max c. Only
// activation states count (binary ON/OPEN/PRESENT, temperatures with a
// normalized signal >= 0.5). Node pixels override edge pixels.
inline SpatialImage render_spatial_image(const ProcessedSegment& seg,
                                         const SensorRegistry& registry) {
  SpatialImage out{Image(3, kSpatialSide, kSpatialSide), std::vector<double>(registry.size(), 0.0), {}};
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < seg.events.size(); ++i) {
    if (!seg.mask[i]) continue;
    const BinnedEvent& ev = seg.events[i];
    if (ev.sensor_index >= registry.size()) {
      throw DataError("spatial image: sensor index " + std::to_string(ev.sensor_index) +
                      " missing from registry");
    }
    if (ev.signal >= kActivationLevel) active.push_back(ev.sensor_index);
  }
  if (active.empty()) return out;

  std::vector<std::size_t> counts(registry.size(), 0);
  for (std::size_t s : active) ++counts[s];
  const double max_count = static_cast<double>(*std::max_element(counts.begin(), counts.end()));
  for (std::size_t j = 0; j < counts.size(); ++j) {
    out.node_frequency[j] = static_cast<double>(counts[j]) / max_count;
  }

  std::map<std::pair<std::size_t, std::size_t>, std::size_t> transitions;
  for (std::size_t i = 1; i < active.size(); ++i) {
    const std::size_t a = active[i - 1], b = active[i];
    if (a == b) continue;
    ++transitions[{std::min(a, b), std::max(a, b)}];
  }
  std::size_t max_transition = 0;
  for (const auto& [edge, c] : transitions) max_transition = std::max(max_transition, c);
  for (const auto& [edge, c] : transitions) {
    const double w = static_cast<double>(c) / static_cast<double>(max_transition);
    out.edge_weights[edge] = w;
    const Coord p = registry.at(edge.first).coord;
    const Coord q = registry.at(edge.second).coord;
    detail::draw_line(out.pixels, p.u - 0.5, p.v - 0.5, q.u - 0.5, q.v - 0.5,
                      static_cast<float>(w));
  }

  // Least frequent first so the most frequent node ends on top.
  std::vector<std::size_t> nodes;
  for (std::size_t j = 0; j < counts.size(); ++j) {
    if (counts[j] > 0) nodes.push_back(j);
  }
  std::stable_sort(nodes.begin(), nodes.end(),
                   [&](std::size_t a, std::size_t b) { return counts[a] < counts[b]; });
  for (std::size_t j : nodes) {
    const auto& info = registry.at(j);
    detail::draw_disc(out.pixels, info.coord, kNodeRadius,
                      modality_color(info.modality, static_cast<float>(out.node_frequency[j])));
  }
  return out;
}

struct CompositeImage {
  Image pixels;  // 3 x 256 x 512
};

inline constexpr std::size_t kCompositeHeight = 256;
inline constexpr std::size_t kCompositeWidth = 512;

// Nearest-neighbour resize of the temporal image to 256x256 on the left,
// spatial image on the right.
inline CompositeImage compose_image(const TemporalImage& temporal, const SpatialImage& spatial) {
  const Image& t = temporal.pixels;
  const Image& s = spatial.pixels;
  if (s.height != kSpatialSide || s.width != kSpatialSide || s.channels != 3 || t.channels != 3) {
    throw DataError("compose_image: unexpected input geometry");
  }
  CompositeImage out{Image(3, kCompositeHeight, kCompositeWidth)};
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < kCompositeHeight; ++y) {
      const std::size_t sy = y * t.height / kCompositeHeight;
      for (std::size_t x = 0; x < kSpatialSide; ++x) {
        const std::size_t sx = x * t.width / kSpatialSide;
        out.pixels.at(c, y, x) = t.at(c, sy, sx);
        out.pixels.at(c, y, kSpatialSide + x) = s.at(c, y, x);
      }
    }
  }
  return out;
}

// Block-mean downsampling by an integer factor dividing both sides.
inline Image downsample_mean(const Image& img, std::size_t factor) {
  if (factor == 0 || img.height % factor != 0 || img.width % factor != 0) {
    throw UsageError("downsample factor " + std::to_string(factor) + " does not divide " +
                     std::to_string(img.height) + "x" + std::to_string(img.width));
  }
  if (factor == 1) return img;
  Image out(img.channels, img.height / factor, img.width / factor);
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t y = 0; y < out.height; ++y) {
      for (std::size_t x = 0; x < out.width; ++x) {
        double acc = 0.0;
        for (std::size_t dy = 0; dy < factor; ++dy)
          for (std::size_t dx = 0; dx < factor; ++dx)
            acc += img.at(c, y * factor + dy, x * factor + dx);
        out.at(c, y, x) = static_cast<float>(acc * inv);
      }
    }
  }
  return out;
}

}  // namespace care
