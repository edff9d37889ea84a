#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "care/error.hpp"
#include "care/preprocess.hpp"

namespace care {

// How the time bin enters each event row.
enum class TimeEncoding {
  kScaled,  // tau / (bins - 1), one column
  kRaw,     // tau as an unscaled integer, one column
  kOneHot,  // one column per bin
  kNone,    // one column held at zero (the no-time ablation)
};

struct SequenceLayout {
  std::size_t sensor_count = 0;  // S; the pad slot is index S
  std::size_t bins = 1;
  TimeEncoding time = TimeEncoding::kScaled;

  std::size_t time_width() const { return time == TimeEncoding::kOneHot ? bins : 1; }
  std::size_t width() const { return (sensor_count + 1) + time_width() + 1; }
  std::size_t time_column() const { return sensor_count + 1; }
  std::size_t signal_column() const { return width() - 1; }
};

// L x D rows, one per event: [one-hot sensor incl. pad | time | signal].
struct SequenceTensor {
  std::size_t length = 0;
  std::size_t width = 0;
  std::vector<float> data;
  std::vector<std::uint8_t> mask;

  float at(std::size_t row, std::size_t col) const { return data[row * width + col]; }
  friend bool operator==(const SequenceTensor&, const SequenceTensor&) = default;
};

inline void encode_event_into(const BinnedEvent& ev, const SequenceLayout& layout, float* row) {
  if (ev.sensor_index > layout.sensor_count) {
    throw DataError("encode_event: sensor index " + std::to_string(ev.sensor_index) +
                    " exceeds pad slot " + std::to_string(layout.sensor_count));
  }
  const std::size_t d = layout.width();
  std::fill(row, row + d, 0.0F);
  row[ev.sensor_index] = 1.0F;
  const bool pad = ev.sensor_index == layout.sensor_count;
  if (!pad) {
    const std::size_t tc = layout.time_column();
    switch (layout.time) {
      case TimeEncoding::kScaled:
        row[tc] = layout.bins > 1 ? static_cast<float>(static_cast<double>(ev.tau) /
                                                       static_cast<double>(layout.bins - 1))
                                  : 0.0F;
        break;
      case TimeEncoding::kRaw:
        row[tc] = static_cast<float>(ev.tau);
        break;
      case TimeEncoding::kOneHot:
        if (ev.tau >= layout.bins) throw DataError("encode_event: time bin out of range");
        row[tc + ev.tau] = 1.0F;
        break;
      case TimeEncoding::kNone:
        break;
    }
  }
  row[layout.signal_column()] = ev.signal;
}

inline std::vector<float> encode_event(const BinnedEvent& ev, const SequenceLayout& layout) {
  std::vector<float> row(layout.width());
  encode_event_into(ev, layout, row.data());
  return row;
}

inline SequenceTensor build_sequence_tensor(const ProcessedSegment& seg,
                                            const SequenceLayout& layout,
                                            std::size_t expected_length) {
  if (seg.events.size() != expected_length || seg.mask.size() != expected_length) {
    throw DataError("build_sequence_tensor: segment has " + std::to_string(seg.events.size()) +
                    " events, expected " + std::to_string(expected_length));
  }
  SequenceTensor t;
  t.length = expected_length;
  t.width = layout.width();
  t.data.resize(t.length * t.width);
  for (std::size_t i = 0; i < t.length; ++i) {
    encode_event_into(seg.events[i], layout, t.data.data() + i * t.width);
  }
  t.mask = seg.mask;
  return t;
}

}  // namespace care
