#pragma once

// Reading CASAS-style ambient sensor logs: one event per line,
//
//   <YYYY-MM-DD> <HH:MM:SS[.ffffff]> <sensor_id> <value> [<activity> <begin|end>]
//
// segmenting them into labeled activity episodes, and attaching floorplan
// coordinates to every sensor.

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "care/error.hpp"
#include "care/text.hpp"

namespace care {

// Naive local date-time; CASAS logs carry no zone.
struct DateTime {
  int year = 1970;
  int month = 1;
  int day = 1;
  std::int64_t micros = 0;  // since midnight

  static constexpr std::int64_t kMicrosPerDay = 86'400'000'000;

  double hours_of_day() const { return static_cast<double>(micros) / 3.6e9; }

  // Days since 1970-01-01 (proleptic Gregorian).
  std::int64_t days_since_epoch() const {
    const int y = year - (month <= 2 ? 1 : 0);
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned mp = static_cast<unsigned>(month > 2 ? month - 3 : month + 9);
    const unsigned doy = (153 * mp + 2) / 5 + static_cast<unsigned>(day) - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
  }

  std::int64_t total_micros() const { return days_since_epoch() * kMicrosPerDay + micros; }

  friend auto operator<=>(const DateTime& a, const DateTime& b) {
    return std::tie(a.year, a.month, a.day, a.micros) <=>
           std::tie(b.year, b.month, b.day, b.micros);
  }
  friend bool operator==(const DateTime&, const DateTime&) = default;
};

inline double hours_between(const DateTime& from, const DateTime& to) {
  return static_cast<double>(to.total_micros() - from.total_micros()) / 3.6e9;
}

inline int days_in_month(int year, int month) {
  static constexpr int kDays[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  const bool leap = (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
  return month == 2 && leap ? 29 : kDays[month - 1];
}

inline std::optional<DateTime> parse_datetime(std::string_view date, std::string_view time) {
  if (date.size() != 10 || date[4] != '-' || date[7] != '-') return std::nullopt;
  auto y = text::parse_int<int>(date.substr(0, 4));
  auto mo = text::parse_int<int>(date.substr(5, 2));
  auto d = text::parse_int<int>(date.substr(8, 2));
  if (!y || !mo || !d || *mo < 1 || *mo > 12 || *d < 1 || *d > days_in_month(*y, *mo)) {
    return std::nullopt;
  }
  if (time.size() < 8 || time[2] != ':' || time[5] != ':') return std::nullopt;
  auto h = text::parse_int<int>(time.substr(0, 2));
  auto mi = text::parse_int<int>(time.substr(3, 2));
  auto s = text::parse_int<int>(time.substr(6, 2));
  if (!h || !mi || !s || *h > 23 || *mi > 59 || *s > 59 || *h < 0 || *mi < 0 || *s < 0) {
    return std::nullopt;
  }
  std::int64_t frac = 0;
  if (time.size() > 8) {
    if (time[8] != '.' || time.size() == 9) return std::nullopt;
    std::string_view digits = time.substr(9);
    if (digits.size() > 9) return std::nullopt;
    for (std::size_t i = 0; i < 6; ++i) {
      frac *= 10;
      if (i < digits.size()) {
        if (digits[i] < '0' || digits[i] > '9') return std::nullopt;
        frac += digits[i] - '0';
      }
    }
    for (std::size_t i = 6; i < digits.size(); ++i) {
      if (digits[i] < '0' || digits[i] > '9') return std::nullopt;
    }
  }
  DateTime dt{*y, *mo, *d, ((static_cast<std::int64_t>(*h) * 60 + *mi) * 60 + *s) * 1'000'000 + frac};
  return dt;
}

inline std::string format_datetime(const DateTime& dt) {
  const std::int64_t secs = dt.micros / 1'000'000;
  const std::int64_t frac = dt.micros % 1'000'000;
  char buf[48];
  if (frac == 0) {
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02d %02d:%02d:%02d", dt.year, dt.month, dt.day,
                  static_cast<int>(secs / 3600), static_cast<int>(secs / 60 % 60),
                  static_cast<int>(secs % 60));
  } else {
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02d %02d:%02d:%02d.%06d", dt.year, dt.month,
                  dt.day, static_cast<int>(secs / 3600), static_cast<int>(secs / 60 % 60),
                  static_cast<int>(secs % 60), static_cast<int>(frac));
  }
  return buf;
}

enum class Modality { kMotion, kDoor, kTemperature, kOther };

inline Modality modality_from_id(std::string_view sensor_id) {
  if (sensor_id.empty()) return Modality::kOther;
  switch (sensor_id.front()) {
    case 'M': return Modality::kMotion;
    case 'D': return Modality::kDoor;
    case 'T': return Modality::kTemperature;
    default: return Modality::kOther;
  }
}

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::kMotion: return "motion";
    case Modality::kDoor: return "door";
    case Modality::kTemperature: return "temperature";
    case Modality::kOther: return "other";
  }
  return "other";
}

enum class Marker { kBegin, kEnd };

struct Annotation {
  std::string activity;
  Marker marker = Marker::kBegin;
  friend bool operator==(const Annotation&, const Annotation&) = default;
};

struct SensorEvent {
  DateTime timestamp;
  std::string sensor_id;
  std::string raw_value;
  Modality modality = Modality::kOther;
  std::optional<Annotation> annotation;
  friend bool operator==(const SensorEvent&, const SensorEvent&) = default;
};

// Parses one record. Blank and '#' lines yield nullopt; malformed records
// throw ParseError carrying `line_no`.
inline std::optional<SensorEvent> parse_line(std::string_view line, std::size_t line_no) {
  std::string_view body = text::trim(line);
  if (body.empty() || body.front() == '#') return std::nullopt;
  const auto fields = text::split_ws(body);
  if (fields.size() < 4) throw ParseError(line_no, "expected >=4 fields");
  if (fields.size() == 5) {
    throw ParseError(line_no, "activity '" + std::string(fields[4]) +
                                  "' has no begin/end marker");
  }
  if (fields.size() > 6) throw ParseError(line_no, "expected at most 6 fields");
  auto ts = parse_datetime(fields[0], fields[1]);
  if (!ts) {
    throw ParseError(line_no, "malformed timestamp '" + std::string(fields[0]) + " " +
                                  std::string(fields[1]) + "'");
  }
  SensorEvent ev;
  ev.timestamp = *ts;
  ev.sensor_id = std::string(fields[2]);
  ev.raw_value = std::string(fields[3]);
  ev.modality = modality_from_id(ev.sensor_id);
  if (fields.size() == 6) {
    Marker marker;
    if (fields[5] == "begin") {
      marker = Marker::kBegin;
    } else if (fields[5] == "end") {
      marker = Marker::kEnd;
    } else {
      throw ParseError(line_no, "unknown marker '" + std::string(fields[5]) + "'");
    }
    ev.annotation = Annotation{std::string(fields[4]), marker};
  }
  return ev;
}

inline std::string format_line(const SensorEvent& ev) {
  std::string out = format_datetime(ev.timestamp);
  out += ' ';
  out += ev.sensor_id;
  out += ' ';
  out += ev.raw_value;
  if (ev.annotation) {
    out += ' ';
    out += ev.annotation->activity;
    out += ev.annotation->marker == Marker::kBegin ? " begin" : " end";
  }
  return out;
}

struct ParseStats {
  std::size_t lines_read = 0;
  std::size_t skipped = 0;
  std::size_t errored = 0;
};

struct ParseLogOptions {
  // Abort once more malformed lines than this have been seen.
  std::size_t max_error_lines = 100;
};

struct ParsedLog {
  std::vector<SensorEvent> events;
  std::vector<std::string> sensor_ids;  // first-seen order
  ParseStats stats;
  std::vector<std::string> errors;  // one message per malformed line
  bool empty = false;               // warning: no events at all
};

inline ParsedLog parse_log(std::istream& in, const ParseLogOptions& opts = {}) {
  ParsedLog out;
  std::unordered_map<std::string, std::size_t> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    ++out.stats.lines_read;
    try {
      auto ev = parse_line(line, line_no);
      if (!ev) {
        ++out.stats.skipped;
        continue;
      }
      if (!out.events.empty() && ev->timestamp < out.events.back().timestamp) {
        throw ParseError(line_no, "timestamp " + format_datetime(ev->timestamp) +
                                      " precedes the previous event");
      }
      if (seen.emplace(ev->sensor_id, out.sensor_ids.size()).second) {
        out.sensor_ids.push_back(ev->sensor_id);
      }
      out.events.push_back(std::move(*ev));
    } catch (const ParseError& e) {
      ++out.stats.errored;
      out.errors.push_back(e.what());
      if (out.stats.errored > opts.max_error_lines) {
        throw DataError("too many malformed lines (" + std::to_string(out.stats.errored) +
                        "); first: " + out.errors.front());
      }
    }
  }
  out.empty = out.events.empty();
  return out;
}

inline ParsedLog parse_log(const std::string& path, const ParseLogOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open log file '" + path + "'");
  return parse_log(in, opts);
}

// Maps raw activity strings to grouped class ids. Class names keep the order
// of first appearance; the reserved class name DROP discards an activity.
class LabelMap {
 public:
  static constexpr std::string_view kDrop = "DROP";

  LabelMap() = default;

  void add(const std::string& raw, const std::string& class_name) {
    if (class_name == kDrop) {
      mapping_[raw] = std::nullopt;
      return;
    }
    auto it = std::find(classes_.begin(), classes_.end(), class_name);
    std::size_t id = static_cast<std::size_t>(it - classes_.begin());
    if (it == classes_.end()) classes_.push_back(class_name);
    mapping_[raw] = id;
  }

  // Each raw label becomes its own class, in sorted order.
  static LabelMap identity(std::vector<std::string> raw_labels) {
    std::sort(raw_labels.begin(), raw_labels.end());
    raw_labels.erase(std::unique(raw_labels.begin(), raw_labels.end()), raw_labels.end());
    LabelMap m;
    for (const auto& r : raw_labels) m.add(r, r);
    return m;
  }

  static LabelMap from_csv(std::istream& in, const std::string& origin = "label map") {
    LabelMap m;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      std::string_view body = text::trim(line);
      if (body.empty() || body.front() == '#') continue;
      auto cols = text::split(body, ',');
      if (cols.size() != 2 || cols[0].empty() || cols[1].empty()) {
        throw DataError(origin + ": line " + std::to_string(line_no) +
                        ": expected 'raw_label,class_name'");
      }
      if (line_no == 1 && cols[0] == "raw_label" && cols[1] == "class_name") continue;
      m.add(std::string(cols[0]), std::string(cols[1]));
    }
    return m;
  }

  static LabelMap from_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open label map '" + path + "'");
    return from_csv(in, path);
  }

  bool contains(const std::string& raw) const { return mapping_.count(raw) != 0; }

  // Class id, or nullopt when the label is mapped to DROP.
  std::optional<std::size_t> resolve(const std::string& raw) const {
    auto it = mapping_.find(raw);
    if (it == mapping_.end()) throw DataError("activity '" + raw + "' missing from label map");
    return it->second;
  }

  const std::vector<std::string>& classes() const noexcept { return classes_; }
  std::size_t num_classes() const noexcept { return classes_.size(); }

 private:
  std::map<std::string, std::optional<std::size_t>> mapping_;
  std::vector<std::string> classes_;
};

struct ActivitySegment {
  std::size_t label = 0;
  std::string raw_label;
  std::vector<SensorEvent> events;
  std::size_t begin = 0;  // inclusive indices into the parsed event list
  std::size_t end = 0;
};

struct SegmentOptions {
  // Strict mode rejects an `end` without a matching `begin`.
  bool strict = false;
};

struct Segmentation {
  std::vector<ActivitySegment> segments;
  std::vector<std::string> warnings;
};

// Every matched (X begin ... X end) span becomes one segment holding all
// events in the closed span. Spans may nest or overlap; an event then belongs
// to every span enclosing it. Events outside any span are dropped.
inline Segmentation segment_activities(const std::vector<SensorEvent>& events,
                                       const LabelMap& labels,
                                       const SegmentOptions& opts = {}) {
  Segmentation out;
  std::map<std::string, std::vector<std::size_t>> open;
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::vector<std::string> span_labels;
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& ann = events[i].annotation;
    if (!ann) continue;
    if (ann->marker == Marker::kBegin) {
      open[ann->activity].push_back(i);
      continue;
    }
    auto it = open.find(ann->activity);
    if (it == open.end() || it->second.empty()) {
      std::string msg = "'" + ann->activity + " end' at event " + std::to_string(i) +
                        " has no matching begin";
      if (opts.strict) throw DataError(msg);
      out.warnings.push_back(msg + "; dropped");
      continue;
    }
    spans.emplace_back(it->second.back(), i);
    span_labels.push_back(ann->activity);
    it->second.pop_back();
  }
  for (const auto& [activity, starts] : open) {
    for (std::size_t s : starts) {
      out.warnings.push_back("'" + activity + " begin' at event " + std::to_string(s) +
                             " never ends; dropped");
    }
  }
  std::vector<std::size_t> order(spans.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return spans[a] < spans[b]; });
  for (std::size_t k : order) {
    auto cls = labels.resolve(span_labels[k]);
    if (!cls) continue;
    ActivitySegment seg;
    seg.label = *cls;
    seg.raw_label = span_labels[k];
    seg.begin = spans[k].first;
    seg.end = spans[k].second;
    seg.events.assign(events.begin() + static_cast<std::ptrdiff_t>(seg.begin),
                      events.begin() + static_cast<std::ptrdiff_t>(seg.end) + 1);
    out.segments.push_back(std::move(seg));
  }
  return out;
}

// Floorplan canvas side; coordinates live in [0, kCanvas).
inline constexpr double kCanvas = 256.0;

struct Coord {
  double u = 0.0;
  double v = 0.0;
  friend bool operator==(const Coord&, const Coord&) = default;
};

inline void check_coord(const std::string& sensor_id, Coord c) {
  if (!(c.u >= 0.0 && c.u < kCanvas && c.v >= 0.0 && c.v < kCanvas)) {
    throw DataError("sensor " + sensor_id + ": coordinate out of [0,256): (" +
                    std::to_string(c.u) + ", " + std::to_string(c.v) + ")");
  }
}

using CoordMap = std::map<std::string, Coord>;

inline CoordMap load_coords(std::istream& in, const std::string& origin = "coords") {
  CoordMap out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view body = text::trim(line);
    if (body.empty() || body.front() == '#') continue;
    auto cols = text::split(body, ',');
    if (cols.size() != 3) {
      throw DataError(origin + ": line " + std::to_string(line_no) + ": expected 'sensor_id,u,v'");
    }
    auto u = text::parse_double(cols[1]);
    auto v = text::parse_double(cols[2]);
    if (!u || !v) {
      if (line_no == 1) continue;  // header
      throw DataError(origin + ": line " + std::to_string(line_no) + ": non-numeric coordinate");
    }
    std::string id(cols[0]);
    check_coord(id, Coord{*u, *v});
    out[id] = Coord{*u, *v};
  }
  return out;
}

inline CoordMap load_coords(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open coordinates file '" + path + "'");
  return load_coords(in, path);
}

struct SensorInfo {
  std::string id;
  Modality modality = Modality::kOther;
  std::size_t index = 0;
  Coord coord;
};

// Dense sensor indexing 0..S-1 plus floorplan coordinates.
class SensorRegistry {
 public:
  SensorRegistry() = default;

  explicit SensorRegistry(std::vector<SensorInfo> entries) : entries_(std::move(entries)) {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].index != i) throw DataError("registry: indices must be dense");
      check_coord(entries_[i].id, entries_[i].coord);
      if (!by_id_.emplace(entries_[i].id, i).second) {
        throw DataError("registry: duplicate sensor " + entries_[i].id);
      }
    }
  }

  std::size_t size() const noexcept { return entries_.size(); }
  const SensorInfo& at(std::size_t index) const { return entries_.at(index); }
  const std::vector<SensorInfo>& entries() const noexcept { return entries_; }

  std::optional<std::size_t> index_of(const std::string& id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t require(const std::string& id) const {
    auto idx = index_of(id);
    if (!idx) throw DataError("sensor " + id + " missing from registry");
    return *idx;
  }

  SensorRegistry with_coords(const std::vector<Coord>& coords) const {
    if (coords.size() != entries_.size()) throw UsageError("with_coords: size mismatch");
    std::vector<SensorInfo> e = entries_;
    for (std::size_t i = 0; i < e.size(); ++i) e[i].coord = coords[i];
    return SensorRegistry(std::move(e));
  }

 private:
  std::vector<SensorInfo> entries_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

enum class IndexOrder { kFirstSeen, kLexicographic };

// Cell center of a row-major grid over the canvas, used for sensors without
// a surveyed position.
inline Coord fallback_coord(std::size_t index, std::size_t sensor_count) {
  std::size_t side = 1;
  while (side * side < sensor_count) ++side;
  const double cell = kCanvas / static_cast<double>(side);
  return Coord{(static_cast<double>(index % side) + 0.5) * cell,
               (static_cast<double>(index / side) + 0.5) * cell};
}

struct RegistryBuild {
  SensorRegistry registry;
  std::vector<std::string> warnings;
};

inline RegistryBuild build_sensor_registry(std::vector<std::string> sensor_ids,
                                           const CoordMap& coords,
                                           IndexOrder order = IndexOrder::kFirstSeen) {
  if (order == IndexOrder::kLexicographic) std::sort(sensor_ids.begin(), sensor_ids.end());
  RegistryBuild out;
  std::vector<SensorInfo> entries;
  for (std::size_t i = 0; i < sensor_ids.size(); ++i) {
    SensorInfo info{sensor_ids[i], modality_from_id(sensor_ids[i]), i, {}};
    auto it = coords.find(info.id);
    if (it != coords.end()) {
      check_coord(info.id, it->second);
      info.coord = it->second;
    } else {
      info.coord = fallback_coord(i, sensor_ids.size());
      out.warnings.push_back("sensor " + info.id + " has no coordinates; using grid fallback");
    }
    entries.push_back(std::move(info));
  }
  out.registry = SensorRegistry(std::move(entries));
  return out;
}

inline RegistryBuild build_sensor_registry(const std::vector<SensorEvent>& events,
                                           const CoordMap& coords,
                                           IndexOrder order = IndexOrder::kFirstSeen) {
  std::vector<std::string> ids;
  std::unordered_map<std::string, bool> seen;
  for (const auto& ev : events) {
    if (seen.emplace(ev.sensor_id, true).second) ids.push_back(ev.sensor_id);
  }
  return build_sensor_registry(std::move(ids), coords, order);
}

struct DatasetStats {
  std::size_t segment_count = 0;
  std::vector<std::size_t> class_counts;
  std::size_t sensor_count = 0;  // distinct sensors inside segments
  std::map<int, double> length_percentiles;
  double mean_duration_hours = 0.0;
};

// Nearest-rank percentile of an unsorted sample.
inline double nearest_rank_percentile(std::vector<std::size_t> values, double pct) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  auto rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * static_cast<double>(values.size())));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return static_cast<double>(values[rank - 1]);
}

inline DatasetStats dataset_stats(const std::vector<ActivitySegment>& segments,
                                  std::size_t num_classes) {
  DatasetStats st;
  st.segment_count = segments.size();
  st.class_counts.assign(num_classes, 0);
  std::unordered_map<std::string, bool> sensors;
  std::vector<std::size_t> lengths;
  double hours = 0.0;
  for (const auto& seg : segments) {
    if (seg.label >= num_classes) throw DataError("segment label out of range");
    ++st.class_counts[seg.label];
    lengths.push_back(seg.events.size());
    for (const auto& ev : seg.events) sensors.emplace(ev.sensor_id, true);
    if (!seg.events.empty()) {
      hours += hours_between(seg.events.front().timestamp, seg.events.back().timestamp);
    }
  }
  st.sensor_count = sensors.size();
  for (int p : {5, 25, 50, 75, 95}) st.length_percentiles[p] = nearest_rank_percentile(lengths, p);
  st.mean_duration_hours = segments.empty() ? 0.0 : hours / static_cast<double>(segments.size());
  return st;
}

}  // namespace care
