#pragma once

// Generator for a small CASAS-style smart-home log with class-dependent
// sensor, layout and time-of-day patterns. Used as a learnable fixture by the
// test suite and by `care synth`.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "care/error.hpp"
#include "care/ingest.hpp"

namespace care {

struct SyntheticOptions {
  std::size_t segments = 400;  // split evenly over the classes
  // Share of each segment's events drawn from random sensors regardless of
  // the activity.
  double noise_fraction = 0.0;
  std::size_t min_activity_events = 12;
  std::size_t max_activity_events = 30;
  std::uint64_t seed = 7;
};

struct SyntheticSensor {
  std::string id;
  Coord coord;
};

struct SyntheticClass {
  std::string raw_label;  // as written in the log
  std::string class_name;
  std::vector<std::size_t> sensors;  // indices into the sensor table, first is the anchor
  double start_hour_lo = 0.0;
  double start_hour_hi = 1.0;
};

struct SyntheticFixture {
  std::vector<SyntheticSensor> sensors;
  std::vector<SyntheticClass> classes;
  std::vector<SensorEvent> events;  // the full log, time-ordered
  std::vector<std::size_t> labels;  // one per generated segment, in log order
};

namespace detail {

inline std::vector<SyntheticSensor> synthetic_sensors() {
  return {
      {"M001", {40, 40}},   {"M002", {70, 50}},   {"M003", {55, 80}},    // bedroom
      {"M004", {170, 40}},  {"M005", {200, 45}},  {"M006", {215, 80}},   // kitchen
      {"M007", {180, 120}}, {"M008", {215, 135}},                        // dining
      {"M009", {50, 180}},  {"M010", {90, 200}},  {"M011", {60, 225}},   // living room
      {"M012", {175, 190}}, {"M013", {210, 215}},                        // office
      {"M014", {128, 128}},                                              // hallway
      {"D001", {128, 250}}, {"D002", {190, 170}},                        // entry, office door
      {"T001", {230, 60}},  {"T002", {40, 120}},
  };
}

inline std::vector<SyntheticClass> synthetic_classes() {
  return {
      {"Sleeping", "Sleep", {0, 1, 2, 13, 17}, 0.0, 4.0},
      {"Meal_Preparation", "Cook", {4, 3, 5, 16, 13}, 17.0, 19.0},
      {"Eating", "Eat", {6, 7, 5, 13}, 18.0, 20.0},
      {"Work", "Work", {11, 12, 15, 13}, 9.0, 15.0},
  };
}

inline DateTime add_days(DateTime d, int days) {
  for (int i = 0; i < days; ++i) {
    if (++d.day > days_in_month(d.year, d.month)) {
      d.day = 1;
      if (++d.month > 12) {
        d.month = 1;
        ++d.year;
      }
    }
  }
  return d;
}

inline std::string value_for(const std::string& id, bool on, std::mt19937_64& rng) {
  switch (modality_from_id(id)) {
    case Modality::kMotion: return on ? "ON" : "OFF";
    case Modality::kDoor: return on ? "OPEN" : "CLOSE";
    case Modality::kTemperature: {
      std::uniform_real_distribution<double> t(on ? 24.0 : 18.0, on ? 30.0 : 22.0);
      char buf[16];
      std::snprintf(buf, sizeof buf, "%.1f", t(rng));
      return buf;
    }
    case Modality::kOther: break;
  }
  return on ? "ON" : "OFF";
}

}  // namespace detail

// One activity per day starting 2024-01-01; classes cycle so each gets
// segments / C of them. Within a segment the class's anchor sensor fires
// most often, the others follow a fixed preference order, and each sensor
// alternates active and inactive readings.
inline SyntheticFixture generate_fixture(const SyntheticOptions& opts) {
  if (!(opts.noise_fraction >= 0.0 && opts.noise_fraction < 1.0)) {
    throw UsageError("noise fraction must lie in [0,1)");
  }
  if (opts.min_activity_events < 2 || opts.max_activity_events < opts.min_activity_events) {
    throw UsageError("synthetic event counts must satisfy 2 <= min <= max");
  }
  SyntheticFixture fx;
  fx.sensors = detail::synthetic_sensors();
  fx.classes = detail::synthetic_classes();
  std::mt19937_64 rng(opts.seed);
  std::uniform_int_distribution<std::size_t> count(opts.min_activity_events, opts.max_activity_events);
  std::uniform_int_distribution<std::size_t> any_sensor(0, fx.sensors.size() - 1);
  std::uniform_int_distribution<int> gap_s(5, 90);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const DateTime origin{2024, 1, 1, 0};
  std::vector<bool> state(fx.sensors.size(), false);
  for (std::size_t k = 0; k < opts.segments; ++k) {
    const std::size_t c = k % fx.classes.size();
    const SyntheticClass& cls = fx.classes[c];
    fx.labels.push_back(c);
    DateTime t = detail::add_days(origin, static_cast<int>(k));
    const double start = cls.start_hour_lo + (cls.start_hour_hi - cls.start_hour_lo) * unit(rng);
    t.micros = static_cast<std::int64_t>(start * 3.6e9);

    const std::size_t n_activity = count(rng);
    const auto n_noise = static_cast<std::size_t>(std::llround(
        opts.noise_fraction / (1.0 - opts.noise_fraction) * static_cast<double>(n_activity)));
    // Positions of noise events among all events of the segment.
    std::vector<bool> is_noise(n_activity + n_noise, false);
    for (std::size_t i = 0; i < n_noise; ++i) is_noise[i] = true;
    std::shuffle(is_noise.begin(), is_noise.end(), rng);

    // Preference weights 1, 1/2, 1/3, ... over the class sensors.
    std::vector<double> weights;
    for (std::size_t i = 0; i < cls.sensors.size(); ++i) weights.push_back(1.0 / static_cast<double>(i + 1));
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());

    for (std::size_t e = 0; e < is_noise.size(); ++e) {
      const std::size_t s = is_noise[e] ? any_sensor(rng) : cls.sensors[pick(rng)];
      state[s] = !state[s];
      SensorEvent ev;
      ev.timestamp = t;
      ev.sensor_id = fx.sensors[s].id;
      ev.raw_value = detail::value_for(ev.sensor_id, state[s], rng);
      ev.modality = modality_from_id(ev.sensor_id);
      if (e == 0) ev.annotation = Annotation{cls.raw_label, Marker::kBegin};
      if (e + 1 == is_noise.size()) ev.annotation = Annotation{cls.raw_label, Marker::kEnd};
      fx.events.push_back(std::move(ev));
      t.micros += static_cast<std::int64_t>(gap_s(rng)) * 1'000'000;
      if (t.micros >= DateTime::kMicrosPerDay) t.micros = DateTime::kMicrosPerDay - 1;
    }
  }
  return fx;
}

struct FixturePaths {
  std::string log;
  std::string coords;
  std::string labels;
};

// Writes log.txt, coords.csv and labels.csv into `dir` (created if needed).
inline FixturePaths write_fixture(const SyntheticFixture& fx, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
  FixturePaths p{dir + "/log.txt", dir + "/coords.csv", dir + "/labels.csv"};
  auto open = [](const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write '" + path + "'");
    return os;
  };
  {
    auto os = open(p.log);
    for (const auto& ev : fx.events) os << format_line(ev) << '\n';
  }
  {
    auto os = open(p.coords);
    os << "sensor_id,u,v\n";
    for (const auto& s : fx.sensors) os << s.id << ',' << s.coord.u << ',' << s.coord.v << '\n';
  }
  {
    auto os = open(p.labels);
    os << "raw_label,class_name\n";
    for (const auto& c : fx.classes) os << c.raw_label << ',' << c.class_name << '\n';
  }
  return p;
}

inline LabelMap fixture_label_map(const SyntheticFixture& fx) {
  LabelMap m;
  for (const auto& c : fx.classes) m.add(c.raw_label, c.class_name);
  return m;
}

inline CoordMap fixture_coords(const SyntheticFixture& fx) {
  CoordMap m;
  for (const auto& s : fx.sensors) m[s.id] = s.coord;
  return m;
}

}  // namespace care
