#include <gtest/gtest.h>

#include <random>
#include <set>
#include <sstream>

#include "care/preprocess.hpp"
#include "support/random_segments.hpp"

namespace care {
namespace {

DateTime at(int h, int m, int s) {
  return DateTime{2010, 5, 5, ((h * 60LL + m) * 60 + s) * 1'000'000};
}

SensorEvent event(const std::string& id, const std::string& value, DateTime ts = at(12, 0, 0)) {
  SensorEvent ev;
  ev.timestamp = ts;
  ev.sensor_id = id;
  ev.raw_value = value;
  ev.modality = modality_from_id(id);
  return ev;
}

TEST(BinTime, Examples) {
  EXPECT_EQ(bin_time(at(13, 45, 0), 1.0), 13U);
  EXPECT_EQ(bin_time(at(0, 0, 0), 0.5), 0U);
  EXPECT_EQ(bin_time(at(23, 59, 59), 4.0), 5U);
  EXPECT_EQ(bin_time(at(23, 59, 59), 0.5), 47U);
}

TEST(BinTime, IndependentOfDate) {
  DateTime a = at(7, 30, 0), b = a;
  b.year = 2015;
  b.month = 12;
  b.day = 31;
  for (double w : {0.5, 1.0, 3.0, 4.0}) EXPECT_EQ(bin_time(a, w), bin_time(b, w));
}

TEST(BinTime, BinsPerDay) {
  EXPECT_EQ(bins_per_day(1.0), 24U);
  EXPECT_EQ(bins_per_day(0.5), 48U);
  EXPECT_EQ(bins_per_day(4.0), 6U);
  EXPECT_EQ(bins_per_day(5.0), 5U);  // 24/5 rounds up; last bin is partial
  EXPECT_EQ(bins_per_day(std::nullopt), 1U);
}

TEST(Config, Validation) {
  PreprocessConfig c;
  EXPECT_NO_THROW(c.validate());
  c.theta = 1.0;
  EXPECT_THROW(c.validate(), UsageError);
  c.theta = std::nullopt;
  c.bin_hours = 5.0;
  c.cyclic_bins = true;
  EXPECT_THROW(c.validate(), UsageError);
  c.bin_hours = -1.0;
  c.cyclic_bins = false;
  EXPECT_THROW(c.validate(), UsageError);
  c.bin_hours = 1.0;
  c.fixed_length = 0;
  EXPECT_THROW(c.validate(), UsageError);
}

TEST(Filter, ThresholdExample) {
  std::vector<SensorEvent> events;
  for (int i = 0; i < 8; ++i) events.push_back(event("M1", "ON"));
  for (int i = 0; i < 4; ++i) events.push_back(event("M2", "ON"));
  events.push_back(event("M3", "ON"));
  auto kept = filter_events(events, 0.2);
  EXPECT_EQ(kept.size(), 12U);
  for (const auto& ev : kept) EXPECT_NE(ev.sensor_id, "M3");
  EXPECT_EQ(filter_events(events, 1e-9).size(), 13U);
}

TEST(Filter, TieAtThresholdIsKept) {
  std::vector<SensorEvent> events{event("M1", "ON"), event("M1", "ON"), event("M2", "ON")};
  EXPECT_EQ(filter_events(events, 0.5).size(), 3U);
}

TEST(Filter, PreservesOrderOfSurvivors) {
  std::vector<SensorEvent> events{event("M1", "ON", at(1, 0, 0)), event("M2", "ON", at(1, 0, 1)),
                                  event("M1", "OFF", at(1, 0, 2)), event("M1", "ON", at(1, 0, 3))};
  auto kept = filter_events(events, 0.5);
  ASSERT_EQ(kept.size(), 3U);
  EXPECT_EQ(kept[0], events[0]);
  EXPECT_EQ(kept[1], events[2]);
  EXPECT_EQ(kept[2], events[3]);
}

TEST(Filter, MonotoneAndNeverEmptyOnRandomSegments) {
  std::mt19937_64 rng(21);
  auto world = testing::random_world(rng);
  const double thetas[] = {0.01, 0.05, 0.1, 0.3, 0.5, 0.9, 0.999};
  for (int trial = 0; trial < 500; ++trial) {
    auto seg = testing::random_segment(world, rng);
    std::size_t prev = seg.events.size() + 1;
    std::set<std::string> prev_ids;
    for (double theta : thetas) {
      auto kept = filter_events(seg.events, theta);
      ASSERT_FALSE(kept.empty());
      EXPECT_LE(kept.size(), prev);
      std::set<std::string> ids;
      for (const auto& ev : kept) ids.insert(ev.sensor_id);
      if (!prev_ids.empty()) {
        for (const auto& id : ids) EXPECT_TRUE(prev_ids.count(id));
      }
      prev = kept.size();
      prev_ids = ids;
    }
  }
}

TEST(Normalize, BinaryAndTemperature) {
  EXPECT_EQ(normalize_signal("ON", Modality::kMotion, std::nullopt), 1.0);
  EXPECT_EQ(normalize_signal("CLOSE", Modality::kDoor, std::nullopt), 0.0);
  EXPECT_EQ(normalize_signal("PRESENT", Modality::kOther, std::nullopt), 1.0);
  EXPECT_EQ(normalize_signal("ABSENT", Modality::kOther, std::nullopt), 0.0);
  EXPECT_EQ(normalize_signal("open", Modality::kDoor, std::nullopt), 1.0);
  TemperatureRange r{20.0, 30.0};
  EXPECT_DOUBLE_EQ(normalize_signal("25.0", Modality::kTemperature, r), 0.5);
  EXPECT_DOUBLE_EQ(normalize_signal("35", Modality::kTemperature, r), 1.0);
  EXPECT_DOUBLE_EQ(normalize_signal("-5", Modality::kTemperature, r), 0.0);
  EXPECT_THROW(normalize_signal("25", Modality::kTemperature, std::nullopt), DataError);
  EXPECT_THROW(normalize_signal("warm", Modality::kTemperature, r), DataError);
}

ActivitySegment segment_of(std::vector<SensorEvent> events, std::size_t label = 0) {
  ActivitySegment s;
  s.label = label;
  s.events = std::move(events);
  return s;
}

TEST(FitStats, Ranges) {
  auto r = fit_normalization_stats({segment_of({event("T1", "20"), event("T1", "30"), event("M1", "ON")})});
  ASSERT_TRUE(r.has_value());
  EXPECT_EQ(*r, (TemperatureRange{20.0, 30.0}));
  auto d = fit_normalization_stats({segment_of({event("T1", "21"), event("T1", "21")})});
  ASSERT_TRUE(d.has_value());
  EXPECT_DOUBLE_EQ(d->min, 21.0);
  EXPECT_DOUBLE_EQ(d->max, 21.0 + 1e-6);
  EXPECT_FALSE(fit_normalization_stats({segment_of({event("M1", "ON")})}).has_value());
}

TEST(PadTruncate, Examples) {
  std::vector<BinnedEvent> two{{1, 0, 1.0F}, {2, 1, 0.0F}};
  auto p = pad_truncate(two, 4, 9);
  EXPECT_EQ(p.mask, (std::vector<std::uint8_t>{1, 1, 0, 0}));
  EXPECT_EQ(p.events[2], (BinnedEvent{0, 9, 0.0F}));
  std::vector<BinnedEvent> five(5, BinnedEvent{3, 2, 1.0F});
  five[4].tau = 7;
  auto t = pad_truncate(five, 4, 9);
  EXPECT_EQ(t.mask, (std::vector<std::uint8_t>{1, 1, 1, 1}));
  EXPECT_EQ(t.events, std::vector<BinnedEvent>(five.begin(), five.begin() + 4));
  std::vector<BinnedEvent> four(five.begin(), five.begin() + 4);
  EXPECT_EQ(pad_truncate(four, 4, 9).events, four);
  EXPECT_THROW(pad_truncate(four, 0, 9), UsageError);
}

TEST(PadTruncate, ExactLengthAndMonotoneMaskOnRandomInputs) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = rng() % 50, len = 1 + rng() % 40;
    std::vector<BinnedEvent> ev(n, BinnedEvent{1, 1, 1.0F});
    auto p = pad_truncate(ev, len, 5);
    ASSERT_EQ(p.events.size(), len);
    ASSERT_EQ(p.mask.size(), len);
    std::size_t real = 0;
    for (std::size_t i = 0; i < len; ++i) {
      real += p.mask[i];
      if (i > 0) {
        EXPECT_LE(p.mask[i], p.mask[i - 1]);
      }
    }
    EXPECT_EQ(real, std::min(n, len));
  }
}

TEST(AutoLength, Examples) {
  EXPECT_EQ(resolve_auto_length(std::vector<std::size_t>(10, 10)), 10U);
  std::vector<std::size_t> uniform;
  for (std::size_t i = 1; i <= 100; ++i) uniform.push_back(i);
  EXPECT_EQ(resolve_auto_length(uniform), 95U);
  EXPECT_EQ(resolve_auto_length({2, 3}), 8U);
}

TEST(ProcessSegment, FilterNormalizeBinPad) {
  auto reg = build_sensor_registry(std::vector<std::string>{"M1", "T1", "D1"}, {}).registry;
  std::vector<SensorEvent> ev{event("M1", "ON", at(13, 45, 0)), event("T1", "25", at(14, 0, 0)),
                              event("M1", "OFF", at(23, 59, 59)), event("D1", "OPEN", at(0, 0, 0))};
  PreprocessConfig cfg;
  cfg.theta = 0.6;
  cfg.fixed_length = 3;
  cfg.temperature_range = TemperatureRange{20, 30};
  auto fp = fit_preprocessor({segment_of(ev)}, reg, cfg);
  auto p = process_segment(segment_of(ev, 2), reg, fp);
  EXPECT_EQ(p.label, 2U);
  EXPECT_EQ(p.filtered_length, 2U);  // T1 and D1 have f~ = 0.5 < 0.6
  EXPECT_DOUBLE_EQ(p.kept_fraction, 0.5);
  EXPECT_EQ(p.events[0], (BinnedEvent{13, 0, 1.0F}));
  EXPECT_EQ(p.events[1], (BinnedEvent{23, 0, 0.0F}));
  EXPECT_EQ(p.events[2], (BinnedEvent{0, 3, 0.0F}));
  EXPECT_EQ(p.mask, (std::vector<std::uint8_t>{1, 1, 0}));
}

TEST(ProcessSegment, NoTimeCollapsesBins) {
  auto reg = build_sensor_registry(std::vector<std::string>{"M1"}, {}).registry;
  PreprocessConfig cfg;
  cfg.bin_hours = std::nullopt;
  cfg.theta = std::nullopt;
  cfg.fixed_length = 2;
  auto fp = fit_preprocessor({}, reg, cfg);
  auto p = process_segment(segment_of({event("M1", "ON", at(22, 0, 0))}), reg, fp);
  EXPECT_EQ(p.events[0].tau, 0U);
  EXPECT_EQ(fp.bins(), 1U);
}

TEST(ProcessSegment, AutoLengthUsesFilteredTrainLengths) {
  std::mt19937_64 rng(8);
  auto world = testing::random_world(rng);
  std::vector<ActivitySegment> train;
  for (int i = 0; i < 50; ++i) train.push_back(testing::random_segment(world, rng));
  PreprocessConfig cfg;
  cfg.theta = 0.3;
  auto fp = fit_preprocessor(train, world.registry, cfg);
  std::vector<std::size_t> lengths;
  for (const auto& s : train) lengths.push_back(filter_events(s.events, 0.3).size());
  EXPECT_EQ(fp.length, resolve_auto_length(lengths));
  for (const auto& s : train) {
    auto p = process_segment(s, world.registry, fp);
    EXPECT_EQ(p.events.size(), fp.length);
    for (std::size_t i = 0; i < fp.length; ++i) {
      EXPECT_GE(p.events[i].signal, 0.0F);
      EXPECT_LE(p.events[i].signal, 1.0F);
      EXPECT_LT(p.events[i].tau, fp.bins());
    }
  }
}

TEST(Cache, RoundTripAndDeterminism) {
  std::mt19937_64 rng(9);
  auto world = testing::random_world(rng);
  std::vector<ActivitySegment> raw;
  for (int i = 0; i < 30; ++i) raw.push_back(testing::random_segment(world, rng));
  auto fp = fit_preprocessor(raw, world.registry, {});
  SegmentCache cache{world.registry.size(), fp.length, 4, {}};
  for (const auto& s : raw) cache.segments.push_back(process_segment(s, world.registry, fp));

  std::ostringstream a, b;
  write_segment_cache(a, cache);
  write_segment_cache(b, cache);
  EXPECT_EQ(a.str(), b.str());
  std::istringstream in(a.str());
  SegmentCache back = read_segment_cache(in);
  EXPECT_EQ(back.sensor_count, cache.sensor_count);
  EXPECT_EQ(back.length, cache.length);
  ASSERT_EQ(back.segments.size(), cache.segments.size());
  for (std::size_t i = 0; i < back.segments.size(); ++i) {
    EXPECT_EQ(back.segments[i].events, cache.segments[i].events);
    EXPECT_EQ(back.segments[i].mask, cache.segments[i].mask);
    EXPECT_EQ(back.segments[i].label, cache.segments[i].label);
  }
  std::istringstream cut(a.str().substr(0, a.str().size() - 3));
  try {
    read_segment_cache(cut);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("unexpected EOF"), std::string::npos);
  }
}

}  // namespace
}  // namespace care
