#pragma once

// Run configuration, dataset preparation, per-seed train/evaluate runs,
// corruption runs, sweeps and report writers. Everything the CLI does lives
// here so tests can drive it without spawning processes.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "care/error.hpp"
#include "care/img_repr.hpp"
#include "care/ingest.hpp"
#include "care/model.hpp"
#include "care/objective.hpp"
#include "care/preprocess.hpp"
#include "care/robustness.hpp"
#include "care/seq_repr.hpp"
#include "care/train.hpp"

namespace care {

using Json = nlohmann::ordered_json;

enum class RunMode { kCross, kWithin, kUniSeq, kUniImg };

inline const char* run_mode_name(RunMode m) {
  switch (m) {
    case RunMode::kCross: return "cross";
    case RunMode::kWithin: return "within";
    case RunMode::kUniSeq: return "uni-seq";
    case RunMode::kUniImg: return "uni-img";
  }
  return "cross";
}

inline RunMode parse_run_mode(const std::string& s) {
  for (RunMode m : {RunMode::kCross, RunMode::kWithin, RunMode::kUniSeq, RunMode::kUniImg}) {
    if (s == run_mode_name(m)) return m;
  }
  throw UsageError("unknown mode '" + s + "' (expected cross|within|uni-seq|uni-img)");
}

struct DataPaths {
  std::string log;
  std::string coords;
  std::string labels;
  IndexOrder order = IndexOrder::kFirstSeen;
};

struct RunConfig {
  DataPaths data;
  PreprocessConfig preprocess;
  TimeEncoding time_encoding = TimeEncoding::kScaled;
  // num_classes, input_dim, views and seed are filled in per run.
  ModelConfig model;
  ContrastiveConfig contrastive;
  TrainConfig train;
  RunMode mode = RunMode::kCross;
  std::string output_dir = "care_out";

  void validate() const {
    preprocess.validate();
    contrastive.validate();
    train.validate();
    ModelConfig probe = model;
    probe.num_classes = std::max<std::size_t>(probe.num_classes, 2);
    probe.input_dim = std::max<std::size_t>(probe.input_dim, 1);
    probe.validate();
  }
};

// Short label for reports. beta = 0 with both views is plain CE on the fused
// representation.
inline std::string run_tag(RunMode mode, double beta) {
  switch (mode) {
    case RunMode::kUniSeq: return "uni_seq";
    case RunMode::kUniImg: return "uni_img";
    case RunMode::kWithin: return beta == 0.0 ? "naive_ce_fusion" : "within_view";
    case RunMode::kCross: return beta == 0.0 ? "naive_ce_fusion" : "cross_view";
  }
  return "cross_view";
}

inline Views views_for(RunMode m) {
  switch (m) {
    case RunMode::kUniSeq: return Views::kSequence;
    case RunMode::kUniImg: return Views::kImage;
    default: return Views::kBoth;
  }
}

inline ContrastiveConfig resolve_contrastive(const RunConfig& cfg) {
  ContrastiveConfig cc = cfg.contrastive;
  switch (cfg.mode) {
    case RunMode::kCross: cc.mode = ContrastiveMode::kCrossView; break;
    case RunMode::kWithin: cc.mode = ContrastiveMode::kWithinView; break;
    default:
      cc.mode = ContrastiveMode::kOff;
      cc.beta = 0.0;
  }
  return cc;
}

// ---------------------------------------------------------------------------
// JSON config

namespace detail {

inline const char* time_encoding_name(TimeEncoding t) {
  switch (t) {
    case TimeEncoding::kScaled: return "scaled";
    case TimeEncoding::kRaw: return "raw";
    case TimeEncoding::kOneHot: return "one_hot";
    case TimeEncoding::kNone: return "none";
  }
  return "scaled";
}

inline TimeEncoding parse_time_encoding(const std::string& s) {
  for (TimeEncoding t : {TimeEncoding::kScaled, TimeEncoding::kRaw, TimeEncoding::kOneHot,
                         TimeEncoding::kNone}) {
    if (s == time_encoding_name(t)) return t;
  }
  throw UsageError("unknown time_encoding '" + s + "'");
}

inline void reject_unknown(const Json& obj, const std::string& where,
                           std::initializer_list<const char*> known) {
  if (!obj.is_object()) throw UsageError("config: '" + where + "' must be an object");
  std::set<std::string> ok(known.begin(), known.end());
  for (const auto& [key, value] : obj.items()) {
    if (!ok.count(key)) {
      throw UsageError("config: unknown key '" + (where.empty() ? key : where + "." + key) + "'");
    }
  }
}

// null or "off" means disabled.
inline std::optional<double> optional_number(const Json& v) {
  if (v.is_null() || (v.is_string() && v.get<std::string>() == "off")) return std::nullopt;
  return v.get<double>();
}

inline Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

}  // namespace detail

inline Json to_json(const RunConfig& c) {
  Json j;
  j["data"] = {{"log", c.data.log},
               {"coords", c.data.coords},
               {"labels", c.data.labels},
               {"sensor_order", c.data.order == IndexOrder::kFirstSeen ? "first_seen" : "lexicographic"}};
  const auto& p = c.preprocess;
  j["preprocess"] = {
      {"bin_hours", detail::optional_json(p.bin_hours)},
      {"theta", detail::optional_json(p.theta)},
      {"fixed_length", p.fixed_length ? Json(*p.fixed_length) : Json(nullptr)},
      {"temperature_range", p.temperature_range
                                ? Json{{"min", p.temperature_range->min}, {"max", p.temperature_range->max}}
                                : Json(nullptr)},
      {"cyclic_bins", p.cyclic_bins},
      {"time_encoding", detail::time_encoding_name(c.time_encoding)}};
  const auto& m = c.model;
  j["model"] = {{"seq_kind", m.seq_kind == SeqEncoderKind::kBiLstm ? "bilstm" : "lstm"},
                {"seq_hidden", m.seq_hidden},
                {"img_widths", m.img_widths},
                {"blocks_per_stage", m.blocks_per_stage},
                {"img_input_pool", m.img_input_pool},
                {"repr_dim", m.repr_dim},
                {"proj_dim", m.proj_dim},
                {"cls_hidden", m.cls_hidden}};
  j["contrastive"] = {{"temperature", c.contrastive.temperature}, {"beta", c.contrastive.beta}};
  const auto& t = c.train;
  j["train"] = {{"batch_size", t.batch_size},
                {"max_epochs", t.max_epochs},
                {"patience", t.patience},
                {"optimizer", optimizer_name(t.optimizer)},
                {"learning_rate", t.learning_rate},
                {"momentum", t.momentum},
                {"seeds", t.seeds},
                {"train_fraction", t.train_fraction},
                {"valid_fraction", t.valid_fraction},
                {"folds", t.folds},
                {"averaging", t.averaging == Averaging::kWeighted ? "weighted" : "macro"}};
  j["mode"] = run_mode_name(c.mode);
  j["output_dir"] = c.output_dir;
  return j;
}

// Fills `c` from `j`; absent keys keep their current values.
inline RunConfig run_config_from_json(const Json& j, RunConfig c = {}) {
  try {
    detail::reject_unknown(j, "", {"data", "preprocess", "model", "contrastive", "train", "mode",
                                   "output_dir"});
    if (j.contains("data")) {
      const Json& d = j["data"];
      detail::reject_unknown(d, "data", {"log", "coords", "labels", "sensor_order"});
      if (d.contains("log")) c.data.log = d["log"].get<std::string>();
      if (d.contains("coords")) c.data.coords = d["coords"].get<std::string>();
      if (d.contains("labels")) c.data.labels = d["labels"].get<std::string>();
      if (d.contains("sensor_order")) {
        const auto s = d["sensor_order"].get<std::string>();
        if (s == "first_seen") c.data.order = IndexOrder::kFirstSeen;
        else if (s == "lexicographic") c.data.order = IndexOrder::kLexicographic;
        else throw UsageError("config: sensor_order must be first_seen or lexicographic");
      }
    }
    if (j.contains("preprocess")) {
      const Json& p = j["preprocess"];
      detail::reject_unknown(p, "preprocess", {"bin_hours", "theta", "fixed_length", "temperature_range",
                                               "cyclic_bins", "time_encoding"});
      if (p.contains("bin_hours")) c.preprocess.bin_hours = detail::optional_number(p["bin_hours"]);
      if (p.contains("theta")) c.preprocess.theta = detail::optional_number(p["theta"]);
      if (p.contains("fixed_length")) {
        if (p["fixed_length"].is_null()) c.preprocess.fixed_length.reset();
        else c.preprocess.fixed_length = p["fixed_length"].get<std::size_t>();
      }
      if (p.contains("temperature_range")) {
        const Json& r = p["temperature_range"];
        if (r.is_null()) {
          c.preprocess.temperature_range.reset();
        } else {
          detail::reject_unknown(r, "preprocess.temperature_range", {"min", "max"});
          c.preprocess.temperature_range = TemperatureRange{r.at("min").get<double>(), r.at("max").get<double>()};
        }
      }
      if (p.contains("cyclic_bins")) c.preprocess.cyclic_bins = p["cyclic_bins"].get<bool>();
      if (p.contains("time_encoding")) {
        c.time_encoding = detail::parse_time_encoding(p["time_encoding"].get<std::string>());
      }
    }
    if (j.contains("model")) {
      const Json& m = j["model"];
      detail::reject_unknown(m, "model", {"seq_kind", "seq_hidden", "img_widths", "blocks_per_stage",
                                          "img_input_pool", "repr_dim", "proj_dim", "cls_hidden"});
      if (m.contains("seq_kind")) {
        const auto s = m["seq_kind"].get<std::string>();
        if (s == "bilstm") c.model.seq_kind = SeqEncoderKind::kBiLstm;
        else if (s == "lstm") c.model.seq_kind = SeqEncoderKind::kLstm;
        else throw UsageError("config: model.seq_kind must be lstm or bilstm");
      }
      if (m.contains("seq_hidden")) c.model.seq_hidden = m["seq_hidden"].get<std::size_t>();
      if (m.contains("img_widths")) c.model.img_widths = m["img_widths"].get<std::vector<std::size_t>>();
      if (m.contains("blocks_per_stage")) c.model.blocks_per_stage = m["blocks_per_stage"].get<std::size_t>();
      if (m.contains("img_input_pool")) c.model.img_input_pool = m["img_input_pool"].get<std::size_t>();
      if (m.contains("repr_dim")) c.model.repr_dim = m["repr_dim"].get<std::size_t>();
      if (m.contains("proj_dim")) c.model.proj_dim = m["proj_dim"].get<std::size_t>();
      if (m.contains("cls_hidden")) c.model.cls_hidden = m["cls_hidden"].get<std::size_t>();
    }
    if (j.contains("contrastive")) {
      const Json& k = j["contrastive"];
      detail::reject_unknown(k, "contrastive", {"temperature", "beta"});
      if (k.contains("temperature")) c.contrastive.temperature = k["temperature"].get<double>();
      if (k.contains("beta")) c.contrastive.beta = k["beta"].get<double>();
    }
    if (j.contains("train")) {
      const Json& t = j["train"];
      detail::reject_unknown(t, "train", {"batch_size", "max_epochs", "patience", "optimizer",
                                          "learning_rate", "momentum", "seeds", "train_fraction",
                                          "valid_fraction", "folds", "averaging"});
      if (t.contains("batch_size")) c.train.batch_size = t["batch_size"].get<std::size_t>();
      if (t.contains("max_epochs")) c.train.max_epochs = t["max_epochs"].get<std::size_t>();
      if (t.contains("patience")) c.train.patience = t["patience"].get<std::size_t>();
      if (t.contains("optimizer")) {
        const auto s = t["optimizer"].get<std::string>();
        if (s == "adam") c.train.optimizer = OptimizerKind::kAdam;
        else if (s == "sgd_momentum") c.train.optimizer = OptimizerKind::kSgdMomentum;
        else throw UsageError("config: train.optimizer must be adam or sgd_momentum");
      }
      if (t.contains("learning_rate")) c.train.learning_rate = t["learning_rate"].get<double>();
      if (t.contains("momentum")) c.train.momentum = t["momentum"].get<double>();
      if (t.contains("seeds")) c.train.seeds = t["seeds"].get<std::vector<std::uint64_t>>();
      if (t.contains("train_fraction")) c.train.train_fraction = t["train_fraction"].get<double>();
      if (t.contains("valid_fraction")) c.train.valid_fraction = t["valid_fraction"].get<double>();
      if (t.contains("folds")) c.train.folds = t["folds"].get<std::size_t>();
      if (t.contains("averaging")) {
        const auto s = t["averaging"].get<std::string>();
        if (s == "weighted") c.train.averaging = Averaging::kWeighted;
        else if (s == "macro") c.train.averaging = Averaging::kMacro;
        else throw UsageError("config: train.averaging must be weighted or macro");
      }
    }
    if (j.contains("mode")) c.mode = parse_run_mode(j["mode"].get<std::string>());
    if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

// Relative data and output paths resolve against the config file's directory.
inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config '" + path + "': " + e.what());
  }
  RunConfig c = run_config_from_json(j);
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  for (std::string* p : {&c.data.log, &c.data.coords, &c.data.labels, &c.output_dir}) {
    if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  }
  return c;
}

inline void check_data_paths(const DataPaths& d) {
  const std::pair<const char*, const std::string*> files[] = {
      {"log", &d.log}, {"coords", &d.coords}, {"labels", &d.labels}};
  for (const auto& [what, path] : files) {
    if (path->empty()) throw UsageError(std::string("config: data.") + what + " is not set");
    if (!std::filesystem::is_regular_file(*path)) {
      throw IoError(std::string(what) + " file '" + *path + "' does not exist");
    }
  }
}

// ---------------------------------------------------------------------------
// Dataset

struct Dataset {
  std::vector<std::string> classes;
  SensorRegistry registry;
  std::vector<ActivitySegment> segments;
  std::vector<std::string> warnings;
  ParseStats parse;

  std::vector<std::size_t> labels() const {
    std::vector<std::size_t> out;
    out.reserve(segments.size());
    for (const auto& s : segments) out.push_back(s.label);
    return out;
  }
};

inline Dataset make_dataset(const ParsedLog& log, const LabelMap& labels, const CoordMap& coords,
                            IndexOrder order = IndexOrder::kFirstSeen) {
  Dataset ds;
  ds.classes = labels.classes();
  ds.parse = log.stats;
  ds.warnings = log.errors;
  if (log.empty) ds.warnings.push_back("log contains no events");
  auto reg = build_sensor_registry(log.sensor_ids, coords, order);
  ds.registry = std::move(reg.registry);
  ds.warnings.insert(ds.warnings.end(), reg.warnings.begin(), reg.warnings.end());
  auto seg = segment_activities(log.events, labels);
  ds.segments = std::move(seg.segments);
  ds.warnings.insert(ds.warnings.end(), seg.warnings.begin(), seg.warnings.end());
  if (ds.segments.empty()) throw DataError("no labelled activity segments found");
  return ds;
}

inline Dataset load_dataset(const DataPaths& paths) {
  check_data_paths(paths);
  const LabelMap labels = LabelMap::from_csv(paths.labels);
  const CoordMap coords = load_coords(paths.coords);
  const ParsedLog log = parse_log(paths.log);
  return make_dataset(log, labels, coords, paths.order);
}

inline std::vector<ActivitySegment> pick(const std::vector<ActivitySegment>& all,
                                         const std::vector<std::size_t>& idx) {
  std::vector<ActivitySegment> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(all[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Encoding

// Everything fitted on training data that turns a raw segment into a Sample.
struct Encoder {
  FittedPreprocessor fp;
  SequenceLayout layout;
  std::size_t pool = 8;
};

inline Encoder fit_encoder(const std::vector<ActivitySegment>& train, const SensorRegistry& registry,
                           const RunConfig& cfg) {
  Encoder e;
  e.fp = fit_preprocessor(train, registry, cfg.preprocess);
  e.layout.sensor_count = registry.size();
  e.layout.bins = e.fp.bins();
  e.layout.time = cfg.preprocess.bin_hours ? cfg.time_encoding : TimeEncoding::kNone;
  e.pool = cfg.model.img_input_pool;
  return e;
}

struct RenderedSegment {
  ProcessedSegment processed;
  TemporalImage temporal;
  SpatialImage spatial;
  CompositeImage composite;
};

inline RenderedSegment render_segment(const ActivitySegment& seg, const SensorRegistry& registry,
                                      const FittedPreprocessor& fp) {
  RenderedSegment r;
  r.processed = process_segment(seg, registry, fp);
  r.temporal = render_temporal_image(r.processed, registry, fp.bins());
  r.spatial = render_spatial_image(r.processed, registry);
  r.composite = compose_image(r.temporal, r.spatial);
  return r;
}

// `registry` supplies floorplan positions for the spatial image; sensor
// indices come from it too, so a repositioned registry keeps them.
inline Sample encode_segment(const ActivitySegment& seg, const SensorRegistry& registry,
                             const Encoder& enc) {
  const RenderedSegment r = render_segment(seg, registry, enc.fp);
  Sample s;
  s.label = seg.label;
  s.seq = build_sequence_tensor(r.processed, enc.layout, enc.fp.length);
  s.image = downsample_mean(r.composite.pixels, enc.pool);
  return s;
}

inline std::vector<Sample> encode_segments(const std::vector<ActivitySegment>& segs,
                                           const SensorRegistry& registry, const Encoder& enc) {
  std::vector<Sample> out;
  out.reserve(segs.size());
  for (const auto& s : segs) out.push_back(encode_segment(s, registry, enc));
  return out;
}

inline Json encoder_json(const Encoder& e) {
  Json j;
  j["length"] = e.fp.length;
  j["sensor_count"] = e.fp.sensor_count;
  j["temperature_range"] = e.fp.temperature_range
                               ? Json{{"min", e.fp.temperature_range->min}, {"max", e.fp.temperature_range->max}}
                               : Json(nullptr);
  return j;
}

// Restores an encoder written by encoder_json under the given run config.
inline Encoder encoder_from_json(const Json& j, const RunConfig& cfg) {
  try {
    Encoder e;
    e.fp.config = cfg.preprocess;
    e.fp.length = j.at("length").get<std::size_t>();
    e.fp.sensor_count = j.at("sensor_count").get<std::size_t>();
    if (!j.at("temperature_range").is_null()) {
      e.fp.temperature_range = TemperatureRange{j["temperature_range"].at("min").get<double>(),
                                                j["temperature_range"].at("max").get<double>()};
    }
    e.layout.sensor_count = e.fp.sensor_count;
    e.layout.bins = e.fp.bins();
    e.layout.time = cfg.preprocess.bin_hours ? cfg.time_encoding : TimeEncoding::kNone;
    e.pool = cfg.model.img_input_pool;
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw DataError(std::string("encoder state: ") + ex.what());
  }
}

// ---------------------------------------------------------------------------
// Runs

struct SeedSplit {
  Split outer;                     // train/test over dataset segments
  std::vector<std::size_t> fit;    // subset of outer.train used for gradient steps
  std::vector<std::size_t> valid;  // subset of outer.train used for early stopping
};

// The validation carve is a second stratified split of the training part,
// seeded independently of the outer one.
inline SeedSplit split_for_seed(const Dataset& ds, const TrainConfig& tc, std::uint64_t seed) {
  SeedSplit s;
  const auto labels = ds.labels();
  s.outer = stratified_split(labels, tc.train_fraction, seed, ds.classes);
  if (tc.valid_fraction == 0.0) {
    s.fit = s.valid = s.outer.train;
    return s;
  }
  std::vector<std::size_t> inner_labels;
  for (std::size_t i : s.outer.train) inner_labels.push_back(labels[i]);
  const Split inner =
      stratified_split(inner_labels, 1.0 - tc.valid_fraction, seed ^ 0x5eed5eed5eedULL, ds.classes);
  for (std::size_t k : inner.train) s.fit.push_back(s.outer.train[k]);
  for (std::size_t k : inner.test) s.valid.push_back(s.outer.train[k]);
  return s;
}

inline ModelConfig resolve_model(const RunConfig& cfg, const Dataset& ds, const Encoder& enc,
                                 std::uint64_t seed) {
  ModelConfig m = cfg.model;
  m.num_classes = ds.classes.size();
  m.input_dim = enc.layout.width();
  m.views = views_for(cfg.mode);
  m.seed = seed;
  m.validate();
  return m;
}

struct SeedRun {
  std::uint64_t seed = 0;
  SeedSplit split;
  Encoder encoder;
  ModelConfig model_config;
  FitResult<float> fit;
  MetricsReport train_metrics;  // on the gradient-step subset, best checkpoint
  MetricsReport test;
};

inline SeedRun run_seed(const Dataset& ds, const RunConfig& cfg, std::uint64_t seed,
                        const FitHooks& hooks = {}) {
  SeedRun run;
  run.seed = seed;
  run.split = split_for_seed(ds, cfg.train, seed);
  run.encoder = fit_encoder(pick(ds.segments, run.split.outer.train), ds.registry, cfg);
  run.model_config = resolve_model(cfg, ds, run.encoder, seed);
  const auto fit_data = encode_segments(pick(ds.segments, run.split.fit), ds.registry, run.encoder);
  const auto valid_data = encode_segments(pick(ds.segments, run.split.valid), ds.registry, run.encoder);
  const auto test_data = encode_segments(pick(ds.segments, run.split.outer.test), ds.registry, run.encoder);
  CareModel<float> model(run.model_config);
  run.fit = fit(model, fit_data, valid_data, cfg.train, resolve_contrastive(cfg), seed, hooks);
  run.train_metrics = evaluate(model, fit_data, cfg.train.batch_size, cfg.train.averaging);
  run.test = evaluate(model, test_data, cfg.train.batch_size, cfg.train.averaging);
  return run;
}

struct CorruptionRequest {
  std::optional<MalfunctionSpec> malfunction;
  std::optional<RepositionSpec> reposition;
};

// Seeds are left out: each run records the seed it corrupted with.
inline Json corruption_json(const CorruptionRequest& r) {
  Json j = Json::object();
  if (r.malfunction) j["malfunction"] = {{"a", r.malfunction->segment_pct}, {"b", r.malfunction->event_pct}};
  if (r.reposition) j["reposition"] = {{"variance", r.reposition->variance}};
  return j;
}

// Corrupts the raw test segments (and/or sensor positions) and re-encodes
// them with the training-fitted encoder; nothing is refitted.
inline MetricsReport evaluate_corrupted(CareModel<float>& model, const Dataset& ds,
                                        const std::vector<std::size_t>& test_idx, const Encoder& enc,
                                        const CorruptionRequest& req, const TrainConfig& tc) {
  std::vector<ActivitySegment> test = pick(ds.segments, test_idx);
  if (req.malfunction) test = corrupt_malfunction(test, *req.malfunction, enc.fp.temperature_range).segments;
  const SensorRegistry registry =
      req.reposition ? perturb_positions(ds.registry, *req.reposition).registry : ds.registry;
  return evaluate(model, encode_segments(test, registry, enc), tc.batch_size, tc.averaging);
}

// ---------------------------------------------------------------------------
// Reports

inline Json metrics_json(const MetricsReport& r, const std::vector<std::string>& classes) {
  Json j;
  j["acc"] = r.accuracy;
  j["prec"] = r.precision;
  j["rec"] = r.recall;
  j["f1"] = r.f1;
  j["averaging"] = r.averaging == Averaging::kWeighted ? "weighted" : "macro";
  j["time_per_batch_s"] = r.seconds_per_batch;
  j["samples"] = r.samples;
  Json pc = Json::object();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& m = r.per_class[c];
    const std::string name = c < classes.size() ? classes[c] : std::to_string(c);
    pc[name] = {{"prec", m.precision}, {"rec", m.recall}, {"f1", m.f1}, {"support", m.support}};
  }
  j["per_class"] = pc;
  j["confusion"] = r.confusion;
  return j;
}

inline Json aggregate_json(const AggregateMetrics& a) {
  auto ms = [](const MeanStd& m) { return Json{{"mean", m.mean}, {"std", m.std}}; };
  return Json{{"runs", a.runs},
              {"acc", ms(a.accuracy)},
              {"prec", ms(a.precision)},
              {"rec", ms(a.recall)},
              {"f1", ms(a.f1)},
              {"time_per_batch_s", ms(a.seconds_per_batch)}};
}

inline Json report_header(const RunConfig& cfg) {
  Json j;
  j["version"] = kVersion;
  j["tag"] = run_tag(cfg.mode, cfg.contrastive.beta);
  j["mode"] = run_mode_name(cfg.mode);
  j["optimizer"] = optimizer_name(cfg.train.optimizer);
  j["config"] = to_json(cfg);
  return j;
}

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline std::string fmt_optional(const std::optional<double>& v) { return v ? fmt(*v) : "off"; }

// Quotes a CSV field when it contains a separator or quote.
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline void write_row(std::ostream& os, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) os << (i ? "," : "") << csv_field(fields[i]);
  os << '\n';
}

}  // namespace detail

// Flat table: one row per seed, then mean and std rows.
inline void write_metrics_csv(std::ostream& os, const RunConfig& cfg,
                              const std::vector<std::uint64_t>& seeds,
                              const std::vector<MetricsReport>& reports,
                              const std::vector<std::string>& classes) {
  std::vector<std::string> head = {"seed", "version", "tag", "mode", "beta", "theta", "bin_hours",
                                   "optimizer", "acc", "prec", "rec", "f1", "time_per_batch_s"};
  for (const auto& c : classes) {
    for (const char* f : {"prec", "rec", "f1", "support"}) head.push_back("per_class." + c + "." + f);
  }
  detail::write_row(os, head);
  auto echo = [&](const std::string& seed) {
    return std::vector<std::string>{seed,
                                    kVersion,
                                    run_tag(cfg.mode, cfg.contrastive.beta),
                                    run_mode_name(cfg.mode),
                                    detail::fmt(cfg.contrastive.beta),
                                    detail::fmt_optional(cfg.preprocess.theta),
                                    detail::fmt_optional(cfg.preprocess.bin_hours),
                                    optimizer_name(cfg.train.optimizer)};
  };
  for (std::size_t k = 0; k < reports.size(); ++k) {
    const auto& r = reports[k];
    auto row = echo(std::to_string(seeds[k]));
    for (double v : {r.accuracy, r.precision, r.recall, r.f1, r.seconds_per_batch}) row.push_back(detail::fmt(v));
    for (const auto& m : r.per_class) {
      for (double v : {m.precision, m.recall, m.f1}) row.push_back(detail::fmt(v));
      row.push_back(std::to_string(m.support));
    }
    detail::write_row(os, row);
  }
  if (reports.empty()) return;
  for (bool want_mean : {true, false}) {
    auto row = echo(want_mean ? "mean" : "std");
    auto stat = [&](auto field) {
      std::vector<double> xs;
      for (const auto& r : reports) xs.push_back(field(r));
      const MeanStd m = mean_std(xs);
      return detail::fmt(want_mean ? m.mean : m.std);
    };
    row.push_back(stat([](const MetricsReport& r) { return r.accuracy; }));
    row.push_back(stat([](const MetricsReport& r) { return r.precision; }));
    row.push_back(stat([](const MetricsReport& r) { return r.recall; }));
    row.push_back(stat([](const MetricsReport& r) { return r.f1; }));
    row.push_back(stat([](const MetricsReport& r) { return r.seconds_per_batch; }));
    for (std::size_t c = 0; c < classes.size(); ++c) {
      row.push_back(stat([c](const MetricsReport& r) { return r.per_class[c].precision; }));
      row.push_back(stat([c](const MetricsReport& r) { return r.per_class[c].recall; }));
      row.push_back(stat([c](const MetricsReport& r) { return r.per_class[c].f1; }));
      row.push_back(stat([c](const MetricsReport& r) { return static_cast<double>(r.per_class[c].support); }));
    }
    detail::write_row(os, row);
  }
}

inline void write_training_log_csv(std::ostream& os, const std::vector<EpochLog>& log) {
  detail::write_row(os, {"stage", "epoch", "loss", "sica", "ce", "train_acc", "valid_metric", "improved",
                         "seconds"});
  for (const auto& r : log) {
    detail::write_row(os, {std::to_string(r.stage), std::to_string(r.epoch), detail::fmt(r.loss),
                           std::isnan(r.sica) ? "" : detail::fmt(r.sica),
                           std::isnan(r.ce) ? "" : detail::fmt(r.ce), detail::fmt(r.train_accuracy),
                           detail::fmt(r.valid_metric), r.improved ? "1" : "0", detail::fmt(r.seconds)});
  }
}

inline Json stats_json(const Dataset& ds, const std::optional<Encoder>& enc = std::nullopt) {
  const DatasetStats st = dataset_stats(ds.segments, ds.classes.size());
  Json j;
  j["version"] = kVersion;
  j["segments"] = st.segment_count;
  Json counts = Json::object();
  for (std::size_t c = 0; c < ds.classes.size(); ++c) counts[ds.classes[c]] = st.class_counts[c];
  j["class_counts"] = counts;
  j["sensors"] = ds.registry.size();
  j["sensors_in_segments"] = st.sensor_count;
  Json pct = Json::object();
  for (const auto& [p, v] : st.length_percentiles) pct["p" + std::to_string(p)] = v;
  j["length_percentiles"] = pct;
  j["mean_duration_hours"] = st.mean_duration_hours;
  j["parse"] = {{"lines_read", ds.parse.lines_read}, {"skipped", ds.parse.skipped}, {"errored", ds.parse.errored}};
  j["warnings"] = ds.warnings;
  if (enc) j["encoder"] = encoder_json(*enc);
  return j;
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepGrid {
  std::vector<std::optional<double>> bin_hours;
  std::vector<std::optional<double>> theta;
  std::vector<RunMode> modes;
  std::vector<double> betas;
};

struct SweepRow {
  std::optional<double> bin_hours;
  std::optional<double> theta;
  RunMode mode = RunMode::kCross;
  double beta = 0.5;
  AggregateMetrics metrics;
};

// Cells in nested order bin_hours, theta, mode, beta; empty axes fall back
// to the base config's value.
inline std::vector<RunConfig> sweep_cells(const RunConfig& base, const SweepGrid& grid) {
  const auto bins = grid.bin_hours.empty() ? std::vector<std::optional<double>>{base.preprocess.bin_hours}
                                           : grid.bin_hours;
  const auto thetas = grid.theta.empty() ? std::vector<std::optional<double>>{base.preprocess.theta}
                                         : grid.theta;
  const auto modes = grid.modes.empty() ? std::vector<RunMode>{base.mode} : grid.modes;
  const auto betas = grid.betas.empty() ? std::vector<double>{base.contrastive.beta} : grid.betas;
  std::vector<RunConfig> out;
  for (const auto& b : bins)
    for (const auto& t : thetas)
      for (RunMode m : modes)
        for (double beta : betas) {
          RunConfig c = base;
          c.preprocess.bin_hours = b;
          c.preprocess.theta = t;
          c.mode = m;
          c.contrastive.beta = beta;
          c.validate();
          out.push_back(std::move(c));
        }
  return out;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  detail::write_row(os, {"bin_hours", "theta", "mode", "beta", "tag", "runs", "acc_mean", "acc_std",
                         "prec_mean", "prec_std", "rec_mean", "rec_std", "f1_mean", "f1_std",
                         "time_per_batch_s"});
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    detail::write_row(os, {detail::fmt_optional(r.bin_hours), detail::fmt_optional(r.theta),
                           run_mode_name(r.mode), detail::fmt(r.beta), run_tag(r.mode, r.beta),
                           std::to_string(m.runs), detail::fmt(m.accuracy.mean), detail::fmt(m.accuracy.std),
                           detail::fmt(m.precision.mean), detail::fmt(m.precision.std),
                           detail::fmt(m.recall.mean), detail::fmt(m.recall.std), detail::fmt(m.f1.mean),
                           detail::fmt(m.f1.std), detail::fmt(m.seconds_per_batch.mean)});
  }
}

}  // namespace care
