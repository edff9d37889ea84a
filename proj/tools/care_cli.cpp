// care: command-line front end for preparing data, training, evaluation,
// corruption runs, rendering and sweeps.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "care/pipeline.hpp"
#include "care/png.hpp"
#include "care/synthetic.hpp"

namespace fs = std::filesystem;
using namespace care;

namespace {

// Flag values as typed; applied on top of the config file.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string beta;
  std::string theta;
  std::string bin_hours;
  std::string mode;
  std::string malfunction;
  std::string reposition;
  std::string out;
};

std::optional<double> parse_optional_number(const std::string& flag, const std::string& s) {
  if (s == "off") return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError(flag + ": expected a number or 'off', got '" + s + "'");
  }
}

double parse_number(const std::string& flag, const std::string& s) {
  auto v = parse_optional_number(flag, s);
  if (!v) throw UsageError(flag + ": 'off' is not allowed here");
  return *v;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

RunConfig load_config(const Overrides& o, bool single_values = true) {
  if (o.config.empty()) throw UsageError("--config is required");
  RunConfig c = load_run_config(o.config);
  if (o.seed) c.train.seeds = {*o.seed};
  if (single_values) {
    if (!o.beta.empty()) c.contrastive.beta = parse_number("--beta", o.beta);
    if (!o.theta.empty()) c.preprocess.theta = parse_optional_number("--theta", o.theta);
    if (!o.bin_hours.empty()) c.preprocess.bin_hours = parse_optional_number("--bin-hours", o.bin_hours);
    if (!o.mode.empty()) c.mode = parse_run_mode(o.mode);
  }
  if (!o.out.empty()) c.output_dir = o.out;
  c.validate();
  return c;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw IoError("cannot write '" + path + "'");
  return os;
}

void write_json(const std::string& path, const Json& j) {
  auto os = open_out(path);
  os << j.dump(2) << '\n';
  if (!os) throw IoError("write failed for '" + path + "'");
}

std::string seed_file(const RunConfig& c, const std::string& stem, std::uint64_t seed,
                      const std::string& ext) {
  return c.output_dir + "/" + stem + "_seed" + std::to_string(seed) + ext;
}

void print_warnings(const Dataset& ds) {
  for (const auto& w : ds.warnings) std::cerr << "warning: " << w << '\n';
}

// ---------------------------------------------------------------------------

int cmd_prepare(const Overrides& o) {
  const RunConfig c = load_config(o);
  const Dataset ds = load_dataset(c.data);
  print_warnings(ds);
  const std::uint64_t seed = c.train.seeds.front();
  const SeedSplit split = split_for_seed(ds, c.train, seed);
  const Encoder enc = fit_encoder(pick(ds.segments, split.outer.train), ds.registry, c);
  SegmentCache cache;
  cache.sensor_count = ds.registry.size();
  cache.length = enc.fp.length;
  cache.num_classes = ds.classes.size();
  for (const auto& seg : ds.segments) cache.segments.push_back(process_segment(seg, ds.registry, enc.fp));
  ensure_dir(c.output_dir);
  write_segment_cache(c.output_dir + "/segments.cache", cache);
  Json stats = stats_json(ds, enc);
  stats["fit_seed"] = seed;
  stats["config"] = to_json(c);
  write_json(c.output_dir + "/stats.json", stats);
  std::cout << "prepared " << ds.segments.size() << " segments, " << ds.registry.size() << " sensors, L="
            << enc.fp.length << " -> " << c.output_dir << '\n';
  return 0;
}

int cmd_train(const Overrides& o) {
  const RunConfig c = load_config(o);
  const Dataset ds = load_dataset(c.data);
  print_warnings(ds);
  ensure_dir(c.output_dir);
  Json report = report_header(c);
  report["classes"] = ds.classes;
  Json runs = Json::array();
  std::vector<MetricsReport> tests;
  for (std::uint64_t seed : c.train.seeds) {
    FitHooks hooks;
    hooks.on_epoch = [&](const EpochLog& r) {
      std::cerr << "seed " << seed << " stage " << r.stage << " epoch " << r.epoch << " loss " << r.loss
                << " valid " << r.valid_metric << (r.improved ? " *" : "") << '\n';
    };
    const SeedRun run = run_seed(ds, c, seed, hooks);
    save_checkpoint(seed_file(c, "checkpoint", seed, ".bin"), run.fit.best, run.model_config);
    write_json(seed_file(c, "encoder", seed, ".json"), encoder_json(run.encoder));
    {
      auto os = open_out(seed_file(c, "train_log", seed, ".csv"));
      write_training_log_csv(os, run.fit.log);
    }
    runs.push_back({{"seed", seed},
                    {"best_epoch", run.fit.best_epoch},
                    {"epochs_run", run.fit.epochs_run},
                    {"stopped_early", run.fit.stopped_early},
                    {"train", metrics_json(run.train_metrics, ds.classes)},
                    {"test", metrics_json(run.test, ds.classes)}});
    tests.push_back(run.test);
    std::cout << "seed " << seed << ": acc " << run.test.accuracy << " f1 " << run.test.f1 << '\n';
  }
  report["runs"] = runs;
  report["aggregate"] = aggregate_json(aggregate(tests));
  write_json(c.output_dir + "/report.json", report);
  auto os = open_out(c.output_dir + "/report.csv");
  write_metrics_csv(os, c, c.train.seeds, tests, ds.classes);
  return 0;
}

// Shared by eval and corrupt-eval: reload each seed's model and encoder and
// score its test split, optionally corrupted.
int evaluate_saved(const Overrides& o, const CorruptionRequest& req, const std::string& stem) {
  const RunConfig c = load_config(o);
  const Dataset ds = load_dataset(c.data);
  print_warnings(ds);
  const bool corrupt = req.malfunction || req.reposition;
  Json report = report_header(c);
  report["classes"] = ds.classes;
  if (corrupt) report["corruption"] = corruption_json(req);
  Json runs = Json::array();
  std::vector<MetricsReport> tests;
  for (std::uint64_t seed : c.train.seeds) {
    const std::string enc_path = seed_file(c, "encoder", seed, ".json");
    std::ifstream in(enc_path);
    if (!in) throw IoError("cannot open '" + enc_path + "' (run `care train` first)");
    Json ej;
    try {
      ej = Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("'" + enc_path + "': " + e.what());
    }
    const Encoder enc = encoder_from_json(ej, c);
    if (enc.fp.sensor_count != ds.registry.size()) {
      throw DataError("'" + enc_path + "' was fitted on a different sensor set");
    }
    const SeedSplit split = split_for_seed(ds, c.train, seed);
    const ModelConfig mc = resolve_model(c, ds, enc, seed);
    CareModel<float> model(mc);
    assign_parameters(model, load_checkpoint<float>(seed_file(c, "checkpoint", seed, ".bin"), mc));
    CorruptionRequest seeded = req;
    if (seeded.malfunction) seeded.malfunction->seed = seed;
    if (seeded.reposition) seeded.reposition->seed = seed;
    const MetricsReport r = evaluate_corrupted(model, ds, split.outer.test, enc, seeded, c.train);
    Json jr = {{"seed", seed}, {"test", metrics_json(r, ds.classes)}};
    if (corrupt) jr["corruption_seed"] = seed;
    runs.push_back(jr);
    tests.push_back(r);
    std::cout << "seed " << seed << ": acc " << r.accuracy << " f1 " << r.f1 << '\n';
  }
  report["runs"] = runs;
  report["aggregate"] = aggregate_json(aggregate(tests));
  write_json(c.output_dir + "/" + stem + ".json", report);
  auto os = open_out(c.output_dir + "/" + stem + ".csv");
  write_metrics_csv(os, c, c.train.seeds, tests, ds.classes);
  return 0;
}

MalfunctionSpec parse_malfunction(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw UsageError("--malfunction: expected AxB, got '" + s + "'");
  MalfunctionSpec m;
  m.segment_pct = parse_number("--malfunction", s.substr(0, x));
  m.event_pct = parse_number("--malfunction", s.substr(x + 1));
  m.validate();
  return m;
}

int cmd_corrupt_eval(const Overrides& o) {
  CorruptionRequest req;
  if (!o.malfunction.empty()) req.malfunction = parse_malfunction(o.malfunction);
  if (!o.reposition.empty()) {
    req.reposition = RepositionSpec{parse_number("--reposition", o.reposition), 0};
    req.reposition->validate();
  }
  if (!req.malfunction && !req.reposition) {
    throw UsageError("corrupt-eval needs --malfunction AxB and/or --reposition VAR");
  }
  return evaluate_saved(o, req, "corrupt_report");
}

int cmd_render(const Overrides& o, std::size_t segment) {
  const RunConfig c = load_config(o);
  const Dataset ds = load_dataset(c.data);
  print_warnings(ds);
  if (segment >= ds.segments.size()) {
    throw UsageError("--segment " + std::to_string(segment) + " out of range (dataset has " +
                     std::to_string(ds.segments.size()) + ")");
  }
  const SeedSplit split = split_for_seed(ds, c.train, c.train.seeds.front());
  const Encoder enc = fit_encoder(pick(ds.segments, split.outer.train), ds.registry, c);
  const RenderedSegment r = render_segment(ds.segments[segment], ds.registry, enc.fp);
  const std::string dir = c.output_dir + "/render";
  ensure_dir(dir);
  const std::string stem = dir + "/segment" + std::to_string(segment);
  write_png(stem + "_temporal.png", r.temporal.pixels);
  write_png(stem + "_spatial.png", r.spatial.pixels);
  write_png(stem + "_composite.png", r.composite.pixels);
  std::cout << "wrote " << stem << "_{temporal,spatial,composite}.png ("
            << ds.classes[ds.segments[segment].label] << ")\n";
  return 0;
}

int cmd_sweep(const Overrides& o) {
  const RunConfig base = load_config(o, false);
  SweepGrid grid;
  if (!o.bin_hours.empty()) {
    for (const auto& v : split_list(o.bin_hours)) grid.bin_hours.push_back(parse_optional_number("--bin-hours", v));
  }
  if (!o.theta.empty()) {
    for (const auto& v : split_list(o.theta)) grid.theta.push_back(parse_optional_number("--theta", v));
  }
  if (!o.mode.empty()) {
    for (const auto& v : split_list(o.mode)) grid.modes.push_back(parse_run_mode(v));
  }
  if (!o.beta.empty()) {
    for (const auto& v : split_list(o.beta)) grid.betas.push_back(parse_number("--beta", v));
  }
  const auto cells = sweep_cells(base, grid);
  const Dataset ds = load_dataset(base.data);
  print_warnings(ds);
  ensure_dir(base.output_dir);
  std::vector<SweepRow> rows;
  Json jrows = Json::array();
  for (const RunConfig& c : cells) {
    std::vector<MetricsReport> tests;
    for (std::uint64_t seed : c.train.seeds) tests.push_back(run_seed(ds, c, seed).test);
    SweepRow row{c.preprocess.bin_hours, c.preprocess.theta, c.mode, c.contrastive.beta, aggregate(tests)};
    std::cout << "bin_hours " << (row.bin_hours ? std::to_string(*row.bin_hours) : "off") << " theta "
              << (row.theta ? std::to_string(*row.theta) : "off") << " mode " << run_mode_name(row.mode)
              << " beta " << row.beta << ": acc " << row.metrics.accuracy.mean << '\n';
    Json jr = report_header(c);
    jr["aggregate"] = aggregate_json(row.metrics);
    jrows.push_back(jr);
    rows.push_back(row);
  }
  auto os = open_out(base.output_dir + "/sweep.csv");
  write_sweep_csv(os, rows);
  Json all;
  all["version"] = kVersion;
  all["rows"] = jrows;
  write_json(base.output_dir + "/sweep.json", all);
  return 0;
}

int cmd_synth(const std::string& out, const SyntheticOptions& opts) {
  const SyntheticFixture fx = generate_fixture(opts);
  write_fixture(fx, out);
  RunConfig c;
  c.data = {"log.txt", "coords.csv", "labels.csv", IndexOrder::kFirstSeen};
  c.output_dir = "out";
  write_json(out + "/config.json", to_json(c));
  std::cout << "wrote " << opts.segments << " segments to " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"care: two-view contrastive activity recognition for smart-home sensor logs"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  Overrides o;
  auto common = [&](CLI::App* sub, bool sweep = false) {
    sub->add_option("--config", o.config, "run config JSON")->required();
    sub->add_option("--seed", o.seed, "use this single seed");
    const char* list = sweep ? " (comma-separated list)" : "";
    sub->add_option("--beta", o.beta, std::string("CARE blend weight in [0,1]") + list);
    sub->add_option("--theta", o.theta, std::string("filter threshold or 'off'") + list);
    sub->add_option("--bin-hours", o.bin_hours, std::string("time bin width in hours or 'off'") + list);
    sub->add_option("--mode", o.mode, std::string("cross|within|uni-seq|uni-img") + list);
    sub->add_option("--out", o.out, "output directory");
  };
  auto* prepare = app.add_subcommand("prepare", "parse, segment, preprocess and cache a dataset");
  common(prepare);
  auto* train = app.add_subcommand("train", "train one model per seed and report test metrics");
  common(train);
  auto* eval = app.add_subcommand("eval", "re-evaluate trained models on their test splits");
  common(eval);
  auto* corrupt = app.add_subcommand("corrupt-eval", "evaluate trained models on corrupted test data");
  common(corrupt);
  corrupt->add_option("--malfunction", o.malfunction, "AxB: A% of segments, B% of their events");
  corrupt->add_option("--reposition", o.reposition, "variance of the coordinate noise (pixels^2)");
  auto* render = app.add_subcommand("render", "write temporal, spatial and composite PNGs for a segment");
  common(render);
  std::size_t segment = 0;
  render->add_option("--segment", segment, "segment index");
  auto* sweep = app.add_subcommand("sweep", "train and evaluate over a grid of settings");
  common(sweep, true);
  auto* synth = app.add_subcommand("synth", "write a synthetic smart-home dataset and config");
  std::string synth_out;
  SyntheticOptions so;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--segments", so.segments, "number of activity segments");
  synth->add_option("--noise", so.noise_fraction, "share of label-irrelevant events in [0,1)");
  synth->add_option("--seed", so.seed, "generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::kUsage);
  }
  try {
    if (*prepare) return cmd_prepare(o);
    if (*train) return cmd_train(o);
    if (*eval) return evaluate_saved(o, {}, "eval_report");
    if (*corrupt) return cmd_corrupt_eval(o);
    if (*render) return cmd_render(o, segment);
    if (*sweep) return cmd_sweep(o);
    if (*synth) return cmd_synth(synth_out, so);
  } catch (const care::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ErrorKind::kIo);
  }
  return 0;
}
