#include "stflow/cli.hpp"

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "stflow/data.hpp"

namespace stflow {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

bool read_bool(const json& v, const std::string& key) {
  if (!v.is_boolean()) throw ConfigError(key + ": expected true or false, got " + v.dump());
  return v.get<bool>();
}

std::size_t read_count(const json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError(key + ": expected a non-negative integer, got " + v.dump());
  }
  return v.get<std::size_t>();
}

DataSection data_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("data: expected an object");
  DataSection d;
  for (const auto& [key, v] : j.items()) {
    if (key == "dir" || key == "test_start") {
      if (!v.is_string()) throw ConfigError("data." + key + ": expected a string, got " + v.dump());
      (key == "dir" ? d.dir : d.test_start) = v.get<std::string>();
    } else if (key == "test_days") {
      if (!v.is_number() || v.get<double>() <= 0) {
        throw ConfigError("data.test_days: expected a positive number, got " + v.dump());
      }
      d.test_days = v.get<double>();
    } else {
      throw ConfigError("data: unknown key '" + key + "'");
    }
  }
  return d;
}

AblationSection ablation_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("ablation: expected an object");
  AblationSection a;
  for (const auto& [key, v] : j.items()) {
    if (key == "long_skip") a.long_skip = read_bool(v, "ablation.long_skip");
    else if (key == "attention") a.attention = read_bool(v, "ablation.attention");
    else if (key == "external") a.external = read_bool(v, "ablation.external");
    else if (key == "closeness") a.closeness = read_count(v, "ablation.closeness");
    else throw ConfigError("ablation: unknown key '" + key + "'");
  }
  return a;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
  out.close();
  if (!out) throw IoError(path.string() + ": write failed");
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": " + ec.message());
}

std::size_t split_boundary(const FlowDataset& ds, const DataSection& d) {
  if (!d.test_start.empty()) return boundary_at(ds, parse_timestamp(d.test_start));
  return boundary_last_days(ds, d.test_days);
}

// The dataset decides the grid; the model section only supplies architecture.
ModelConfig fit_to_grid(ModelConfig c, const FlowDataset& ds) {
  c.grid_height = ds.height;
  c.grid_width = ds.width;
  c.validate();
  return c;
}

std::string metrics_csv(std::size_t samples, const Metrics& m) {
  std::ostringstream s;
  s.precision(10);
  s << "samples,rmse,mape,ape\n" << samples << ',' << m.rmse << ',' << m.mape << ',' << m.ape << '\n';
  return s.str();
}

json normalizer_json(const PreparedData& p) {
  return {{"flow_min", p.normalizer.min},
          {"flow_max", p.normalizer.max},
          {"temperature_min", p.weather.temperature_min},
          {"temperature_max", p.weather.temperature_max},
          {"wind_min", p.weather.wind_min},
          {"wind_max", p.weather.wind_max}};
}

struct Restored {
  Normalizer normalizer;
  WeatherScaler weather;
  std::string test_start;
};

Restored restore(const json& meta, const std::string& path) {
  try {
    const json& n = meta.at("scaling");
    Restored r;
    r.normalizer.min = n.at("flow_min").get<double>();
    r.normalizer.max = n.at("flow_max").get<double>();
    r.weather.temperature_min = n.at("temperature_min").get<double>();
    r.weather.temperature_max = n.at("temperature_max").get<double>();
    r.weather.wind_min = n.at("wind_min").get<double>();
    r.weather.wind_max = n.at("wind_max").get<double>();
    r.test_start = meta.at("test_start").get<std::string>();
    return r;
  } catch (const json::exception& e) {
    throw CompatibilityError(path + ": checkpoint metadata lacks scaling information (" + e.what() + ")");
  }
}

void check_grid(const ModelConfig& c, const FlowDataset& ds, const std::string& dir) {
  if (c.grid_height != ds.height || c.grid_width != ds.width) {
    throw CompatibilityError(dir + ": grid " + std::to_string(ds.height) + "x" + std::to_string(ds.width) +
                             " does not match the checkpoint's " + std::to_string(c.grid_height) + "x" +
                             std::to_string(c.grid_width));
  }
}

std::pair<std::size_t, std::size_t> parse_grid(const std::string& text) {
  const auto x = text.find('x');
  std::size_t n = 0, m = 0;
  auto num = [&](std::string_view s, std::size_t& v) {
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    return ec == std::errc{} && end == s.data() + s.size() && v > 0;
  };
  if (x == std::string::npos || !num(std::string_view(text).substr(0, x), n) ||
      !num(std::string_view(text).substr(x + 1), m)) {
    throw ConfigError("--grid: expected NxM, got '" + text + "'");
  }
  return {n, m};
}

// ---------------------------------------------------------------------------
// Commands

struct Options {
  std::string config, out, data, checkpoint, at, grid = "16x8", test_start;
  std::vector<std::string> sets;
  std::size_t days = 30, period = 60, samples = 200, closeness = 4;
  std::uint64_t seed = 0;
  double noise = 0, test_days = 10;
  bool csv = false, verbose = false;
};

int cmd_synth(const Options& o, std::ostream& out) {
  SynthSpec s;
  std::tie(s.height, s.width) = parse_grid(o.grid);
  s.days = o.days;
  s.period_minutes = o.period;
  s.seed = o.seed;
  s.noise = o.noise;
  const FlowDataset ds = synth_generate(s);
  save_dataset(ds, o.out);
  out << "wrote " << ds.frames() << " frames of " << s.height << "x" << s.width << " to " << o.out << "\n";
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig rc = load_run_config(o.config, o.sets);
  if (!o.data.empty()) rc.data.dir = o.data;
  if (rc.data.dir.empty()) throw ConfigError("no dataset: set data.dir in the config or pass --data");
  rc.train.validate();
  const FlowDataset ds = load_dataset(rc.data.dir);
  const ModelConfig mc = fit_to_grid(rc.effective_model(), ds);
  const PreparedData prep = prepare(ds, mc.closeness, split_boundary(ds, rc.data));
  const std::uint32_t digest = mc.digest();

  const fs::path dir = o.out;
  make_dir(dir);
  json meta{{"train", rc.train.to_json()},
            {"scaling", normalizer_json(prep)},
            {"test_start", format_timestamp(ds.time(prep.boundary))}};
  std::mutex log;
  ReplicaHooks hooks;
  if (o.verbose) {
    hooks.on_epoch = [&](std::uint64_t seed, std::size_t epoch, double loss) {
      std::lock_guard lock(log);
      err << "seed " << seed << " epoch " << epoch << " loss " << loss << "\n";
    };
  }
  hooks.on_done = [&](const ReplicaRow& row, const Model<float>& model) {
    json m = meta;
    m["seed"] = row.seed;
    const std::string stem = "seed_" + std::to_string(row.seed);
    save_checkpoint((dir / (stem + ".ckpt")).string(), model, m);
    write_file(dir / (stem + "_loss.csv"), csv_header(digest, row.seed) + loss_csv(row.loss));
  };
  const ReplicaReport report = run_replicas(mc, prep, rc.train, thread_budget(), hooks);

  json effective = rc.to_json();
  effective["model"] = mc.to_json();
  write_file(dir / "config.json", effective.dump(2) + "\n");
  write_file(dir / "metrics.csv", csv_header(digest, rc.train.seeds) + report.csv());
  out << report.table();
  return kExitOk;
}

struct Loaded {
  ModelConfig config;
  std::unique_ptr<Model<float>> model;
  Restored scaling;
};

Loaded load_model(const std::string& path) {
  Loaded l;
  l.config = read_checkpoint_header(path).config;
  l.model = std::make_unique<Model<float>>(l.config);
  l.scaling = restore(load_checkpoint(path, *l.model), path);
  return l;
}

int cmd_evaluate(const Options& o, std::ostream& out) {
  const Loaded l = load_model(o.checkpoint);
  const FlowDataset ds = load_dataset(o.data);
  check_grid(l.config, ds, o.data);
  const std::size_t p = l.config.closeness;
  const std::string start = o.test_start.empty() ? l.scaling.test_start : o.test_start;
  const std::size_t first = std::max(p, boundary_at(ds, parse_timestamp(start)));
  if (first >= ds.frames()) throw ConfigError("no test frames at or after " + start);
  const SampleSet test = make_samples(ds, p, first, ds.frames(), l.scaling.normalizer, l.scaling.weather);
  out << metrics_csv(test.size(), evaluate(*l.model, test, l.scaling.normalizer));
  return kExitOk;
}

int cmd_predict(const Options& o, std::ostream& out) {
  const Loaded l = load_model(o.checkpoint);
  const FlowDataset ds = load_dataset(o.data);
  check_grid(l.config, ds, o.data);
  const std::size_t p = l.config.closeness;
  const auto t = ds.index_of(parse_timestamp(o.at));
  if (!t) throw ConfigError("--at " + o.at + ": no frame with that timestamp in " + o.data);
  if (*t < p) {
    throw ConfigError("--at " + o.at + ": needs " + std::to_string(p) + " preceding frames, the dataset has " +
                      std::to_string(*t));
  }
  const SampleSet s = make_samples(ds, p, *t, *t + 1, l.scaling.normalizer, l.scaling.weather);
  const Tensor<float> frame = l.scaling.normalizer.denormalize(l.model->predict(s.closeness, s.external));
  std::ostringstream csv;
  csv.precision(9);
  csv << csv_header(l.config.digest(), l.config.seed) << "row,col,inflow,outflow\n";
  for (std::size_t i = 0; i < ds.height; ++i) {
    for (std::size_t j = 0; j < ds.width; ++j) {
      csv << i << ',' << j << ',' << frame.at({0, i, j, 0}) << ',' << frame.at({0, i, j, 1}) << '\n';
    }
  }
  if (o.out.empty()) {
    out << csv.str();
  } else {
    write_file(o.out, csv.str());
  }
  return kExitOk;
}

int cmd_summary(const Options& o, std::ostream& out) {
  const ModelConfig mc = load_run_config(o.config, o.sets).effective_model();
  mc.validate();
  const Model<float> model(mc);
  const ModelSummary s = summarize(model);
  out << (o.csv ? s.csv() : s.table());
  return kExitOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out, std::ostream& err) {
  const ModelConfig mc = load_run_config(o.config, o.sets).effective_model();
  const GradcheckResult r = model_gradcheck(mc, o.samples, o.seed);
  out << "checked " << r.checked << " parameters, max relative error " << r.max_rel_error << " (analytic "
      << r.worst_analytic << ", numeric " << r.worst_numeric << ")\n";
  if (r.status != GradcheckResult::Status::ok) {
    err << "gradcheck: NaN in the " << (r.status == GradcheckResult::Status::analytic_nan ? "analytic" : "numeric")
        << " gradient\n";
    return kExitNumerical;
  }
  if (!(r.max_rel_error < kGradcheckThreshold)) {
    err << "gradcheck: error above " << kGradcheckThreshold << "\n";
    return kExitNumerical;
  }
  return kExitOk;
}

int cmd_baseline_ha(const Options& o, std::ostream& out) {
  const FlowDataset ds = load_dataset(o.data);
  DataSection d;
  d.test_days = o.test_days;
  d.test_start = o.test_start;
  const std::size_t boundary = split_boundary(ds, d);
  const std::size_t first = std::max(o.closeness, boundary);
  if (first >= ds.frames()) throw ConfigError("empty test split");
  out << metrics_csv(ds.frames() - first, ha_baseline(ds, boundary, o.closeness));
  return kExitOk;
}

}  // namespace

// ---------------------------------------------------------------------------

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "model") c.model = ModelConfig::from_json(v);
    else if (key == "train") c.train = TrainConfig::from_json(v);
    else if (key == "data") c.data = data_from_json(v);
    else if (key == "ablation") c.ablation = ablation_from_json(v);
    else throw ConfigError("config: unknown section '" + key + "'");
  }
  return c;
}

json RunConfig::to_json() const {
  return {{"model", model.to_json()},
          {"train", train.to_json()},
          {"data", {{"dir", data.dir}, {"test_days", data.test_days}, {"test_start", data.test_start}}},
          {"ablation",
           {{"long_skip", ablation.long_skip},
            {"attention", ablation.attention},
            {"external", ablation.external},
            {"closeness", ablation.closeness}}}};
}

ModelConfig RunConfig::effective_model() const {
  ModelConfig c = model;
  c.long_skip = c.long_skip && ablation.long_skip;
  c.attention = c.attention && ablation.attention;
  c.external = c.external && ablation.external;
  if (ablation.closeness) c.closeness = ablation.closeness;
  return c;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq || dot == 0 || dot + 1 == eq) {
    throw ConfigError("--set: expected section.key=value, got '" + assignment + "'");
  }
  const std::string section = assignment.substr(0, dot);
  const std::string key = assignment.substr(dot + 1, eq - dot - 1);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  if (!doc.is_object()) throw ConfigError("config: expected a JSON object");
  json& s = doc[section];
  if (s.is_null()) s = json::object();
  if (!s.is_object()) throw ConfigError("--set: section '" + section + "' is not an object");
  s[key] = std::move(value);
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  json doc = json::object();
  if (!path.empty()) {
    const std::string text = read_file(path);
    doc = json::parse(text, nullptr, false);
    if (doc.is_discarded()) throw ConfigError(path + ": not valid JSON");
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return RunConfig::from_json(doc);
}

GradcheckResult model_gradcheck(const ModelConfig& config, std::size_t samples, std::uint64_t seed) {
  config.validate();
  Model<double> model(config);
  Rng rng = Rng::derived(seed, "gradcheck");
  const std::size_t B = 2, N = config.grid_height, M = config.grid_width;
  Tensor<double> frames({B, config.closeness, N, M, 2}), external({B, kExternalWidth}), target({B, N, M, 2});
  for (auto& v : frames.data()) v = rng.uniform(-1, 1);
  for (auto& v : external.data()) v = rng.uniform(0, 1);
  for (auto& v : target.data()) v = rng.uniform(-1, 1);

  std::vector<std::pair<Parameter<double>*, std::size_t>> all;
  for (auto& p : model.params().trainable()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) all.emplace_back(&p, i);
  }
  // Partial Fisher-Yates: the first `samples` entries become a uniform draw
  // without replacement.
  const std::size_t k = std::min(samples, all.size());
  std::vector<ParamCoordinate> coords;
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(all[i], all[i + rng.below(all.size() - i)]);
    coords.push_back({all[i].first, all[i].second});
  }
  auto loss = [&](Tape<double>& tape) {
    Context<double> ctx(tape, Mode::train, false);
    return mse_loss(model.forward(ctx, tape.constant(frames), tape.constant(external)), tape.constant(target));
  };
  return gradcheck_parameters(loss, coords, 1e-2, 20);
}

std::size_t thread_budget() {
  const char* env = std::getenv("STFLOW_THREADS");
  if (!env || !*env) return 1;
  std::size_t n = 0;
  const std::string_view s(env);
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
  if (ec != std::errc{} || end != s.data() + s.size() || n == 0) {
    throw ConfigError("STFLOW_THREADS: expected a positive integer, got '" + std::string(s) + "'");
  }
  return n;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"STREED-Net traffic flow prediction", "stflow"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  Options o;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--grid", o.grid, "Grid as NxM")->capture_default_str();
  synth->add_option("--days", o.days, "Days of data")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--period", o.period, "Minutes per frame")->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--seed", o.seed, "Random seed")->capture_default_str();
  synth->add_option("--noise", o.noise, "Relative noise level")->capture_default_str()->check(CLI::NonNegativeNumber);

  auto add_sets = [&](CLI::App* c) {
    c->add_option("--set", o.sets, "Override section.key=value (repeatable)")->take_all();
  };
  auto* train = app.add_subcommand("train", "Train one replica per seed");
  train->add_option("--config", o.config, "Run config JSON");
  train->add_option("--out", o.out, "Output directory")->required();
  train->add_option("--data", o.data, "Dataset directory (overrides data.dir)");
  train->add_flag("--verbose", o.verbose, "Log the loss of every epoch");
  add_sets(train);

  auto* eval = app.add_subcommand("evaluate", "Metrics of a checkpoint on a dataset's test split");
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", o.data, "Dataset directory")->required();
  eval->add_option("--test-start", o.test_start, "First test timestamp (default: the training split)");

  auto* predict = app.add_subcommand("predict", "Predict one frame");
  predict->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  predict->add_option("--data", o.data, "Dataset directory")->required();
  predict->add_option("--at", o.at, "Timestamp of the predicted frame")->required();
  predict->add_option("--out", o.out, "CSV file (default: stdout)");

  auto* summary = app.add_subcommand("summary", "Per-layer parameters and FLOPs");
  summary->add_option("--config", o.config, "Run config JSON");
  summary->add_flag("--csv", o.csv, "CSV instead of a table");
  add_sets(summary);

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of the full network");
  grad->add_option("--config", o.config, "Run config JSON");
  grad->add_option("--samples", o.samples, "Parameters to check")->capture_default_str()->check(CLI::PositiveNumber);
  grad->add_option("--seed", o.seed, "Random seed")->capture_default_str();
  add_sets(grad);

  auto* ha = app.add_subcommand("baseline-ha", "Historical-average baseline");
  ha->add_option("--data", o.data, "Dataset directory")->required();
  ha->add_option("--closeness", o.closeness, "Frames per sample (first target)")->capture_default_str();
  auto* days = ha->add_option("--test-days", o.test_days, "Test split: last D days")->capture_default_str();
  ha->add_option("--test-start", o.test_start, "Test split: first timestamp")->excludes(days);

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  if (argv.empty()) argv.push_back("stflow");
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(o, out);
    if (*train) return cmd_train(o, out, err);
    if (*eval) return cmd_evaluate(o, out);
    if (*predict) return cmd_predict(o, out);
    if (*summary) return cmd_summary(o, out);
    if (*grad) return cmd_gradcheck(o, out, err);
    if (*ha) return cmd_baseline_ha(o, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const CompatibilityError& e) {
    err << "incompatible: " << e.what() << "\n";
    return kExitCompatibility;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace stflow
