#include "stflow/data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include "json.hpp"

namespace stflow {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace std::chrono;

// ---------------------------------------------------------------------------
// Time

Timestamp parse_timestamp(const std::string& text) {
  int y = 0;
  unsigned mo = 0, d = 0, h = 0, mi = 0, s = 0;
  char sep = 0;
  int used = 0;
  const int got = std::sscanf(text.c_str(), "%4d-%2u-%2u%c%2u:%2u%n", &y, &mo, &d, &sep, &h, &mi, &used);
  if (got != 6 || (sep != 'T' && sep != ' ')) throw ConfigError("bad timestamp '" + text + "'");
  std::size_t pos = static_cast<std::size_t>(used);
  if (pos < text.size() && text[pos] == ':') {
    int more = 0;
    if (std::sscanf(text.c_str() + pos, ":%2u%n", &s, &more) != 1) throw ConfigError("bad timestamp '" + text + "'");
    pos += static_cast<std::size_t>(more);
  }
  if (pos < text.size() && text[pos] == 'Z') ++pos;
  const year_month_day ymd{year{y}, month{mo}, day{d}};
  if (pos != text.size() || !ymd.ok() || h > 23 || mi > 59 || s > 59) {
    throw ConfigError("bad timestamp '" + text + "'");
  }
  return sys_days{ymd} + hours{h} + minutes{mi} + seconds{s};
}

std::string format_timestamp(Timestamp t) {
  const auto day_start = floor<days>(t);
  const year_month_day ymd{day_start};
  const hh_mm_ss hms{t - day_start};
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02d", int(ymd.year()), unsigned(ymd.month()),
                unsigned(ymd.day()), int(hms.hours().count()), int(hms.minutes().count()),
                int(hms.seconds().count()));
  return buf;
}

unsigned day_of_week(Timestamp t) { return weekday{floor<days>(t)}.iso_encoding() - 1; }

unsigned minute_of_day(Timestamp t) {
  return static_cast<unsigned>(duration_cast<minutes>(t - floor<days>(t)).count());
}

// ---------------------------------------------------------------------------
// Dataset

Timestamp FlowDataset::time(std::size_t t) const {
  return start + minutes{static_cast<long long>(t * period_minutes)};
}

std::optional<std::size_t> FlowDataset::index_of(Timestamp t) const {
  if (t < start) return std::nullopt;
  const auto offset = duration_cast<minutes>(t - start).count();
  const auto step = static_cast<long long>(period_minutes);
  if ((t - start) % minutes{step} != seconds{0}) return std::nullopt;
  const auto idx = static_cast<std::size_t>(offset / step);
  if (idx >= frames()) return std::nullopt;
  return idx;
}

void FlowDataset::validate() const {
  if (height == 0 || width == 0) throw IoError("dataset: empty grid");
  if (period_minutes == 0) throw IoError("dataset: period_minutes must be positive");
  if (flows.rank() != 4 || flows.dim(1) != 2 || flows.dim(2) != height || flows.dim(3) != width) {
    throw IoError("dataset: flows have shape " + shape_str(flows.shape()) + ", expected [T, 2, " +
                  std::to_string(height) + ", " + std::to_string(width) + "]");
  }
  for (std::size_t i = 0; i < flows.size(); ++i) {
    if (!std::isfinite(flows[i])) throw IoError("dataset: non-finite flow at element " + std::to_string(i));
    if (flows[i] < 0) throw IoError("dataset: negative flow at element " + std::to_string(i));
  }
  if (weather.size() != frames()) {
    throw IoError("dataset: " + std::to_string(weather.size()) + " weather rows for " + std::to_string(frames()) +
                  " frames");
  }
  for (std::size_t t = 0; t < weather.size(); ++t) {
    if (weather[t].time != time(t)) {
      throw IoError("dataset: weather row " + std::to_string(t) + " has timestamp " +
                    format_timestamp(weather[t].time) + ", expected " + format_timestamp(time(t)));
    }
  }
}

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, const std::string& data) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("cannot write " + p.string());
}

std::string shortest(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& s, const std::string& where) {
  double v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw IoError(where + ": bad number '" + s + "'");
  }
  return v;
}

const char* kHeader = "timestamp,temperature,wind_speed,condition,holiday";

std::size_t condition_index(const std::string& label) {
  for (std::size_t i = 0; i < kConditions.size(); ++i) {
    if (label == kConditions[i]) return i;
  }
  throw IoError("unknown weather condition '" + label + "' (expected sun, rain or snow)");
}

std::vector<WeatherRow> parse_weather(const std::string& text, const std::string& path) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kHeader) {
    throw IoError(path + ": expected header '" + std::string(kHeader) + "'");
  }
  std::vector<WeatherRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    const std::string where = path + ":" + std::to_string(lineno);
    if (f.size() != 5) throw IoError(where + ": expected 5 fields, got " + std::to_string(f.size()));
    WeatherRow r;
    try {
      r.time = parse_timestamp(f[0]);
    } catch (const ConfigError& e) {
      throw IoError(where + ": " + e.what());
    }
    r.temperature = parse_double(f[1], where);
    r.wind_speed = parse_double(f[2], where);
    condition_index(f[3]);
    r.condition = f[3];
    if (f[4] != "0" && f[4] != "1") throw IoError(where + ": holiday must be 0 or 1");
    r.holiday = f[4] == "1";
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace

FlowDataset load_dataset(const std::string& dir) {
  const fs::path root(dir);
  FlowDataset ds;
  std::size_t frames = 0;
  const auto meta_path = (root / "meta.json").string();
  try {
    const json meta = json::parse(read_file(root / "meta.json"));
    for (const auto& [key, value] : meta.items()) {
      if (key != "grid" && key != "period_minutes" && key != "start_timestamp" && key != "T") {
        throw IoError(meta_path + ": unknown key '" + key + "'");
      }
    }
    const auto grid = meta.at("grid").get<std::vector<std::size_t>>();
    if (grid.size() != 2) throw IoError(meta_path + ": grid must be [N, M]");
    ds.height = grid[0];
    ds.width = grid[1];
    ds.period_minutes = meta.at("period_minutes").get<std::size_t>();
    ds.start = parse_timestamp(meta.at("start_timestamp").get<std::string>());
    frames = meta.at("T").get<std::size_t>();
  } catch (const json::exception& e) {
    throw IoError(meta_path + ": " + e.what());
  } catch (const ConfigError& e) {
    throw IoError(meta_path + ": " + e.what());
  }

  const auto flows_path = root / "flows.f32le";
  const std::string raw = read_file(flows_path);
  const std::size_t count = frames * 2 * ds.height * ds.width;
  if (raw.size() != count * 4) {
    throw IoError(flows_path.string() + ": size mismatch, " + std::to_string(raw.size()) + " bytes but meta.json implies " +
                  std::to_string(count * 4) + " (T=" + std::to_string(frames) + ", grid " + std::to_string(ds.height) +
                  "x" + std::to_string(ds.width) + ")");
  }
  ds.flows = Tensor<float>({frames, 2, ds.height, ds.width});
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(raw[4 * i + b])) << (8 * b);
    ds.flows[i] = std::bit_cast<float>(bits);
  }

  const auto ext_path = root / "external.csv";
  ds.weather = parse_weather(read_file(ext_path), ext_path.string());
  ds.validate();
  return ds;
}

void save_dataset(const FlowDataset& ds, const std::string& dir) {
  ds.validate();
  const fs::path root(dir);
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());

  json meta = {{"grid", {ds.height, ds.width}},
               {"period_minutes", ds.period_minutes},
               {"start_timestamp", format_timestamp(ds.start)},
               {"T", ds.frames()}};
  write_file(root / "meta.json", meta.dump(2) + "\n");

  std::string raw;
  raw.reserve(ds.flows.size() * 4);
  for (float v : ds.flows.values()) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int b = 0; b < 4; ++b) raw.push_back(static_cast<char>(bits >> (8 * b)));
  }
  write_file(root / "flows.f32le", raw);

  std::string csv = std::string(kHeader) + "\n";
  for (const auto& r : ds.weather) {
    csv += format_timestamp(r.time) + "," + shortest(r.temperature) + "," + shortest(r.wind_speed) + "," +
           r.condition + "," + (r.holiday ? "1" : "0") + "\n";
  }
  write_file(root / "external.csv", csv);
}

// ---------------------------------------------------------------------------
// Normalization and samples

Normalizer Normalizer::fit(std::span<const float> values) {
  if (values.empty()) throw IoError("normalizer: no training values");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (!(*hi > *lo)) throw IoError("normalizer: training flows are constant (max == min)");
  return {static_cast<double>(*lo), static_cast<double>(*hi)};
}

template <typename T>
Tensor<T> Normalizer::normalize(const Tensor<T>& x) const {
  Tensor<T> y = x;
  for (auto& v : y.data()) v = static_cast<T>(normalize(static_cast<double>(v)));
  return y;
}

template <typename T>
Tensor<T> Normalizer::denormalize(const Tensor<T>& y) const {
  Tensor<T> x = y;
  for (auto& v : x.data()) v = static_cast<T>(denormalize(static_cast<double>(v)));
  return x;
}

template Tensor<float> Normalizer::normalize(const Tensor<float>&) const;
template Tensor<double> Normalizer::normalize(const Tensor<double>&) const;
template Tensor<float> Normalizer::denormalize(const Tensor<float>&) const;
template Tensor<double> Normalizer::denormalize(const Tensor<double>&) const;

WeatherScaler WeatherScaler::fit(std::span<const WeatherRow> rows) {
  if (rows.empty()) throw IoError("weather scaler: no training rows");
  WeatherScaler s{rows[0].temperature, rows[0].temperature, rows[0].wind_speed, rows[0].wind_speed};
  for (const auto& r : rows) {
    s.temperature_min = std::min(s.temperature_min, r.temperature);
    s.temperature_max = std::max(s.temperature_max, r.temperature);
    s.wind_min = std::min(s.wind_min, r.wind_speed);
    s.wind_max = std::max(s.wind_max, r.wind_speed);
  }
  return s;
}

std::array<float, kExternalWidth> external_vector(Timestamp t, const WeatherRow& row, const WeatherScaler& scaler) {
  if (row.time != t) {
    throw IoError("no weather row for " + format_timestamp(t) + " (row is " + format_timestamp(row.time) + ")");
  }
  auto scale = [](double v, double lo, double hi) { return hi > lo ? (v - lo) / (hi - lo) : 0.0; };
  std::array<float, kExternalWidth> e{};
  const unsigned dow = day_of_week(t);
  e[dow] = 1;
  e[7] = dow >= 5 ? 1 : 0;
  e[8] = row.holiday ? 1 : 0;
  e[9] = static_cast<float>(scale(row.temperature, scaler.temperature_min, scaler.temperature_max));
  e[10] = static_cast<float>(scale(row.wind_speed, scaler.wind_min, scaler.wind_max));
  e[11 + condition_index(row.condition)] = 1;
  return e;
}

SampleSet SampleSet::subset(std::span<const std::size_t> idx) const {
  auto gather = [&](const Tensor<float>& src) {
    Shape s = src.shape();
    const std::size_t per = src.size() / s[0];
    s[0] = idx.size();
    Tensor<float> out(s);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(src.raw() + idx[i] * per, per, out.raw() + i * per);
    }
    return out;
  };
  SampleSet out{gather(closeness), gather(external), gather(target), {}};
  for (auto i : idx) out.target_index.push_back(target_index.at(i));
  return out;
}

SampleSet make_samples(const FlowDataset& ds, std::size_t closeness, std::size_t first, std::size_t last,
                       const Normalizer& nrm, const WeatherScaler& ws) {
  if (first < closeness) throw ConfigError("make_samples: first target precedes the closeness window");
  if (last > ds.frames() || first >= last) throw ConfigError("make_samples: empty sample range");
  const std::size_t n = last - first, N = ds.height, M = ds.width;
  const std::size_t plane = N * M;
  SampleSet s;
  s.closeness = Tensor<float>({n, closeness, N, M, 2});
  s.external = Tensor<float>({n, kExternalWidth});
  s.target = Tensor<float>({n, N, M, 2});
  // frame t (file layout [2, N, M]) -> normalized [N, M, 2] at dst
  auto put = [&](std::size_t t, float* dst) {
    const float* src = ds.flows.raw() + t * 2 * plane;
    for (std::size_t q = 0; q < plane; ++q) {
      dst[2 * q] = static_cast<float>(nrm.normalize(src[q]));
      dst[2 * q + 1] = static_cast<float>(nrm.normalize(src[plane + q]));
    }
  };
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t t = first + i;
    for (std::size_t k = 0; k < closeness; ++k) put(t - closeness + k, s.closeness.raw() + (i * closeness + k) * 2 * plane);
    put(t, s.target.raw() + i * 2 * plane);
    const auto e = external_vector(ds.time(t), ds.weather.at(t), ws);
    std::copy(e.begin(), e.end(), s.external.raw() + i * kExternalWidth);
    s.target_index.push_back(t);
  }
  return s;
}

std::size_t boundary_at(const FlowDataset& ds, Timestamp test_start) {
  for (std::size_t t = 0; t < ds.frames(); ++t) {
    if (ds.time(t) >= test_start) return t;
  }
  return ds.frames();
}

std::size_t boundary_last_days(const FlowDataset& ds, double test_days) {
  const double per_day = 1440.0 / static_cast<double>(ds.period_minutes);
  const auto test = static_cast<std::size_t>(std::llround(test_days * per_day));
  if (test_days <= 0 || test >= ds.frames()) {
    throw ConfigError("test_days=" + shortest(test_days) + " leaves no training frames");
  }
  return ds.frames() - test;
}

PreparedData prepare(const FlowDataset& ds, std::size_t closeness, std::size_t boundary) {
  if (ds.frames() <= closeness) {
    throw ConfigError("dataset has " + std::to_string(ds.frames()) + " frames, closeness needs more than " +
                      std::to_string(closeness));
  }
  if (boundary <= closeness) throw ConfigError("train split is empty (boundary " + std::to_string(boundary) + ")");
  if (boundary >= ds.frames()) throw ConfigError("test split is empty (boundary " + std::to_string(boundary) + ")");
  PreparedData p;
  p.boundary = boundary;
  const std::size_t per_frame = 2 * ds.height * ds.width;
  p.normalizer = Normalizer::fit(std::span<const float>(ds.flows.raw(), boundary * per_frame));
  p.weather = WeatherScaler::fit(std::span<const WeatherRow>(ds.weather.data(), boundary));
  p.train = make_samples(ds, closeness, closeness, boundary, p.normalizer, p.weather);
  p.test = make_samples(ds, closeness, boundary, ds.frames(), p.normalizer, p.weather);
  return p;
}

// ---------------------------------------------------------------------------
// Synthetic data

FlowDataset synth_generate(const SynthSpec& spec) {
  if (spec.height == 0 || spec.width == 0 || spec.days == 0) throw ConfigError("synth: empty grid or duration");
  if (spec.period_minutes == 0 || 1440 % spec.period_minutes != 0) {
    throw ConfigError("synth: period must divide a day, got " + std::to_string(spec.period_minutes));
  }
  if (spec.noise < 0 || spec.noise_corr < 0 || spec.noise_corr >= 1) {
    throw ConfigError("synth: noise must be >= 0 and noise_corr in [0, 1)");
  }
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const std::size_t N = spec.height, M = spec.width, plane = N * M;
  const std::size_t per_day = 1440 / spec.period_minutes, T = spec.days * per_day;

  FlowDataset ds;
  ds.height = N;
  ds.width = M;
  ds.period_minutes = spec.period_minutes;
  ds.start = parse_timestamp(spec.start);
  ds.flows = Tensor<float>({T, 2, N, M});

  // Hot-spots: Gaussian bumps with their own daily peak time.
  struct Hotspot {
    double y, x, radius, level, phase;
  };
  Rng layout = Rng::derived(spec.seed, "synth.layout");
  std::vector<Hotspot> spots;
  for (std::size_t h = 0; h < spec.hotspots; ++h) {
    spots.push_back({layout.uniform(0, static_cast<double>(N)), layout.uniform(0, static_cast<double>(M)),
                     layout.uniform(0.8, 2.5), spec.hotspot_level * layout.uniform(0.5, 1.0), layout.uniform(0, 1)});
  }
  std::vector<double> phase(plane);
  for (auto& v : phase) v = layout.uniform(0, 0.2);

  // Clean value of region q, channel ch at (day of week, fraction of day).
  auto clean = [&](std::size_t q, std::size_t ch, unsigned dow, double tau) {
    const double r = static_cast<double>(q / M) + 0.5, c = static_cast<double>(q % M) + 0.5;
    double v = spec.base_level * (1.0 + 0.5 * std::sin(two_pi * (tau - 0.25 - phase[q])));
    for (const auto& s : spots) {
      const double d2 = (r - s.y) * (r - s.y) + (c - s.x) * (c - s.x);
      const double bump = std::exp(-d2 / (2.0 * s.radius * s.radius));
      // Outflow peaks a quarter day after inflow.
      v += s.level * bump * (1.0 + 0.7 * std::sin(two_pi * (tau - s.phase - 0.25 * static_cast<double>(ch))));
    }
    const double weekly = (dow >= 5 ? 0.6 : 1.0) * (1.0 + 0.1 * std::sin(two_pi * dow / 7.0));
    return std::max(0.0, v * weekly);
  };

  Rng noise = Rng::derived(spec.seed, "synth.noise");
  const double phi = spec.noise_corr, innov = std::sqrt(1.0 - phi * phi);
  std::vector<double> z(2 * plane);
  for (auto& v : z) v = noise.normal();
  for (std::size_t t = 0; t < T; ++t) {
    const Timestamp when = ds.time(t);
    const unsigned dow = day_of_week(when);
    const double tau = minute_of_day(when) / 1440.0;
    if (t > 0) {
      for (auto& v : z) v = phi * v + innov * noise.normal();
    }
    float* frame = ds.flows.raw() + t * 2 * plane;
    for (std::size_t ch = 0; ch < 2; ++ch) {
      for (std::size_t q = 0; q < plane; ++q) {
        const double v = clean(q, ch, dow, tau) * (1.0 + spec.noise * z[ch * plane + q]);
        frame[ch * plane + q] = static_cast<float>(std::max(0.0, v));
      }
    }
  }

  Rng weather = Rng::derived(spec.seed, "synth.weather");
  for (std::size_t t = 0; t < T; ++t) {
    WeatherRow r;
    r.time = ds.time(t);
    const double tau = minute_of_day(r.time) / 1440.0;
    r.temperature = std::round((12.0 + 6.0 * std::sin(two_pi * (tau - 0.35)) + 1.5 * weather.normal()) * 10) / 10;
    r.wind_speed = std::round(std::abs(3.0 + 2.0 * weather.normal()) * 10) / 10;
    const double u = weather.uniform();
    r.condition = u < 0.7 ? "sun" : (u < 0.95 ? "rain" : "snow");
    r.holiday = unsigned(year_month_day{floor<days>(r.time)}.day()) == 1;
    ds.weather.push_back(std::move(r));
  }
  return ds;
}

}  // namespace stflow
