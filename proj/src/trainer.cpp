#include "stflow/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace stflow {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (batch_size < 2) throw ConfigError("train.batch_size must be >= 2 (batch normalization), got " +
                                        std::to_string(batch_size));
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) throw ConfigError("train.learning_rate must be >= 0");
  if (epochs == 0) throw ConfigError("train.epochs must be positive");
  if (seeds.empty()) throw ConfigError("train.seeds must not be empty");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.beta1/beta2 must be in [0, 1)");
  if (!(epsilon > 0)) throw ConfigError("train.epsilon must be positive");
}

json TrainConfig::to_json() const {
  return json{{"batch_size", batch_size}, {"learning_rate", learning_rate}, {"epochs", epochs},
              {"seeds", seeds},           {"beta1", beta1},                 {"beta2", beta2},
              {"epsilon", epsilon}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("train: expected an object");
  TrainConfig c;
  auto number = [](const json& v, const std::string& key) {
    if (!v.is_number()) throw ConfigError("train." + key + ": expected a number, got " + v.dump());
    return v.get<double>();
  };
  auto count = [](const json& v, const std::string& key) {
    if (!v.is_number_integer() || v.get<long long>() < 0) {
      throw ConfigError("train." + key + ": expected a non-negative integer, got " + v.dump());
    }
    return v.get<std::uint64_t>();
  };
  for (const auto& [key, v] : j.items()) {
    if (key == "batch_size") c.batch_size = count(v, key);
    else if (key == "learning_rate") c.learning_rate = number(v, key);
    else if (key == "epochs") c.epochs = count(v, key);
    else if (key == "beta1") c.beta1 = number(v, key);
    else if (key == "beta2") c.beta2 = number(v, key);
    else if (key == "epsilon") c.epsilon = number(v, key);
    else if (key == "seeds") {
      if (!v.is_array()) throw ConfigError("train.seeds: expected an array of integers");
      c.seeds.clear();
      for (const auto& s : v) c.seeds.push_back(count(s, "seeds"));
    } else {
      throw ConfigError("train: unknown key '" + key + "'");
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Optimizer

void Adam::step(ParamStore<float>& store) {
  auto& params = store.trainable();
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.size(), 0.0);
      v_.emplace_back(p.value.size(), 0.0);
    }
  }
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto& m = m_[k];
    auto& v = v_[k];
    float* w = p.value.raw();
    const float* g = p.grad.raw();
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double gi = g[i];
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      const double update = cfg_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.epsilon);
      w[i] = static_cast<float>(static_cast<double>(w[i]) - update);
    }
  }
}

// ---------------------------------------------------------------------------
// Training

namespace {

Var<float> external_input(Tape<float>& tape, const Model<float>& model, const SampleSet& batch) {
  return model.config().external ? tape.constant(batch.external) : Var<float>{};
}

double max_abs_grad(const ParamStore<float>& store, bool* finite) {
  double m = 0;
  *finite = true;
  for (const auto& p : store.trainable()) {
    for (float g : p.grad.values()) {
      if (!std::isfinite(g)) *finite = false;
      else m = std::max(m, static_cast<double>(std::abs(g)));
    }
  }
  return m;
}

}  // namespace

std::vector<double> train(Model<float>& model, const SampleSet& data, const TrainConfig& cfg, std::uint64_t seed,
                          const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.size() < 2) throw ConfigError("training needs at least 2 samples, got " + std::to_string(data.size()));
  auto& store = model.params();
  Adam adam(cfg);
  Rng rng = Rng::derived(seed, "trainer.shuffle");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> curve;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0;
    std::size_t seen = 0, batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      if (n < 2) break;
      ++batch_no;
      const SampleSet batch = data.subset(std::span<const std::size_t>(order.data() + start, n));
      Tape<float> tape;
      Context<float> ctx(tape, Mode::train);
      Var<float> pred = model.forward(ctx, tape.constant(batch.closeness), external_input(tape, model, batch));
      Var<float> loss = mse_loss(pred, tape.constant(batch.target));
      const double value = loss.value()[0];
      store.zero_grad();
      tape.backward(loss);
      bool finite = true;
      const double gmax = max_abs_grad(store, &finite);
      if (!std::isfinite(value) || !finite) {
        std::ostringstream msg;
        msg << "non-finite " << (std::isfinite(value) ? "gradient" : "loss") << " at epoch " << epoch << ", batch "
            << batch_no << " (loss " << value << ", max |grad| " << gmax << (finite ? "" : ", some gradients NaN/inf")
            << ")";
        throw NumericalError(msg.str());
      }
      adam.step(store);
      total += value * static_cast<double>(n);
      seen += n;
    }
    curve.push_back(total / static_cast<double>(seen));
    if (on_epoch) on_epoch(epoch, curve.back());
  }
  return curve;
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

void check_pair(const Tensor<float>& pred, const Tensor<float>& truth, const char* what) {
  if (pred.shape() != truth.shape() || pred.rank() == 0 || pred.shape().back() != 2 || pred.empty()) {
    throw ShapeError(what, "prediction " + shape_str(pred.shape()) + " vs truth " + shape_str(truth.shape()) +
                               " (expected equal shapes ending in 2)");
  }
}

// Sum over regions of |di + do| / max(in + out, 1).
double ratio_sum(const Tensor<float>& pred, const Tensor<float>& truth) {
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); i += 2) {
    const double d = (static_cast<double>(pred[i]) - truth[i]) + (static_cast<double>(pred[i + 1]) - truth[i + 1]);
    const double total = static_cast<double>(truth[i]) + truth[i + 1];
    s += std::abs(d) / std::max(total, 1.0);
  }
  return s;
}

}  // namespace

double rmse(const Tensor<float>& pred, const Tensor<float>& truth) {
  check_pair(pred, truth, "rmse");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - truth[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(pred.size() / 2));
}

double mape(const Tensor<float>& pred, const Tensor<float>& truth) {
  check_pair(pred, truth, "mape");
  return 100.0 * ratio_sum(pred, truth) / static_cast<double>(pred.size() / 2);
}

double ape(const Tensor<float>& pred, const Tensor<float>& truth) {
  check_pair(pred, truth, "ape");
  return 100.0 * ratio_sum(pred, truth);
}

Metrics compute_metrics(const Tensor<float>& pred, const Tensor<float>& truth) {
  return {rmse(pred, truth), mape(pred, truth), ape(pred, truth)};
}

Tensor<float> predict_all(const Model<float>& model, const SampleSet& data, std::size_t batch) {
  if (data.size() == 0) throw ConfigError("evaluation set is empty");
  Tensor<float> out(data.target.shape());
  const std::size_t per = data.target.size() / data.size();
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t n = std::min(batch, data.size() - start);
    idx.resize(n);
    std::iota(idx.begin(), idx.end(), start);
    const SampleSet b = data.subset(idx);
    Tensor<float> ext = model.config().external ? b.external : Tensor<float>();
    Tensor<float> y = model.predict(b.closeness, ext);
    std::copy_n(y.raw(), n * per, out.raw() + start * per);
  }
  return out;
}

Metrics evaluate(const Model<float>& model, const SampleSet& data, const Normalizer& nrm) {
  return compute_metrics(nrm.denormalize(predict_all(model, data)), nrm.denormalize(data.target));
}

// ---------------------------------------------------------------------------
// Historical average

Tensor<float> ha_predict(const FlowDataset& ds, std::size_t boundary, const std::vector<std::size_t>& targets) {
  if (boundary == 0 || boundary > ds.frames()) throw ConfigError("historical average needs training frames");
  const std::size_t N = ds.height, M = ds.width, plane = N * M, frame = 2 * plane;
  auto key = [&](std::size_t t) {
    const Timestamp when = ds.time(t);
    return day_of_week(when) * 1440u + minute_of_day(when);
  };
  std::map<unsigned, std::pair<std::vector<double>, std::size_t>> sums;
  std::vector<double> global(frame, 0.0);
  for (std::size_t t = 0; t < boundary; ++t) {
    auto& [acc, n] = sums[key(t)];
    acc.resize(frame, 0.0);
    const float* src = ds.flows.raw() + t * frame;
    for (std::size_t i = 0; i < frame; ++i) {
      acc[i] += src[i];
      global[i] += src[i];
    }
    ++n;
  }
  Tensor<float> out({targets.size(), N, M, 2});
  for (std::size_t s = 0; s < targets.size(); ++s) {
    auto it = sums.find(key(targets[s]));
    const std::vector<double>& acc = it != sums.end() ? it->second.first : global;
    const double n = it != sums.end() ? static_cast<double>(it->second.second) : static_cast<double>(boundary);
    float* dst = out.raw() + s * frame;
    for (std::size_t q = 0; q < plane; ++q) {
      dst[2 * q] = static_cast<float>(acc[q] / n);
      dst[2 * q + 1] = static_cast<float>(acc[plane + q] / n);
    }
  }
  return out;
}

Metrics ha_baseline(const FlowDataset& ds, std::size_t boundary, std::size_t closeness) {
  const std::size_t first = std::max(closeness, boundary);
  if (first >= ds.frames()) throw ConfigError("historical average: test split is empty");
  std::vector<std::size_t> targets;
  for (std::size_t t = first; t < ds.frames(); ++t) targets.push_back(t);
  const std::size_t plane = ds.height * ds.width;
  Tensor<float> truth({targets.size(), ds.height, ds.width, 2});
  for (std::size_t s = 0; s < targets.size(); ++s) {
    const float* src = ds.flows.raw() + targets[s] * 2 * plane;
    for (std::size_t q = 0; q < plane; ++q) {
      truth[(s * plane + q) * 2] = src[q];
      truth[(s * plane + q) * 2 + 1] = src[plane + q];
    }
  }
  return compute_metrics(ha_predict(ds, boundary, targets), truth);
}

// ---------------------------------------------------------------------------
// Replicas

std::string format_mean_std(double mean, double std, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << mean << "±" << std;
  return os.str();
}

ReplicaReport ReplicaReport::aggregate(std::vector<ReplicaRow> rows) {
  if (rows.empty()) throw ConfigError("no replicas to aggregate");
  ReplicaReport r;
  r.rows = std::move(rows);
  const double n = static_cast<double>(r.rows.size());
  for (const auto& row : r.rows) {
    r.mean.rmse += row.metrics.rmse / n;
    r.mean.mape += row.metrics.mape / n;
    r.mean.ape += row.metrics.ape / n;
  }
  for (const auto& row : r.rows) {
    r.std.rmse += (row.metrics.rmse - r.mean.rmse) * (row.metrics.rmse - r.mean.rmse) / n;
    r.std.mape += (row.metrics.mape - r.mean.mape) * (row.metrics.mape - r.mean.mape) / n;
    r.std.ape += (row.metrics.ape - r.mean.ape) * (row.metrics.ape - r.mean.ape) / n;
  }
  r.std.rmse = std::sqrt(r.std.rmse);
  r.std.mape = std::sqrt(r.std.mape);
  r.std.ape = std::sqrt(r.std.ape);
  return r;
}

namespace {

std::string shortest(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

std::string ReplicaReport::csv() const {
  std::string s = "seed,rmse,mape,ape\n";
  auto line = [&](const std::string& label, const Metrics& m) {
    s += label + "," + shortest(m.rmse) + "," + shortest(m.mape) + "," + shortest(m.ape) + "\n";
  };
  for (const auto& r : rows) line(std::to_string(r.seed), r.metrics);
  line("mean", mean);
  line("std", std);
  return s;
}

std::string ReplicaReport::table() const {
  std::ostringstream os;
  os << std::left << std::setw(8) << "seed" << std::right << std::setw(12) << "RMSE" << std::setw(12) << "MAPE"
     << std::setw(14) << "APE" << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    os << std::left << std::setw(8) << r.seed << std::right << std::setw(12) << r.metrics.rmse << std::setw(12)
       << r.metrics.mape << std::setw(14) << r.metrics.ape << '\n';
  }
  os << "RMSE " << format_mean_std(mean.rmse, std.rmse) << "  MAPE " << format_mean_std(mean.mape, std.mape)
     << "  APE " << format_mean_std(mean.ape, std.ape) << '\n';
  return os.str();
}

ReplicaReport run_replicas(const ModelConfig& model, const PreparedData& data, const TrainConfig& cfg,
                           std::size_t threads, const ReplicaHooks& hooks) {
  cfg.validate();
  const std::size_t n = cfg.seeds.size();
  std::vector<ReplicaRow> rows(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        ModelConfig c = model;
        c.seed = cfg.seeds[i];
        Model<float> m(c);
        rows[i].seed = c.seed;
        EpochCallback progress;
        if (hooks.on_epoch) progress = [&](std::size_t e, double l) { hooks.on_epoch(c.seed, e, l); };
        rows[i].loss = train(m, data.train, cfg, c.seed, progress);
        rows[i].metrics = evaluate(m, data.test, data.normalizer);
        if (hooks.on_done) hooks.on_done(rows[i], m);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, n));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i]) continue;
    const std::string prefix = "replica seed=" + std::to_string(cfg.seeds[i]) + ": ";
    try {
      std::rethrow_exception(errors[i]);
    } catch (const NumericalError& e) {
      throw NumericalError(prefix + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(prefix + e.what());
    } catch (const IoError& e) {
      throw IoError(prefix + e.what());
    } catch (const std::exception& e) {
      throw std::runtime_error(prefix + e.what());
    }
  }
  return ReplicaReport::aggregate(std::move(rows));
}

std::string csv_header(std::uint32_t digest, std::uint64_t seed) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "# stflow %s config=%08x seed=%llu\n", kVersion, digest,
                static_cast<unsigned long long>(seed));
  return buf;
}

std::string csv_header(std::uint32_t digest, const std::vector<std::uint64_t>& seeds) {
  std::string list;
  for (std::size_t i = 0; i < seeds.size(); ++i) list += (i ? "," : "") + std::to_string(seeds[i]);
  char buf[64];
  std::snprintf(buf, sizeof buf, "# stflow %s config=%08x seed=", kVersion, digest);
  return buf + list + "\n";
}

std::string loss_csv(const std::vector<double>& loss) {
  std::string s = "epoch,loss\n";
  for (std::size_t e = 0; e < loss.size(); ++e) s += std::to_string(e + 1) + "," + shortest(loss[e]) + "\n";
  return s;
}

}  // namespace stflow
