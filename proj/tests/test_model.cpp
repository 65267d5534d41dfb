#include <cstdio>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "stflow/model.hpp"

using namespace stflow;
using namespace testing;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("stflow_test_model_" + name)).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
}

ModelConfig tiny() {
  ModelConfig c;
  c.closeness = 3;
  c.levels = 1;
  c.grid_height = 4;
  c.grid_width = 4;
  c.filters = 4;
  c.bottleneck = 4;
  c.attention_ratio = 2;
  c.attention_kernel = 2;
  c.embedding_width = 3;
  return c;
}

// Closed-form trainable parameter count, written out layer by layer.
std::size_t expected_params(const ModelConfig& c) {
  const std::size_t F = c.filters, C = c.bottleneck, k2 = c.kernel * c.kernel;
  auto conv = [](std::size_t kk, std::size_t ci, std::size_t co) { return kk * ci * co + co; };
  auto crb = [&](std::size_t kk, std::size_t ci, std::size_t co) { return conv(kk, ci, co) + 2 * co; };
  std::size_t n = crb(k2, 2, F);
  n += c.levels * (2 * crb(k2, F, F) + crb(9, F, F));
  n += crb(k2, F, C);
  n += (c.closeness - 1) * (10 * conv(k2, C, C));
  if (c.external) {
    for (std::size_t g : {7, 1, 1, 1, 1, 3}) n += g * c.embedding_width + c.embedding_width;
    const std::size_t latent = c.latent_height() * c.latent_width() * C;
    n += 6 * c.embedding_width * latent + latent;
  }
  n += crb(k2, C, F);
  n += c.levels * (conv(9, F, F) + 2 * crb(k2, F, F) + (c.long_skip ? 2 * F : 0));
  n += crb(k2, F, C);
  if (c.attention) {
    const std::size_t r = C / c.attention_ratio, ka = c.attention_kernel * c.attention_kernel;
    n += C * r + r + r * C + C + 2 * C;
    n += 2 * conv(ka, 1, 1) + 2 * c.grid_height * c.grid_width;
  }
  n += conv(k2, C, 2);
  return n;
}

template <typename T>
Tensor<T> random_frames(Rng& rng, const ModelConfig& c, std::size_t batch) {
  return random_tensor<T>(rng, {batch, c.closeness, c.grid_height, c.grid_width, 2});
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(ModelConfig::bike_nyc().validate());
  CHECK_NOTHROW(ModelConfig::taxi_bj().validate());
  auto c = ModelConfig::bike_nyc();
  c.levels = 4;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("levels=4"), ConfigError);
  c = ModelConfig::bike_nyc();
  c.closeness = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig::bike_nyc();
  c.attention_ratio = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig::bike_nyc();
  c.levels = 4;
  CHECK_THROWS_AS(Model<float>{c}, ConfigError);
}

TEST_CASE("config json is strict and round-trips") {
  auto c = ModelConfig::taxi_bj();
  c.seed = 42;
  c.attention = false;
  auto back = ModelConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK_THROWS_AS(ModelConfig::from_json(nlohmann::json{{"levles", 2}}), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json(nlohmann::json{{"levels", "two"}}), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json(nlohmann::json{{"levels", -1}}), ConfigError);
  CHECK_THROWS_AS(ModelConfig::from_json(nlohmann::json{{"attention", 1}}), ConfigError);
  CHECK(ModelConfig::from_json(nlohmann::json::object()).to_json() == ModelConfig{}.to_json());

  auto d = c;
  d.seed = 7;
  CHECK(d.digest() == c.digest());
  d.filters = 32;
  CHECK(d.digest() != c.digest());
}

TEST_CASE("BikeNYC shapes") {
  const auto c = ModelConfig::bike_nyc();
  Model<float> model(c);
  Rng rng(1);
  Tape<float> tape;
  Context<float> ctx(tape, Mode::train);
  auto x = tape.constant(random_frames<float>(rng, c, 2));
  auto e = tape.constant(random_tensor<float>(rng, {2, 14}));
  auto t = model.trace(ctx, x, e);
  CHECK(t.encoder.final.shape() == Shape{2, 4, 4, 2, 16});
  CHECK(t.cascade.shape() == Shape{2, 4, 2, 16});
  CHECK(t.external.shape() == Shape{2, 4, 2, 16});
  CHECK(t.prediction.shape() == Shape{2, 16, 8, 2});
  CHECK_THROWS_AS(model.forward(ctx, x, tape.constant(Tensor<float>({3, 14}))), ShapeError);
  CHECK_THROWS_AS(model.forward(ctx, tape.constant(Tensor<float>({2, 3, 16, 8, 2})), e), ShapeError);
}

TEST_CASE("parameter counts match the closed form") {
  for (auto c : {ModelConfig::bike_nyc(), ModelConfig::taxi_bj(), tiny()}) {
    for (int flags = 0; flags < 8; ++flags) {
      c.long_skip = flags & 1;
      c.attention = flags & 2;
      c.external = flags & 4;
      Model<float> model(c);
      auto s = summarize(model);
      CAPTURE(flags);
      CHECK(model.params().trainable_count() == expected_params(c));
      CHECK(s.total_params == expected_params(c));
    }
  }
  CHECK(expected_params(ModelConfig::bike_nyc()) == 557048);
  CHECK(expected_params(ModelConfig::taxi_bj()) == 793592);
}

TEST_CASE("summary rows") {
  auto c = tiny();
  Model<double> model(c);
  auto s = summarize(model);
  REQUIRE(!s.rows.empty());
  CHECK(s.rows.front().name == "encoder.conv0");
  CHECK(s.rows.back().name == "decoder.output");
  // 3 frames of a 3x3 conv 2->4 on 4x4 (2 per MAC + bias), then ReLU and BN.
  CHECK(s.rows.front().flops == 3 * (2 * 16 * 9 * 2 * 4 + 16 * 4 + 3 * 16 * 4));
  // 3x3 conv 4->2 on 4x4 plus tanh.
  CHECK(s.rows.back().flops == 2 * 16 * 9 * 4 * 2 + 16 * 2 + 16 * 2);
  std::uint64_t flops = 0;
  for (const auto& r : s.rows) flops += r.flops;
  CHECK(flops == s.total_flops);
  CHECK(s.table().find("total") != std::string::npos);
  CHECK(s.csv().rfind("layer,output,params,flops\n", 0) == 0);
}

TEST_CASE("ablation flags remove parameters") {
  const auto base = ModelConfig::bike_nyc();
  const std::size_t full = Model<float>(base).params().trainable_count();
  auto no_lsc = base, no_att = base, no_ext = base;
  no_lsc.long_skip = false;
  no_att.attention = false;
  no_ext.external = false;
  CHECK(Model<float>(no_lsc).params().trainable_count() < full);
  CHECK(Model<float>(no_att).params().trainable_count() < full);
  CHECK(Model<float>(no_ext).params().trainable_count() < full);
  for (std::size_t p : {3, 5}) {
    auto c = base;
    c.closeness = p;
    Model<float> m(c);
    CHECK(m.cascade().levels.size() == p - 1);
  }
}

TEST_CASE("without attention the output equals unit attention maps") {
  auto with = tiny();
  auto without = with;
  without.attention = false;
  Model<double> a(with), b(without);
  Rng rng(3);
  auto x = random_frames<double>(rng, with, 2);
  auto e = random_tensor<double>(rng, {2, 14});
  Tape<double> tape;
  Context<double> ca(tape, Mode::eval);
  ca.unit_attention = true;
  Context<double> cb(tape, Mode::eval);
  auto ya = a.forward(ca, tape.constant(x), tape.constant(e)).value();
  auto yb = b.forward(cb, tape.constant(x), tape.constant(e)).value();
  CHECK(ya.values() == yb.values());
}

TEST_CASE("without the external branch the factors are ignored") {
  auto c = tiny();
  c.external = false;
  Model<double> m(c);
  Rng rng(4);
  auto x = random_frames<double>(rng, c, 2);
  auto y1 = m.predict(x, random_tensor<double>(rng, {2, 14}));
  auto y2 = m.predict(x, Tensor<double>());
  CHECK(y1.values() == y2.values());
  c.external = true;
  Model<double> m2(c);
  CHECK(m2.predict(x, random_tensor<double>(rng, {2, 14})).values() !=
        m2.predict(x, random_tensor<double>(rng, {2, 14})).values());
}

TEST_CASE("predict matches an eval-mode forward and leaves BN state alone") {
  auto c = tiny();
  Model<double> m(c);
  Rng rng(5);
  auto x = random_frames<double>(rng, c, 3);
  auto e = random_tensor<double>(rng, {3, 14});
  const auto before = m.params().buffers().front().value.values();
  auto y = m.predict(x, e);
  CHECK(m.params().buffers().front().value.values() == before);
  Tape<double> tape;
  Context<double> ctx(tape, Mode::eval);
  CHECK(m.forward(ctx, tape.constant(x), tape.constant(e)).value().values() == y.values());
}

TEST_CASE("same seed gives identical parameters, different seeds differ") {
  auto c = tiny();
  Model<float> a(c), b(c);
  c.seed = 1;
  Model<float> d(c);
  bool differs = false;
  for (std::size_t i = 0; i < a.params().trainable().size(); ++i) {
    CHECK(a.params().trainable()[i].value.values() == b.params().trainable()[i].value.values());
    differs |= a.params().trainable()[i].value.values() != d.params().trainable()[i].value.values();
  }
  CHECK(differs);
}

TEST_CASE("checkpoint round trip") {
  auto c = tiny();
  c.seed = 3;
  Model<float> m(c);
  // Move the BN running statistics away from their initial values.
  Rng rng(6);
  {
    Tape<float> tape;
    Context<float> ctx(tape, Mode::train);
    m.forward(ctx, tape.constant(random_frames<float>(rng, c, 2)), tape.constant(random_tensor<float>(rng, {2, 14})));
  }
  const std::string path = temp_path("rt.ckpt");
  save_checkpoint(path, m, nlohmann::json{{"epoch", 5}});

  auto header = read_checkpoint_header(path);
  CHECK(header.config.to_json() == c.to_json());
  CHECK(header.metadata.at("epoch") == 5);

  auto other_cfg = c;
  other_cfg.seed = 99;
  Model<float> other(other_cfg);
  auto meta = load_checkpoint(path, other);
  CHECK(meta.at("epoch") == 5);
  for (std::size_t i = 0; i < m.params().trainable().size(); ++i) {
    CHECK(m.params().trainable()[i].value.values() == other.params().trainable()[i].value.values());
  }
  for (std::size_t i = 0; i < m.params().buffers().size(); ++i) {
    CHECK(m.params().buffers()[i].value.values() == other.params().buffers()[i].value.values());
  }

  // Saving the same state twice gives the same bytes.
  const std::string path2 = temp_path("rt2.ckpt");
  save_checkpoint(path2, m, nlohmann::json{{"epoch", 5}});
  CHECK(slurp(path) == slurp(path2));

  // A 32-bit checkpoint loads into a 64-bit model.
  Model<double> wide(c);
  load_checkpoint(path, wide);
  CHECK(wide.params().trainable().front().value[0] == static_cast<double>(m.params().trainable().front().value[0]));
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("checkpoint errors") {
  auto c = tiny();
  Model<float> m(c);
  const std::string path = temp_path("err.ckpt");
  save_checkpoint(path, m, nlohmann::json::object());
  const std::string good = slurp(path);

  auto wrong = c;
  wrong.filters = 8;
  Model<float> mw(wrong);
  CHECK_THROWS_AS(load_checkpoint(path, mw), CompatibilityError);

  Model<float> target(c);
  std::string bad = good;
  bad[bad.size() / 2] ^= 0x5a;
  spit(path, bad);
  CHECK_THROWS_AS(load_checkpoint(path, target), IoError);

  spit(path, good.substr(0, good.size() - 9));
  CHECK_THROWS_AS(load_checkpoint(path, target), IoError);

  spit(path, "not a checkpoint");
  CHECK_THROWS_AS(load_checkpoint(path, target), IoError);

  bad = good;
  bad[8] = 2;  // version field
  spit(path, bad);
  CHECK_THROWS_AS(load_checkpoint(path, target), CompatibilityError);

  std::remove(path.c_str());
  CHECK_THROWS_AS(load_checkpoint(path, target), IoError);
  CHECK_THROWS_AS(save_checkpoint("/nonexistent-dir/x.ckpt", m, nlohmann::json::object()), IoError);
}
