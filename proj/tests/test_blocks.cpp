#include "helpers.hpp"
#include "stflow/blocks.hpp"

using namespace stflow;
using namespace testing;

namespace {

// Frame t of a [B, H, h, w, c] tensor.
oracle::Grid frame(const Tensor<double>& seq, std::size_t t) {
  oracle::Grid g(seq.dim(0), seq.dim(2), seq.dim(3), seq.dim(4));
  const std::size_t per = g.h * g.w * g.c;
  for (std::size_t n = 0; n < g.b; ++n)
    for (std::size_t i = 0; i < per; ++i) g.v[n * per + i] = seq[(n * seq.dim(1) + t) * per + i];
  return g;
}

}  // namespace

TEST_CASE("ParamStore: initial values depend only on seed, name and shape") {
  ParamStore<double> a(7), b(7), c(8);
  a.glorot("x.w", {3, 4}, 3, 4);
  auto& wa = a.glorot("y.w", {5, 6}, 5, 6);
  auto& wb = b.glorot("y.w", {5, 6}, 5, 6);
  auto& wc = c.glorot("y.w", {5, 6}, 5, 6);
  CHECK(wa.value.values() == wb.value.values());
  CHECK(wa.value.values() != wc.value.values());
  const double limit = std::sqrt(6.0 / 11.0);
  for (double v : wa.value.values()) CHECK(std::abs(v) <= limit);
  CHECK_THROWS_AS(a.glorot("y.w", {1}, 1, 1), std::logic_error);
  a.buffer("y.running_mean", {6}, 0.0);
  CHECK_THROWS_AS(a.filled("y.running_mean", {6}, 0.0), std::logic_error);
  CHECK(a.trainable_count() == 12 + 30);
  CHECK(a.trainable_count("y.") == 30);
  CHECK(a.find("y.running_mean") != nullptr);
  CHECK(a.find("nope") == nullptr);
}

TEST_CASE("Context binds each parameter once per forward") {
  ParamStore<double> store(1);
  auto& p = store.filled("p", {2}, 1.0);
  Tape<double> tape;
  Context<double> ctx(tape, Mode::train);
  auto v1 = ctx.bind(p);
  auto v2 = ctx.bind(p);
  CHECK(v1.id() == v2.id());
  CHECK(v1.requires_grad());
  Tape<double> tape2;
  Context<double> frozen(tape2, Mode::eval);
  frozen.grad = false;
  CHECK_FALSE(frozen.bind(p).requires_grad());
}

TEST_CASE("MU and CMU match the loop oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t c = 1 + rng.below(4), k = 1 + 2 * rng.below(2), h = 1 + rng.below(4), w = 1 + rng.below(4);
    ParamStore<double> store(trial);
    auto mu = MU<double>::make(store, "mu", c, k);
    auto cmu = CMU<double>::make(store, "cmu", c, k);
    randomize(store, rng);
    auto x = random_tensor<double>(rng, {2, h, w, c});
    auto y = random_tensor<double>(rng, {2, h, w, c});
    Tape<double> tape;
    Context<double> ctx(tape, Mode::train);
    auto got_mu = mu(ctx, tape.constant(x)).value();
    auto want_mu = oracle::mu(to_oracle(mu), to_grid(x));
    CHECK(max_abs_diff(got_mu, want_mu.v) < 1e-12);
    auto got_cmu = cmu(ctx, tape.constant(x), tape.constant(y)).value();
    auto want_cmu = oracle::cmu(to_oracle(cmu), to_grid(x), to_grid(y));
    CHECK(max_abs_diff(got_cmu, want_cmu.v) < 1e-12);
  }
}

TEST_CASE("cascade matches pairwise application of the oracle") {
  Rng rng(12);
  for (std::size_t frames = 2; frames <= 5; ++frames) {
    ParamStore<double> store(frames);
    auto cascade = Cascade<double>::make(store, frames, 3, 3);
    CHECK(cascade.levels.size() == frames - 1);
    randomize(store, rng);
    auto seq = random_tensor<double>(rng, {2, frames, 3, 2, 3});
    Tape<double> tape;
    Context<double> ctx(tape, Mode::train);
    auto got = cascade(ctx, tape.constant(seq)).value();
    CHECK(got.shape() == Shape{2, 3, 2, 3});
    std::vector<oracle::Cmu> levels;
    for (const auto& c : cascade.levels) levels.push_back(to_oracle(c));
    std::vector<oracle::Grid> grids;
    for (std::size_t t = 0; t < frames; ++t) grids.push_back(frame(seq, t));
    CHECK(max_abs_diff(got, oracle::cascade(levels, grids).v) < 1e-12);
  }
  ParamStore<double> store(0);
  auto cascade = Cascade<double>::make(store, 3, 2, 3);
  Tape<double> tape;
  Context<double> ctx(tape, Mode::train);
  CHECK_THROWS_AS(cascade(ctx, tape.constant(Tensor<double>({1, 4, 2, 2, 2}))), ShapeError);
  CHECK_THROWS_AS(Cascade<double>::make(store, 1, 2, 3), std::invalid_argument);
}

TEST_CASE("attention modules match the loop oracle") {
  Rng rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t ratio = 1 + rng.below(3), c = ratio * (1 + rng.below(3));
    const std::size_t h = 1 + rng.below(5), w = 1 + rng.below(5), k = 2 + rng.below(3);
    ParamStore<double> store(trial);
    auto ca = ChannelAttention<double>::make(store, c, ratio);
    auto sa = SpatialAttention<double>::make(store, h, w, k);
    randomize(store, rng, 1.0);
    auto d = random_tensor<double>(rng, {3, h, w, c});
    Tape<double> tape;
    Context<double> ctx(tape, Mode::train);
    auto got_c = ca(ctx, tape.constant(d)).value();
    auto want_c = oracle::channel_attention(to_grid(d), to_oracle(ca.reduce), to_oracle(ca.expand),
                                            to_vec(ca.lambda->value), to_vec(ca.gamma->value));
    CHECK(max_abs_diff(got_c, want_c.v) < 1e-12);
    auto got_s = sa(ctx, tape.constant(d)).value();
    auto want_s = oracle::spatial_attention(to_grid(d), to_oracle(sa.conv_max), to_oracle(sa.conv_avg),
                                            to_vec(sa.lambda->value), to_vec(sa.gamma->value));
    CHECK(max_abs_diff(got_s, want_s.v) < 1e-12);

    ctx.unit_attention = true;
    CHECK(max_abs_diff(sa(ctx, ca(ctx, tape.constant(d))).value(), to_vec(d)) == 0.0);
  }
  ParamStore<double> store(0);
  CHECK_THROWS_AS(ChannelAttention<double>::make(store, 6, 4), std::invalid_argument);
}

TEST_CASE("attention parameter shapes") {
  ParamStore<double> store(0);
  auto ca = ChannelAttention<double>::make(store, 16, 4);
  auto sa = SpatialAttention<double>::make(store, 16, 8, 4);
  CHECK(ca.reduce.weight->value.shape() == Shape{16, 4});
  CHECK(ca.expand.weight->value.shape() == Shape{4, 16});
  CHECK(ca.lambda->value.shape() == Shape{16});
  CHECK(sa.lambda->value.shape() == Shape{16, 8, 1});
  CHECK(sa.conv_max.weight->value.shape() == Shape{4, 4, 1, 1});
  // mlp 16*4+4 + 4*16+16, lambda/gamma 2*16; two 4x4 convs with bias, lambda/gamma 2*128
  CHECK(store.trainable_count("decoder.channel_attention.") == 148 + 32);
  CHECK(store.trainable_count("decoder.spatial_attention.") == 34 + 256);
}

TEST_CASE("encoder shapes and level outputs") {
  ParamStore<double> store(0);
  auto enc = Encoder<double>::make(store, 2, 8, 4, 3);
  Rng rng(14);
  auto x = random_tensor<double>(rng, {2, 3, 16, 8, 2});
  Tape<double> tape;
  Context<double> ctx(tape, Mode::train);
  auto st = enc(ctx, tape.constant(x));
  REQUIRE(st.levels.size() == 3);
  REQUIRE(st.eru.size() == 2);
  CHECK(st.levels[0].shape() == Shape{2, 3, 16, 8, 8});
  CHECK(st.levels[1].shape() == Shape{2, 3, 8, 4, 8});
  CHECK(st.levels[2].shape() == Shape{2, 3, 4, 2, 8});
  CHECK(st.eru[0].shape() == Shape{2, 3, 16, 8, 8});
  CHECK(st.eru[1].shape() == Shape{2, 3, 8, 4, 8});
  CHECK(st.final.shape() == Shape{2, 3, 4, 2, 4});
  CHECK_THROWS_AS(enc(ctx, tape.constant(Tensor<double>({1, 3, 10, 8, 2}))), ShapeError);
  CHECK_THROWS_AS(enc(ctx, tape.constant(Tensor<double>({1, 3, 16, 8, 3}))), ShapeError);
}

TEST_CASE("encoder treats frames independently") {
  // Eval-mode BN makes the per-frame map a pure function of that frame.
  ParamStore<double> store(3);
  auto enc = Encoder<double>::make(store, 1, 4, 2, 3);
  Rng rng(15);
  auto x = random_tensor<double>(rng, {1, 3, 4, 4, 2});
  auto x2 = x;
  for (std::size_t i = 0; i < 32; ++i) x2[2 * 32 + i] = rng.uniform(-1, 1);
  Tape<double> tape;
  Context<double> ctx(tape, Mode::eval);
  auto a = enc(ctx, tape.constant(x)).final.value();
  auto b = enc(ctx, tape.constant(x2)).final.value();
  const std::size_t per = 2 * 2 * 2;
  for (std::size_t i = 0; i < 2 * per; ++i) CHECK(a[i] == b[i]);
  bool changed = false;
  for (std::size_t i = 2 * per; i < 3 * per; ++i) changed |= a[i] != b[i];
  CHECK(changed);
}

TEST_CASE("external branch") {
  ParamStore<double> store(0);
  auto ext = ExternalBranch<double>::make(store, 5, 4, 2, 3);
  std::size_t expected = 0;
  for (auto g : external_groups()) expected += g * 5 + 5;
  expected += (30 + 1) * 24;
  CHECK(store.trainable_count() == expected);
  Rng rng(16);
  randomize(store, rng);
  auto e = random_tensor<double>(rng, {2, 14});
  Tape<double> tape;
  Context<double> ctx(tape, Mode::train);
  auto out = ext(ctx, tape.constant(e)).value();
  CHECK(out.shape() == Shape{2, 4, 2, 3});

  // Oracle: per-group relu(dense), concatenated, then a linear dense layer.
  for (std::size_t n = 0; n < 2; ++n) {
    std::vector<double> hidden;
    std::size_t offset = 0;
    for (std::size_t g = 0; g < external_groups().size(); ++g) {
      std::vector<double> part(e.values().begin() + n * 14 + offset,
                               e.values().begin() + n * 14 + offset + external_groups()[g]);
      for (double v : oracle::dense(part, to_vec(ext.embed[g].weight->value), to_vec(ext.embed[g].bias->value))) {
        hidden.push_back(oracle::relu(v));
      }
      offset += external_groups()[g];
    }
    auto y = oracle::dense(hidden, to_vec(ext.project.weight->value), to_vec(ext.project.bias->value));
    for (std::size_t i = 0; i < 24; ++i) CHECK(out[n * 24 + i] == doctest::Approx(y[i]).epsilon(1e-12));
  }
  CHECK_THROWS_AS(ext(ctx, tape.constant(Tensor<double>({2, 13}))), ShapeError);
}

TEST_CASE("decoder shapes and skip validation") {
  ParamStore<double> store(0);
  auto dec = Decoder<double>::make(store, 2, 8, 4, 3, 16, 8, true, true, 2, 4);
  Rng rng(17);
  Tape<double> tape;
  Context<double> ctx(tape, Mode::train);
  auto z = tape.constant(random_tensor<double>(rng, {2, 4, 2, 4}));
  std::vector<Var<double>> skips{tape.constant(random_tensor<double>(rng, {2, 16, 8, 8})),
                                 tape.constant(random_tensor<double>(rng, {2, 8, 4, 8}))};
  auto y = dec(ctx, z, skips).value();
  CHECK(y.shape() == Shape{2, 16, 8, 2});
  for (double v : y.values()) CHECK(std::abs(v) < 1.0);
  std::swap(skips[0], skips[1]);
  CHECK_THROWS_AS(dec(ctx, z, skips), ShapeError);
  CHECK_THROWS_AS(dec(ctx, z, {}), ShapeError);

  ParamStore<double> plain(0);
  auto dec2 = Decoder<double>::make(plain, 2, 8, 4, 3, 16, 8, false, false, 2, 4);
  CHECK(dec2.merge.empty());
  CHECK(dec2(ctx, z, {}).shape() == Shape{2, 16, 8, 2});
  CHECK(store.trainable_count() - plain.trainable_count() ==
        2 * 16 + store.trainable_count("decoder.channel_attention.") +
            store.trainable_count("decoder.spatial_attention."));
}

TEST_CASE("blocks pass gradcheck in 64-bit") {
  Rng rng(18);
  ParamStore<double> store(5);
  auto cmu = CMU<double>::make(store, "cmu", 2, 3);
  auto ca = ChannelAttention<double>::make(store, 4, 2);
  auto sa = SpatialAttention<double>::make(store, 3, 4, 4);
  randomize(store, rng);
  auto older = random_tensor<double>(rng, {2, 3, 2, 2});
  auto recent = random_tensor<double>(rng, {2, 3, 2, 2});
  auto d = distinct_tensor(rng, {2, 3, 4, 4});
  auto wy = random_tensor<double>(rng, {2, 3, 2, 2});
  auto wd = random_tensor<double>(rng, {2, 3, 4, 4});

  auto cmu_loss = [&](Tape<double>& t, const Var<double>& x) {
    Context<double> ctx(t, Mode::train);
    return sum(mul(cmu(ctx, x, t.constant(recent)), t.constant(wy)));
  };
  auto att_loss = [&](Tape<double>& t, const Var<double>& x) {
    Context<double> ctx(t, Mode::train);
    return sum(mul(sa(ctx, ca(ctx, x)), t.constant(wd)));
  };
  auto r1 = gradcheck(cmu_loss, older);
  CHECK(r1.max_rel_error < 1e-7);
  auto r2 = gradcheck(att_loss, d);
  CHECK(r2.max_rel_error < 1e-6);

  std::vector<ParamCoordinate> coords;
  for (auto& p : store.trainable()) {
    for (std::size_t i = 0; i < p.value.size(); i += 3) coords.push_back({&p, i});
  }
  auto r3 = gradcheck_parameters(
      [&](Tape<double>& t) {
        Context<double> ctx(t, Mode::train);
        return add(sum(mul(cmu(ctx, t.constant(older), t.constant(recent)), t.constant(wy))),
                   sum(mul(sa(ctx, ca(ctx, t.constant(d))), t.constant(wd))));
      },
      coords);
  CAPTURE(r3.worst_analytic);
  CAPTURE(r3.worst_numeric);
  CHECK(r3.max_rel_error < 1e-6);
}
