#include <doctest.h>

#include <cmath>
#include <set>

#include "stflow/autodiff.hpp"

using namespace stflow;

namespace {

Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Random values with |v| >= 0.05, so finite differences never straddle the
// ReLU kink.
Tensor<double> off_kink_tensor(Rng& rng, Shape shape) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.05, 1.0);
  return t;
}

Shape random_shape(Rng& rng, std::size_t max_rank = 3) {
  Shape s(1 + rng.below(max_rank));
  for (auto& d : s) d = 1 + rng.below(4);
  return s;
}

// Central difference with a coarser step, used as an independent oracle
// against the tape's gradients.
double numeric_partial(const std::function<double(const Tensor<double>&)>& f, Tensor<double> x,
                       std::size_t i, double eps = 1e-4) {
  const double orig = x[i];
  x[i] = orig + eps;
  const double up = f(x);
  x[i] = orig - eps;
  const double down = f(x);
  return (up - down) / (2 * eps);
}

}  // namespace

TEST_CASE("tensor construction and indexing") {
  Tensor<float> t({2, 3}, 1.5f);
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  t.at({1, 2}) = 4.0f;
  CHECK(t[5] == 4.0f);
  CHECK_THROWS_AS(t.at({2, 0}), std::out_of_range);
  CHECK_THROWS_AS(Tensor<float>({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>(3)), ShapeError);

  auto r = t.reshaped({3, 2});
  CHECK(r.shape() == Shape{3, 2});
  CHECK(r.values() == t.values());
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
}

TEST_CASE("rng is reproducible and label-derived streams differ") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 10; ++i) {
    const auto va = a.next_u64();
    CHECK(va == b.next_u64());
    CHECK(va != c.next_u64());
  }
  Rng d1 = Rng::derived(7, "enc.conv0.w"), d2 = Rng::derived(7, "enc.conv0.w"), d3 = Rng::derived(7, "enc.conv0.b");
  CHECK(d1.next_u64() == d2.next_u64());
  CHECK(Rng::derived(7, "enc.conv0.w").next_u64() != d3.next_u64());

  // mt19937_64 reference value: the 10000th output of a default-seeded engine.
  std::mt19937_64 ref;
  ref.discard(9999);
  CHECK(ref() == 9981545732273789042ull);

  Rng u(1);
  double lo = 1, hi = 0, acc = 0;
  for (int i = 0; i < 20000; ++i) {
    const double x = u.uniform();
    lo = std::min(lo, x);
    hi = std::max(hi, x);
    acc += x;
  }
  CHECK(lo >= 0.0);
  CHECK(hi < 1.0);
  CHECK(acc / 20000 == doctest::Approx(0.5).epsilon(0.02));

  Rng n(2);
  double s1 = 0, s2 = 0;
  for (int i = 0; i < 20000; ++i) {
    const double x = n.normal();
    s1 += x;
    s2 += x * x;
  }
  CHECK(std::abs(s1 / 20000) < 0.03);
  CHECK(s2 / 20000 == doctest::Approx(1.0).epsilon(0.03));

  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
  Rng sh(3);
  sh.shuffle(v);
  CHECK(std::set<int>(v.begin(), v.end()).size() == 8);
}

TEST_CASE("elementwise arithmetic") {
  Tape<float> tape;
  auto a = tape.constant(Tensor<float>({2}, {1, 2}));
  auto b = tape.constant(Tensor<float>({2}, {3, 4}));
  CHECK(add(a, b).value().values() == std::vector<float>{4, 6});
  CHECK(mul(a, tape.constant(Tensor<float>::ones({2}))).value().values() == a.value().values());
  auto m = matmul(tape.constant(Tensor<float>({2, 3})), tape.constant(Tensor<float>({3, 4})));
  CHECK(m.shape() == Shape{2, 4});
  CHECK(relu(tape.constant(Tensor<float>({2}, {-1, 2}))).value().values() == std::vector<float>{0, 2});
  CHECK(sigmoid(tape.constant(Tensor<float>::scalar(0))).value()[0] == 0.5f);
}

TEST_CASE("shape errors name the op and the dims") {
  Tape<float> tape;
  auto a = tape.constant(Tensor<float>({2, 3}));
  auto b = tape.constant(Tensor<float>({4, 3}));
  try {
    (void)add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK_THROWS_AS(concat<float>({a, b}, 1), ShapeError);
}

TEST_CASE("broadcasting follows trailing-axis alignment") {
  CHECK(broadcast_shape("t", {2, 3, 4}, {4}) == Shape{2, 3, 4});
  CHECK(broadcast_shape("t", {2, 1, 4}, {3, 1}) == Shape{2, 3, 4});
  CHECK_THROWS_AS(broadcast_shape("t", {2, 3}, {2}), ShapeError);

  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto row = tape.variable(Tensor<double>({3}, {10, 20, 30}));
  auto y = add(x, row);
  CHECK(y.value().values() == std::vector<double>{11, 22, 33, 14, 25, 36});
  const auto rid = row.id();
  auto g = tape.backward(sum(y));
  CHECK(g.at(rid).values() == std::vector<double>{2, 2, 2});
}

TEST_CASE("backward: sums, squares and fan-out") {
  {
    Tape<double> tape;
    auto x = tape.variable(Tensor<double>({2, 2}, {1, 2, 3, 4}));
    const auto id = x.id();
    auto g = tape.backward(sum(x));
    CHECK(g.at(id).values() == std::vector<double>(4, 1.0));
    CHECK(tape.size() == 0);
  }
  {
    Tape<double> tape;
    auto x = tape.variable(Tensor<double>({1}, {3}));
    const auto id = x.id();
    auto g = tape.backward(sum(mul(x, x)));
    CHECK(g.at(id)[0] == 6.0);
  }
  {
    Tape<double> tape;
    auto x = tape.variable(Tensor<double>({2, 2}, {1, -2, 3, 0.5}));
    const auto id = x.id();
    auto g = tape.backward(add(sum(x), sum(x)));
    CHECK(g.at(id).values() == std::vector<double>(4, 2.0));
  }
}

TEST_CASE("backward rejects non-scalar losses and stale handles") {
  Tape<double> tape;
  auto x = tape.variable(Tensor<double>({3}));
  CHECK_THROWS_AS(tape.backward(x), ShapeError);
  auto l = sum(x);
  tape.backward(l);
  CHECK_THROWS_AS((void)x.value(), std::logic_error);
}

TEST_CASE("parameters accumulate gradients across backward passes") {
  Parameter<double> p("w", Tensor<double>({2}, {1.5, -2}));
  for (int pass = 0; pass < 2; ++pass) {
    Tape<double> tape;
    tape.backward(sum(square(tape.parameter(p))));
  }
  CHECK(p.grad[0] == doctest::Approx(2 * 2 * 1.5));
  CHECK(p.grad[1] == doctest::Approx(2 * 2 * -2.0));
  p.zero_grad();
  CHECK(p.grad[0] == 0.0);
}

TEST_CASE("gradcheck reports tiny errors for simple functions") {
  Rng rng(11);
  auto x = random_tensor(rng, {3, 4});
  auto r1 = gradcheck([](Tape<double>&, const Var<double>& v) { return sum(v); }, x);
  CHECK(r1.status == GradcheckResult::Status::ok);
  CHECK(r1.max_rel_error < 1e-9);
  auto r2 = gradcheck([](Tape<double>&, const Var<double>& v) { return sum(stflow::tanh(v)); }, x);
  CHECK(r2.max_rel_error < 1e-7);
  CHECK(r2.checked == 12);
}

TEST_CASE("gradcheck flags NaN gradients distinctly") {
  Tensor<double> x({2}, {1.0, 2.0});
  auto r = gradcheck(
      [](Tape<double>& t, const Var<double>& v) {
        auto nan = t.constant(Tensor<double>({2}, std::numeric_limits<double>::quiet_NaN()));
        return sum(mul(v, nan));
      },
      x);
  CHECK(r.status != GradcheckResult::Status::ok);
}

TEST_CASE("every primitive passes gradcheck on random shapes") {
  Rng rng(2024);
  using F = std::function<Var<double>(Tape<double>&, const Var<double>&)>;
  for (int trial = 0; trial < 20; ++trial) {
    const Shape s = random_shape(rng);
    const Shape tail(s.begin() + static_cast<std::ptrdiff_t>(rng.below(s.size())), s.end());
    auto x = off_kink_tensor(rng, s);
    auto other = random_tensor(rng, s);
    auto bcast = random_tensor(rng, tail);
    auto weights = random_tensor(rng, s);
    std::vector<std::pair<const char*, F>> cases = {
        {"add", [&](Tape<double>& t, const Var<double>& v) { return sum(mul(add(v, t.constant(bcast)), t.constant(weights))); }},
        {"sub", [&](Tape<double>& t, const Var<double>& v) { return sum(mul(sub(t.constant(other), v), t.constant(weights))); }},
        {"mul", [&](Tape<double>& t, const Var<double>& v) { return sum(mul(v, t.constant(other))); }},
        {"mul_self_bcast", [&](Tape<double>& t, const Var<double>& v) { return sum(mul(t.constant(weights), mul(t.constant(other), v))); }},
        {"scale", [&](Tape<double>& t, const Var<double>& v) { return sum(mul(scale(v, 1.7), t.constant(weights))); }},
        {"sigmoid", [&](Tape<double>& t, const Var<double>& v) { return sum(mul(sigmoid(v), t.constant(weights))); }},
        {"tanh", [&](Tape<double>& t, const Var<double>& v) { return sum(mul(stflow::tanh(v), t.constant(weights))); }},
        {"relu", [&](Tape<double>& t, const Var<double>& v) { return sum(mul(relu(v), t.constant(weights))); }},
        {"square", [&](Tape<double>& t, const Var<double>& v) { return sum(mul(square(v), t.constant(weights))); }},
        {"mean", [&](Tape<double>& t, const Var<double>& v) { return mean(mul(v, t.constant(weights))); }},
        {"reshape", [&](Tape<double>& t, const Var<double>& v) {
           return sum(mul(reshape(v, Shape{v.value().size()}), t.constant(weights.reshaped({weights.size()}))));
         }},
        {"select", [&](Tape<double>&, const Var<double>& v) {
           return v.value().rank() < 2 ? sum(square(v)) : sum(square(select(v, 0, v.dim(0) - 1)));
         }},
        {"slice", [&](Tape<double>&, const Var<double>& v) { return sum(square(slice(v, s.size() - 1, 0, 1))); }},
        {"concat", [&](Tape<double>& t, const Var<double>& v) {
           return sum(square(concat<double>({v, t.constant(other), v}, s.size() - 1)));
         }},
    };
    for (auto& [name, f] : cases) {
      std::string label = name;
      CAPTURE(label);
      CAPTURE(shape_str(s));
      auto r = gradcheck(f, x);
      CHECK(r.status == GradcheckResult::Status::ok);
      CHECK(r.max_rel_error < 1e-7);
    }
    // matmul on a compatible pair of matrices.
    const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(4), n = 1 + rng.below(4);
    auto b = random_tensor(rng, {k, n});
    auto r = gradcheck([&](Tape<double>& t, const Var<double>& v) { return sum(square(matmul(v, t.constant(b)))); },
                       random_tensor(rng, {m, k}));
    CHECK(r.max_rel_error < 1e-7);
  }
}

TEST_CASE("tape gradients agree with an independent difference quotient") {
  Rng rng(5);
  auto x = random_tensor(rng, {2, 3});
  auto w = random_tensor(rng, {3, 2});
  auto build = [&](Tape<double>& t, const Var<double>& v) {
    return sum(mul(sigmoid(matmul(v, t.constant(w))), stflow::tanh(matmul(v, t.constant(w)))));
  };
  Tape<double> tape;
  auto v = tape.variable(x);
  const auto id = v.id();
  auto grads = tape.backward(build(tape, v));
  auto f = [&](const Tensor<double>& p) {
    Tape<double> t;
    return build(t, t.constant(p)).value()[0];
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(grads.at(id)[i] == doctest::Approx(numeric_partial(f, x, i)).epsilon(1e-6));
  }
}

TEST_CASE("sum reduction is bit-reproducible") {
  Rng rng(9);
  Tensor<float> x({1000});
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform(-1e3, 1e3));
  float first = 0;
  for (int rep = 0; rep < 3; ++rep) {
    Tape<float> t;
    const float s = sum(t.constant(x)).value()[0];
    if (rep == 0) first = s;
    CHECK(s == first);
  }
  float seq = 0;
  for (float v : x.values()) seq += v;
  CHECK(first == seq);
}
