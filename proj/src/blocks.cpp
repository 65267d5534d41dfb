#include "stflow/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace stflow {

// ---------------------------------------------------------------------------
// ParamStore

template <typename T>
void ParamStore<T>::check_new(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) throw std::logic_error("duplicate parameter name " + name);
  }
  for (const auto& p : buffers_) {
    if (p.name == name) throw std::logic_error("duplicate parameter name " + name);
  }
}

template <typename T>
Parameter<T>& ParamStore<T>::glorot(const std::string& name, Shape shape, std::size_t fan_in,
                                    std::size_t fan_out) {
  check_new(name);
  Rng rng = Rng::derived(seed_, name);
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor<T> value(std::move(shape));
  for (auto& v : value.data()) v = static_cast<T>(rng.uniform(-limit, limit));
  return params_.emplace_back(name, std::move(value));
}

template <typename T>
Parameter<T>& ParamStore<T>::filled(const std::string& name, Shape shape, T value) {
  check_new(name);
  return params_.emplace_back(name, Tensor<T>(std::move(shape), value));
}

template <typename T>
Parameter<T>& ParamStore<T>::buffer(const std::string& name, Shape shape, T value) {
  check_new(name);
  return buffers_.emplace_back(name, Tensor<T>(std::move(shape), value));
}

template <typename T>
Parameter<T>* ParamStore<T>::find(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  for (auto& p : buffers_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

template <typename T>
std::size_t ParamStore<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
std::size_t ParamStore<T>::trainable_count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.name.compare(0, prefix.size(), prefix) == 0) n += p.value.size();
  }
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
Var<T> Context<T>::bind(Parameter<T>& p) {
  auto it = bound_.find(&p);
  if (it != bound_.end()) return it->second;
  Var<T> v = grad ? tape.parameter(p) : tape.constant(p.value);
  bound_.emplace(&p, v);
  return v;
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
Conv<T> Conv<T>::make(ParamStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
                      const ConvGeometry& g) {
  const std::size_t area = g.kernel_h * g.kernel_w;
  Conv c;
  c.weight = &store.glorot(name + ".w", {g.kernel_h, g.kernel_w, cin, cout}, area * cin, area * cout);
  c.bias = &store.filled(name + ".b", {cout}, T{0});
  c.geometry = g;
  return c;
}

template <typename T>
Var<T> Conv<T>::operator()(Context<T>& ctx, const Var<T>& x) const {
  return conv2d(x, ctx.bind(*weight), ctx.bind(*bias), geometry);
}

template <typename T>
ConvTranspose<T> ConvTranspose<T>::make(ParamStore<T>& store, const std::string& name, std::size_t cin,
                                        std::size_t cout, const ConvGeometry& g) {
  const std::size_t area = g.kernel_h * g.kernel_w;
  ConvTranspose c;
  c.weight = &store.glorot(name + ".w", {g.kernel_h, g.kernel_w, cout, cin}, area * cout, area * cin);
  c.bias = &store.filled(name + ".b", {cout}, T{0});
  c.geometry = g;
  return c;
}

template <typename T>
Var<T> ConvTranspose<T>::operator()(Context<T>& ctx, const Var<T>& x) const {
  return conv2d_transpose(x, ctx.bind(*weight), ctx.bind(*bias), geometry, 2 * x.dim(1), 2 * x.dim(2));
}

template <typename T>
Dense<T> Dense<T>::make(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out) {
  Dense d;
  d.weight = &store.glorot(name + ".w", {in, out}, in, out);
  d.bias = &store.filled(name + ".b", {out}, T{0});
  return d;
}

template <typename T>
Var<T> Dense<T>::operator()(Context<T>& ctx, const Var<T>& x) const {
  return dense(x, ctx.bind(*weight), ctx.bind(*bias));
}

template <typename T>
BatchNorm<T> BatchNorm<T>::make(ParamStore<T>& store, const std::string& name, std::size_t channels) {
  BatchNorm b;
  b.gamma = &store.filled(name + ".gamma", {channels}, T{1});
  b.beta = &store.filled(name + ".beta", {channels}, T{0});
  b.running_mean = &store.buffer(name + ".running_mean", {channels}, T{0});
  b.running_var = &store.buffer(name + ".running_var", {channels}, T{1});
  return b;
}

template <typename T>
Var<T> BatchNorm<T>::operator()(Context<T>& ctx, const Var<T>& x) const {
  BatchNormState<T> st{&running_mean->value, &running_var->value};
  return batchnorm(x, ctx.bind(*gamma), ctx.bind(*beta), st, ctx.mode, ctx.update_stats);
}

template <typename T>
ConvReluBN<T> ConvReluBN<T>::make(ParamStore<T>& store, const std::string& name, std::size_t cin,
                                  std::size_t cout, const ConvGeometry& g) {
  return {Conv<T>::make(store, name + ".conv", cin, cout, g), BatchNorm<T>::make(store, name + ".bn", cout)};
}

template <typename T>
Var<T> ConvReluBN<T>::operator()(Context<T>& ctx, const Var<T>& x) const {
  return bn(ctx, relu(conv(ctx, x)));
}

template <typename T>
ResUnit<T> ResUnit<T>::make(ParamStore<T>& store, const std::string& name, std::size_t channels,
                            std::size_t kernel) {
  const auto g = ConvGeometry::same(kernel, kernel);
  return {ConvReluBN<T>::make(store, name + ".c1", channels, channels, g),
          ConvReluBN<T>::make(store, name + ".c2", channels, channels, g)};
}

template <typename T>
Var<T> ResUnit<T>::operator()(Context<T>& ctx, const Var<T>& x) const {
  return add(x, c2(ctx, c1(ctx, x)));
}

// ---------------------------------------------------------------------------
// Encoder

template <typename T>
Encoder<T> Encoder<T>::make(ParamStore<T>& store, std::size_t levels, std::size_t filters,
                            std::size_t bottleneck, std::size_t kernel) {
  const auto same = ConvGeometry::same(kernel, kernel);
  Encoder e;
  e.first = ConvReluBN<T>::make(store, "encoder.conv0", 2, filters, same);
  for (std::size_t l = 1; l <= levels; ++l) {
    const std::string lvl = "encoder.level" + std::to_string(l);
    e.res.push_back(ResUnit<T>::make(store, lvl + ".res", filters, kernel));
    e.down.push_back(ConvReluBN<T>::make(store, lvl + ".down", filters, filters, ConvGeometry::halving()));
  }
  e.last = ConvReluBN<T>::make(store, "encoder.closing", filters, bottleneck, same);
  return e;
}

namespace {

// [B, p, ...] -> [B*p, ...]
template <typename T>
Var<T> fold(const Var<T>& x) {
  Shape s(x.shape().begin() + 1, x.shape().end());
  s[0] *= x.dim(0);
  return reshape(x, s);
}

// [B*p, ...] -> [B, p, ...]
template <typename T>
Var<T> unfold(const Var<T>& x, std::size_t batch) {
  Shape s{batch, x.dim(0) / batch};
  s.insert(s.end(), x.shape().begin() + 1, x.shape().end());
  return reshape(x, s);
}

}  // namespace

template <typename T>
EncoderState<T> Encoder<T>::operator()(Context<T>& ctx, const Var<T>& frames) const {
  const Shape& s = frames.shape();
  if (s.size() != 5 || s[4] != 2) {
    throw ShapeError("encoder", "expected [batch, frames, N, M, 2], got " + shape_str(s));
  }
  const std::size_t factor = std::size_t{1} << res.size();
  if (s[2] % factor != 0 || s[3] % factor != 0) {
    throw ShapeError("encoder", "grid " + std::to_string(s[2]) + "x" + std::to_string(s[3]) +
                                    " is not divisible by 2^" + std::to_string(res.size()));
  }
  const std::size_t batch = s[0];
  EncoderState<T> out;
  Var<T> e = first(ctx, fold(frames));
  out.levels.push_back(unfold(e, batch));
  for (std::size_t l = 0; l < res.size(); ++l) {
    Var<T> eru = res[l](ctx, e);
    out.eru.push_back(unfold(eru, batch));
    e = down[l](ctx, eru);
    out.levels.push_back(unfold(e, batch));
  }
  out.final = unfold(last(ctx, e), batch);
  return out;
}

// ---------------------------------------------------------------------------
// Cascade

template <typename T>
MU<T> MU<T>::make(ParamStore<T>& store, const std::string& name, std::size_t channels, std::size_t kernel) {
  const auto g = ConvGeometry::same(kernel, kernel);
  return {Conv<T>::make(store, name + ".w1", channels, channels, g),
          Conv<T>::make(store, name + ".w2", channels, channels, g),
          Conv<T>::make(store, name + ".w3", channels, channels, g),
          Conv<T>::make(store, name + ".w4", channels, channels, g)};
}

template <typename T>
Var<T> MU<T>::operator()(Context<T>& ctx, const Var<T>& h) const {
  Var<T> g1 = sigmoid(w1(ctx, h));
  Var<T> g2 = sigmoid(w2(ctx, h));
  Var<T> g3 = sigmoid(w3(ctx, h));
  Var<T> u = stflow::tanh(w4(ctx, h));
  return mul(g1, stflow::tanh(add(mul(g2, h), mul(g3, u))));
}

template <typename T>
CMU<T> CMU<T>::make(ParamStore<T>& store, const std::string& name, std::size_t channels, std::size_t kernel) {
  const auto g = ConvGeometry::same(kernel, kernel);
  return {MU<T>::make(store, name + ".mu1", channels, kernel), MU<T>::make(store, name + ".mu2", channels, kernel),
          Conv<T>::make(store, name + ".wo", channels, channels, g),
          Conv<T>::make(store, name + ".wh", channels, channels, g)};
}

template <typename T>
Var<T> CMU<T>::operator()(Context<T>& ctx, const Var<T>& older_frame, const Var<T>& recent_frame) const {
  if (older_frame.shape() != recent_frame.shape()) {
    throw ShapeError("cmu", shape_str(older_frame.shape()) + " vs " + shape_str(recent_frame.shape()));
  }
  Var<T> h = add(older(ctx, older(ctx, older_frame)), recent(ctx, recent_frame));
  return mul(sigmoid(wo(ctx, h)), stflow::tanh(wh(ctx, h)));
}

template <typename T>
Cascade<T> Cascade<T>::make(ParamStore<T>& store, std::size_t frames, std::size_t channels, std::size_t kernel) {
  if (frames < 2) throw std::invalid_argument("cascade needs at least 2 frames, got " + std::to_string(frames));
  Cascade c;
  for (std::size_t k = 1; k < frames; ++k) {
    c.levels.push_back(CMU<T>::make(store, "cascade.level" + std::to_string(k), channels, kernel));
  }
  return c;
}

template <typename T>
Var<T> Cascade<T>::operator()(Context<T>& ctx, const Var<T>& sequence) const {
  const Shape& s = sequence.shape();
  if (s.size() != 5 || s[1] != levels.size() + 1) {
    throw ShapeError("cascade", "expected [batch, " + std::to_string(levels.size() + 1) + ", n, m, C], got " +
                                    shape_str(s));
  }
  const std::size_t batch = s[0];
  std::vector<Var<T>> frames;
  for (std::size_t t = 0; t < s[1]; ++t) frames.push_back(select(sequence, 1, t));
  // All pairs of a level share one CMU, so they are evaluated as one batch:
  // olders = frames[0..q-2], recents = frames[1..q-1], stacked on axis 0.
  for (const auto& cmu : levels) {
    const std::size_t pairs = frames.size() - 1;
    std::vector<Var<T>> olders(frames.begin(), frames.end() - 1);
    std::vector<Var<T>> recents(frames.begin() + 1, frames.end());
    Var<T> out = cmu(ctx, concat(olders, 0), concat(recents, 0));
    frames.clear();
    for (std::size_t i = 0; i < pairs; ++i) {
      frames.push_back(pairs == 1 ? out : slice(out, 0, i * batch, (i + 1) * batch));
    }
  }
  return frames.front();
}

// ---------------------------------------------------------------------------
// External factors

template <typename T>
ExternalBranch<T> ExternalBranch<T>::make(ParamStore<T>& store, std::size_t width, std::size_t n, std::size_t m,
                                          std::size_t channels) {
  ExternalBranch b;
  const auto& groups = external_groups();
  for (std::size_t i = 0; i < groups.size(); ++i) {
    b.embed.push_back(Dense<T>::make(store, "external.embed" + std::to_string(i), groups[i], width));
  }
  b.project = Dense<T>::make(store, "external.project", width * groups.size(), n * m * channels);
  b.n = n;
  b.m = m;
  b.channels = channels;
  return b;
}

template <typename T>
Var<T> ExternalBranch<T>::operator()(Context<T>& ctx, const Var<T>& e) const {
  const auto& groups = external_groups();
  std::size_t width = 0;
  for (auto g : groups) width += g;
  if (e.shape().size() != 2 || e.dim(1) != width) {
    throw ShapeError("external", "expected [batch, " + std::to_string(width) + "], got " + shape_str(e.shape()));
  }
  std::vector<Var<T>> parts;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    parts.push_back(relu(embed[i](ctx, slice(e, 1, offset, offset + groups[i]))));
    offset += groups[i];
  }
  Var<T> flat = project(ctx, concat(parts, 1));
  return reshape(flat, {e.dim(0), n, m, channels});
}

// ---------------------------------------------------------------------------
// Attention

template <typename T>
ChannelAttention<T> ChannelAttention<T>::make(ParamStore<T>& store, std::size_t channels, std::size_t ratio) {
  if (ratio == 0 || channels % ratio != 0) {
    throw std::invalid_argument("attention ratio " + std::to_string(ratio) + " must divide " +
                                std::to_string(channels) + " channels");
  }
  ChannelAttention a;
  a.reduce = Dense<T>::make(store, "decoder.channel_attention.reduce", channels, channels / ratio);
  a.expand = Dense<T>::make(store, "decoder.channel_attention.expand", channels / ratio, channels);
  a.lambda = &store.filled("decoder.channel_attention.lambda", {channels}, T{1});
  a.gamma = &store.filled("decoder.channel_attention.gamma", {channels}, T{1});
  return a;
}

template <typename T>
Var<T> ChannelAttention<T>::map(Context<T>& ctx, const Var<T>& d) const {
  const std::size_t b = d.dim(0), c = d.dim(3);
  auto mlp = [&](const Var<T>& pooled) { return expand(ctx, relu(reduce(ctx, reshape(pooled, {b, c})))); };
  Var<T> xmax = mlp(global_pool_spatial(d, PoolKind::max));
  Var<T> xavg = mlp(global_pool_spatial(d, PoolKind::avg));
  Var<T> a = sigmoid(add(mul(xmax, ctx.bind(*lambda)), mul(xavg, ctx.bind(*gamma))));
  return reshape(a, {b, 1, 1, c});
}

template <typename T>
Var<T> ChannelAttention<T>::operator()(Context<T>& ctx, const Var<T>& d) const {
  if (ctx.unit_attention) return mul(d, ctx.tape.constant(Tensor<T>::ones({d.dim(0), 1, 1, d.dim(3)})));
  return mul(d, map(ctx, d));
}

template <typename T>
SpatialAttention<T> SpatialAttention<T>::make(ParamStore<T>& store, std::size_t height, std::size_t width,
                                              std::size_t kernel) {
  const auto g = ConvGeometry::same(kernel, kernel);
  SpatialAttention a;
  a.conv_max = Conv<T>::make(store, "decoder.spatial_attention.conv_max", 1, 1, g);
  a.conv_avg = Conv<T>::make(store, "decoder.spatial_attention.conv_avg", 1, 1, g);
  a.lambda = &store.filled("decoder.spatial_attention.lambda", {height, width, 1}, T{1});
  a.gamma = &store.filled("decoder.spatial_attention.gamma", {height, width, 1}, T{1});
  return a;
}

template <typename T>
Var<T> SpatialAttention<T>::map(Context<T>& ctx, const Var<T>& d) const {
  Var<T> xmax = conv_max(ctx, pool_channelwise(d, PoolKind::max));
  Var<T> xavg = conv_avg(ctx, pool_channelwise(d, PoolKind::avg));
  return sigmoid(add(mul(xmax, ctx.bind(*lambda)), mul(xavg, ctx.bind(*gamma))));
}

template <typename T>
Var<T> SpatialAttention<T>::operator()(Context<T>& ctx, const Var<T>& d) const {
  if (ctx.unit_attention) return mul(d, ctx.tape.constant(Tensor<T>::ones({d.dim(0), d.dim(1), d.dim(2), 1})));
  return mul(d, map(ctx, d));
}

// ---------------------------------------------------------------------------
// Decoder

template <typename T>
Decoder<T> Decoder<T>::make(ParamStore<T>& store, std::size_t levels, std::size_t filters, std::size_t bottleneck,
                            std::size_t kernel, std::size_t height, std::size_t width, bool long_skip,
                            bool attention, std::size_t ratio, std::size_t attention_kernel) {
  const auto same = ConvGeometry::same(kernel, kernel);
  Decoder d;
  d.first = ConvReluBN<T>::make(store, "decoder.conv0", bottleneck, filters, same);
  for (std::size_t l = 1; l <= levels; ++l) {
    const std::string lvl = "decoder.level" + std::to_string(l);
    d.up.push_back(ConvTranspose<T>::make(store, lvl + ".up", filters, filters, ConvGeometry::halving()));
    if (long_skip) d.merge.push_back(BatchNorm<T>::make(store, lvl + ".merge_bn", filters));
    d.res.push_back(ResUnit<T>::make(store, lvl + ".res", filters, kernel));
  }
  d.last = ConvReluBN<T>::make(store, "decoder.closing", filters, bottleneck, same);
  d.attention = attention;
  if (attention) {
    d.channel = ChannelAttention<T>::make(store, bottleneck, ratio);
    d.spatial = SpatialAttention<T>::make(store, height, width, attention_kernel);
  }
  d.output = Conv<T>::make(store, "decoder.output", bottleneck, 2, same);
  return d;
}

template <typename T>
Var<T> Decoder<T>::operator()(Context<T>& ctx, const Var<T>& z, const std::vector<Var<T>>& skips) const {
  const std::size_t levels = up.size();
  const bool long_skip = !merge.empty();
  if (long_skip && skips.size() != levels) {
    throw ShapeError("decoder", "expected " + std::to_string(levels) + " skip tensors, got " +
                                    std::to_string(skips.size()));
  }
  Var<T> d = first(ctx, z);
  for (std::size_t l = 1; l <= levels; ++l) {
    Var<T> sc = up[l - 1](ctx, d);
    if (long_skip) {
      const Var<T>& skip = skips[levels - l];
      if (skip.shape() != sc.shape()) {
        throw ShapeError("decoder", "skip " + shape_str(skip.shape()) + " does not match " + shape_str(sc.shape()));
      }
      sc = merge[l - 1](ctx, relu(add(sc, skip)));
    }
    d = res[l - 1](ctx, sc);
  }
  d = last(ctx, d);
  if (attention) d = spatial(ctx, channel(ctx, d));
  return stflow::tanh(output(ctx, d));
}

#define STFLOW_INSTANTIATE_BLOCKS(T) \
  template class ParamStore<T>;      \
  template struct Context<T>;        \
  template struct Conv<T>;           \
  template struct ConvTranspose<T>;  \
  template struct Dense<T>;          \
  template struct BatchNorm<T>;      \
  template struct ConvReluBN<T>;     \
  template struct ResUnit<T>;        \
  template struct Encoder<T>;        \
  template struct MU<T>;             \
  template struct CMU<T>;            \
  template struct Cascade<T>;        \
  template struct ExternalBranch<T>; \
  template struct ChannelAttention<T>; \
  template struct SpatialAttention<T>; \
  template struct Decoder<T>;

STFLOW_INSTANTIATE_BLOCKS(float)
STFLOW_INSTANTIATE_BLOCKS(double)

}  // namespace stflow
