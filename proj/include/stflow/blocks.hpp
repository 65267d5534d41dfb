#pragma once

// STREED-Net building blocks: parameter storage, layer wrappers and the
// encoder / cascade / external branch / decoder / attention stages.

#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "stflow/nnops.hpp"

namespace stflow {

/// Owns every trainable parameter and non-trainable buffer of a model.
///
/// Each parameter is initialised from its own stream Rng::derived(seed, name),
/// so a parameter's initial value depends only on (seed, name, shape) and not
/// on which other layers exist.
template <typename T>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed) : seed_(seed) {}
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  /// Glorot-uniform weights: U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
  Parameter<T>& glorot(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out);
  Parameter<T>& filled(const std::string& name, Shape shape, T value);
  /// Non-trainable state (BN running statistics).
  Parameter<T>& buffer(const std::string& name, Shape shape, T value);

  std::deque<Parameter<T>>& trainable() { return params_; }
  const std::deque<Parameter<T>>& trainable() const { return params_; }
  std::deque<Parameter<T>>& buffers() { return buffers_; }
  const std::deque<Parameter<T>>& buffers() const { return buffers_; }

  Parameter<T>* find(const std::string& name);
  std::size_t trainable_count() const;
  /// Sum of trainable element counts whose name starts with `prefix`.
  std::size_t trainable_count(const std::string& prefix) const;
  void zero_grad();
  std::uint64_t seed() const { return seed_; }

 private:
  void check_new(const std::string& name) const;

  std::uint64_t seed_;
  std::deque<Parameter<T>> params_;
  std::deque<Parameter<T>> buffers_;
};

/// Per-forward state: the tape, BN mode, and the parameters bound so far
/// (each parameter becomes one tape leaf per forward pass).
template <typename T>
struct Context {
  Tape<T>& tape;
  Mode mode = Mode::eval;
  bool update_stats = true;
  /// When false, parameters are bound as constants (inference only).
  bool grad = true;
  /// Test hook: replace both attention maps by ones.
  bool unit_attention = false;

  Context(Tape<T>& t, Mode m, bool update = true) : tape(t), mode(m), update_stats(update) {}
  Var<T> bind(Parameter<T>& p);

 private:
  std::map<const Parameter<T>*, Var<T>> bound_;
};

template <typename T>
struct Conv {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;
  ConvGeometry geometry;

  static Conv make(ParamStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
                   const ConvGeometry& g);
  Var<T> operator()(Context<T>& ctx, const Var<T>& x) const;
};

template <typename T>
struct ConvTranspose {
  Parameter<T>* weight = nullptr;  ///< [kh, kw, cout, cin]
  Parameter<T>* bias = nullptr;
  ConvGeometry geometry;

  static ConvTranspose make(ParamStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
                            const ConvGeometry& g);
  /// Output is twice the input height and width.
  Var<T> operator()(Context<T>& ctx, const Var<T>& x) const;
};

template <typename T>
struct Dense {
  Parameter<T>* weight = nullptr;
  Parameter<T>* bias = nullptr;

  static Dense make(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out);
  Var<T> operator()(Context<T>& ctx, const Var<T>& x) const;
};

template <typename T>
struct BatchNorm {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;
  Parameter<T>* running_mean = nullptr;
  Parameter<T>* running_var = nullptr;

  static BatchNorm make(ParamStore<T>& store, const std::string& name, std::size_t channels);
  Var<T> operator()(Context<T>& ctx, const Var<T>& x) const;
};

/// BN(ReLU(conv(x))).
template <typename T>
struct ConvReluBN {
  Conv<T> conv;
  BatchNorm<T> bn;

  static ConvReluBN make(ParamStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
                         const ConvGeometry& g);
  Var<T> operator()(Context<T>& ctx, const Var<T>& x) const;
};

/// x + c2(c1(x)) with c_i = BN(ReLU(conv)); shape-preserving.
template <typename T>
struct ResUnit {
  ConvReluBN<T> c1, c2;

  static ResUnit make(ParamStore<T>& store, const std::string& name, std::size_t channels, std::size_t kernel);
  Var<T> operator()(Context<T>& ctx, const Var<T>& x) const;
};

/// Outputs of the encoder; every tensor keeps the [batch, frame, ...] layout.
template <typename T>
struct EncoderState {
  std::vector<Var<T>> levels;  ///< E^(0..L)
  std::vector<Var<T>> eru;     ///< ERU^(1..L), index l-1
  Var<T> final;                ///< E^(L+1): [B, p, N/2^L, M/2^L, C']
};

template <typename T>
struct Encoder {
  ConvReluBN<T> first;
  std::vector<ResUnit<T>> res;
  std::vector<ConvReluBN<T>> down;
  ConvReluBN<T> last;

  static Encoder make(ParamStore<T>& store, std::size_t levels, std::size_t filters, std::size_t bottleneck,
                      std::size_t kernel);
  /// frames: [B, p, N, M, 2]; N and M must be divisible by 2^L.
  EncoderState<T> operator()(Context<T>& ctx, const Var<T>& frames) const;
};

/// MU(h) = g1 * tanh(g2 * h + g3 * u), g_i = sigmoid(W_i * h + b_i),
/// u = tanh(W_4 * h + b_4).
template <typename T>
struct MU {
  Conv<T> w1, w2, w3, w4;

  static MU make(ParamStore<T>& store, const std::string& name, std::size_t channels, std::size_t kernel);
  Var<T> operator()(Context<T>& ctx, const Var<T>& h) const;
};

/// h = MU(MU(older; W1); W1) + MU(recent; W2);
/// out = sigmoid(Wo * h + bo) * tanh(Wh * h + bh).
template <typename T>
struct CMU {
  MU<T> older, recent;
  Conv<T> wo, wh;

  static CMU make(ParamStore<T>& store, const std::string& name, std::size_t channels, std::size_t kernel);
  Var<T> operator()(Context<T>& ctx, const Var<T>& older_frame, const Var<T>& recent_frame) const;
};

/// Binary cascade: level k turns q frames into q-1 by applying its CMU to
/// every adjacent (older, recent) pair; H-1 levels leave one frame.
template <typename T>
struct Cascade {
  std::vector<CMU<T>> levels;

  static Cascade make(ParamStore<T>& store, std::size_t frames, std::size_t channels, std::size_t kernel);
  /// sequence: [B, H, n, m, C'] -> [B, n, m, C'].
  Var<T> operator()(Context<T>& ctx, const Var<T>& sequence) const;
};

/// Widths of the external-factor groups in input order.
inline const std::vector<std::size_t>& external_groups() {
  static const std::vector<std::size_t> g{7, 1, 1, 1, 1, 3};
  return g;
}

/// Per-group dense+ReLU embeddings, concatenated, then a linear dense layer
/// reshaped to [B, n, m, C'].
template <typename T>
struct ExternalBranch {
  std::vector<Dense<T>> embed;
  Dense<T> project;
  std::size_t n = 0, m = 0, channels = 0;

  static ExternalBranch make(ParamStore<T>& store, std::size_t width, std::size_t n, std::size_t m,
                             std::size_t channels);
  /// e: [B, 14].
  Var<T> operator()(Context<T>& ctx, const Var<T>& e) const;
};

/// A_c = sigmoid(L1 * mlp(maxpool D) + G1 * mlp(avgpool D)); D' = A_c * D.
/// The two-layer bottleneck mlp is shared by both pooling paths.
template <typename T>
struct ChannelAttention {
  Dense<T> reduce, expand;
  Parameter<T>* lambda = nullptr;  ///< [C']
  Parameter<T>* gamma = nullptr;   ///< [C']

  static ChannelAttention make(ParamStore<T>& store, std::size_t channels, std::size_t ratio);
  Var<T> map(Context<T>& ctx, const Var<T>& d) const;  ///< [B,1,1,C']
  Var<T> operator()(Context<T>& ctx, const Var<T>& d) const;
};

/// A_s = sigmoid(L2 * conv_max(maxpool_c D) + G2 * conv_avg(avgpool_c D));
/// D'' = A_s * D. The convolutions are linear, sigmoid is applied once.
template <typename T>
struct SpatialAttention {
  Conv<T> conv_max, conv_avg;
  Parameter<T>* lambda = nullptr;  ///< [N, M, 1]
  Parameter<T>* gamma = nullptr;   ///< [N, M, 1]

  static SpatialAttention make(ParamStore<T>& store, std::size_t height, std::size_t width, std::size_t kernel);
  Var<T> map(Context<T>& ctx, const Var<T>& d) const;  ///< [B,N,M,1]
  Var<T> operator()(Context<T>& ctx, const Var<T>& d) const;
};

/// D0 = BN(ReLU(conv z)); per level: sc = convT(D) [+ ERU of the most recent
/// frame at the mirrored level, then BN(ReLU(.))], D = ResUnit(.); a closing
/// conv back to C'; optional channel then spatial attention; final conv to 2
/// channels with tanh.
template <typename T>
struct Decoder {
  ConvReluBN<T> first;
  std::vector<ConvTranspose<T>> up;
  std::vector<BatchNorm<T>> merge;  ///< empty without long skips
  std::vector<ResUnit<T>> res;
  ConvReluBN<T> last;
  bool attention = true;
  ChannelAttention<T> channel;
  SpatialAttention<T> spatial;
  Conv<T> output;

  static Decoder make(ParamStore<T>& store, std::size_t levels, std::size_t filters, std::size_t bottleneck,
                      std::size_t kernel, std::size_t height, std::size_t width, bool long_skip, bool attention,
                      std::size_t ratio, std::size_t attention_kernel);
  /// z: [B, n, m, C']; skips: ERU^(l) of the most recent frame, [B, h_l, w_l, F],
  /// required when long skips are enabled.
  Var<T> operator()(Context<T>& ctx, const Var<T>& z, const std::vector<Var<T>>& skips) const;
};

}  // namespace stflow
