#pragma once

// STREED-Net assembly: configuration, forward pass, parameter/FLOP
// accounting and checkpoints.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "stflow/blocks.hpp"
#include "stflow/errors.hpp"

namespace stflow {

inline constexpr const char* kVersion = "1.0.0";

struct ModelConfig {
  std::size_t closeness = 4;        ///< p, frames per sample
  std::size_t levels = 2;           ///< L, encoder/decoder depth
  std::size_t grid_height = 16;     ///< N
  std::size_t grid_width = 8;       ///< M
  std::size_t filters = 64;         ///< feature maps of the first convolution
  std::size_t bottleneck = 16;      ///< C'
  std::size_t kernel = 3;
  std::size_t attention_ratio = 4;  ///< s
  std::size_t attention_kernel = 4;
  std::size_t embedding_width = 16;  ///< per external sub-factor
  bool long_skip = true;
  bool attention = true;
  bool external = true;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  std::size_t latent_height() const { return grid_height >> levels; }
  std::size_t latent_width() const { return grid_width >> levels; }

  nlohmann::json to_json() const;
  /// Strict: unknown keys are rejected, missing keys keep their defaults.
  static ModelConfig from_json(const nlohmann::json& j);
  /// crc32 of the architecture fields (everything except the seed).
  std::uint32_t digest() const;

  static ModelConfig bike_nyc();
  static ModelConfig taxi_bj();
};

/// Intermediate tensors of one forward pass.
template <typename T>
struct ForwardTrace {
  EncoderState<T> encoder;
  Var<T> cascade;     ///< X_cmu  [B, n, m, C']
  Var<T> external;    ///< X_ext  (invalid without the external branch)
  Var<T> latent;      ///< z
  Var<T> prediction;  ///< [B, N, M, 2]
};

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& config);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  /// frames [B, p, N, M, 2], external [B, 14] (ignored without the external
  /// branch; may be an invalid Var then).
  ForwardTrace<T> trace(Context<T>& ctx, const Var<T>& frames, const Var<T>& external) const;
  Var<T> forward(Context<T>& ctx, const Var<T>& frames, const Var<T>& external) const {
    return trace(ctx, frames, external).prediction;
  }
  /// Eval-mode prediction without recording gradients.
  Tensor<T> predict(const Tensor<T>& frames, const Tensor<T>& external) const;

  const Encoder<T>& encoder() const { return encoder_; }
  const Cascade<T>& cascade() const { return cascade_; }
  const ExternalBranch<T>& external_branch() const { return external_; }
  const Decoder<T>& decoder() const { return decoder_; }

 private:
  ModelConfig config_;
  ParamStore<T> store_;
  Encoder<T> encoder_;
  Cascade<T> cascade_;
  ExternalBranch<T> external_;
  Decoder<T> decoder_;
};

struct LayerRow {
  std::string name;
  std::string output;  ///< per-sample output shape
  std::size_t params = 0;
  std::uint64_t flops = 0;
};

/// Per-layer trainable parameters and FLOPs for one sample.
///
/// FLOP convention: convolution and dense layers count 2 per multiply-add
/// plus 1 per output element for the bias (a transposed convolution counts
/// its multiply-adds over input pixels); ReLU, sigmoid, tanh, add and mul
/// count 1 per element; BN counts 2 per element (scale and shift); pooling
/// counts 1 per input element. Time-distributed layers are counted once per
/// frame and each cascade level once per CMU application.
struct ModelSummary {
  std::vector<LayerRow> rows;
  std::size_t total_params = 0;
  std::uint64_t total_flops = 0;

  std::string table() const;
  std::string csv() const;
};

ModelSummary summarize(const Model<float>& model);
ModelSummary summarize(const Model<double>& model);

/// Checkpoint layout (little-endian):
///   "STFLOWCK" | u32 version | u32 config digest | u32 n + n bytes JSON
///   metadata | u32 tensor count | per tensor: u32 name length, name,
///   u8 dtype (0 = f32, 1 = f64), u32 rank, u64 dims[rank], raw data |
///   u32 crc32 of all preceding bytes.
/// The metadata holds {"model": config, ...caller fields}. Trainable
/// parameters and BN running statistics are both stored.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model, const nlohmann::json& metadata);

struct CheckpointHeader {
  ModelConfig config;
  nlohmann::json metadata;
};

/// Reads only the header and metadata (after verifying the checksum).
CheckpointHeader read_checkpoint_header(const std::string& path);

/// Loads tensors into a model built from the same architecture; throws
/// CompatibilityError when the stored digest or any tensor does not match.
template <typename T>
nlohmann::json load_checkpoint(const std::string& path, Model<T>& model);

}  // namespace stflow
