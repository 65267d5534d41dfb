#pragma once

// Differentiable neural-network primitives on channels-last tensors.
//
// Spatial operands are [batch, height, width, channels]. Convolution is
// cross-correlation (the kernel is not flipped): out[o] = sum over taps of
// in[o*stride - pad + tap] * w[tap], zero outside the input.

#include <cstddef>
#include <functional>
#include <string>

#include "stflow/autodiff.hpp"

namespace stflow {

enum class Mode { train, eval };
enum class PoolKind { max, avg };

/// Kernel, stride and explicit per-side zero padding of a 2-D convolution.
struct ConvGeometry {
  std::size_t kernel_h = 1, kernel_w = 1;
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_top = 0, pad_bottom = 0, pad_left = 0, pad_right = 0;

  /// Stride-1 padding that keeps spatial dims. Odd kernels pad (k-1)/2 on
  /// both sides; even kernels put the extra row/column at the bottom/right,
  /// e.g. 4x4 -> (1,2,1,2).
  static ConvGeometry same(std::size_t kh, std::size_t kw);
  /// Kernel 3, stride 2, padding 1 on every side: halves even dims.
  static ConvGeometry halving();

  /// floor((in + pads - k) / stride) + 1; throws ShapeError if not positive.
  std::size_t out_h(std::size_t in_h) const;
  std::size_t out_w(std::size_t in_w) const;
  std::string str() const;
};

/// 2-D cross-correlation. x [B,H,W,Cin], weight [kh,kw,Cin,Cout], bias [Cout]
/// (bias may be an invalid Var for none).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeometry& g);

/// Transposed convolution: the adjoint of conv2d with the same geometry,
/// mapping x [B,Hi,Wi,Cin] to [B,out_h,out_w,Cout]. weight is laid out
/// [kh,kw,Cout,Cin], i.e. it is the weight of the conv2d that maps
/// [out_h,out_w,Cout] back to [Hi,Wi,Cin]; that conv2d must produce exactly
/// Hi x Wi. bias [Cout] is added afterwards.
template <typename T>
Var<T> conv2d_transpose(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                        const ConvGeometry& g, std::size_t out_h, std::size_t out_w);

/// x [B,in] * W [in,out] + b [out].
template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

/// Running statistics of a batch-normalisation layer.
template <typename T>
struct BatchNormState {
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;
  T momentum = T(0.99);
  T epsilon = T(1e-5);
};

/// Per-channel normalisation over every axis but the last.
///
/// Train mode normalises with the biased batch statistics and, when
/// `update_stats` is set, moves the running stats by
/// running = momentum*running + (1-momentum)*batch. Eval mode uses the
/// running stats. Train mode needs at least two rows on axis 0.
template <typename T>
Var<T> batchnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state,
                 Mode mode, bool update_stats = true);

/// Reduction over height and width: [B,H,W,C] -> [B,1,1,C].
template <typename T>
Var<T> global_pool_spatial(const Var<T>& x, PoolKind kind);

/// Reduction over channels: [B,H,W,C] -> [B,H,W,1].
template <typename T>
Var<T> pool_channelwise(const Var<T>& x, PoolKind kind);

/// Applies a per-frame layer to [B,H,...] by folding time into the batch:
/// every frame sees the same weights.
template <typename T>
Var<T> time_distribute(const std::function<Var<T>(const Var<T>&)>& layer, const Var<T>& x);

/// Mean of squared differences over all elements.
template <typename T>
Var<T> mse_loss(const Var<T>& prediction, const Var<T>& target);

}  // namespace stflow
