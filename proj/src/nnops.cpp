#include "stflow/nnops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

#include <Eigen/Core>

namespace stflow {

ConvGeometry ConvGeometry::same(std::size_t kh, std::size_t kw) {
  ConvGeometry g;
  g.kernel_h = kh;
  g.kernel_w = kw;
  g.pad_top = (kh - 1) / 2;
  g.pad_bottom = kh / 2;
  g.pad_left = (kw - 1) / 2;
  g.pad_right = kw / 2;
  return g;
}

ConvGeometry ConvGeometry::halving() {
  ConvGeometry g;
  g.kernel_h = g.kernel_w = 3;
  g.stride_h = g.stride_w = 2;
  g.pad_top = g.pad_bottom = g.pad_left = g.pad_right = 1;
  return g;
}

namespace {
std::size_t out_dim(const char* axis, std::size_t in, std::size_t pad, std::size_t k, std::size_t s,
                    const ConvGeometry& g) {
  if (s == 0 || k == 0) throw ShapeError("conv2d", "zero kernel or stride in " + g.str());
  const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(in + pad) - static_cast<std::ptrdiff_t>(k);
  if (span < 0) {
    throw ShapeError("conv2d", std::string("non-positive output ") + axis + " for input " +
                                   std::to_string(in) + " with " + g.str());
  }
  return static_cast<std::size_t>(span) / s + 1;
}
}  // namespace

std::size_t ConvGeometry::out_h(std::size_t in_h) const {
  return out_dim("height", in_h, pad_top + pad_bottom, kernel_h, stride_h, *this);
}

std::size_t ConvGeometry::out_w(std::size_t in_w) const {
  return out_dim("width", in_w, pad_left + pad_right, kernel_w, stride_w, *this);
}

std::string ConvGeometry::str() const {
  std::ostringstream os;
  os << "kernel " << kernel_h << 'x' << kernel_w << " stride " << stride_h << 'x' << stride_w
     << " pad (" << pad_top << ',' << pad_bottom << ',' << pad_left << ',' << pad_right << ')';
  return os.str();
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;

struct Spatial {
  std::size_t batch, in_h, in_w, channels, out_h, out_w;
};

// Rows: (b, oh, ow); columns: (kh, kw, c).
template <typename T>
void im2col(const T* x, const Spatial& s, const ConvGeometry& g, T* cols) {
  const std::size_t row_len = g.kernel_h * g.kernel_w * s.channels;
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t oh = 0; oh < s.out_h; ++oh) {
      for (std::size_t ow = 0; ow < s.out_w; ++ow) {
        T* row = cols + ((b * s.out_h + oh) * s.out_w + ow) * row_len;
        for (std::size_t a = 0; a < g.kernel_h; ++a) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride_h + a) -
                                    static_cast<std::ptrdiff_t>(g.pad_top);
          for (std::size_t c = 0; c < g.kernel_w; ++c) {
            T* dst = row + (a * g.kernel_w + c) * s.channels;
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride_w + c) -
                                      static_cast<std::ptrdiff_t>(g.pad_left);
            if (ih < 0 || iw < 0 || ih >= static_cast<std::ptrdiff_t>(s.in_h) ||
                iw >= static_cast<std::ptrdiff_t>(s.in_w)) {
              std::fill_n(dst, s.channels, T{0});
            } else {
              const T* src = x + ((b * s.in_h + static_cast<std::size_t>(ih)) * s.in_w +
                                  static_cast<std::size_t>(iw)) * s.channels;
              std::copy_n(src, s.channels, dst);
            }
          }
        }
      }
    }
  }
}

// Scatter-add of im2col rows back onto the input grid.
template <typename T>
void col2im(const T* cols, const Spatial& s, const ConvGeometry& g, T* x) {
  const std::size_t row_len = g.kernel_h * g.kernel_w * s.channels;
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t oh = 0; oh < s.out_h; ++oh) {
      for (std::size_t ow = 0; ow < s.out_w; ++ow) {
        const T* row = cols + ((b * s.out_h + oh) * s.out_w + ow) * row_len;
        for (std::size_t a = 0; a < g.kernel_h; ++a) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride_h + a) -
                                    static_cast<std::ptrdiff_t>(g.pad_top);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(s.in_h)) continue;
          for (std::size_t c = 0; c < g.kernel_w; ++c) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride_w + c) -
                                      static_cast<std::ptrdiff_t>(g.pad_left);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(s.in_w)) continue;
            const T* src = row + (a * g.kernel_w + c) * s.channels;
            T* dst = x + ((b * s.in_h + static_cast<std::size_t>(ih)) * s.in_w +
                          static_cast<std::size_t>(iw)) * s.channels;
            for (std::size_t k = 0; k < s.channels; ++k) dst[k] += src[k];
          }
        }
      }
    }
  }
}

template <typename T>
void add_bias_rows(T* out, std::size_t rows, const Tensor<T>& bias) {
  const std::size_t c = bias.size();
  const T* pb = bias.raw();
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out + r * c;
    for (std::size_t k = 0; k < c; ++k) row[k] += pb[k];
  }
}

template <typename T>
void accumulate_bias_grad(const T* g, std::size_t rows, Tensor<T>& gb) {
  const std::size_t c = gb.size();
  T* pgb = gb.raw();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = g + r * c;
    for (std::size_t k = 0; k < c; ++k) pgb[k] += row[k];
  }
}

void require_rank(const char* op, const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(op, std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                             shape_str(s));
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeometry& g) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  require_rank("conv2d", xv.shape(), 4, "input");
  require_rank("conv2d", wv.shape(), 4, "weight");
  if (wv.dim(0) != g.kernel_h || wv.dim(1) != g.kernel_w) {
    throw ShapeError("conv2d", "weight " + shape_str(wv.shape()) + " does not match " + g.str());
  }
  if (wv.dim(2) != xv.dim(3)) {
    throw ShapeError("conv2d", "input channels " + std::to_string(xv.dim(3)) + " vs weight in-channels " +
                                   std::to_string(wv.dim(2)));
  }
  const std::size_t cout = wv.dim(3);
  const bool has_bias = bias.valid();
  if (has_bias && bias.value().shape() != Shape{cout}) {
    throw ShapeError("conv2d", "bias " + shape_str(bias.value().shape()) + " vs out-channels " + std::to_string(cout));
  }
  const Spatial s{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), g.out_h(xv.dim(1)), g.out_w(xv.dim(2))};
  const auto rows = static_cast<Eigen::Index>(s.batch * s.out_h * s.out_w);
  const auto k = static_cast<Eigen::Index>(g.kernel_h * g.kernel_w * s.channels);
  std::vector<T> cols(static_cast<std::size_t>(rows * k));
  im2col(xv.raw(), s, g, cols.data());
  Tensor<T> out({s.batch, s.out_h, s.out_w, cout});
  MatMap<T>(out.raw(), rows, static_cast<Eigen::Index>(cout)).noalias() =
      CMatMap<T>(cols.data(), rows, k) * CMatMap<T>(wv.raw(), k, static_cast<Eigen::Index>(cout));
  if (has_bias) add_bias_rows(out.raw(), static_cast<std::size_t>(rows), bias.value());

  const std::size_t ix = x.id(), iw = weight.id();
  const std::size_t ib = has_bias ? bias.id() : 0;
  std::vector<std::size_t> inputs{ix, iw};
  if (has_bias) inputs.push_back(ib);
  return x.tape()->record(
      "conv2d", std::move(out), std::move(inputs),
      [ix, iw, ib, has_bias, s, g, rows, k, cout](Tape<T>& t, std::size_t self) {
        const auto n = static_cast<Eigen::Index>(cout);
        CMatMap<T> gy(t.grad(self).raw(), rows, n);
        if (t.requires_grad(iw)) {
          std::vector<T> cols(static_cast<std::size_t>(rows * k));
          im2col(t.value(ix).raw(), s, g, cols.data());
          MatMap<T>(t.grad_accumulator(iw).raw(), k, n).noalias() +=
              CMatMap<T>(cols.data(), rows, k).transpose() * gy;
        }
        if (t.requires_grad(ix)) {
          std::vector<T> dcols(static_cast<std::size_t>(rows * k));
          MatMap<T>(dcols.data(), rows, k).noalias() = gy * CMatMap<T>(t.value(iw).raw(), k, n).transpose();
          col2im(dcols.data(), s, g, t.grad_accumulator(ix).raw());
        }
        if (has_bias && t.requires_grad(ib)) {
          accumulate_bias_grad(t.grad(self).raw(), static_cast<std::size_t>(rows), t.grad_accumulator(ib));
        }
      });
}

template <typename T>
Var<T> conv2d_transpose(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                        const ConvGeometry& g, std::size_t out_h, std::size_t out_w) {
  const auto& xv = x.value();
  const auto& wv = weight.value();
  require_rank("conv2d_transpose", xv.shape(), 4, "input");
  require_rank("conv2d_transpose", wv.shape(), 4, "weight");
  if (wv.dim(0) != g.kernel_h || wv.dim(1) != g.kernel_w) {
    throw ShapeError("conv2d_transpose", "weight " + shape_str(wv.shape()) + " does not match " + g.str());
  }
  if (wv.dim(3) != xv.dim(3)) {
    throw ShapeError("conv2d_transpose", "input channels " + std::to_string(xv.dim(3)) +
                                             " vs weight in-channels " + std::to_string(wv.dim(3)));
  }
  if (out_h == 0 || out_w == 0 || g.out_h(out_h) != xv.dim(1) || g.out_w(out_w) != xv.dim(2)) {
    throw ShapeError("conv2d_transpose", "output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                                             " is not the adjoint of " + std::to_string(xv.dim(1)) + "x" +
                                             std::to_string(xv.dim(2)) + " under " + g.str());
  }
  const std::size_t cout = wv.dim(2);
  const bool has_bias = bias.valid();
  if (has_bias && bias.value().shape() != Shape{cout}) {
    throw ShapeError("conv2d_transpose", "bias " + shape_str(bias.value().shape()) + " vs out-channels " +
                                             std::to_string(cout));
  }
  // Geometry of the adjoint conv2d: [out_h,out_w,cout] -> [Hi,Wi,cin].
  const Spatial s{xv.dim(0), out_h, out_w, cout, xv.dim(1), xv.dim(2)};
  const std::size_t cin = xv.dim(3);
  const auto rows = static_cast<Eigen::Index>(s.batch * s.out_h * s.out_w);
  const auto k = static_cast<Eigen::Index>(g.kernel_h * g.kernel_w * cout);
  const auto n = static_cast<Eigen::Index>(cin);
  std::vector<T> dcols(static_cast<std::size_t>(rows * k));
  MatMap<T>(dcols.data(), rows, k).noalias() =
      CMatMap<T>(xv.raw(), rows, n) * CMatMap<T>(wv.raw(), k, n).transpose();
  Tensor<T> out({s.batch, out_h, out_w, cout});
  col2im(dcols.data(), s, g, out.raw());
  if (has_bias) add_bias_rows(out.raw(), s.batch * out_h * out_w, bias.value());

  const std::size_t ix = x.id(), iw = weight.id();
  const std::size_t ib = has_bias ? bias.id() : 0;
  std::vector<std::size_t> inputs{ix, iw};
  if (has_bias) inputs.push_back(ib);
  return x.tape()->record(
      "conv2d_transpose", std::move(out), std::move(inputs),
      [ix, iw, ib, has_bias, s, g, rows, k, n, out_h, out_w](Tape<T>& t, std::size_t self) {
        const Tensor<T>& gy = t.grad(self);
        std::vector<T> cols(static_cast<std::size_t>(rows * k));
        im2col(gy.raw(), s, g, cols.data());
        CMatMap<T> cm(cols.data(), rows, k);
        if (t.requires_grad(ix)) {
          MatMap<T>(t.grad_accumulator(ix).raw(), rows, n).noalias() += cm * CMatMap<T>(t.value(iw).raw(), k, n);
        }
        if (t.requires_grad(iw)) {
          MatMap<T>(t.grad_accumulator(iw).raw(), k, n).noalias() += cm.transpose() * CMatMap<T>(t.value(ix).raw(), rows, n);
        }
        if (has_bias && t.requires_grad(ib)) {
          accumulate_bias_grad(gy.raw(), s.batch * out_h * out_w, t.grad_accumulator(ib));
        }
      });
}

template <typename T>
Var<T> dense(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[0]) {
    throw ShapeError("dense", "input " + shape_str(xs) + " vs weight " + shape_str(ws));
  }
  if (bias.valid() && bias.shape() != Shape{ws[1]}) {
    throw ShapeError("dense", "bias " + shape_str(bias.shape()) + " vs " + std::to_string(ws[1]) + " outputs");
  }
  Var<T> y = matmul(x, weight);
  return bias.valid() ? add(y, bias) : y;
}

template <typename T>
Var<T> batchnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormState<T>& state,
                 Mode mode, bool update_stats) {
  const auto& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("batchnorm", "input must have rank >= 2, got " + shape_str(xv.shape()));
  const std::size_t c = xv.shape().back();
  const std::size_t rows = xv.size() / c;
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("batchnorm", "gamma/beta must be [" + std::to_string(c) + "]");
  }
  if (!state.running_mean || !state.running_var || state.running_mean->size() != c ||
      state.running_var->size() != c) {
    throw ShapeError("batchnorm", "running statistics must be [" + std::to_string(c) + "]");
  }
  if (mode == Mode::train && xv.dim(0) < 2) {
    throw ShapeError("batchnorm", "train mode needs batch >= 2, got " + shape_str(xv.shape()));
  }

  std::vector<T> mean(c), inv_std(c);
  if (mode == Mode::train) {
    std::vector<double> s1(c, 0.0), s2(c, 0.0);
    const T* px = xv.raw();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = 0; k < c; ++k) s1[k] += static_cast<double>(px[r * c + k]);
    }
    for (std::size_t k = 0; k < c; ++k) s1[k] /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = 0; k < c; ++k) {
        const double d = static_cast<double>(px[r * c + k]) - s1[k];
        s2[k] += d * d;
      }
    }
    for (std::size_t k = 0; k < c; ++k) {
      const double var = s2[k] / static_cast<double>(rows);
      mean[k] = static_cast<T>(s1[k]);
      inv_std[k] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(state.epsilon)));
      if (update_stats) {
        T& rm = (*state.running_mean)[k];
        T& rv = (*state.running_var)[k];
        rm = state.momentum * rm + (T{1} - state.momentum) * static_cast<T>(s1[k]);
        rv = state.momentum * rv + (T{1} - state.momentum) * static_cast<T>(var);
      }
    }
  } else {
    for (std::size_t k = 0; k < c; ++k) {
      mean[k] = (*state.running_mean)[k];
      inv_std[k] = T{1} / std::sqrt((*state.running_var)[k] + state.epsilon);
    }
  }

  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  Tensor<T> out(xv.shape());
  {
    const T* px = xv.raw();
    const T* pg = gamma.value().raw();
    const T* pb = beta.value().raw();
    T* po = out.raw();
    T* ph = xhat->data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t i = r * c + k;
        ph[i] = (px[i] - mean[k]) * inv_std[k];
        po[i] = pg[k] * ph[i] + pb[k];
      }
    }
  }

  const std::size_t ix = x.id(), ig = gamma.id(), ibeta = beta.id();
  const bool batch_stats = mode == Mode::train;
  return x.tape()->record(
      "batchnorm", std::move(out), {ix, ig, ibeta},
      [ix, ig, ibeta, rows, c, xhat, inv_std, batch_stats](Tape<T>& t, std::size_t self) {
        const T* gy = t.grad(self).raw();
        const T* ph = xhat->data();
        std::vector<double> sum_g(c, 0.0), sum_gh(c, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t k = 0; k < c; ++k) {
            const std::size_t i = r * c + k;
            sum_g[k] += static_cast<double>(gy[i]);
            sum_gh[k] += static_cast<double>(gy[i]) * static_cast<double>(ph[i]);
          }
        }
        if (t.requires_grad(ig)) {
          T* gg = t.grad_accumulator(ig).raw();
          for (std::size_t k = 0; k < c; ++k) gg[k] += static_cast<T>(sum_gh[k]);
        }
        if (t.requires_grad(ibeta)) {
          T* gb = t.grad_accumulator(ibeta).raw();
          for (std::size_t k = 0; k < c; ++k) gb[k] += static_cast<T>(sum_g[k]);
        }
        if (t.requires_grad(ix)) {
          const T* pgamma = t.value(ig).raw();
          T* gx = t.grad_accumulator(ix).raw();
          if (batch_stats) {
            const double inv_n = 1.0 / static_cast<double>(rows);
            std::vector<T> mg(c), mgh(c), scale(c);
            for (std::size_t k = 0; k < c; ++k) {
              mg[k] = static_cast<T>(sum_g[k] * inv_n);
              mgh[k] = static_cast<T>(sum_gh[k] * inv_n);
              scale[k] = pgamma[k] * inv_std[k];
            }
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t k = 0; k < c; ++k) {
                const std::size_t i = r * c + k;
                gx[i] += scale[k] * (gy[i] - mg[k] - ph[i] * mgh[k]);
              }
            }
          } else {
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t k = 0; k < c; ++k) {
                const std::size_t i = r * c + k;
                gx[i] += gy[i] * pgamma[k] * inv_std[k];
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> global_pool_spatial(const Var<T>& x, PoolKind kind) {
  const auto& xv = x.value();
  require_rank("global_pool_spatial", xv.shape(), 4, "input");
  const std::size_t b = xv.dim(0), hw = xv.dim(1) * xv.dim(2), c = xv.dim(3);
  Tensor<T> out({b, 1, 1, c});
  std::vector<std::size_t> arg;
  const T* px = xv.raw();
  if (kind == PoolKind::max) {
    arg.assign(b * c, 0);
    for (std::size_t n = 0; n < b; ++n) {
      for (std::size_t k = 0; k < c; ++k) {
        std::size_t best = 0;
        T v = px[(n * hw) * c + k];
        for (std::size_t p = 1; p < hw; ++p) {
          const T cand = px[(n * hw + p) * c + k];
          if (cand > v) {
            v = cand;
            best = p;
          }
        }
        out[n * c + k] = v;
        arg[n * c + k] = best;
      }
    }
  } else {
    for (std::size_t n = 0; n < b; ++n) {
      for (std::size_t k = 0; k < c; ++k) {
        T acc{0};
        for (std::size_t p = 0; p < hw; ++p) acc += px[(n * hw + p) * c + k];
        out[n * c + k] = acc / static_cast<T>(hw);
      }
    }
  }
  const std::size_t ix = x.id();
  return x.tape()->record("global_pool_spatial", std::move(out), {ix},
                          [ix, kind, b, hw, c, arg = std::move(arg)](Tape<T>& t, std::size_t self) {
                            const T* g = t.grad(self).raw();
                            T* gx = t.grad_accumulator(ix).raw();
                            for (std::size_t n = 0; n < b; ++n) {
                              for (std::size_t k = 0; k < c; ++k) {
                                if (kind == PoolKind::max) {
                                  gx[(n * hw + arg[n * c + k]) * c + k] += g[n * c + k];
                                } else {
                                  const T share = g[n * c + k] / static_cast<T>(hw);
                                  for (std::size_t p = 0; p < hw; ++p) gx[(n * hw + p) * c + k] += share;
                                }
                              }
                            }
                          });
}

template <typename T>
Var<T> pool_channelwise(const Var<T>& x, PoolKind kind) {
  const auto& xv = x.value();
  require_rank("pool_channelwise", xv.shape(), 4, "input");
  const std::size_t cells = xv.dim(0) * xv.dim(1) * xv.dim(2), c = xv.dim(3);
  Tensor<T> out({xv.dim(0), xv.dim(1), xv.dim(2), 1});
  std::vector<std::size_t> arg;
  const T* px = xv.raw();
  if (kind == PoolKind::max) arg.assign(cells, 0);
  for (std::size_t p = 0; p < cells; ++p) {
    const T* row = px + p * c;
    if (kind == PoolKind::max) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < c; ++k) {
        if (row[k] > row[best]) best = k;
      }
      out[p] = row[best];
      arg[p] = best;
    } else {
      T acc{0};
      for (std::size_t k = 0; k < c; ++k) acc += row[k];
      out[p] = acc / static_cast<T>(c);
    }
  }
  const std::size_t ix = x.id();
  return x.tape()->record("pool_channelwise", std::move(out), {ix},
                          [ix, kind, cells, c, arg = std::move(arg)](Tape<T>& t, std::size_t self) {
                            const T* g = t.grad(self).raw();
                            T* gx = t.grad_accumulator(ix).raw();
                            for (std::size_t p = 0; p < cells; ++p) {
                              if (kind == PoolKind::max) {
                                gx[p * c + arg[p]] += g[p];
                              } else {
                                const T share = g[p] / static_cast<T>(c);
                                for (std::size_t k = 0; k < c; ++k) gx[p * c + k] += share;
                              }
                            }
                          });
}

template <typename T>
Var<T> time_distribute(const std::function<Var<T>(const Var<T>&)>& layer, const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() < 3) throw ShapeError("time_distribute", "input needs [batch,time,...], got " + shape_str(s));
  const std::size_t batch = s[0], frames = s[1];
  Shape folded{batch * frames};
  folded.insert(folded.end(), s.begin() + 2, s.end());
  Var<T> y = layer(reshape(x, folded));
  const Shape& ys = y.shape();
  if (ys.empty() || ys[0] != batch * frames) {
    throw ShapeError("time_distribute", "layer changed the folded batch axis to " + shape_str(ys));
  }
  Shape unfolded{batch, frames};
  unfolded.insert(unfolded.end(), ys.begin() + 1, ys.end());
  return reshape(y, unfolded);
}

template <typename T>
Var<T> mse_loss(const Var<T>& prediction, const Var<T>& target) {
  if (prediction.shape() != target.shape()) {
    throw ShapeError("mse_loss", shape_str(prediction.shape()) + " vs " + shape_str(target.shape()));
  }
  return mean(square(sub(prediction, target)));
}

#define STFLOW_INSTANTIATE_NN(T)                                                                         \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, const ConvGeometry&);              \
  template Var<T> conv2d_transpose(const Var<T>&, const Var<T>&, const Var<T>&, const ConvGeometry&,     \
                                   std::size_t, std::size_t);                                            \
  template Var<T> dense(const Var<T>&, const Var<T>&, const Var<T>&);                                    \
  template Var<T> batchnorm(const Var<T>&, const Var<T>&, const Var<T>&, BatchNormState<T>&, Mode, bool); \
  template Var<T> global_pool_spatial(const Var<T>&, PoolKind);                                          \
  template Var<T> pool_channelwise(const Var<T>&, PoolKind);                                             \
  template Var<T> time_distribute(const std::function<Var<T>(const Var<T>&)>&, const Var<T>&);           \
  template Var<T> mse_loss(const Var<T>&, const Var<T>&);

STFLOW_INSTANTIATE_NN(float)
STFLOW_INSTANTIATE_NN(double)

}  // namespace stflow
