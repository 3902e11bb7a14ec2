#include "hdca/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <string>

namespace hdca {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

Graph& graph_of(std::initializer_list<Var> vars, const char* op) {
  Graph* g = nullptr;
  for (const Var& v : vars) {
    if (v.graph == nullptr) throw std::invalid_argument(std::string(op) + ": unbound variable");
    if (g != nullptr && v.graph != g) {
      throw std::invalid_argument(std::string(op) + ": operands belong to different graphs");
    }
    g = v.graph;
  }
  return *g;
}

std::size_t channel_axis(const Tensor& t, const char* op) {
  if (t.rank() == 3) return 0;
  if (t.rank() == 4) return 1;
  throw ShapeError(std::string(op) + ": expected [C,H,W] or [B,C,H,W], got " +
                   to_string(t.shape()));
}

Shape feature_shape(const Shape& like, std::size_t batch, std::size_t channels, std::size_t h,
                    std::size_t w) {
  if (like.size() == 3) return {channels, h, w};
  return {batch, channels, h, w};
}

// Source sampling positions for half-pixel-center bilinear interpolation.
struct LinearTap {
  std::size_t i0, i1;
  double w0, w1;
};

std::vector<LinearTap> linear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = ratio * (static_cast<double>(o) + 0.5) - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = i0 < in - 1 ? i0 + 1 : i0;
    const double w1 = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - w1, w1};
  }
  return taps;
}

template <typename T>
void resize_planes(const T* in, T* out, std::size_t planes, std::size_t ih, std::size_t iw,
                   std::size_t oh, std::size_t ow) {
  const auto ty = linear_taps(ih, oh);
  const auto tx = linear_taps(iw, ow);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = in + p * ih * iw;
    T* dst = out + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      const auto& a = ty[y];
      for (std::size_t x = 0; x < ow; ++x) {
        const auto& b = tx[x];
        const double v = a.w0 * (b.w0 * src[a.i0 * iw + b.i0] + b.w1 * src[a.i0 * iw + b.i1]) +
                         a.w1 * (b.w0 * src[a.i1 * iw + b.i0] + b.w1 * src[a.i1 * iw + b.i1]);
        dst[y * ow + x] = static_cast<T>(v);
      }
    }
  }
}

template <typename T>
void resize_planes_backward(const T* gout, T* gin, std::size_t planes, std::size_t ih,
                            std::size_t iw, std::size_t oh, std::size_t ow) {
  const auto ty = linear_taps(ih, oh);
  const auto tx = linear_taps(iw, ow);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* g = gout + p * oh * ow;
    T* dst = gin + p * ih * iw;
    for (std::size_t y = 0; y < oh; ++y) {
      const auto& a = ty[y];
      for (std::size_t x = 0; x < ow; ++x) {
        const auto& b = tx[x];
        const double v = g[y * ow + x];
        dst[a.i0 * iw + b.i0] += static_cast<T>(a.w0 * b.w0 * v);
        dst[a.i0 * iw + b.i1] += static_cast<T>(a.w0 * b.w1 * v);
        dst[a.i1 * iw + b.i0] += static_cast<T>(a.w1 * b.w0 * v);
        dst[a.i1 * iw + b.i1] += static_cast<T>(a.w1 * b.w1 * v);
      }
    }
  }
}

template <typename T>
void softmax_planes(const T* in, T* out, std::size_t batch, std::size_t channels,
                    std::size_t plane) {
  for (std::size_t b = 0; b < batch; ++b) {
    const T* x = in + b * channels * plane;
    T* y = out + b * channels * plane;
    for (std::size_t j = 0; j < plane; ++j) {
      double m = x[j];
      for (std::size_t k = 1; k < channels; ++k) m = std::max(m, static_cast<double>(x[k * plane + j]));
      double s = 0.0;
      for (std::size_t k = 0; k < channels; ++k) s += std::exp(static_cast<double>(x[k * plane + j]) - m);
      for (std::size_t k = 0; k < channels; ++k) {
        y[k * plane + j] = static_cast<T>(std::exp(static_cast<double>(x[k * plane + j]) - m) / s);
      }
    }
  }
}

// Geometry of one convolution call.
struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kh, kw;
  std::size_t out_height, out_width;
  ops::Conv2dOptions opt;

  std::size_t patch() const { return in_channels * kh * kw; }
  std::size_t out_plane() const { return out_height * out_width; }
  bool pointwise() const {
    return kh == 1 && kw == 1 && opt.stride == 1 && opt.padding == 0;
  }
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const auto pad = static_cast<std::ptrdiff_t>(g.opt.padding);
  const std::size_t plane = g.out_plane();
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const T* xc = x + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = cols + ((c * g.kh + ky) * g.kw + kx) * plane;
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.opt.stride + ky * g.opt.dilation) - pad;
          T* r = row + oy * g.out_width;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(r, r + g.out_width, T(0));
            continue;
          }
          const T* xr = xc + static_cast<std::size_t>(iy) * g.width;
          for (std::size_t ox = 0; ox < g.out_width; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.opt.stride + kx * g.opt.dilation) - pad;
            r[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? T(0) : xr[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* dx) {
  const auto pad = static_cast<std::ptrdiff_t>(g.opt.padding);
  const std::size_t plane = g.out_plane();
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    T* dc = dx + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + ((c * g.kh + ky) * g.kw + kx) * plane;
        for (std::size_t oy = 0; oy < g.out_height; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.opt.stride + ky * g.opt.dilation) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* dr = dc + static_cast<std::size_t>(iy) * g.width;
          const T* r = row + oy * g.out_width;
          for (std::size_t ox = 0; ox < g.out_width; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.opt.stride + kx * g.opt.dilation) - pad;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) dr[ix] += r[ox];
          }
        }
      }
    }
  }
}

// Maps each input flat index of a reduction to its output flat index.
std::vector<std::size_t> reduction_map(const Shape& shape, const std::vector<bool>& reduced) {
  const std::size_t rank = shape.size();
  std::vector<std::size_t> out_stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = rank; i-- > 0;) {
    if (!reduced[i]) {
      out_stride[i] = s;
      s *= shape[i];
    }
  }
  const std::size_t n = shape_numel(shape);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t out = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = out;
    for (std::size_t i = rank; i-- > 0;) {
      ++idx[i];
      out += out_stride[i];
      if (idx[i] < shape[i]) break;
      out -= out_stride[i] * idx[i];
      idx[i] = 0;
    }
  }
  return map;
}

}  // namespace

namespace kernels {

FeatureDims feature_dims(const Shape& shape, const char* op) {
  if (shape.size() == 3) return {1, shape[0], shape[1], shape[2]};
  if (shape.size() == 4) return {shape[0], shape[1], shape[2], shape[3]};
  throw ShapeError(std::string(op) + ": expected [C,H,W] or [B,C,H,W], got " + to_string(shape));
}

Tensor bilinear_resize(const Tensor& x, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw ShapeError("bilinear_resize: target size must be positive");
  const auto d = feature_dims(x.shape(), "bilinear_resize");
  Tensor out(feature_shape(x.shape(), d.batch, d.channels, height, width), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    resize_planes<T>(x.data<T>().data(), out.data<T>().data(), d.batch * d.channels, d.height,
                     d.width, height, width);
  });
  return out;
}

Tensor softmax_channels(const Tensor& x) {
  const auto d = feature_dims(x.shape(), "softmax_channels");
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    softmax_planes<T>(x.data<T>().data(), out.data<T>().data(), d.batch, d.channels,
                      d.height * d.width);
  });
  return out;
}

Tensor flip_horizontal(const Tensor& x) {
  const auto d = feature_dims(x.shape(), "flip_horizontal");
  Tensor out(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    auto o = out.data<T>();
    const std::size_t rows = d.batch * d.channels * d.height;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < d.width; ++c) {
        o[r * d.width + c] = in[r * d.width + (d.width - 1 - c)];
      }
    }
  });
  return out;
}

std::vector<LabelMap> argmax_channels(const Tensor& x) {
  const auto d = feature_dims(x.shape(), "argmax_channels");
  if (d.channels > 256) throw ShapeError("argmax_channels: more than 256 channels");
  std::vector<LabelMap> maps;
  const std::size_t plane = d.height * d.width;
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = x.data<T>();
    for (std::size_t b = 0; b < d.batch; ++b) {
      LabelMap m(d.height, d.width);
      const T* base = v.data() + b * d.channels * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < d.channels; ++k) {
          if (base[k * plane + j] > base[best * plane + j]) best = k;
        }
        m.values[j] = static_cast<std::uint8_t>(best);
      }
      maps.push_back(std::move(m));
    }
  });
  return maps;
}

LabelMap resize_nearest(const LabelMap& labels, std::size_t height, std::size_t width) {
  LabelMap out(height, width);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = std::min(labels.height - 1, (2 * y + 1) * labels.height / (2 * height));
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t sx = std::min(labels.width - 1, (2 * x + 1) * labels.width / (2 * width));
      out.at(y, x) = labels.at(sy, sx);
    }
  }
  return out;
}

}  // namespace kernels

namespace ops {

Var matmul(Var a, Var b, bool transpose_a, bool transpose_b) {
  Graph& g = graph_of({a, b}, "matmul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same_dtype(A, B, "matmul");
  const auto fail = [&] {
    throw ShapeError("matmul: incompatible shapes " + to_string(A.shape()) +
                     (transpose_a ? "^T" : "") + " x " + to_string(B.shape()) +
                     (transpose_b ? "^T" : ""));
  };
  if (A.rank() != B.rank() || (A.rank() != 2 && A.rank() != 3)) fail();
  const bool batched = A.rank() == 3;
  const std::size_t batch = batched ? A.dim(0) : 1;
  if (batched && B.dim(0) != batch) fail();
  const std::size_t ar = A.dim(A.rank() - 2), ac = A.dim(A.rank() - 1);
  const std::size_t br = B.dim(B.rank() - 2), bc = B.dim(B.rank() - 1);
  const std::size_t m = transpose_a ? ac : ar, k = transpose_a ? ar : ac;
  const std::size_t kb = transpose_b ? bc : br, n = transpose_b ? br : bc;
  if (k != kb) fail();

  Tensor out(batched ? Shape{batch, m, n} : Shape{m, n}, A.dtype());
  dispatch(A.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMatMap<T> am(A.data<T>().data() + i * ar * ac, ar, ac);
      ConstMatMap<T> bm(B.data<T>().data() + i * br * bc, br, bc);
      MatMap<T> cm(out.data<T>().data() + i * m * n, m, n);
      if (!transpose_a && !transpose_b) cm.noalias() = am * bm;
      else if (transpose_a && !transpose_b) cm.noalias() = am.transpose() * bm;
      else if (!transpose_a && transpose_b) cm.noalias() = am * bm.transpose();
      else cm.noalias() = am.transpose() * bm.transpose();
    }
  });

  return g.record("matmul", std::move(out), {a, b},
                  [a, b, transpose_a, transpose_b, batch, ar, ac, br, bc, m, n](
                      Graph& gr, const Tensor& gout) {
    const Tensor& A = gr.value(a);
    const Tensor& B = gr.value(b);
    dispatch(A.dtype(), [&](auto tag) {
      using T = decltype(tag);
      for (std::size_t i = 0; i < batch; ++i) {
        ConstMatMap<T> am(A.data<T>().data() + i * ar * ac, ar, ac);
        ConstMatMap<T> bm(B.data<T>().data() + i * br * bc, br, bc);
        ConstMatMap<T> gm(gout.data<T>().data() + i * m * n, m, n);
        const RowMat<T> opa = transpose_a ? RowMat<T>(am.transpose()) : RowMat<T>(am);
        const RowMat<T> opb = transpose_b ? RowMat<T>(bm.transpose()) : RowMat<T>(bm);
        if (gr.requires_grad(a)) {
          MatMap<T> da(gr.grad_buffer(a).data<T>().data() + i * ar * ac, ar, ac);
          if (transpose_a) da.noalias() += opb * gm.transpose();
          else da.noalias() += gm * opb.transpose();
        }
        if (gr.requires_grad(b)) {
          MatMap<T> db(gr.grad_buffer(b).data<T>().data() + i * br * bc, br, bc);
          if (transpose_b) db.noalias() += gm.transpose() * opa;
          else db.noalias() += opa.transpose() * gm;
        }
      }
    });
  });
}

Var conv2d(Var x, Var weight, std::optional<Var> bias, Conv2dOptions options) {
  Graph& g = bias ? graph_of({x, weight, *bias}, "conv2d") : graph_of({x, weight}, "conv2d");
  const Tensor& X = x.value();
  const Tensor& Wt = weight.value();
  require_same_dtype(X, Wt, "conv2d");
  const auto d = kernels::feature_dims(X.shape(), "conv2d");
  if (Wt.rank() != 4) {
    throw ShapeError("conv2d: weight must be [C_out,C_in,kh,kw], got " + to_string(Wt.shape()));
  }
  ConvGeometry geo{};
  geo.batch = d.batch;
  geo.in_channels = d.channels;
  geo.height = d.height;
  geo.width = d.width;
  geo.out_channels = Wt.dim(0);
  geo.kh = Wt.dim(2);
  geo.kw = Wt.dim(3);
  geo.opt = options;
  if (Wt.dim(1) != d.channels) {
    throw ShapeError("conv2d: channel mismatch, input " + to_string(X.shape()) + " weight " +
                     to_string(Wt.shape()));
  }
  if ((geo.kh != 1 && geo.kh != 3) || (geo.kw != 1 && geo.kw != 3)) {
    throw ShapeError("conv2d: unsupported kernel size " + std::to_string(geo.kh) + "x" +
                     std::to_string(geo.kw));
  }
  if (options.stride == 0 || options.dilation == 0) {
    throw ShapeError("conv2d: stride and dilation must be positive");
  }
  const std::size_t span_h = options.dilation * (geo.kh - 1) + 1;
  const std::size_t span_w = options.dilation * (geo.kw - 1) + 1;
  if (d.height + 2 * options.padding < span_h || d.width + 2 * options.padding < span_w) {
    throw ShapeError("conv2d: input " + to_string(X.shape()) + " smaller than the kernel span");
  }
  geo.out_height = (d.height + 2 * options.padding - span_h) / options.stride + 1;
  geo.out_width = (d.width + 2 * options.padding - span_w) / options.stride + 1;
  if (bias) {
    const Tensor& Bt = bias->value();
    require_same_dtype(X, Bt, "conv2d");
    if (Bt.rank() != 1 || Bt.dim(0) != geo.out_channels) {
      throw ShapeError("conv2d: bias must be [" + std::to_string(geo.out_channels) + "], got " +
                       to_string(Bt.shape()));
    }
  }

  Tensor out(feature_shape(X.shape(), d.batch, geo.out_channels, geo.out_height, geo.out_width),
             X.dtype());
  dispatch(X.dtype(), [&](auto tag) {
    using T = decltype(tag);
    ConstMatMap<T> wm(Wt.data<T>().data(), geo.out_channels, geo.patch());
    RowMat<T> cols;
    if (!geo.pointwise()) cols.resize(geo.patch(), geo.out_plane());
    for (std::size_t b = 0; b < d.batch; ++b) {
      const T* xb = X.data<T>().data() + b * d.channels * d.height * d.width;
      MatMap<T> ob(out.data<T>().data() + b * geo.out_channels * geo.out_plane(),
                   geo.out_channels, geo.out_plane());
      if (geo.pointwise()) {
        ob.noalias() = wm * ConstMatMap<T>(xb, geo.patch(), geo.out_plane());
      } else {
        im2col<T>(xb, geo, cols.data());
        ob.noalias() = wm * cols;
      }
      if (bias) {
        auto bv = bias->value().data<T>();
        for (std::size_t c = 0; c < geo.out_channels; ++c) ob.row(c).array() += bv[c];
      }
    }
  });

  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return g.record("conv2d", std::move(out), inputs, [x, weight, bias, geo](Graph& gr, const Tensor& gout) {
    const Tensor& X = gr.value(x);
    const Tensor& Wt = gr.value(weight);
    dispatch(X.dtype(), [&](auto tag) {
      using T = decltype(tag);
      ConstMatMap<T> wm(Wt.data<T>().data(), geo.out_channels, geo.patch());
      const bool need_x = gr.requires_grad(x);
      const bool need_w = gr.requires_grad(weight);
      const bool need_b = bias && gr.requires_grad(*bias);
      RowMat<T> cols;
      RowMat<T> dcols;
      if (!geo.pointwise()) {
        if (need_w) cols.resize(geo.patch(), geo.out_plane());
        if (need_x) dcols.resize(geo.patch(), geo.out_plane());
      }
      for (std::size_t b = 0; b < geo.batch; ++b) {
        const std::size_t in_size = geo.in_channels * geo.height * geo.width;
        const T* xb = X.data<T>().data() + b * in_size;
        ConstMatMap<T> gb(gout.data<T>().data() + b * geo.out_channels * geo.out_plane(),
                          geo.out_channels, geo.out_plane());
        if (need_w) {
          MatMap<T> dw(gr.grad_buffer(weight).data<T>().data(), geo.out_channels, geo.patch());
          if (geo.pointwise()) {
            dw.noalias() += gb * ConstMatMap<T>(xb, geo.patch(), geo.out_plane()).transpose();
          } else {
            im2col<T>(xb, geo, cols.data());
            dw.noalias() += gb * cols.transpose();
          }
        }
        if (need_x) {
          T* dxb = gr.grad_buffer(x).data<T>().data() + b * in_size;
          if (geo.pointwise()) {
            MatMap<T>(dxb, geo.patch(), geo.out_plane()).noalias() += wm.transpose() * gb;
          } else {
            dcols.noalias() = wm.transpose() * gb;
            col2im_add<T>(dcols.data(), geo, dxb);
          }
        }
        if (need_b) {
          auto db = gr.grad_buffer(*bias).data<T>();
          for (std::size_t c = 0; c < geo.out_channels; ++c) db[c] += gb.row(c).sum();
        }
      }
    });
  });
}

Var softmax_channels(Var x) {
  Graph& g = graph_of({x}, "softmax_channels");
  Tensor out = kernels::softmax_channels(x.value());
  const auto d = kernels::feature_dims(out.shape(), "softmax_channels");
  // The output is needed for backward; keep a copy alongside the node.
  Tensor saved = out;
  return g.record("softmax_channels", std::move(out), {x},
                  [x, d, y = std::move(saved)](Graph& gr, const Tensor& gout) {
    dispatch(y.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto yv = y.data<T>();
      auto gv = gout.data<T>();
      auto dx = gr.grad_buffer(x).data<T>();
      const std::size_t plane = d.height * d.width;
      for (std::size_t b = 0; b < d.batch; ++b) {
        const std::size_t base = b * d.channels * plane;
        for (std::size_t j = 0; j < plane; ++j) {
          double dot = 0.0;
          for (std::size_t k = 0; k < d.channels; ++k) {
            dot += static_cast<double>(yv[base + k * plane + j]) * gv[base + k * plane + j];
          }
          for (std::size_t k = 0; k < d.channels; ++k) {
            const std::size_t i = base + k * plane + j;
            dx[i] += static_cast<T>(yv[i] * (gv[i] - dot));
          }
        }
      }
    });
  });
}

Var bilinear_resize(Var x, std::size_t height, std::size_t width) {
  Graph& g = graph_of({x}, "bilinear_resize");
  Tensor out = kernels::bilinear_resize(x.value(), height, width);
  const auto d = kernels::feature_dims(x.shape(), "bilinear_resize");
  return g.record("bilinear_resize", std::move(out), {x},
                  [x, d, height, width](Graph& gr, const Tensor& gout) {
    dispatch(gout.dtype(), [&](auto tag) {
      using T = decltype(tag);
      resize_planes_backward<T>(gout.data<T>().data(), gr.grad_buffer(x).data<T>().data(),
                                d.batch * d.channels, d.height, d.width, height, width);
    });
  });
}

Var concat_channels(std::span<const Var> xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  Graph& g = graph_of({xs.front()}, "concat_channels");
  const Tensor& first = xs.front().value();
  channel_axis(first, "concat_channels");
  const auto d0 = kernels::feature_dims(first.shape(), "concat_channels");
  std::size_t total = 0;
  std::vector<std::size_t> channels;
  for (const Var& v : xs) {
    graph_of({xs.front(), v}, "concat_channels");
    const Tensor& t = v.value();
    require_same_dtype(first, t, "concat_channels");
    if (t.rank() != first.rank()) {
      throw ShapeError("concat_channels: rank mismatch " + to_string(first.shape()) + " vs " +
                       to_string(t.shape()));
    }
    const auto d = kernels::feature_dims(t.shape(), "concat_channels");
    if (d.batch != d0.batch || d.height != d0.height || d.width != d0.width) {
      throw ShapeError("concat_channels: spatial mismatch " + to_string(first.shape()) + " vs " +
                       to_string(t.shape()));
    }
    channels.push_back(d.channels);
    total += d.channels;
  }
  const std::size_t plane = d0.height * d0.width;
  Tensor out(feature_shape(first.shape(), d0.batch, total, d0.height, d0.width), first.dtype());
  dispatch(first.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto o = out.data<T>();
    for (std::size_t b = 0; b < d0.batch; ++b) {
      std::size_t offset = 0;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const std::size_t n = channels[i] * plane;
        auto src = xs[i].value().data<T>().subspan(b * n, n);
        std::copy(src.begin(), src.end(), o.begin() + (b * total + offset) * plane);
        offset += channels[i];
      }
    }
  });
  std::vector<Var> inputs(xs.begin(), xs.end());
  return g.record("concat_channels", std::move(out), inputs,
                  [inputs, channels, total, plane, batch = d0.batch](Graph& gr, const Tensor& gout) {
    dispatch(gout.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto gv = gout.data<T>();
      std::size_t offset = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const std::size_t n = channels[i] * plane;
        if (gr.requires_grad(inputs[i])) {
          auto dst = gr.grad_buffer(inputs[i]).data<T>();
          for (std::size_t b = 0; b < batch; ++b) {
            const T* src = gv.data() + (b * total + offset) * plane;
            for (std::size_t j = 0; j < n; ++j) dst[b * n + j] += src[j];
          }
        }
        offset += channels[i];
      }
    });
  });
}

Var slice_channels(Var x, std::size_t begin, std::size_t count) {
  Graph& g = graph_of({x}, "slice_channels");
  const Tensor& X = x.value();
  const auto d = kernels::feature_dims(X.shape(), "slice_channels");
  if (count == 0 || begin + count > d.channels) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") outside " + to_string(X.shape()));
  }
  const std::size_t plane = d.height * d.width;
  Tensor out(feature_shape(X.shape(), d.batch, count, d.height, d.width), X.dtype());
  dispatch(X.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto src = X.data<T>();
    auto dst = out.data<T>();
    for (std::size_t b = 0; b < d.batch; ++b) {
      std::copy_n(src.begin() + (b * d.channels + begin) * plane, count * plane,
                  dst.begin() + b * count * plane);
    }
  });
  return g.record("slice_channels", std::move(out), {x},
                  [x, d, begin, count, plane](Graph& gr, const Tensor& gout) {
    dispatch(gout.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto gv = gout.data<T>();
      auto dx = gr.grad_buffer(x).data<T>();
      for (std::size_t b = 0; b < d.batch; ++b) {
        for (std::size_t j = 0; j < count * plane; ++j) {
          dx[(b * d.channels + begin) * plane + j] += gv[b * count * plane + j];
        }
      }
    });
  });
}

Var batch_norm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
               BatchNormOptions options) {
  Graph& g = graph_of({x, gamma, beta}, "batch_norm");
  const Tensor& X = x.value();
  const auto d = kernels::feature_dims(X.shape(), "batch_norm");
  for (const Tensor* t : {&gamma.value(), &beta.value(), &static_cast<const Tensor&>(running_mean),
                          &static_cast<const Tensor&>(running_var)}) {
    require_same_dtype(X, *t, "batch_norm");
    if (t->rank() != 1 || t->dim(0) != d.channels) {
      throw ShapeError("batch_norm: per-channel tensor " + to_string(t->shape()) +
                       " does not match input " + to_string(X.shape()));
    }
  }
  const std::size_t plane = d.height * d.width;
  const std::size_t count = d.batch * plane;
  std::vector<double> mean(d.channels), inv_std(d.channels);
  const bool training = options.mode == NormMode::Train;

  Tensor out(X.shape(), X.dtype());
  dispatch(X.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xv = X.data<T>();
    auto gm = gamma.value().data<T>();
    auto bt = beta.value().data<T>();
    auto rm = running_mean.data<T>();
    auto rv = running_var.data<T>();
    auto o = out.data<T>();
    for (std::size_t c = 0; c < d.channels; ++c) {
      if (training) {
        double s = 0.0;
        for (std::size_t b = 0; b < d.batch; ++b) {
          const T* p = xv.data() + (b * d.channels + c) * plane;
          for (std::size_t j = 0; j < plane; ++j) s += p[j];
        }
        const double mu = s / static_cast<double>(count);
        double sq = 0.0;
        for (std::size_t b = 0; b < d.batch; ++b) {
          const T* p = xv.data() + (b * d.channels + c) * plane;
          for (std::size_t j = 0; j < plane; ++j) sq += (p[j] - mu) * (p[j] - mu);
        }
        const double var = sq / static_cast<double>(count);
        mean[c] = mu;
        inv_std[c] = 1.0 / std::sqrt(var + options.epsilon);
        const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
        rm[c] = static_cast<T>((1.0 - options.momentum) * rm[c] + options.momentum * mu);
        rv[c] = static_cast<T>((1.0 - options.momentum) * rv[c] + options.momentum * unbiased);
      } else {
        mean[c] = rm[c];
        inv_std[c] = 1.0 / std::sqrt(static_cast<double>(rv[c]) + options.epsilon);
      }
      for (std::size_t b = 0; b < d.batch; ++b) {
        const std::size_t base = (b * d.channels + c) * plane;
        for (std::size_t j = 0; j < plane; ++j) {
          o[base + j] = static_cast<T>((xv[base + j] - mean[c]) * inv_std[c] * gm[c] + bt[c]);
        }
      }
    }
  });

  return g.record("batch_norm", std::move(out), {x, gamma, beta},
                  [x, gamma, beta, d, plane, count, training, mean = std::move(mean),
                   inv_std = std::move(inv_std)](Graph& gr, const Tensor& gout) {
    const Tensor& X = gr.value(x);
    dispatch(X.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto xv = X.data<T>();
      auto gv = gout.data<T>();
      auto gm = gr.value(gamma).data<T>();
      const bool need_x = gr.requires_grad(x);
      for (std::size_t c = 0; c < d.channels; ++c) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t b = 0; b < d.batch; ++b) {
          const std::size_t base = (b * d.channels + c) * plane;
          for (std::size_t j = 0; j < plane; ++j) {
            const double xhat = (xv[base + j] - mean[c]) * inv_std[c];
            sum_dy += gv[base + j];
            sum_dy_xhat += gv[base + j] * xhat;
          }
        }
        if (gr.requires_grad(gamma)) gr.grad_buffer(gamma).data<T>()[c] += static_cast<T>(sum_dy_xhat);
        if (gr.requires_grad(beta)) gr.grad_buffer(beta).data<T>()[c] += static_cast<T>(sum_dy);
        if (!need_x) continue;
        auto dx = gr.grad_buffer(x).data<T>();
        const double k = gm[c] * inv_std[c];
        const double n = static_cast<double>(count);
        for (std::size_t b = 0; b < d.batch; ++b) {
          const std::size_t base = (b * d.channels + c) * plane;
          for (std::size_t j = 0; j < plane; ++j) {
            if (training) {
              const double xhat = (xv[base + j] - mean[c]) * inv_std[c];
              dx[base + j] += static_cast<T>(k * (gv[base + j] - sum_dy / n - xhat * sum_dy_xhat / n));
            } else {
              dx[base + j] += static_cast<T>(k * gv[base + j]);
            }
          }
        }
      }
    });
  });
}

Var relu(Var x) {
  Graph& g = graph_of({x}, "relu");
  const Tensor& X = x.value();
  Tensor out(X.shape(), X.dtype());
  dispatch(X.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xv = X.data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < xv.size(); ++i) o[i] = xv[i] > T(0) ? xv[i] : T(0);
  });
  return g.record("relu", std::move(out), {x}, [x](Graph& gr, const Tensor& gout) {
    dispatch(gout.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto xv = gr.value(x).data<T>();
      auto gv = gout.data<T>();
      auto dx = gr.grad_buffer(x).data<T>();
      for (std::size_t i = 0; i < xv.size(); ++i) {
        if (xv[i] > T(0)) dx[i] += gv[i];
      }
    });
  });
}

Var add(Var a, Var b) {
  Graph& g = graph_of({a, b}, "add");
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.add_inplace(b.value());
  return g.record("add", std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& gout) {
    if (gr.requires_grad(a)) gr.grad_buffer(a).add_inplace(gout);
    if (gr.requires_grad(b)) gr.grad_buffer(b).add_inplace(gout);
  });
}

Var mul(Var a, Var b) {
  Graph& g = graph_of({a, b}, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.shape(), a.dtype());
  dispatch(out.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto av = a.value().data<T>();
    auto bv = b.value().data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  });
  return g.record("mul", std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& gout) {
    dispatch(gout.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto av = gr.value(a).data<T>();
      auto bv = gr.value(b).data<T>();
      auto gv = gout.data<T>();
      if (gr.requires_grad(a)) {
        auto da = gr.grad_buffer(a).data<T>();
        for (std::size_t i = 0; i < gv.size(); ++i) da[i] += gv[i] * bv[i];
      }
      if (gr.requires_grad(b)) {
        auto db = gr.grad_buffer(b).data<T>();
        for (std::size_t i = 0; i < gv.size(); ++i) db[i] += gv[i] * av[i];
      }
    });
  });
}

Var scale(Var x, double factor) {
  Graph& g = graph_of({x}, "scale");
  Tensor out = x.value();
  out.scale_inplace(factor);
  return g.record("scale", std::move(out), {x}, [x, factor](Graph& gr, const Tensor& gout) {
    Tensor t = gout;
    t.scale_inplace(factor);
    gr.grad_buffer(x).add_inplace(t);
  });
}

Var reduce_sum(Var x, std::vector<std::size_t> axes) {
  Graph& g = graph_of({x}, "reduce_sum");
  const Tensor& X = x.value();
  std::vector<bool> reduced(X.rank(), axes.empty());
  for (std::size_t a : axes) {
    if (a >= X.rank() || reduced[a]) {
      throw ShapeError("reduce_sum: invalid axis " + std::to_string(a) + " for shape " +
                       to_string(X.shape()));
    }
    reduced[a] = true;
  }
  Shape out_shape;
  for (std::size_t i = 0; i < X.rank(); ++i) {
    if (!reduced[i]) out_shape.push_back(X.dim(i));
  }
  auto map = reduction_map(X.shape(), reduced);
  Tensor out(out_shape, X.dtype());
  dispatch(X.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto xv = X.data<T>();
    std::vector<double> acc(out.numel(), 0.0);
    for (std::size_t i = 0; i < xv.size(); ++i) acc[map[i]] += xv[i];
    auto o = out.data<T>();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<T>(acc[i]);
  });
  return g.record("reduce_sum", std::move(out), {x},
                  [x, map = std::move(map)](Graph& gr, const Tensor& gout) {
    dispatch(gout.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto gv = gout.data<T>();
      auto dx = gr.grad_buffer(x).data<T>();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gv[map[i]];
    });
  });
}

Var divide_rows(Var v, Var d, double min_denominator) {
  Graph& g = graph_of({v, d}, "divide_rows");
  const Tensor& V = v.value();
  const Tensor& D = d.value();
  require_same_dtype(V, D, "divide_rows");
  Shape expected(V.shape().begin(), V.shape().end() - (V.rank() > 0 ? 1 : 0));
  if (V.rank() < 2 || D.shape() != expected) {
    throw ShapeError("divide_rows: need one denominator per row, got values " +
                     to_string(V.shape()) + " and denominators " + to_string(D.shape()));
  }
  const std::size_t rows = D.numel();
  const std::size_t cols = V.shape().back();
  Tensor out(V.shape(), V.dtype());
  dispatch(V.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto vv = V.data<T>();
    auto dv = D.data<T>();
    auto o = out.data<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      const double den = std::max(static_cast<double>(dv[r]), min_denominator);
      for (std::size_t c = 0; c < cols; ++c) o[r * cols + c] = static_cast<T>(vv[r * cols + c] / den);
    }
  });
  return g.record("divide_rows", std::move(out), {v, d},
                  [v, d, rows, cols, min_denominator](Graph& gr, const Tensor& gout) {
    dispatch(gout.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto vv = gr.value(v).data<T>();
      auto dv = gr.value(d).data<T>();
      auto gv = gout.data<T>();
      const bool need_v = gr.requires_grad(v);
      const bool need_d = gr.requires_grad(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const double raw = dv[r];
        const bool clamped = !(raw > min_denominator);
        const double den = clamped ? min_denominator : raw;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t i = r * cols + c;
          if (need_v) gr.grad_buffer(v).data<T>()[i] += static_cast<T>(gv[i] / den);
          dot += static_cast<double>(gv[i]) * vv[i];
        }
        if (need_d && !clamped) gr.grad_buffer(d).data<T>()[r] += static_cast<T>(-dot / (den * den));
      }
    });
  });
}

Var reshape(Var x, Shape shape) {
  Graph& g = graph_of({x}, "reshape");
  Tensor out = x.value().reshaped(std::move(shape));
  return g.record("reshape", std::move(out), {x}, [x](Graph& gr, const Tensor& gout) {
    gr.grad_buffer(x).add_inplace(gout);
  });
}

Var linear(Var x, Var weight, std::optional<Var> bias) {
  Graph& g = bias ? graph_of({x, weight, *bias}, "linear") : graph_of({x, weight}, "linear");
  const Tensor& X = x.value();
  const Tensor& Wt = weight.value();
  require_same_dtype(X, Wt, "linear");
  if (X.rank() < 1 || Wt.rank() != 2 || Wt.dim(1) != X.shape().back()) {
    throw ShapeError("linear: input " + to_string(X.shape()) + " incompatible with weight " +
                     to_string(Wt.shape()));
  }
  const std::size_t in = Wt.dim(1), outc = Wt.dim(0);
  const std::size_t rows = X.numel() / in;
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != outc)) {
    throw ShapeError("linear: bias " + to_string(bias->value().shape()) + " for weight " +
                     to_string(Wt.shape()));
  }
  Shape out_shape = X.shape();
  out_shape.back() = outc;
  Tensor out(out_shape, X.dtype());
  dispatch(X.dtype(), [&](auto tag) {
    using T = decltype(tag);
    ConstMatMap<T> xm(X.data<T>().data(), rows, in);
    ConstMatMap<T> wm(Wt.data<T>().data(), outc, in);
    MatMap<T> om(out.data<T>().data(), rows, outc);
    om.noalias() = xm * wm.transpose();
    if (bias) {
      auto bv = bias->value().data<T>();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < outc; ++c) om(r, c) += bv[c];
      }
    }
  });
  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return g.record("linear", std::move(out), inputs,
                  [x, weight, bias, rows, in, outc](Graph& gr, const Tensor& gout) {
    dispatch(gout.dtype(), [&](auto tag) {
      using T = decltype(tag);
      ConstMatMap<T> gm(gout.data<T>().data(), rows, outc);
      if (gr.requires_grad(x)) {
        ConstMatMap<T> wm(gr.value(weight).data<T>().data(), outc, in);
        MatMap<T>(gr.grad_buffer(x).data<T>().data(), rows, in).noalias() += gm * wm;
      }
      if (gr.requires_grad(weight)) {
        ConstMatMap<T> xm(gr.value(x).data<T>().data(), rows, in);
        MatMap<T>(gr.grad_buffer(weight).data<T>().data(), outc, in).noalias() += gm.transpose() * xm;
      }
      if (bias && gr.requires_grad(*bias)) {
        auto db = gr.grad_buffer(*bias).data<T>();
        for (std::size_t c = 0; c < outc; ++c) db[c] += gm.col(c).sum();
      }
    });
  });
}

Var cross_entropy(Var logits, std::span<const LabelMap> labels, int ignore_index) {
  Graph& g = graph_of({logits}, "cross_entropy");
  const Tensor& Z = logits.value();
  const auto d = kernels::feature_dims(Z.shape(), "cross_entropy");
  if (labels.size() != d.batch) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " label maps for batch " +
                     std::to_string(d.batch));
  }
  const std::size_t plane = d.height * d.width;
  std::size_t valid = 0;
  for (const LabelMap& m : labels) {
    if (m.height != d.height || m.width != d.width) {
      throw ShapeError("cross_entropy: label map " + std::to_string(m.height) + "x" +
                       std::to_string(m.width) + " does not match logits " + to_string(Z.shape()));
    }
    for (std::uint8_t v : m.values) {
      if (v == ignore_index) continue;
      if (v >= d.channels) {
        throw std::invalid_argument("cross_entropy: label " + std::to_string(v) +
                                    " outside [0," + std::to_string(d.channels) + ")");
      }
      ++valid;
    }
  }
  if (valid == 0) throw std::invalid_argument("cross_entropy: every pixel is ignored");

  std::vector<LabelMap> saved(labels.begin(), labels.end());
  double total = 0.0;
  dispatch(Z.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto z = Z.data<T>();
    for (std::size_t b = 0; b < d.batch; ++b) {
      const T* base = z.data() + b * d.channels * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        const int label = saved[b].values[j];
        if (label == ignore_index) continue;
        double m = base[j];
        for (std::size_t k = 1; k < d.channels; ++k) m = std::max(m, static_cast<double>(base[k * plane + j]));
        double s = 0.0;
        for (std::size_t k = 0; k < d.channels; ++k) s += std::exp(base[k * plane + j] - m);
        total += m + std::log(s) - base[static_cast<std::size_t>(label) * plane + j];
      }
    }
  });
  Tensor out = Tensor::scalar(total / static_cast<double>(valid), Z.dtype());
  return g.record("cross_entropy", std::move(out), {logits},
                  [logits, d, plane, valid, ignore_index, saved = std::move(saved)](
                      Graph& gr, const Tensor& gout) {
    dispatch(gout.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto z = gr.value(logits).data<T>();
      auto dz = gr.grad_buffer(logits).data<T>();
      const double coef = static_cast<double>(gout.data<T>()[0]) / static_cast<double>(valid);
      for (std::size_t b = 0; b < d.batch; ++b) {
        const std::size_t off = b * d.channels * plane;
        for (std::size_t j = 0; j < plane; ++j) {
          const int label = saved[b].values[j];
          if (label == ignore_index) continue;
          double m = z[off + j];
          for (std::size_t k = 1; k < d.channels; ++k) m = std::max(m, static_cast<double>(z[off + k * plane + j]));
          double s = 0.0;
          for (std::size_t k = 0; k < d.channels; ++k) s += std::exp(z[off + k * plane + j] - m);
          for (std::size_t k = 0; k < d.channels; ++k) {
            const double p = std::exp(z[off + k * plane + j] - m) / s;
            const double target = static_cast<int>(k) == label ? 1.0 : 0.0;
            dz[off + k * plane + j] += static_cast<T>(coef * (p - target));
          }
        }
      }
    });
  });
}

}  // namespace ops

}  // namespace hdca
