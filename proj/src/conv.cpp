#include <Eigen/Core>

#include "diat/ops.hpp"

namespace diat {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MMap = Eigen::Map<RowMat<T>>;

// Geometry of a forward convolution from `in` (c,h,w) to `out` (ho,wo).
struct Geom {
  std::int64_t c, h, w;
  std::int64_t kh, kw;
  std::int64_t ho, wo;
  int pad, stride;

  std::int64_t rows() const { return c * kh * kw; }
  std::int64_t cols() const { return ho * wo; }
};

template <class T>
void im2col(const T* x, const Geom& g, T* cols) {
  const std::int64_t hw = g.cols();
  for (std::int64_t c = 0; c < g.c; ++c) {
    const T* xc = x + c * g.h * g.w;
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * hw;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          T* r = row + oy * g.wo;
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) {
            std::fill(r, r + g.wo, T(0));
            continue;
          }
          const T* xr = xc + iy * g.w;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kj;
            r[ox] = (ix >= 0 && ix < g.w) ? xr[ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, const Geom& g, T* x) {
  const std::int64_t hw = g.cols();
  for (std::int64_t c = 0; c < g.c; ++c) {
    T* xc = x + c * g.h * g.w;
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * hw;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ki;
          if (iy < 0 || iy >= g.h) continue;
          const T* r = row + oy * g.wo;
          T* xr = xc + iy * g.w;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kj;
            if (ix >= 0 && ix < g.w) xr[ix] += r[ox];
          }
        }
      }
    }
  }
}

struct Batched {
  std::int64_t n, c, h, w;
  bool batched;
};

Batched as_batched(const Tensor& t, const char* op) {
  const auto& s = t.shape();
  if (s.rank() == 3) return {1, s[0], s[1], s[2], false};
  if (s.rank() == 4) return {s[0], s[1], s[2], s[3], true};
  throw ShapeError(std::string(op) + ": expected [C,H,W] or [N,C,H,W] input, got " + s.str());
}

Shape out_shape(const Batched& b, std::int64_t c, std::int64_t h, std::int64_t w) {
  if (b.batched) return Shape{b.n, c, h, w};
  return Shape{c, h, w};
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (b.defined() && a.dtype() != b.dtype())
    throw std::invalid_argument(std::string(op) + ": mixed dtypes in one graph");
}

}  // namespace

std::int64_t conv_out_extent(std::int64_t in, int kernel, int pad, int stride) {
  if (stride < 1) throw ShapeError("conv: stride must be >= 1");
  if (pad < 0) throw ShapeError("conv: pad must be >= 0");
  const std::int64_t span = in + 2 * pad - kernel;
  if (span < 0) throw ShapeError("conv: kernel larger than padded input");
  return span / stride + 1;
}

std::int64_t deconv_out_extent(std::int64_t in, int kernel, int pad, int stride, int out_pad) {
  if (stride < 1) throw ShapeError("deconv: stride must be >= 1");
  if (out_pad < 0 || out_pad >= stride)
    throw ShapeError("deconv: out_pad must satisfy 0 <= out_pad < stride");
  const std::int64_t out = (in - 1) * stride + kernel - 2 * pad + out_pad;
  if (out <= 0) throw ShapeError("deconv: non-positive output extent");
  return out;
}

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int pad, int stride) {
  const Batched b = as_batched(input, "conv2d");
  const auto& ws = weight.shape();
  if (ws.rank() != 4) throw ShapeError("conv2d: weight must be [C_out,C_in,kH,kW], got " + ws.str());
  if (ws[1] != b.c)
    throw ShapeError("conv2d: weight expects " + std::to_string(ws[1]) + " input channels, input has " +
                     std::to_string(b.c));
  if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != ws[0]))
    throw ShapeError("conv2d: bias must be [C_out]");
  check_same_dtype(input, weight, "conv2d");
  check_same_dtype(input, bias, "conv2d");

  const Geom g{b.c,  b.h, b.w, ws[2], ws[3], conv_out_extent(b.h, static_cast<int>(ws[2]), pad, stride),
               conv_out_extent(b.w, static_cast<int>(ws[3]), pad, stride), pad, stride};
  const std::int64_t cout = ws[0];

  return dispatch(input.dtype(), [&]<class T>() {
    const auto x = input.data<T>();
    const auto wv = weight.data<T>();
    AlignedVector<T> out(static_cast<std::size_t>(b.n * cout * g.cols()));
    AlignedVector<T> cols(static_cast<std::size_t>(g.rows() * g.cols()));
    const CMap<T> wm(wv.data(), cout, g.rows());
    for (std::int64_t s = 0; s < b.n; ++s) {
      im2col(x.data() + s * b.c * b.h * b.w, g, cols.data());
      MMap<T> om(out.data() + s * cout * g.cols(), cout, g.cols());
      om.noalias() = wm * CMap<T>(cols.data(), g.rows(), g.cols());
      if (bias.defined()) {
        const auto bv = bias.data<T>();
        for (std::int64_t o = 0; o < cout; ++o) om.row(o).array() += bv[o];
      }
    }
    Tensor y(out_shape(b, cout, g.ho, g.wo), std::move(out));
    return detail::finish(y, {input, weight, bias}, [input, weight, bias, g, b, cout](const Tensor& gout) {
      const auto go = gout.data<T>();
      const auto x = input.data<T>();
      const auto wv = weight.data<T>();
      const CMap<T> wm(wv.data(), cout, g.rows());
      AlignedVector<T> cols(static_cast<std::size_t>(g.rows() * g.cols()));
      AlignedVector<T> dcols;
      std::span<T> gx, gw, gb;
      if (input.requires_grad()) {
        gx = Tensor(input).ensure_grad<T>();
        dcols.resize(cols.size());
      }
      if (weight.requires_grad()) gw = Tensor(weight).ensure_grad<T>();
      if (bias.defined() && bias.requires_grad()) gb = Tensor(bias).ensure_grad<T>();
      for (std::int64_t s = 0; s < b.n; ++s) {
        const CMap<T> gm(go.data() + s * cout * g.cols(), cout, g.cols());
        if (!gw.empty()) {
          im2col(x.data() + s * b.c * b.h * b.w, g, cols.data());
          MMap<T>(gw.data(), cout, g.rows()).noalias() +=
              gm * CMap<T>(cols.data(), g.rows(), g.cols()).transpose();
        }
        if (!gx.empty()) {
          MMap<T>(dcols.data(), g.rows(), g.cols()).noalias() = wm.transpose() * gm;
          col2im(dcols.data(), g, gx.data() + s * b.c * b.h * b.w);
        }
        if (!gb.empty())
          for (std::int64_t o = 0; o < cout; ++o) gb[o] += gm.row(o).sum();
      }
    });
  });
}

Tensor conv_transpose2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int pad,
                        int stride, int out_pad) {
  const Batched b = as_batched(input, "conv_transpose2d");
  const auto& ws = weight.shape();
  if (ws.rank() != 4)
    throw ShapeError("conv_transpose2d: weight must be [C_in,C_out,kH,kW], got " + ws.str());
  if (ws[0] != b.c)
    throw ShapeError("conv_transpose2d: weight expects " + std::to_string(ws[0]) +
                     " input channels, input has " + std::to_string(b.c));
  if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != ws[1]))
    throw ShapeError("conv_transpose2d: bias must be [C_out]");
  check_same_dtype(input, weight, "conv_transpose2d");
  check_same_dtype(input, bias, "conv_transpose2d");

  const std::int64_t cout = ws[1];
  const std::int64_t ho = deconv_out_extent(b.h, static_cast<int>(ws[2]), pad, stride, out_pad);
  const std::int64_t wo = deconv_out_extent(b.w, static_cast<int>(ws[3]), pad, stride, out_pad);
  // The equivalent forward convolution maps (cout, ho, wo) -> (cin, h, w).
  const Geom g{cout, ho, wo, ws[2], ws[3], b.h, b.w, pad, stride};
  const std::int64_t cin = b.c;

  return dispatch(input.dtype(), [&]<class T>() {
    const auto y = input.data<T>();
    const auto wv = weight.data<T>();
    AlignedVector<T> out(static_cast<std::size_t>(b.n * cout * ho * wo), T(0));
    AlignedVector<T> cols(static_cast<std::size_t>(g.rows() * g.cols()));
    const CMap<T> wm(wv.data(), cin, g.rows());
    for (std::int64_t s = 0; s < b.n; ++s) {
      MMap<T>(cols.data(), g.rows(), g.cols()).noalias() =
          wm.transpose() * CMap<T>(y.data() + s * cin * g.cols(), cin, g.cols());
      T* os = out.data() + s * cout * ho * wo;
      col2im(cols.data(), g, os);
      if (bias.defined()) {
        const auto bv = bias.data<T>();
        for (std::int64_t o = 0; o < cout; ++o)
          for (std::int64_t i = 0; i < ho * wo; ++i) os[o * ho * wo + i] += bv[o];
      }
    }
    Tensor result(out_shape(b, cout, ho, wo), std::move(out));
    return detail::finish(result, {input, weight, bias}, [input, weight, bias, g, b, cin, cout](const Tensor& gout) {
      const auto go = gout.data<T>();
      const auto y = input.data<T>();
      const auto wv = weight.data<T>();
      const CMap<T> wm(wv.data(), cin, g.rows());
      AlignedVector<T> gcols(static_cast<std::size_t>(g.rows() * g.cols()));
      std::span<T> gy, gw, gb;
      if (input.requires_grad()) gy = Tensor(input).ensure_grad<T>();
      if (weight.requires_grad()) gw = Tensor(weight).ensure_grad<T>();
      if (bias.defined() && bias.requires_grad()) gb = Tensor(bias).ensure_grad<T>();
      const std::int64_t out_hw = g.h * g.w;
      for (std::int64_t s = 0; s < b.n; ++s) {
        const T* gos = go.data() + s * cout * out_hw;
        if (!gy.empty() || !gw.empty()) {
          im2col(gos, g, gcols.data());
          const CMap<T> gc(gcols.data(), g.rows(), g.cols());
          if (!gy.empty()) MMap<T>(gy.data() + s * cin * g.cols(), cin, g.cols()).noalias() += wm * gc;
          if (!gw.empty())
            MMap<T>(gw.data(), cin, g.rows()).noalias() +=
                CMap<T>(y.data() + s * cin * g.cols(), cin, g.cols()) * gc.transpose();
        }
        if (!gb.empty())
          for (std::int64_t o = 0; o < cout; ++o) {
            T acc = 0;
            for (std::int64_t i = 0; i < out_hw; ++i) acc += gos[o * out_hw + i];
            gb[o] += acc;
          }
      }
    });
  });
}

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  const auto& s = input.shape();
  const auto& ws = weight.shape();
  if (ws.rank() != 2) throw ShapeError("dense: weight must be [M,N], got " + ws.str());
  std::int64_t rows = 0, n = 0;
  if (s.rank() == 1) {
    rows = 1;
    n = s[0];
  } else if (s.rank() == 2) {
    rows = s[0];
    n = s[1];
  } else {
    throw ShapeError("dense: input must be [N] or [B,N]; flatten first, got " + s.str());
  }
  if (n != ws[1])
    throw ShapeError("dense: input length " + std::to_string(n) + " does not match weight " + ws.str());
  if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != ws[0]))
    throw ShapeError("dense: bias must be [M]");
  check_same_dtype(input, weight, "dense");
  check_same_dtype(input, bias, "dense");
  const std::int64_t m = ws[0];

  return dispatch(input.dtype(), [&]<class T>() {
    AlignedVector<T> out(static_cast<std::size_t>(rows * m));
    MMap<T> om(out.data(), rows, m);
    const CMap<T> xm(input.data<T>().data(), rows, n);
    const CMap<T> wm(weight.data<T>().data(), m, n);
    om.noalias() = xm * wm.transpose();
    if (bias.defined()) {
      const auto bv = bias.data<T>();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < m; ++j) om(r, j) += bv[j];
    }
    Shape os = s.rank() == 1 ? Shape{m} : Shape{rows, m};
    return detail::finish(Tensor(os, std::move(out)), {input, weight, bias},
                          [input, weight, bias, rows, n, m](const Tensor& gout) {
                            const CMap<T> gm(gout.data<T>().data(), rows, m);
                            if (input.requires_grad()) {
                              const CMap<T> wm(weight.data<T>().data(), m, n);
                              MMap<T>(Tensor(input).ensure_grad<T>().data(), rows, n).noalias() += gm * wm;
                            }
                            if (weight.requires_grad()) {
                              const CMap<T> xm(input.data<T>().data(), rows, n);
                              MMap<T>(Tensor(weight).ensure_grad<T>().data(), m, n).noalias() +=
                                  gm.transpose() * xm;
                            }
                            if (bias.defined() && bias.requires_grad()) {
                              auto gb = Tensor(bias).ensure_grad<T>();
                              for (std::int64_t r = 0; r < rows; ++r)
                                for (std::int64_t j = 0; j < m; ++j) gb[j] += gm(r, j);
                            }
                          });
  });
}

}  // namespace diat
