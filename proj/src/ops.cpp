#include <algorithm>
#include <cmath>
#include <numeric>

#include "diat/ops.hpp"

namespace diat {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str() + " (broadcasting is not supported)");
  if (a.dtype() != b.dtype()) throw std::invalid_argument(std::string(op) + ": mixed dtypes");
}

// y = f(x) elementwise; dy/dx = df(x, y).
template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  return dispatch(x.dtype(), [&]<class T>() {
    const auto xs = x.data<T>();
    AlignedVector<T> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) out[i] = static_cast<T>(f(xs[i]));
    Tensor y(x.shape(), std::move(out));
    return detail::finish(y, {x}, [x, y = y.detach(), df](const Tensor& g) {
      detail::accumulate<T>(x, [&](std::span<T> gx) {
        const auto gs = g.data<T>();
        const auto xs = x.data<T>();
        const auto ys = y.data<T>();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gs[i] * static_cast<T>(df(xs[i], ys[i]));
      });
    });
  });
}

Shape batched_chw(const Tensor& t, std::int64_t& n, std::int64_t& c, std::int64_t& hw, const char* op) {
  const auto& s = t.shape();
  if (s.rank() == 3) {
    n = 1;
    c = s[0];
    hw = s[1] * s[2];
  } else if (s.rank() == 4) {
    n = s[0];
    c = s[1];
    hw = s[2] * s[3];
  } else {
    throw ShapeError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + s.str());
  }
  return s;
}

}  // namespace

Tensor relu(const Tensor& x) {
  return unary(
      x, [](auto v) { return v > 0 ? v : decltype(v)(0); },
      [](auto v, auto) { return v > 0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double slope) {
  return unary(
      x, [slope](auto v) { return v > 0 ? v : static_cast<decltype(v)>(slope * v); },
      [slope](auto v, auto) { return v > 0 ? 1.0 : slope; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](auto v) {
        using T = decltype(v);
        return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
      },
      [](auto, auto y) { return static_cast<double>(y) * (1.0 - static_cast<double>(y)); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](auto v) { return std::tanh(v); },
      [](auto, auto y) { return 1.0 - static_cast<double>(y) * static_cast<double>(y); });
}

Tensor log_clamped(const Tensor& x, double lo) {
  const double hi = 1.0 - lo;
  return unary(
      x,
      [lo, hi](auto v) {
        using T = decltype(v);
        return std::log(std::clamp(v, static_cast<T>(lo), static_cast<T>(hi)));
      },
      [lo, hi](auto v, auto) {
        const double d = static_cast<double>(v);
        return (d < lo || d > hi) ? 0.0 : 1.0 / d;
      });
}

Tensor square(const Tensor& x) {
  return unary(
      x, [](auto v) { return v * v; }, [](auto v, auto) { return 2.0 * static_cast<double>(v); });
}

Tensor mul_scalar(const Tensor& x, double s) {
  return unary(
      x, [s](auto v) { return static_cast<decltype(v)>(s * v); }, [s](auto, auto) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary(
      x, [s](auto v) { return static_cast<decltype(v)>(v + s); }, [](auto, auto) { return 1.0; });
}

namespace {

// out = ca*a + cb*b
Tensor linear_combination(const Tensor& a, const Tensor& b, double ca, double cb, const char* op) {
  require_same(a, b, op);
  return dispatch(a.dtype(), [&]<class T>() {
    const auto as = a.data<T>();
    const auto bs = b.data<T>();
    AlignedVector<T> out(as.size());
    for (std::size_t i = 0; i < as.size(); ++i)
      out[i] = static_cast<T>(ca) * as[i] + static_cast<T>(cb) * bs[i];
    return detail::finish(Tensor(a.shape(), std::move(out)), {a, b}, [a, b, ca, cb](const Tensor& g) {
      const auto gs = g.data<T>();
      detail::accumulate<T>(a, [&](std::span<T> ga) {
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += static_cast<T>(ca) * gs[i];
      });
      detail::accumulate<T>(b, [&](std::span<T> gb) {
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += static_cast<T>(cb) * gs[i];
      });
    });
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return linear_combination(a, b, 1.0, 1.0, "add"); }

Tensor sub(const Tensor& a, const Tensor& b) { return linear_combination(a, b, 1.0, -1.0, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  return dispatch(a.dtype(), [&]<class T>() {
    const auto as = a.data<T>();
    const auto bs = b.data<T>();
    AlignedVector<T> out(as.size());
    for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] * bs[i];
    return detail::finish(Tensor(a.shape(), std::move(out)), {a, b}, [a, b](const Tensor& g) {
      const auto gs = g.data<T>();
      detail::accumulate<T>(a, [&](std::span<T> ga) {
        const auto bs = b.data<T>();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gs[i] * bs[i];
      });
      detail::accumulate<T>(b, [&](std::span<T> gb) {
        const auto as = a.data<T>();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gs[i] * as[i];
      });
    });
  });
}

Tensor sum(const Tensor& x) {
  return dispatch(x.dtype(), [&]<class T>() {
    const auto xs = x.data<T>();
    // Accumulate in double so f32 reductions over images stay accurate.
    double acc = 0.0;
    for (T v : xs) acc += static_cast<double>(v);
    Tensor y(Shape{}, std::vector<T>{static_cast<T>(acc)});
    return detail::finish(y, {x}, [x](const Tensor& g) {
      const T gv = g.data<T>()[0];
      detail::accumulate<T>(x, [&](std::span<T> gx) {
        for (auto& v : gx) v += gv;
      });
    });
  });
}

Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor frobenius_sq(const Tensor& x) {
  return dispatch(x.dtype(), [&]<class T>() {
    const auto xs = x.data<T>();
    double acc = 0.0;
    for (T v : xs) acc += static_cast<double>(v) * static_cast<double>(v);
    Tensor y(Shape{}, std::vector<T>{static_cast<T>(acc)});
    return detail::finish(y, {x}, [x](const Tensor& g) {
      const T gv = g.data<T>()[0];
      detail::accumulate<T>(x, [&](std::span<T> gx) {
        const auto xs = x.data<T>();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += T(2) * xs[i] * gv;
      });
    });
  });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape.numel() != x.numel())
    throw ShapeError("reshape: cannot reshape " + x.shape().str() + " to " + shape.str());
  Tensor y = x.view(shape);
  return dispatch(x.dtype(), [&]<class T>() {
    return detail::finish(y, {x}, [x](const Tensor& g) {
      detail::accumulate<T>(x, [&](std::span<T> gx) {
        const auto gs = g.data<T>();
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gs[i];
      });
    });
  });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  std::int64_t n = 0, c0 = 0, hw = 0;
  const Shape first = batched_chw(parts[0], n, c0, hw, "concat_channels");
  std::vector<std::int64_t> channels;
  std::int64_t total = 0;
  for (const auto& p : parts) {
    std::int64_t pn = 0, pc = 0, phw = 0;
    const Shape s = batched_chw(p, pn, pc, phw, "concat_channels");
    if (s.rank() != first.rank() || pn != n || s[s.rank() - 1] != first[first.rank() - 1] ||
        s[s.rank() - 2] != first[first.rank() - 2])
      throw ShapeError("concat_channels: incompatible shapes " + first.str() + " and " + s.str());
    if (p.dtype() != parts[0].dtype()) throw std::invalid_argument("concat_channels: mixed dtypes");
    channels.push_back(pc);
    total += pc;
  }
  auto dims = first.dims();
  dims[dims.size() - 3] = total;
  const Shape out_shape(dims);

  return dispatch(parts[0].dtype(), [&]<class T>() {
    AlignedVector<T> out(static_cast<std::size_t>(out_shape.numel()));
    for (std::int64_t s = 0; s < n; ++s) {
      std::int64_t offset = 0;
      for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto src = parts[k].data<T>();
        std::copy_n(src.data() + s * channels[k] * hw, channels[k] * hw,
                    out.data() + (s * total + offset) * hw);
        offset += channels[k];
      }
    }
    return detail::finish(Tensor(out_shape, std::move(out)), parts,
                          [parts, channels, n, hw, total](const Tensor& g) {
                            const auto gs = g.data<T>();
                            std::int64_t offset = 0;
                            for (std::size_t k = 0; k < parts.size(); ++k) {
                              detail::accumulate<T>(parts[k], [&](std::span<T> gp) {
                                for (std::int64_t s = 0; s < n; ++s)
                                  for (std::int64_t i = 0; i < channels[k] * hw; ++i)
                                    gp[s * channels[k] * hw + i] += gs[(s * total + offset) * hw + i];
                              });
                              offset += channels[k];
                            }
                          });
  });
}

Tensor instance_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta, double eps) {
  std::int64_t n = 0, c = 0, hw = 0;
  batched_chw(input, n, c, hw, "instance_norm");
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
    throw ShapeError("instance_norm: gamma/beta must be [C]");
  if (gamma.dtype() != input.dtype() || beta.dtype() != input.dtype())
    throw std::invalid_argument("instance_norm: mixed dtypes");

  return dispatch(input.dtype(), [&]<class T>() {
    const auto x = input.data<T>();
    const auto gm = gamma.data<T>();
    const auto bt = beta.data<T>();
    AlignedVector<T> out(x.size());
    AlignedVector<T> xhat(x.size());
    AlignedVector<T> inv_std(static_cast<std::size_t>(n * c));
    for (std::int64_t s = 0; s < n; ++s) {
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const std::int64_t base = (s * c + ch) * hw;
        double mu = 0.0;
        for (std::int64_t i = 0; i < hw; ++i) mu += x[base + i];
        mu /= static_cast<double>(hw);
        double var = 0.0;
        for (std::int64_t i = 0; i < hw; ++i) {
          const double d = x[base + i] - mu;
          var += d * d;
        }
        var /= static_cast<double>(hw);
        const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
        inv_std[s * c + ch] = is;
        for (std::int64_t i = 0; i < hw; ++i) {
          const T xh = static_cast<T>(x[base + i] - mu) * is;
          xhat[base + i] = xh;
          out[base + i] = gm[ch] * xh + bt[ch];
        }
      }
    }
    return detail::finish(
        Tensor(input.shape(), std::move(out)), {input, gamma, beta},
        [input, gamma, beta, n, c, hw, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Tensor& g) {
          const auto gs = g.data<T>();
          const auto gm = gamma.data<T>();
          std::span<T> gx, gg, gb;
          if (input.requires_grad()) gx = Tensor(input).ensure_grad<T>();
          if (gamma.requires_grad()) gg = Tensor(gamma).ensure_grad<T>();
          if (beta.requires_grad()) gb = Tensor(beta).ensure_grad<T>();
          for (std::int64_t s = 0; s < n; ++s) {
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const std::int64_t base = (s * c + ch) * hw;
              double sum_g = 0.0, sum_gx = 0.0;
              for (std::int64_t i = 0; i < hw; ++i) {
                sum_g += gs[base + i];
                sum_gx += static_cast<double>(gs[base + i]) * xhat[base + i];
              }
              if (!gg.empty()) gg[ch] += static_cast<T>(sum_gx);
              if (!gb.empty()) gb[ch] += static_cast<T>(sum_g);
              if (!gx.empty()) {
                const double k = static_cast<double>(gm[ch]) * inv_std[s * c + ch] / static_cast<double>(hw);
                for (std::int64_t i = 0; i < hw; ++i) {
                  const double v = static_cast<double>(hw) * gs[base + i] - sum_g - xhat[base + i] * sum_gx;
                  gx[base + i] += static_cast<T>(k * v);
                }
              }
            }
          }
        });
  });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const auto& s = logits.shape();
  if (s.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be [N,K], got " + s.str());
  const std::int64_t n = s[0], k = s[1];
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw ShapeError("softmax_cross_entropy: label count does not match batch");
  for (int l : labels)
    if (l < 0 || l >= k) throw std::out_of_range("softmax_cross_entropy: label out of range");
  std::vector<int> lab(labels.begin(), labels.end());

  return dispatch(logits.dtype(), [&]<class T>() {
    const auto z = logits.data<T>();
    AlignedVector<T> prob(z.size());
    double loss = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const T* zi = z.data() + i * k;
      const T mx = *std::max_element(zi, zi + k);
      double denom = 0.0;
      for (std::int64_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(zi[j] - mx));
      for (std::int64_t j = 0; j < k; ++j)
        prob[i * k + j] = static_cast<T>(std::exp(static_cast<double>(zi[j] - mx)) / denom);
      loss += std::log(denom) - static_cast<double>(zi[lab[i]] - mx);
    }
    loss /= static_cast<double>(n);
    return detail::finish(Tensor(Shape{}, std::vector<T>{static_cast<T>(loss)}), {logits},
                          [logits, prob = std::move(prob), lab, n, k](const Tensor& g) {
                            const double gv = g.data<T>()[0] / static_cast<double>(n);
                            detail::accumulate<T>(logits, [&](std::span<T> gz) {
                              for (std::int64_t i = 0; i < n; ++i)
                                for (std::int64_t j = 0; j < k; ++j) {
                                  const double t = (j == lab[i]) ? 1.0 : 0.0;
                                  gz[i * k + j] += static_cast<T>(gv * (prob[i * k + j] - t));
                                }
                            });
                          });
  });
}

std::vector<double> gaussian_taps(double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_blur: sigma must be > 0");
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(r) + 1);
  double total = 0.0;
  for (int i = 0; i <= r; ++i) {
    k[i] = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    total += i == 0 ? k[i] : 2.0 * k[i];
  }
  for (auto& v : k) v /= total;
  return k;
}

namespace {

// Mirror index about the edge samples (-1 -> 1, n -> n-2), periodic beyond.
std::int64_t reflect(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

// Applies the 1-D filter along rows (axis 1) or columns (axis 0) of each
// plane; transpose=true applies the adjoint.
template <class T>
void blur_axis(const T* src, T* dst, std::int64_t planes, std::int64_t h, std::int64_t w,
               const std::vector<double>& k, bool along_w, bool adjoint) {
  const std::int64_t r = static_cast<std::int64_t>(k.size()) - 1;
  const std::int64_t len = along_w ? w : h;
  std::vector<double> line_in(static_cast<std::size_t>(len)), line_out(static_cast<std::size_t>(len));
  const std::int64_t lines = along_w ? h : w;
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* sp = src + p * h * w;
    T* dp = dst + p * h * w;
    for (std::int64_t l = 0; l < lines; ++l) {
      for (std::int64_t i = 0; i < len; ++i) line_in[i] = along_w ? sp[l * w + i] : sp[i * w + l];
      std::fill(line_out.begin(), line_out.end(), 0.0);
      for (std::int64_t i = 0; i < len; ++i) {
        for (std::int64_t j = -r; j <= r; ++j) {
          const double kv = k[static_cast<std::size_t>(j < 0 ? -j : j)];
          const std::int64_t src_i = reflect(i + j, len);
          if (adjoint)
            line_out[src_i] += kv * line_in[i];
          else
            line_out[i] += kv * line_in[src_i];
        }
      }
      for (std::int64_t i = 0; i < len; ++i) {
        T& o = along_w ? dp[l * w + i] : dp[i * w + l];
        o = static_cast<T>(line_out[i]);
      }
    }
  }
}

}  // namespace

Tensor gaussian_blur(const Tensor& image, double sigma) {
  const auto taps = gaussian_taps(sigma);
  const auto& s = image.shape();
  if (s.rank() < 2) throw ShapeError("gaussian_blur: expected an image, got " + s.str());
  const std::int64_t h = s[s.rank() - 2], w = s[s.rank() - 1];
  const std::int64_t planes = image.numel() / (h * w);

  return dispatch(image.dtype(), [&]<class T>() {
    const auto x = image.data<T>();
    AlignedVector<T> tmp(x.size()), out(x.size());
    blur_axis(x.data(), tmp.data(), planes, h, w, taps, true, false);
    blur_axis(tmp.data(), out.data(), planes, h, w, taps, false, false);
    return detail::finish(Tensor(s, std::move(out)), {image}, [image, taps, planes, h, w](const Tensor& g) {
      detail::accumulate<T>(image, [&](std::span<T> gx) {
        const auto gs = g.data<T>();
        AlignedVector<T> t1(gs.size()), t2(gs.size());
        blur_axis(gs.data(), t1.data(), planes, h, w, taps, false, true);
        blur_axis(t1.data(), t2.data(), planes, h, w, taps, true, true);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += t2[i];
      });
    });
  });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return dispatch(x.dtype(), [&]<class T>() {
    const auto xs = x.data<T>();
    AlignedVector<T> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i)
      out[i] = std::clamp(xs[i], static_cast<T>(lo), static_cast<T>(hi));
    return Tensor(x.shape(), std::move(out));
  });
}

Tensor stack(const std::vector<Tensor>& items) {
  if (items.empty()) throw ShapeError("stack: no inputs");
  const Shape& s0 = items[0].shape();
  if (s0.rank() >= 4) throw ShapeError("stack: items already rank 4");
  std::vector<std::int64_t> dims{static_cast<std::int64_t>(items.size())};
  dims.insert(dims.end(), s0.dims().begin(), s0.dims().end());
  return dispatch(items[0].dtype(), [&]<class T>() {
    std::vector<T> out;
    out.reserve(static_cast<std::size_t>(s0.numel()) * items.size());
    for (const auto& t : items) {
      if (t.shape() != s0) throw ShapeError("stack: shape mismatch " + s0.str() + " vs " + t.shape().str());
      const auto d = t.data<T>();
      out.insert(out.end(), d.begin(), d.end());
    }
    return Tensor(Shape(dims), std::move(out));
  });
}

Tensor unstack_one(const Tensor& batch, std::int64_t i) {
  const auto& s = batch.shape();
  if (s.rank() < 2) throw ShapeError("unstack_one: expected a batched tensor");
  if (i < 0 || i >= s[0]) throw std::out_of_range("unstack_one: index out of range");
  std::vector<std::int64_t> dims(s.dims().begin() + 1, s.dims().end());
  const Shape item(dims);
  return dispatch(batch.dtype(), [&]<class T>() {
    const auto d = batch.data<T>();
    const auto n = item.numel();
    return Tensor(item, std::vector<T>(d.begin() + i * n, d.begin() + (i + 1) * n));
  });
}

double dot(const Tensor& a, const Tensor& b) {
  require_same(a, b, "dot");
  return dispatch(a.dtype(), [&]<class T>() {
    const auto as = a.data<T>();
    const auto bs = b.data<T>();
    double acc = 0.0;
    for (std::size_t i = 0; i < as.size(); ++i) acc += static_cast<double>(as[i]) * bs[i];
    return acc;
  });
}

}  // namespace diat
