#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include <Eigen/Core>

#include "armsight/tensor.hpp"

namespace armsight::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

void require_rank(std::string_view op, const Shape& shape, std::size_t rank) {
  if (shape.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(shape));
  }
}

void require_same(std::string_view op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
  }
}

// Column matrix layout: row (c, ky, kx), column (oy, ox).
template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
            std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* col) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                          static_cast<std::ptrdiff_t>(pad);
          T* out = row + oy * wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(out, out + wo, T(0));
            continue;
          }
          const T* in = x + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                            static_cast<std::ptrdiff_t>(pad);
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                          ? T(0)
                          : in[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t k,
                std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, T* dx) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((c * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                          static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* out = dx + (c * h + static_cast<std::size_t>(iy)) * w;
          const T* in = row + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                            static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) out[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 std::size_t stride, std::size_t padding) {
  require_rank("conv2d input", x.shape(), 4);
  require_rank("conv2d weight", w.shape(), 4);
  require_rank("conv2d bias", b.shape(), 1);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), k = w.dim(2);
  if (w.dim(1) != c) {
    throw ShapeError("conv2d: input has " + std::to_string(c) + " channels but weight " +
                     to_string(w.shape()) + " expects " + std::to_string(w.dim(1)));
  }
  if (w.dim(3) != k) throw ShapeError("conv2d: kernel must be square, got " + to_string(w.shape()));
  if (b.dim(0) != o) {
    throw ShapeError("conv2d: bias " + to_string(b.shape()) + " does not match " +
                     std::to_string(o) + " output channels");
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (h + 2 * padding < k || wd + 2 * padding < k) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                     to_string(x.shape()));
  }
  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (wd + 2 * padding - k) / stride + 1;
  const std::size_t ckk = c * k * k, hw = ho * wo;

  const bool grad = g.wants_grad({&x, &w, &b});
  auto y = Tensor<T>::intermediate({n, o, ho, wo}, grad);
  auto cols = std::make_shared<AlignedVector<T>>(n * ckk * hw);

  ConstMapMat<T> wm(w.values().data(), o, ckk);
  const T* xv = x.values().data();
  T* yv = y.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    T* col = cols->data() + i * ckk * hw;
    im2col(xv + i * c * h * wd, c, h, wd, k, stride, padding, ho, wo, col);
    MapMat<T> ym(yv + i * o * hw, o, hw);
    ym.noalias() = wm * ConstMapMat<T>(col, ckk, hw);
    for (std::size_t oc = 0; oc < o; ++oc) ym.row(oc).array() += bv[oc];
  }
  if (!grad) return y;

  g.record(OpKind::conv2d, {x.id(), w.id(), b.id()}, y,
           [x, w, b, y, cols, n, c, h, wd, o, k, stride, padding, ho, wo, ckk, hw]() mutable {
             const T* dy = y.grad().data();
             ConstMapMat<T> wm(w.values().data(), o, ckk);
             RowMat<T> dcol;
             for (std::size_t i = 0; i < n; ++i) {
               ConstMapMat<T> dym(dy + i * o * hw, o, hw);
               ConstMapMat<T> colm(cols->data() + i * ckk * hw, ckk, hw);
               if (w.requires_grad()) {
                 MapMat<T> dw(w.grad().data(), o, ckk);
                 dw.noalias() += dym * colm.transpose();
               }
               if (b.requires_grad()) {
                 T* db = b.grad().data();
                 for (std::size_t oc = 0; oc < o; ++oc) db[oc] += dym.row(oc).sum();
               }
               if (x.requires_grad()) {
                 dcol.noalias() = wm.transpose() * dym;
                 col2im_add(dcol.data(), c, h, wd, k, stride, padding, ho, wo,
                            x.grad().data() + i * c * h * wd);
               }
             }
           });
  return y;
}

template <typename T>
Tensor<T> max_pool2x2(Graph<T>& g, const Tensor<T>& x) {
  require_rank("max_pool2x2", x.shape(), 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2) throw ShapeError("max_pool2x2: input too small " + to_string(x.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  const bool grad = g.wants_grad({&x});
  auto y = Tensor<T>::intermediate({n, c, ho, wo}, grad);
  auto arg = std::make_shared<std::vector<std::uint32_t>>(y.numel());
  const T* xv = x.values().data();
  T* yv = y.values().data();
  std::size_t out = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* p = xv + plane * h * w;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox, ++out) {
        std::size_t best = (2 * oy) * w + 2 * ox;
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (auto idx : cand) {
          if (p[idx] > p[best]) best = idx;
        }
        yv[out] = p[best];
        (*arg)[out] = static_cast<std::uint32_t>(plane * h * w + best);
      }
    }
  }
  if (!grad) return y;
  g.record(OpKind::max_pool2x2, {x.id()}, y, [x, y, arg]() mutable {
    const T* dy = y.grad().data();
    T* dx = x.grad().data();
    for (std::size_t i = 0; i < arg->size(); ++i) dx[(*arg)[i]] += dy[i];
  });
  return y;
}

template <typename T>
Tensor<T> dense(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank("dense input", x.shape(), 2);
  require_rank("dense weight", w.shape(), 2);
  require_rank("dense bias", b.shape(), 1);
  const std::size_t n = x.dim(0), f = x.dim(1), o = w.dim(0);
  if (w.dim(1) != f) {
    throw ShapeError("dense: input " + to_string(x.shape()) + " has " + std::to_string(f) +
                     " features but weight " + to_string(w.shape()) + " expects " +
                     std::to_string(w.dim(1)));
  }
  if (b.dim(0) != o) {
    throw ShapeError("dense: bias " + to_string(b.shape()) + " does not match " +
                     std::to_string(o) + " outputs");
  }
  const bool grad = g.wants_grad({&x, &w, &b});
  auto y = Tensor<T>::intermediate({n, o}, grad);
  ConstMapMat<T> xm(x.values().data(), n, f);
  ConstMapMat<T> wm(w.values().data(), o, f);
  MapMat<T> ym(y.values().data(), n, o);
  ym.noalias() = xm * wm.transpose();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < o; ++j) ym(i, j) += bv[j];
  }
  if (!grad) return y;
  g.record(OpKind::dense, {x.id(), w.id(), b.id()}, y, [x, w, b, y, n, f, o]() mutable {
    ConstMapMat<T> dy(y.grad().data(), n, o);
    if (w.requires_grad()) {
      MapMat<T> dw(w.grad().data(), o, f);
      dw.noalias() += dy.transpose() * ConstMapMat<T>(x.values().data(), n, f);
    }
    if (b.requires_grad()) {
      T* db = b.grad().data();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < o; ++j) db[j] += dy(i, j);
      }
    }
    if (x.requires_grad()) {
      MapMat<T> dx(x.grad().data(), n, f);
      dx.noalias() += dy * ConstMapMat<T>(w.values().data(), o, f);
    }
  });
  return y;
}

template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& x) {
  const bool grad = g.wants_grad({&x});
  auto y = Tensor<T>::intermediate(x.shape(), grad);
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < xv.size(); ++i) yv[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (!grad) return y;
  g.record(OpKind::relu, {x.id()}, y, [x, y]() mutable {
    auto xv = x.values();
    auto dy = y.grad();
    auto dx = x.grad();
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > T(0)) dx[i] += dy[i];
    }
  });
  return y;
}

template <typename T>
Tensor<T> sigmoid(Graph<T>& g, const Tensor<T>& x) {
  const bool grad = g.wants_grad({&x});
  auto y = Tensor<T>::intermediate(x.shape(), grad);
  auto xv = x.values();
  auto yv = y.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    // Split by sign so exp never overflows.
    if (xv[i] >= T(0)) {
      yv[i] = T(1) / (T(1) + std::exp(-xv[i]));
    } else {
      const T e = std::exp(xv[i]);
      yv[i] = e / (T(1) + e);
    }
  }
  if (!grad) return y;
  g.record(OpKind::sigmoid, {x.id()}, y, [x, y]() mutable {
    auto yv = y.values();
    auto dy = y.grad();
    auto dx = x.grad();
    for (std::size_t i = 0; i < yv.size(); ++i) dx[i] += dy[i] * yv[i] * (T(1) - yv[i]);
  });
  return y;
}

template <typename T>
Tensor<T> softmax(Graph<T>& g, const Tensor<T>& x) {
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  const bool grad = g.wants_grad({&x});
  auto y = Tensor<T>::intermediate(x.shape(), grad);
  const T* xv = x.values().data();
  T* yv = y.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv + r * cols;
    T* out = yv + r * cols;
    const T mx = *std::max_element(in, in + cols);
    T total = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      out[j] = std::exp(in[j] - mx);
      total += out[j];
    }
    for (std::size_t j = 0; j < cols; ++j) out[j] /= total;
  }
  if (!grad) return y;
  g.record(OpKind::softmax, {x.id()}, y, [x, y, rows, cols]() mutable {
    const T* yv = y.values().data();
    const T* dy = y.grad().data();
    T* dx = x.grad().data();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < cols; ++j) dot += dy[r * cols + j] * yv[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) {
        dx[r * cols + j] += yv[r * cols + j] * (dy[r * cols + j] - dot);
      }
    }
  });
  return y;
}

template <typename T>
Tensor<T> nearest_upsample2x(Graph<T>& g, const Tensor<T>& x) {
  require_rank("nearest_upsample2x", x.shape(), 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const bool grad = g.wants_grad({&x});
  auto y = Tensor<T>::intermediate({n, c, 2 * h, 2 * w}, grad);
  const T* xv = x.values().data();
  T* yv = y.values().data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    for (std::size_t oy = 0; oy < 2 * h; ++oy) {
      const T* in = xv + plane * h * w + (oy / 2) * w;
      T* out = yv + plane * 4 * h * w + oy * 2 * w;
      for (std::size_t ox = 0; ox < 2 * w; ++ox) out[ox] = in[ox / 2];
    }
  }
  if (!grad) return y;
  g.record(OpKind::nearest_upsample2x, {x.id()}, y, [x, y, n, c, h, w]() mutable {
    const T* dy = y.grad().data();
    T* dx = x.grad().data();
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      for (std::size_t oy = 0; oy < 2 * h; ++oy) {
        T* out = dx + plane * h * w + (oy / 2) * w;
        const T* in = dy + plane * 4 * h * w + oy * 2 * w;
        for (std::size_t ox = 0; ox < 2 * w; ++ox) out[ox / 2] += in[ox];
      }
    }
  });
  return y;
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double frac;
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> resize_bilinear(Graph<T>& g, const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  require_rank("resize_bilinear", x.shape(), 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const bool grad = g.wants_grad({&x});
  auto y = Tensor<T>::intermediate({n, c, out_h, out_w}, grad);
  auto ty = std::make_shared<std::vector<Tap>>(bilinear_taps(h, out_h));
  auto tx = std::make_shared<std::vector<Tap>>(bilinear_taps(w, out_w));
  const T* xv = x.values().data();
  T* yv = y.values().data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* p = xv + plane * h * w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& a = (*ty)[oy];
      const T fy = static_cast<T>(a.frac);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& bt = (*tx)[ox];
        const T fx = static_cast<T>(bt.frac);
        const T top = p[a.i0 * w + bt.i0] * (T(1) - fx) + p[a.i0 * w + bt.i1] * fx;
        const T bot = p[a.i1 * w + bt.i0] * (T(1) - fx) + p[a.i1 * w + bt.i1] * fx;
        yv[(plane * out_h + oy) * out_w + ox] = top * (T(1) - fy) + bot * fy;
      }
    }
  }
  if (!grad) return y;
  g.record(OpKind::resize_bilinear, {x.id()}, y, [x, y, ty, tx, n, c, h, w, out_h, out_w]() mutable {
    const T* dy = y.grad().data();
    T* dx = x.grad().data();
    for (std::size_t plane = 0; plane < n * c; ++plane) {
      T* p = dx + plane * h * w;
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const auto& a = (*ty)[oy];
        const T fy = static_cast<T>(a.frac);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const auto& bt = (*tx)[ox];
          const T fx = static_cast<T>(bt.frac);
          const T d = dy[(plane * out_h + oy) * out_w + ox];
          p[a.i0 * w + bt.i0] += d * (T(1) - fy) * (T(1) - fx);
          p[a.i0 * w + bt.i1] += d * (T(1) - fy) * fx;
          p[a.i1 * w + bt.i0] += d * fy * (T(1) - fx);
          p[a.i1 * w + bt.i1] += d * fy * fx;
        }
      }
    }
  });
  return y;
}

template <typename T>
Tensor<T> flatten(Graph<T>& g, const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("flatten: need rank >= 2, got " + to_string(x.shape()));
  const std::size_t n = x.dim(0);
  const bool grad = g.wants_grad({&x});
  auto y = Tensor<T>::intermediate({n, x.numel() / n}, grad);
  std::copy(x.values().begin(), x.values().end(), y.values().begin());
  if (!grad) return y;
  g.record(OpKind::flatten, {x.id()}, y, [x, y]() mutable {
    auto dy = y.grad();
    auto dx = x.grad();
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
  return y;
}

template <typename T>
Tensor<T> concat(Graph<T>& g, const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = xs.front().shape();
  if (ref.size() < 2) throw ShapeError("concat: need rank >= 2, got " + to_string(ref));
  std::size_t axis_total = 0;
  bool grad = false;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    Shape a = s, b = ref;
    if (s.size() != ref.size()) throw ShapeError("concat: rank mismatch " + to_string(s) + " vs " + to_string(ref));
    a[1] = b[1] = 0;
    if (a != b) throw ShapeError("concat: shape mismatch " + to_string(s) + " vs " + to_string(ref));
    axis_total += s[1];
    grad = grad || g.wants_grad({&t});
  }
  Shape out_shape = ref;
  out_shape[1] = axis_total;
  const std::size_t outer = ref[0];
  const std::size_t inner = numel(ref) / (ref[0] * ref[1]);
  auto y = Tensor<T>::intermediate(out_shape, grad);
  T* yv = y.values().data();
  std::size_t offset = 0;
  for (const auto& t : xs) {
    const std::size_t block = t.dim(1) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(t.values().data() + o * block, block, yv + o * axis_total * inner + offset);
    }
    offset += block;
  }
  if (!grad) return y;
  std::vector<std::uint64_t> ids;
  for (const auto& t : xs) ids.push_back(t.id());
  g.record(OpKind::concat, std::move(ids), y, [xs, y, outer, inner, axis_total]() mutable {
    const T* dy = y.grad().data();
    std::size_t offset = 0;
    for (auto& t : xs) {
      const std::size_t block = t.dim(1) * inner;
      if (t.requires_grad()) {
        T* dx = t.grad().data();
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = dy + o * axis_total * inner + offset;
          for (std::size_t k = 0; k < block; ++k) dx[o * block + k] += src[k];
        }
      }
      offset += block;
    }
  });
  return y;
}

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_same("add", a.shape(), b.shape());
  const bool grad = g.wants_grad({&a, &b});
  auto y = Tensor<T>::intermediate(a.shape(), grad);
  for (std::size_t i = 0; i < y.numel(); ++i) y.values()[i] = a.values()[i] + b.values()[i];
  if (!grad) return y;
  g.record(OpKind::add, {a.id(), b.id()}, y, [a, b, y]() mutable {
    auto dy = y.grad();
    if (a.requires_grad()) {
      for (std::size_t i = 0; i < dy.size(); ++i) a.grad()[i] += dy[i];
    }
    if (b.requires_grad()) {
      for (std::size_t i = 0; i < dy.size(); ++i) b.grad()[i] += dy[i];
    }
  });
  return y;
}

template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require_same("mul", a.shape(), b.shape());
  const bool grad = g.wants_grad({&a, &b});
  auto y = Tensor<T>::intermediate(a.shape(), grad);
  for (std::size_t i = 0; i < y.numel(); ++i) y.values()[i] = a.values()[i] * b.values()[i];
  if (!grad) return y;
  g.record(OpKind::mul, {a.id(), b.id()}, y, [a, b, y]() mutable {
    auto dy = y.grad();
    if (a.requires_grad()) {
      for (std::size_t i = 0; i < dy.size(); ++i) a.grad()[i] += dy[i] * b.values()[i];
    }
    if (b.requires_grad()) {
      for (std::size_t i = 0; i < dy.size(); ++i) b.grad()[i] += dy[i] * a.values()[i];
    }
  });
  return y;
}

template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& x, T factor) {
  const bool grad = g.wants_grad({&x});
  auto y = Tensor<T>::intermediate(x.shape(), grad);
  for (std::size_t i = 0; i < y.numel(); ++i) y.values()[i] = x.values()[i] * factor;
  if (!grad) return y;
  g.record(OpKind::scale, {x.id()}, y, [x, y, factor]() mutable {
    auto dy = y.grad();
    auto dx = x.grad();
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * factor;
  });
  return y;
}

template <typename T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& x) {
  const bool grad = g.wants_grad({&x});
  auto y = Tensor<T>::intermediate({1}, grad);
  T total = 0;
  for (auto v : x.values()) total += v;
  y.values()[0] = total;
  if (!grad) return y;
  g.record(OpKind::sum, {x.id()}, y, [x, y]() mutable {
    const T d = y.grad()[0];
    for (auto& v : x.grad()) v += d;
  });
  return y;
}

template <typename T>
Tensor<T> mean(Graph<T>& g, const Tensor<T>& x) {
  const bool grad = g.wants_grad({&x});
  auto y = Tensor<T>::intermediate({1}, grad);
  T total = 0;
  for (auto v : x.values()) total += v;
  const T inv = T(1) / static_cast<T>(x.numel());
  y.values()[0] = total * inv;
  if (!grad) return y;
  g.record(OpKind::mean, {x.id()}, y, [x, y, inv]() mutable {
    const T d = y.grad()[0] * inv;
    for (auto& v : x.grad()) v += d;
  });
  return y;
}

template <typename T>
Tensor<T> weighted_sum(Graph<T>& g, const std::vector<Tensor<T>>& xs, const std::vector<T>& w) {
  if (xs.size() != w.size()) {
    throw ShapeError("weighted_sum: " + std::to_string(xs.size()) + " terms but " +
                     std::to_string(w.size()) + " weights");
  }
  bool grad = false;
  T total = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].numel() != 1) {
      throw ShapeError("weighted_sum: term " + std::to_string(i) + " is not scalar, shape " +
                       to_string(xs[i].shape()));
    }
    total += w[i] * xs[i].values()[0];
    grad = grad || g.wants_grad({&xs[i]});
  }
  auto y = Tensor<T>::intermediate({1}, grad);
  y.values()[0] = total;
  if (!grad) return y;
  std::vector<std::uint64_t> ids;
  for (const auto& t : xs) ids.push_back(t.id());
  g.record(OpKind::weighted_sum, std::move(ids), y, [xs, w, y]() mutable {
    const T d = y.grad()[0];
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (xs[i].requires_grad()) xs[i].grad()[0] += d * w[i];
    }
  });
  return y;
}

#define ARMSIGHT_INSTANTIATE_OPS(T)                                                            \
  template Tensor<T> conv2d<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                               std::size_t, std::size_t);                                      \
  template Tensor<T> max_pool2x2<T>(Graph<T>&, const Tensor<T>&);                              \
  template Tensor<T> dense<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> relu<T>(Graph<T>&, const Tensor<T>&);                                     \
  template Tensor<T> sigmoid<T>(Graph<T>&, const Tensor<T>&);                                  \
  template Tensor<T> softmax<T>(Graph<T>&, const Tensor<T>&);                                  \
  template Tensor<T> nearest_upsample2x<T>(Graph<T>&, const Tensor<T>&);                       \
  template Tensor<T> resize_bilinear<T>(Graph<T>&, const Tensor<T>&, std::size_t, std::size_t); \
  template Tensor<T> flatten<T>(Graph<T>&, const Tensor<T>&);                                  \
  template Tensor<T> concat<T>(Graph<T>&, const std::vector<Tensor<T>>&);                      \
  template Tensor<T> add<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> mul<T>(Graph<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> scale<T>(Graph<T>&, const Tensor<T>&, T);                                 \
  template Tensor<T> mean<T>(Graph<T>&, const Tensor<T>&);                                     \
  template Tensor<T> sum<T>(Graph<T>&, const Tensor<T>&);                                      \
  template Tensor<T> weighted_sum<T>(Graph<T>&, const std::vector<Tensor<T>>&, const std::vector<T>&);

ARMSIGHT_INSTANTIATE_OPS(float)
ARMSIGHT_INSTANTIATE_OPS(double)

#undef ARMSIGHT_INSTANTIATE_OPS

}  // namespace armsight::ad
