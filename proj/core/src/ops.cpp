#include "lap/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace lap {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using CMapRow = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t filters, kh, kw;
  std::size_t out_h, out_w;
  Conv2dSpec spec;

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t out_plane() const { return out_h * out_w; }
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& k, Conv2dSpec spec) {
  if (x.rank() != 4 || k.rank() != 4)
    throw ShapeError("conv2d expects x[B,C,H,W] and kernel[F,C,kh,kw], got " +
                     shape_str(x.shape()) + " and " + shape_str(k.shape()));
  if (x.dim(1) != k.dim(1))
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + ", kernel " +
                     shape_str(k.shape()));
  if (k.dim(2) % 2 == 0 || k.dim(3) % 2 == 0)
    throw ShapeError("conv2d kernel sizes must be odd, got " + shape_str(k.shape()));
  if (spec.stride == 0) throw ShapeError("conv2d stride must be positive");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(0), k.dim(2), k.dim(3), 0, 0, spec};
  g.out_h = conv_output_extent(g.height, g.kh, spec);
  g.out_w = conv_output_extent(g.width, g.kw, spec);
  return g;
}

// cols[(c*kh + i)*kw + j, oy*out_w + ox] = xpad[c, oy*s + i, ox*s + j]
void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const auto s = static_cast<std::ptrdiff_t>(g.spec.stride);
  const auto p = static_cast<std::ptrdiff_t>(g.spec.padding);
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  double* out = cols;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* plane = x + c * g.height * g.width;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy) * s - p + static_cast<std::ptrdiff_t>(i);
          if (iy < 0 || iy >= H) {
            std::fill(out, out + g.out_w, 0.0);
            out += g.out_w;
            continue;
          }
          const double* row = plane + iy * W;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox) * s - p + static_cast<std::ptrdiff_t>(j);
            *out++ = (ix >= 0 && ix < W) ? row[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* x) {
  const auto s = static_cast<std::ptrdiff_t>(g.spec.stride);
  const auto p = static_cast<std::ptrdiff_t>(g.spec.padding);
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  const double* in = cols;
  for (std::size_t c = 0; c < g.channels; ++c) {
    double* plane = x + c * g.height * g.width;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy) * s - p + static_cast<std::ptrdiff_t>(i);
          if (iy < 0 || iy >= H) {
            in += g.out_w;
            continue;
          }
          double* row = plane + iy * W;
          for (std::size_t ox = 0; ox < g.out_w; ++ox, ++in) {
            const auto ix =
                static_cast<std::ptrdiff_t>(ox) * s - p + static_cast<std::ptrdiff_t>(j);
            if (ix >= 0 && ix < W) row[ix] += *in;
          }
        }
      }
    }
  }
}

// Channel layout shared by the 2-D and 4-D batch-norm paths.
struct ChannelLayout {
  std::size_t batch, channels, spatial;
  std::size_t count() const { return batch * spatial; }
  std::size_t at(std::size_t b, std::size_t c) const { return (b * channels + c) * spatial; }
};

ChannelLayout channel_layout(const Tensor& x) {
  if (x.rank() != 2 && x.rank() != 4)
    throw ShapeError("batch_norm expects [B,C] or [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  return {x.dim(0), x.dim(1), spatial};
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, Conv2dSpec spec) {
  const std::size_t padded = in + 2 * spec.padding;
  if (spec.stride == 0 || padded < kernel)
    throw ShapeError("conv2d kernel " + std::to_string(kernel) + " does not fit input " +
                     std::to_string(in) + " with padding " + std::to_string(spec.padding) +
                     " and stride " + std::to_string(spec.stride));
  return (padded - kernel) / spec.stride + 1;
}

Tensor conv2d_direct(const Tensor& x, const Tensor& kernel, Conv2dSpec spec) {
  const auto g = conv_geometry(x, kernel, spec);
  Tensor out(Shape{g.batch, g.filters, g.out_h, g.out_w});
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t f = 0; f < g.filters; ++f)
      for (std::size_t oy = 0; oy < g.out_h; ++oy)
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          double acc = 0.0;
          for (std::size_t c = 0; c < g.channels; ++c)
            for (std::size_t i = 0; i < g.kh; ++i)
              for (std::size_t j = 0; j < g.kw; ++j) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * spec.stride + i) -
                                static_cast<std::ptrdiff_t>(spec.padding);
                const auto ix = static_cast<std::ptrdiff_t>(ox * spec.stride + j) -
                                static_cast<std::ptrdiff_t>(spec.padding);
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += kernel.at({f, c, i, j}) *
                       x.at({b, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)});
              }
          out.at({b, f, oy, ox}) = acc;
        }
  return out;
}

namespace ops {

NodeId affine(Tape& tape, NodeId x, NodeId w, NodeId b) {
  const Tensor& xv = tape.value(x);
  const Tensor& wv = tape.value(w);
  const Tensor& bv = tape.value(b);
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 || xv.dim(1) != wv.dim(0) ||
      bv.dim(0) != wv.dim(1))
    throw ShapeError("affine: x " + shape_str(xv.shape()) + " and W " + shape_str(wv.shape()) +
                     " (b " + shape_str(bv.shape()) + ") do not conform");
  const auto B = static_cast<Eigen::Index>(xv.dim(0));
  const auto n = static_cast<Eigen::Index>(xv.dim(1));
  const auto m = static_cast<Eigen::Index>(wv.dim(1));

  Tensor y(Shape{xv.dim(0), wv.dim(1)});
  MapRow ym(y.ptr(), B, m);
  ym.noalias() = CMapRow(xv.ptr(), B, n) * CMapRow(wv.ptr(), n, m);
  ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.ptr(), m);

  return tape.record(
      OpKind::affine, {x, w, b}, std::move(y),
      [x, w, B, n, m](const Tape& tape, const Tensor& gy, std::span<Tensor* const> gin) {
        CMapRow gym(gy.ptr(), B, m);
        if (gin[0])
          MapRow(gin[0]->ptr(), B, n).noalias() += gym * CMapRow(tape.value(w).ptr(), n, m).transpose();
        if (gin[1])
          MapRow(gin[1]->ptr(), n, m).noalias() += CMapRow(tape.value(x).ptr(), B, n).transpose() * gym;
        if (gin[2]) Eigen::Map<Eigen::RowVectorXd>(gin[2]->ptr(), m) += gym.colwise().sum();
      });
}

NodeId conv2d(Tape& tape, NodeId x, NodeId kernel, Conv2dSpec spec) {
  const Tensor& xv = tape.value(x);
  const Tensor& kv = tape.value(kernel);
  const auto g = conv_geometry(xv, kv, spec);
  const auto F = static_cast<Eigen::Index>(g.filters);
  const auto P = static_cast<Eigen::Index>(g.patch());
  const auto Q = static_cast<Eigen::Index>(g.out_plane());
  const std::size_t in_stride = g.channels * g.height * g.width;

  Tensor y(Shape{g.batch, g.filters, g.out_h, g.out_w});
  std::vector<double> cols(g.patch() * g.out_plane());
  CMapRow km(kv.ptr(), F, P);
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(g, xv.ptr() + b * in_stride, cols.data());
    MapRow(y.ptr() + b * g.filters * g.out_plane(), F, Q).noalias() =
        km * CMapRow(cols.data(), P, Q);
  }

  return tape.record(
      OpKind::conv2d, {x, kernel}, std::move(y),
      [x, kernel, g, F, P, Q, in_stride](const Tape& tape, const Tensor& gy, std::span<Tensor* const> gin) {
        const Tensor& xin = tape.value(x);
        CMapRow km(tape.value(kernel).ptr(), F, P);
        std::vector<double> cols(static_cast<std::size_t>(P * Q));
        RowMat dcols(P, Q);
        for (std::size_t b = 0; b < g.batch; ++b) {
          CMapRow gyb(gy.ptr() + b * g.filters * g.out_plane(), F, Q);
          if (gin[1]) {
            im2col(g, xin.ptr() + b * in_stride, cols.data());
            MapRow(gin[1]->ptr(), F, P).noalias() += gyb * CMapRow(cols.data(), P, Q).transpose();
          }
          if (gin[0]) {
            dcols.noalias() = km.transpose() * gyb;
            col2im_add(g, dcols.data(), gin[0]->ptr() + b * in_stride);
          }
        }
      });
}

NodeId batch_norm(Tape& tape, NodeId x, NodeId gamma, NodeId beta, BatchNormState& state,
                  Mode mode, bool update_running) {
  const Tensor& xv = tape.value(x);
  const auto L = channel_layout(xv);
  const Tensor& gv = tape.value(gamma);
  const Tensor& bv = tape.value(beta);
  if (gv.shape() != Shape{L.channels} || bv.shape() != Shape{L.channels} ||
      state.channels() != L.channels)
    throw ShapeError("batch_norm: input " + shape_str(xv.shape()) + " vs scale " +
                     shape_str(gv.shape()) + ", shift " + shape_str(bv.shape()) + ", state of " +
                     std::to_string(state.channels()) + " channels");
  if (mode == Mode::train && L.batch < 2)
    throw ShapeError("batch_norm: train mode needs a batch of at least 2, got " +
                     std::to_string(L.batch));

  std::vector<double> mean(L.channels), inv_std(L.channels);
  const double n = static_cast<double>(L.count());
  if (mode == Mode::train) {
    for (std::size_t c = 0; c < L.channels; ++c) {
      double sum = 0.0;
      for (std::size_t b = 0; b < L.batch; ++b) {
        const double* p = xv.ptr() + L.at(b, c);
        for (std::size_t s = 0; s < L.spatial; ++s) sum += p[s];
      }
      const double mu = sum / n;
      double ss = 0.0;
      for (std::size_t b = 0; b < L.batch; ++b) {
        const double* p = xv.ptr() + L.at(b, c);
        for (std::size_t s = 0; s < L.spatial; ++s) ss += (p[s] - mu) * (p[s] - mu);
      }
      const double var = ss / n;
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + state.epsilon);
      if (update_running) {
        const double m = state.momentum;
        state.running_mean[c] = (1.0 - m) * state.running_mean[c] + m * mu;
        state.running_var[c] = (1.0 - m) * state.running_var[c] + m * ss / (n - 1.0);
      }
    }
  } else {
    for (std::size_t c = 0; c < L.channels; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.epsilon);
    }
  }

  Tensor xhat(xv.shape());
  Tensor y(xv.shape());
  for (std::size_t b = 0; b < L.batch; ++b)
    for (std::size_t c = 0; c < L.channels; ++c) {
      const std::size_t off = L.at(b, c);
      for (std::size_t s = 0; s < L.spatial; ++s) {
        const double h = (xv[off + s] - mean[c]) * inv_std[c];
        xhat[off + s] = h;
        y[off + s] = gv[c] * h + bv[c];
      }
    }

  const bool batch_stats = mode == Mode::train;
  return tape.record(
      OpKind::batch_norm, {x, gamma, beta}, std::move(y),
      [gamma, L, batch_stats, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          const Tape& tape, const Tensor& gy, std::span<Tensor* const> gin) {
        const Tensor& gv = tape.value(gamma);
        const double n = static_cast<double>(L.count());
        for (std::size_t c = 0; c < L.channels; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t b = 0; b < L.batch; ++b) {
            const std::size_t off = L.at(b, c);
            for (std::size_t s = 0; s < L.spatial; ++s) {
              sum_dy += gy[off + s];
              sum_dy_xhat += gy[off + s] * xhat[off + s];
            }
          }
          if (gin[1]) (*gin[1])[c] += sum_dy_xhat;
          if (gin[2]) (*gin[2])[c] += sum_dy;
          if (!gin[0]) continue;
          const double k = gv[c] * inv_std[c];
          for (std::size_t b = 0; b < L.batch; ++b) {
            const std::size_t off = L.at(b, c);
            for (std::size_t s = 0; s < L.spatial; ++s) {
              const double d = batch_stats
                                   ? (gy[off + s] - sum_dy / n - xhat[off + s] * sum_dy_xhat / n)
                                   : gy[off + s];
              (*gin[0])[off + s] += k * d;
            }
          }
        }
      });
}

NodeId relu(Tape& tape, NodeId x) {
  Tensor y = tape.value(x);
  for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
  return tape.record(OpKind::relu, {x}, std::move(y),
                     [x](const Tape& tape, const Tensor& gy, std::span<Tensor* const> gin) {
                       const Tensor& xv = tape.value(x);
                       for (std::size_t i = 0; i < gy.size(); ++i)
                         if (xv[i] > 0.0) (*gin[0])[i] += gy[i];
                     });
}

NodeId add(Tape& tape, NodeId a, NodeId b) {
  require_same_shape(tape.value(a), tape.value(b), "add");
  Tensor y = tape.value(a) + tape.value(b);
  return tape.record(OpKind::add, {a, b}, std::move(y),
                     [](const Tape&, const Tensor& gy, std::span<Tensor* const> gin) {
                       if (gin[0]) *gin[0] += gy;
                       if (gin[1]) *gin[1] += gy;
                     });
}

NodeId scale(Tape& tape, NodeId a, double factor) {
  Tensor y = factor * tape.value(a);
  return tape.record(OpKind::scale, {a}, std::move(y),
                     [factor](const Tape&, const Tensor& gy, std::span<Tensor* const> gin) {
                       for (std::size_t i = 0; i < gy.size(); ++i) (*gin[0])[i] += factor * gy[i];
                     });
}

NodeId reshape(Tape& tape, NodeId a, Shape shape) {
  Tensor y = tape.value(a).reshaped(std::move(shape));
  return tape.record(OpKind::reshape, {a}, std::move(y),
                     [](const Tape&, const Tensor& gy, std::span<Tensor* const> gin) {
                       for (std::size_t i = 0; i < gy.size(); ++i) (*gin[0])[i] += gy[i];
                     });
}

NodeId row_sq_norm_mean(Tape& tape, NodeId x) {
  const Tensor& xv = tape.value(x);
  if (xv.rank() == 0) throw ShapeError("row_sq_norm_mean needs a batch axis");
  const double inv_b = 1.0 / static_cast<double>(xv.dim(0));
  double acc = 0.0;
  for (double v : xv.data()) acc += v * v;
  return tape.record(OpKind::row_sq_norm_mean, {x}, Tensor::scalar(acc * inv_b),
                     [x, inv_b](const Tape& tape, const Tensor& gy, std::span<Tensor* const> gin) {
                       const Tensor& xv = tape.value(x);
                       const double k = 2.0 * inv_b * gy[0];
                       for (std::size_t i = 0; i < xv.size(); ++i) (*gin[0])[i] += k * xv[i];
                     });
}

NodeId softmax_cross_entropy(Tape& tape, NodeId logits, std::span<const int> labels) {
  const Tensor& z = tape.value(logits);
  if (z.rank() != 2 || z.dim(0) != labels.size())
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(z.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t B = z.dim(0), N = z.dim(1);
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= N)
      throw std::out_of_range("label " + std::to_string(l) + " outside [0," + std::to_string(N) +
                              ")");

  Tensor probs(z.shape());
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = z.ptr() + b * N;
    const double mx = *std::max_element(row, row + N);
    double se = 0.0;
    for (std::size_t j = 0; j < N; ++j) se += std::exp(row[j] - mx);
    const double lse = mx + std::log(se);
    for (std::size_t j = 0; j < N; ++j) probs[b * N + j] = std::exp(row[j] - lse);
    total += lse - row[static_cast<std::size_t>(labels[b])];
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return tape.record(
      OpKind::softmax_cross_entropy, {logits}, Tensor::scalar(total / static_cast<double>(B)),
      [probs = std::move(probs), lab = std::move(lab), B, N](const Tape&, const Tensor& gy,
                                                             std::span<Tensor* const> gin) {
        const double k = gy[0] / static_cast<double>(B);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t j = 0; j < N; ++j) {
            const double onehot = static_cast<std::size_t>(lab[b]) == j ? 1.0 : 0.0;
            (*gin[0])[b * N + j] += k * (probs[b * N + j] - onehot);
          }
      });
}

}  // namespace ops
}  // namespace lap
