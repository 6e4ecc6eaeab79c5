#pragma once

#include <cstddef>
#include <span>

#include "lap/tape.hpp"
#include "lap/tensor.hpp"

namespace lap {

enum class Mode { train, eval };

struct Conv2dSpec {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Running statistics of one batch-normalization layer. The affine scale and
/// shift are trainable and live with the model's other parameters.
///
/// Train mode normalizes with the biased (1/n) batch variance and folds the
/// unbiased (1/(n-1)) variance into the running average:
///   running <- (1 - momentum) * running + momentum * batch_stat
/// where n counts every element of a channel (batch times spatial extent).
struct BatchNormState {
  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(Shape{channels}, 0.0), running_var(Shape{channels}, 1.0) {}

  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  std::size_t channels() const noexcept { return running_mean.size(); }
};

/// Output extent floor((in + 2*padding - kernel) / stride) + 1 of a strided,
/// zero-padded correlation; trailing rows the stride cannot reach are
/// dropped. Throws ShapeError if the kernel is larger than the padded input.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, Conv2dSpec spec);

/// Tape-free reference correlation: out[b,f,y,x] = sum_{c,i,j} k[f,c,i,j] *
/// xpad[b,c,y*stride+i,x*stride+j]. The tape op must agree with it.
Tensor conv2d_direct(const Tensor& x, const Tensor& kernel, Conv2dSpec spec);

namespace ops {

/// x[B,n] * W[n,m] + b[m]
NodeId affine(Tape& tape, NodeId x, NodeId w, NodeId b);

/// Cross-correlation of x[B,C,H,W] with kernel[F,C,kh,kw], odd kernel sizes,
/// no bias.
NodeId conv2d(Tape& tape, NodeId x, NodeId kernel, Conv2dSpec spec);

/// Per-channel normalization of x[B,C] or x[B,C,H,W] followed by
/// gamma * xhat + beta. In train mode with `update_running` the state's
/// running statistics are advanced as a side effect.
NodeId batch_norm(Tape& tape, NodeId x, NodeId gamma, NodeId beta, BatchNormState& state,
                  Mode mode, bool update_running = true);

/// max(x, 0). The derivative at exactly 0 is taken as 0.
NodeId relu(Tape& tape, NodeId x);

NodeId add(Tape& tape, NodeId a, NodeId b);
NodeId scale(Tape& tape, NodeId a, double factor);
NodeId reshape(Tape& tape, NodeId a, Shape shape);

/// (1/B) * sum_b ||x[b, ...]||^2 as a scalar.
NodeId row_sq_norm_mean(Tape& tape, NodeId x);

/// Mean over the batch of -log softmax(logits[b])[labels[b]], computed with
/// max subtraction.
NodeId softmax_cross_entropy(Tape& tape, NodeId logits, std::span<const int> labels);

}  // namespace ops
}  // namespace lap
