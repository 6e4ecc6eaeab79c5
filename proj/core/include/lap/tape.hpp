#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

#include "lap/tensor.hpp"

namespace lap {

/// Index of a node on a Tape. Only meaningful for the tape that issued it.
struct NodeId {
  std::uint32_t index = std::numeric_limits<std::uint32_t>::max();
  friend bool operator==(NodeId, NodeId) = default;
};

enum class OpKind : std::uint8_t {
  constant,
  parameter,
  affine,
  conv2d,
  batch_norm,
  relu,
  add,
  scale,
  reshape,
  row_sq_norm_mean,
  softmax_cross_entropy,
};

std::string_view op_name(OpKind kind);

/// Gradients of a scalar with respect to every parameter leaf, indexed by
/// the slot the leaf was registered under. Slots with no leaf stay empty.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> by_slot) : by_slot_(std::move(by_slot)) {}

  std::size_t slots() const noexcept { return by_slot_.size(); }
  bool has(std::size_t slot) const noexcept {
    return slot < by_slot_.size() && !by_slot_[slot].empty();
  }
  const Tensor& operator[](std::size_t slot) const { return by_slot_.at(slot); }
  Tensor& operator[](std::size_t slot) { return by_slot_.at(slot); }

 private:
  std::vector<Tensor> by_slot_;
};

/// Append-only record of a computation. Every node stores its forward value
/// and a closure that pushes an output gradient to its inputs. Inputs always
/// precede the node that consumes them, so a reverse sweep is a valid
/// topological order.
///
/// A tape is single-owner. `backward` does not modify it and can be run any
/// number of times.
class Tape {
 public:
  /// Accumulates `grad_out` into the gradient buffers of the node's inputs.
  /// `grad_in[i]` is null when input i does not lead to any parameter and its
  /// gradient is not needed; otherwise it points to a buffer of the input's
  /// shape to add into.
  using BackwardFn =
      std::function<void(const Tape&, const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  NodeId constant(Tensor value);
  NodeId parameter(std::size_t slot, Tensor value);

  /// Appends an op node. Rejects non-finite outputs and inputs that do not
  /// refer to earlier nodes.
  NodeId record(OpKind kind, std::vector<NodeId> inputs, Tensor value, BackwardFn backward);

  const Tensor& value(NodeId id) const { return nodes_.at(id.index).value; }
  OpKind kind(NodeId id) const { return nodes_.at(id.index).kind; }
  bool requires_grad(NodeId id) const { return nodes_.at(id.index).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse-mode sweep from a scalar node.
  Gradients backward(NodeId loss) const;

 private:
  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Tensor value;
    BackwardFn backward;
    std::ptrdiff_t slot = -1;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
};

}  // namespace lap
