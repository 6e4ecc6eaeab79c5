#include "lap/tape.hpp"

#include <algorithm>
#include <string>

namespace lap {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::constant: return "constant";
    case OpKind::parameter: return "parameter";
    case OpKind::affine: return "affine";
    case OpKind::conv2d: return "conv2d";
    case OpKind::batch_norm: return "batch_norm";
    case OpKind::relu: return "relu";
    case OpKind::add: return "add";
    case OpKind::scale: return "scale";
    case OpKind::reshape: return "reshape";
    case OpKind::row_sq_norm_mean: return "row_sq_norm_mean";
    case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
  }
  return "unknown";
}

NodeId Tape::constant(Tensor value) {
  require_finite(value, "constant input");
  nodes_.push_back(Node{OpKind::constant, {}, std::move(value), {}, -1, false});
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeId Tape::parameter(std::size_t slot, Tensor value) {
  require_finite(value, "parameter slot " + std::to_string(slot));
  nodes_.push_back(
      Node{OpKind::parameter, {}, std::move(value), {}, static_cast<std::ptrdiff_t>(slot), true});
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeId Tape::record(OpKind kind, std::vector<NodeId> inputs, Tensor value, BackwardFn backward) {
  bool needs = false;
  for (auto in : inputs) {
    if (in.index >= nodes_.size())
      throw std::logic_error(std::string(op_name(kind)) + ": input does not precede the node");
    needs = needs || nodes_[in.index].requires_grad;
  }
  if (!value.all_finite())
    throw NumericError(std::string("non-finite output of ") + std::string(op_name(kind)) +
                       " with shape " + shape_str(value.shape()));
  nodes_.push_back(Node{kind, std::move(inputs), std::move(value), std::move(backward), -1, needs});
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Gradients Tape::backward(NodeId loss) const {
  const Node& root = nodes_.at(loss.index);
  if (root.value.size() != 1)
    throw ShapeError("backward needs a scalar loss, got shape " + shape_str(root.value.shape()));

  std::ptrdiff_t max_slot = -1;
  for (const auto& n : nodes_) max_slot = std::max(max_slot, n.slot);
  std::vector<Tensor> by_slot(static_cast<std::size_t>(max_slot + 1));
  for (const auto& n : nodes_)
    if (n.slot >= 0) by_slot[static_cast<std::size_t>(n.slot)] = Tensor::zeros_like(n.value);

  std::vector<Tensor> grads(loss.index + 1);
  grads[loss.index] = Tensor(root.value.shape(), 1.0);

  std::vector<Tensor*> inputs_buf;
  for (std::size_t i = loss.index + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    Tensor& g = grads[i];
    if (g.empty() || !node.requires_grad) {
      g = Tensor();
      continue;
    }
    if (node.slot >= 0) {
      by_slot[static_cast<std::size_t>(node.slot)] += g;
    } else if (node.backward) {
      inputs_buf.assign(node.inputs.size(), nullptr);
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const auto in = node.inputs[k].index;
        if (!nodes_[in].requires_grad) continue;
        if (grads[in].empty()) grads[in] = Tensor::zeros_like(nodes_[in].value);
        inputs_buf[k] = &grads[in];
      }
      node.backward(*this, g, inputs_buf);
    }
    g = Tensor();
  }
  return Gradients(std::move(by_slot));
}

}  // namespace lap
