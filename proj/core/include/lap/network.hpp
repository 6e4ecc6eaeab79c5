#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "lap/ops.hpp"
#include "lap/tape.hpp"
#include "lap/tensor.hpp"

namespace lap {

enum class ArchKind { circles2d, mnist };

std::string_view to_string(ArchKind kind);
ArchKind arch_kind_from_string(std::string_view name);

/// Three-stage model f = classifier . transport . encoder.
///
/// circles2d: identity encoder on R^2; each residual block is
///   FC(2,hidden) [-> BN] -> ReLU -> FC(hidden,2); the classifier is the fixed
///   map x -> (x.u, -x.u) with u = (1,0) unless `classifier_trainable`.
/// mnist: encoder conv3x3(1->C) -> BN -> ReLU -> conv3x3 stride 2 (C->C) maps
///   1x28x28 to Cx14x14; each block is (BN -> ReLU -> conv3x3) twice; the
///   classifier is FC(C*14*14, hidden) -> BN -> ReLU -> FC(hidden, 10).
struct Architecture {
  ArchKind kind = ArchKind::circles2d;
  std::size_t blocks = 9;
  std::size_t hidden = 16;
  bool batch_norm = true;
  bool classifier_trainable = false;
  std::size_t channels = 32;
  std::size_t classifier_hidden = 128;

  /// Dimension of the transport space (flattened encoder output).
  std::size_t transport_dim() const;
  /// Per-sample input shape expected by `forward`.
  Shape input_shape() const;
  std::size_t num_classes() const;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

enum class InitKind { orthogonal, normal };

std::string_view to_string(InitKind kind);
InitKind init_kind_from_string(std::string_view name);

/// Weight initialization. Orthogonal: semi-orthogonal matrix scaled by
/// `gain` (conv kernels flattened to [F, C*kh*kw]). Normal: i.i.d. N(0, gain^2).
struct InitScheme {
  InitKind kind = InitKind::orthogonal;
  double gain = 0.01;

  friend bool operator==(const InitScheme&, const InitScheme&) = default;
};

/// Semi-orthogonal rows x cols matrix times `gain`: W^T W = gain^2 I when
/// rows >= cols, W W^T = gain^2 I otherwise.
Tensor orthogonal_matrix(std::size_t rows, std::size_t cols, double gain, std::mt19937_64& rng);

struct Parameter {
  std::string name;
  Tensor value;
  /// Weight decay applies; false for biases and batch-norm scale/shift.
  bool decay = true;
};

struct NormRef {
  std::size_t scale, shift, state;
};

/// Per-sample flattened states phi_0..phi_K and displacements v_k(phi_k).
struct Trajectory {
  std::vector<Tensor> states;         // K+1 tensors of [B,d]
  std::vector<Tensor> displacements;  // K tensors of [B,d]

  std::size_t blocks() const noexcept { return displacements.size(); }
  std::size_t batch() const { return states.at(0).dim(0); }
};

/// Tape nodes produced by one forward pass.
struct ForwardPass {
  NodeId logits;
  std::vector<NodeId> states;
  std::vector<NodeId> displacements;
};

class Model {
 public:
  /// Allocates every parameter at zero with unit batch-norm scales. Use
  /// `build_model` for an initialized network.
  explicit Model(Architecture arch);

  const Architecture& architecture() const noexcept { return arch_; }
  std::vector<Parameter>& parameters() noexcept { return params_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }
  std::vector<BatchNormState>& norm_states() noexcept { return norms_; }
  const std::vector<BatchNormState>& norm_states() const noexcept { return norms_; }
  const std::vector<std::string>& norm_names() const noexcept { return norm_names_; }

  std::optional<std::size_t> find(std::string_view name) const;
  Parameter& parameter(std::string_view name);

  std::size_t parameter_count() const;

  std::uint64_t seed = 0;
  InitScheme init{};

  ForwardPass forward(Tape& tape, const Tensor& batch, Mode mode, bool update_running = true);

 private:
  struct Dense { std::size_t weight; std::optional<std::size_t> bias; };
  struct Conv { std::size_t weight; Conv2dSpec spec; };
  struct CirclesBlock { Dense fc1; std::optional<NormRef> norm; Dense fc2; };
  struct ConvBlock { NormRef norm1; Conv conv1; NormRef norm2; Conv conv2; };

  std::size_t add_param(std::string name, Shape shape, bool decay, double fill = 0.0);
  NormRef add_norm(const std::string& prefix, std::size_t channels);
  // A layer feeding straight into batch norm gets no bias: the norm's shift
  // already covers it.
  Dense add_dense(const std::string& prefix, std::size_t in, std::size_t out, bool bias = true);

  NodeId dense(Tape& tape, NodeId x, const Dense& d) const;
  NodeId norm(Tape& tape, NodeId x, const NormRef& n, Mode mode, bool update_running);

  Architecture arch_;
  std::vector<Parameter> params_;
  std::vector<BatchNormState> norms_;
  std::vector<std::string> norm_names_;

  // circles2d
  std::vector<CirclesBlock> circles_blocks_;
  std::optional<Dense> circles_head_;
  // mnist
  Conv enc_conv1_{}, enc_conv2_{};
  std::optional<NormRef> enc_norm_;
  std::vector<ConvBlock> conv_blocks_;
  Dense head_fc1_{}, head_fc2_{};
  std::optional<NormRef> head_norm_;
};

/// Initialized model. Same (arch, init, seed) gives bit-identical parameters.
Model build_model(const Architecture& arch, const InitScheme& init, std::uint64_t seed);

/// Copies the trajectory values out of the tape, flattening each state to [B,d].
Trajectory collect_trajectory(const Tape& tape, const ForwardPass& pass);

/// sum_k (1/B) sum_b ||v_k(phi_k^b)||^2 on the tape, differentiable through
/// every state.
NodeId transport_cost(Tape& tape, const ForwardPass& pass);

/// Batch mean of sum_k ||displacements[k][b]||^2.
double transport_cost(const Trajectory& traj);

/// Per-sample sum_k ||displacements[k][b]||^2.
std::vector<double> per_sample_cost(const Trajectory& traj);

struct EndpointBound {
  double lhs;  // K * sum_k ||v_k||^2
  double rhs;  // ||phi_K - phi_0||^2
};

/// Per-sample Cauchy-Schwarz pair; lhs >= rhs for every sample.
std::vector<EndpointBound> displacement_endpoint_bound(const Trajectory& traj);

// Checkpoints: JSON document
//   {"format": "lapnet-checkpoint", "version": 1, "architecture": {...},
//    "init": {"kind", "gain"}, "seed": n,
//    "parameters": [{"name", "shape", "data"}...],
//    "batch_norm": [{"name", "running_mean", "running_var", "momentum", "epsilon"}...]}
// Doubles are written in shortest round-trip form, so save/load is exact.
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const Model& model, std::ostream& out);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(std::istream& in);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace lap
