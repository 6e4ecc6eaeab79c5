#include "lap/network.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lap {

std::string_view to_string(ArchKind kind) {
  return kind == ArchKind::circles2d ? "circles2d" : "mnist";
}

ArchKind arch_kind_from_string(std::string_view name) {
  if (name == "circles2d") return ArchKind::circles2d;
  if (name == "mnist") return ArchKind::mnist;
  throw std::invalid_argument("unknown architecture kind '" + std::string(name) + "'");
}

std::string_view to_string(InitKind kind) {
  return kind == InitKind::orthogonal ? "orthogonal" : "normal";
}

InitKind init_kind_from_string(std::string_view name) {
  if (name == "orthogonal") return InitKind::orthogonal;
  if (name == "normal") return InitKind::normal;
  throw std::invalid_argument("unknown init scheme '" + std::string(name) + "'");
}

std::size_t Architecture::transport_dim() const {
  if (kind == ArchKind::circles2d) return 2;
  return channels * 14 * 14;
}

Shape Architecture::input_shape() const {
  if (kind == ArchKind::circles2d) return {2};
  return {1, 28, 28};
}

std::size_t Architecture::num_classes() const { return kind == ArchKind::circles2d ? 2 : 10; }

Tensor orthogonal_matrix(std::size_t rows, std::size_t cols, double gain, std::mt19937_64& rng) {
  const auto tall = static_cast<Eigen::Index>(std::max(rows, cols));
  const auto thin = static_cast<Eigen::Index>(std::min(rows, cols));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd a(tall, thin);
  for (Eigen::Index j = 0; j < thin; ++j)
    for (Eigen::Index i = 0; i < tall; ++i) a(i, j) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(tall, thin);
  const Eigen::MatrixXd r = qr.matrixQR().topRows(thin).triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < thin; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;

  Tensor out(Shape{rows, cols});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const double v = rows >= cols ? q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))
                                     : q(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i));
      out[i * cols + j] = gain * v;
    }
  return out;
}

Model::Model(Architecture arch) : arch_(arch) {
  if (arch_.blocks == 0) throw std::invalid_argument("architecture needs at least one block");
  if (arch_.kind == ArchKind::circles2d) {
    if (arch_.hidden == 0) throw std::invalid_argument("circles2d needs a positive hidden width");
    for (std::size_t k = 0; k < arch_.blocks; ++k) {
      const std::string prefix = "block" + std::to_string(k);
      CirclesBlock blk{};
      blk.fc1 = add_dense(prefix + ".fc1", 2, arch_.hidden, !arch_.batch_norm);
      if (arch_.batch_norm) blk.norm = add_norm(prefix + ".bn", arch_.hidden);
      blk.fc2 = add_dense(prefix + ".fc2", arch_.hidden, 2);
      circles_blocks_.push_back(blk);
    }
    if (arch_.classifier_trainable) circles_head_ = add_dense("classifier.fc", 2, 2);
    return;
  }

  if (arch_.channels == 0 || arch_.classifier_hidden == 0)
    throw std::invalid_argument("mnist architecture needs positive widths");
  const std::size_t c = arch_.channels;
  enc_conv1_ = {add_param("encoder.conv1.weight", {c, 1, 3, 3}, true), {1, 1}};
  enc_norm_ = add_norm("encoder.bn", c);
  enc_conv2_ = {add_param("encoder.conv2.weight", {c, c, 3, 3}, true), {2, 1}};
  for (std::size_t k = 0; k < arch_.blocks; ++k) {
    const std::string prefix = "block" + std::to_string(k);
    ConvBlock blk{};
    blk.norm1 = add_norm(prefix + ".bn1", c);
    blk.conv1 = {add_param(prefix + ".conv1.weight", {c, c, 3, 3}, true), {1, 1}};
    blk.norm2 = add_norm(prefix + ".bn2", c);
    blk.conv2 = {add_param(prefix + ".conv2.weight", {c, c, 3, 3}, true), {1, 1}};
    conv_blocks_.push_back(blk);
  }
  head_fc1_ = add_dense("classifier.fc1", arch_.transport_dim(), arch_.classifier_hidden, false);
  head_norm_ = add_norm("classifier.bn", arch_.classifier_hidden);
  head_fc2_ = add_dense("classifier.fc2", arch_.classifier_hidden, 10);
}

std::size_t Model::add_param(std::string name, Shape shape, bool decay, double fill) {
  params_.push_back(Parameter{std::move(name), Tensor(std::move(shape), fill), decay});
  return params_.size() - 1;
}

NormRef Model::add_norm(const std::string& prefix, std::size_t channels) {
  NormRef ref{};
  ref.scale = add_param(prefix + ".scale", {channels}, false, 1.0);
  ref.shift = add_param(prefix + ".shift", {channels}, false, 0.0);
  norms_.emplace_back(channels);
  norm_names_.push_back(prefix);
  ref.state = norms_.size() - 1;
  return ref;
}

Model::Dense Model::add_dense(const std::string& prefix, std::size_t in, std::size_t out,
                             bool bias) {
  Dense d{};
  d.weight = add_param(prefix + ".weight", {in, out}, true);
  if (bias) d.bias = add_param(prefix + ".bias", {out}, false);
  return d;
}

std::optional<std::size_t> Model::find(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  return std::nullopt;
}

Parameter& Model::parameter(std::string_view name) {
  const auto slot = find(name);
  if (!slot) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  return params_[*slot];
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

NodeId Model::dense(Tape& tape, NodeId x, const Dense& d) const {
  const Tensor& w = params_[d.weight].value;
  const NodeId b = d.bias ? tape.parameter(*d.bias, params_[*d.bias].value)
                          : tape.constant(Tensor(Shape{w.dim(1)}, 0.0));
  return ops::affine(tape, x, tape.parameter(d.weight, w), b);
}

NodeId Model::norm(Tape& tape, NodeId x, const NormRef& n, Mode mode, bool update_running) {
  return ops::batch_norm(tape, x, tape.parameter(n.scale, params_[n.scale].value),
                         tape.parameter(n.shift, params_[n.shift].value), norms_[n.state], mode,
                         update_running);
}

ForwardPass Model::forward(Tape& tape, const Tensor& batch, Mode mode, bool update_running) {
  const Shape per_sample = arch_.input_shape();
  if (batch.rank() != per_sample.size() + 1 ||
      !std::equal(per_sample.begin(), per_sample.end(), batch.shape().begin() + 1))
    throw ShapeError("batch of shape " + shape_str(batch.shape()) + " does not match input " +
                     shape_str(per_sample) + " of the " + std::string(to_string(arch_.kind)) +
                     " architecture");

  ForwardPass pass;
  NodeId x = tape.constant(batch);
  const std::size_t B = batch.dim(0);

  if (arch_.kind == ArchKind::circles2d) {
    pass.states.push_back(x);
    for (const auto& blk : circles_blocks_) {
      NodeId h = dense(tape, x, blk.fc1);
      if (blk.norm) h = norm(tape, h, *blk.norm, mode, update_running);
      h = ops::relu(tape, h);
      NodeId v = dense(tape, h, blk.fc2);
      x = ops::add(tape, x, v);
      pass.displacements.push_back(v);
      pass.states.push_back(x);
    }
    if (circles_head_) {
      pass.logits = dense(tape, x, *circles_head_);
    } else {
      // x -> (x.u, -x.u), u = (1, 0)
      NodeId w = tape.constant(Tensor(Shape{2, 2}, {1.0, -1.0, 0.0, 0.0}));
      NodeId b = tape.constant(Tensor(Shape{2}, 0.0));
      pass.logits = ops::affine(tape, x, w, b);
    }
    return pass;
  }

  NodeId h = ops::conv2d(tape, x, tape.parameter(enc_conv1_.weight, params_[enc_conv1_.weight].value),
                         enc_conv1_.spec);
  h = ops::relu(tape, norm(tape, h, *enc_norm_, mode, update_running));
  x = ops::conv2d(tape, h, tape.parameter(enc_conv2_.weight, params_[enc_conv2_.weight].value),
                  enc_conv2_.spec);
  pass.states.push_back(x);
  for (const auto& blk : conv_blocks_) {
    NodeId v = ops::relu(tape, norm(tape, x, blk.norm1, mode, update_running));
    v = ops::conv2d(tape, v, tape.parameter(blk.conv1.weight, params_[blk.conv1.weight].value),
                    blk.conv1.spec);
    v = ops::relu(tape, norm(tape, v, blk.norm2, mode, update_running));
    v = ops::conv2d(tape, v, tape.parameter(blk.conv2.weight, params_[blk.conv2.weight].value),
                    blk.conv2.spec);
    x = ops::add(tape, x, v);
    pass.displacements.push_back(v);
    pass.states.push_back(x);
  }
  NodeId flat = ops::reshape(tape, x, {B, arch_.transport_dim()});
  NodeId z = dense(tape, flat, head_fc1_);
  z = ops::relu(tape, norm(tape, z, *head_norm_, mode, update_running));
  pass.logits = dense(tape, z, head_fc2_);
  return pass;
}

Model build_model(const Architecture& arch, const InitScheme& init, std::uint64_t seed) {
  Model model(arch);
  model.seed = seed;
  model.init = init;
  std::seed_seq seq{seed, std::uint64_t{0x1417}};
  std::mt19937_64 rng(seq);
  std::normal_distribution<double> normal(0.0, init.gain);
  for (auto& p : model.parameters()) {
    if (!p.decay) continue;  // biases and batch-norm affine keep their defaults
    const Shape& s = p.value.shape();
    if (init.kind == InitKind::normal) {
      for (auto& v : p.value.data()) v = normal(rng);
      continue;
    }
    // Dense weights are [in, out]; conv kernels flatten to [F, C*kh*kw].
    const std::size_t rows = s[0];
    const std::size_t cols = p.value.size() / rows;
    Tensor w = orthogonal_matrix(rows, cols, init.gain, rng);
    p.value = std::move(w).reshaped(s);
  }
  return model;
}

Trajectory collect_trajectory(const Tape& tape, const ForwardPass& pass) {
  Trajectory traj;
  auto flat = [&](NodeId id) {
    const Tensor& v = tape.value(id);
    const std::size_t B = v.dim(0);
    return v.reshaped({B, v.size() / B});
  };
  for (auto id : pass.states) traj.states.push_back(flat(id));
  for (auto id : pass.displacements) traj.displacements.push_back(flat(id));
  return traj;
}

NodeId transport_cost(Tape& tape, const ForwardPass& pass) {
  if (pass.displacements.empty()) return tape.constant(Tensor::scalar(0.0));
  NodeId total = ops::row_sq_norm_mean(tape, pass.displacements.front());
  for (std::size_t k = 1; k < pass.displacements.size(); ++k)
    total = ops::add(tape, total, ops::row_sq_norm_mean(tape, pass.displacements[k]));
  return total;
}

std::vector<double> per_sample_cost(const Trajectory& traj) {
  if (traj.states.empty()) throw std::invalid_argument("empty trajectory");
  const std::size_t B = traj.batch();
  std::vector<double> cost(B, 0.0);
  for (const auto& d : traj.displacements) {
    const std::size_t dim = d.size() / B;
    for (std::size_t b = 0; b < B; ++b) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim; ++j) s += d[b * dim + j] * d[b * dim + j];
      cost[b] += s;
    }
  }
  return cost;
}

double transport_cost(const Trajectory& traj) {
  const auto cost = per_sample_cost(traj);
  double s = 0.0;
  for (double c : cost) s += c;
  return s / static_cast<double>(cost.size());
}

std::vector<EndpointBound> displacement_endpoint_bound(const Trajectory& traj) {
  if (traj.blocks() == 0) throw std::invalid_argument("endpoint bound needs K >= 1");
  const auto cost = per_sample_cost(traj);
  const Tensor& first = traj.states.front();
  const Tensor& last = traj.states.back();
  const std::size_t B = traj.batch();
  const std::size_t dim = first.size() / B;
  const double K = static_cast<double>(traj.blocks());
  std::vector<EndpointBound> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    double r = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      const double d = last[b * dim + j] - first[b * dim + j];
      r += d * d;
    }
    out[b] = {K * cost[b], r};
  }
  return out;
}

}  // namespace lap
