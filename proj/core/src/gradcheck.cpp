#include "lap/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "lap/ops.hpp"

namespace lap {

namespace {

struct Probe {
  double value;
  std::vector<bool> active;  // which ReLU outputs are positive
};

Probe probe(const TapeFn& f, bool record_pattern) {
  Tape tape;
  Probe p{tape.value(f(tape)).item(), {}};
  if (record_pattern)
    for (std::uint32_t i = 0; i < tape.size(); ++i)
      if (tape.kind(NodeId{i}) == OpKind::relu)
        for (double v : tape.value(NodeId{i}).data()) p.active.push_back(v > 0.0);
  return p;
}

}  // namespace

GradCheckResult grad_check(const TapeFn& f, std::span<Tensor* const> params,
                           const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw std::invalid_argument("grad_check step must be positive");
  const double h = options.step;

  Gradients grads;
  {
    Tape tape;
    grads = tape.backward(f(tape));
  }

  // Flat coordinate k lives in leaf `leaf_of(k)` at k - offsets[leaf].
  std::vector<std::size_t> offsets{0};
  for (const Tensor* p : params) offsets.push_back(offsets.back() + p->size());
  const std::size_t total = offsets.back();

  std::vector<std::size_t> coords;
  if (total <= options.max_coordinates) {
    coords.resize(total);
    std::iota(coords.begin(), coords.end(), 0);
  } else {
    // Every leaf gets its share of the budget, and at least a few coordinates,
    // so small tensors such as norm scales are never skipped.
    std::seed_seq seq{options.seed, std::uint64_t{0x6C4EC}};
    std::mt19937_64 rng(seq);
    const double budget = static_cast<double>(options.max_coordinates);
    for (std::size_t leaf = 0; leaf < params.size(); ++leaf) {
      const std::size_t size = offsets[leaf + 1] - offsets[leaf];
      const auto share = static_cast<std::size_t>(
          std::ceil(budget * static_cast<double>(size) / static_cast<double>(total)));
      std::vector<std::size_t> local(size);
      std::iota(local.begin(), local.end(), offsets[leaf]);
      std::sample(local.begin(), local.end(), std::back_inserter(coords),
                  std::min(size, std::max<std::size_t>(share, 4)), rng);
    }
  }

  GradCheckResult result;
  result.coordinates = coords.size();  // reduced below by kink crossings
  std::size_t leaf = 0;
  for (std::size_t k : coords) {
    while (k >= offsets[leaf + 1]) ++leaf;
    const std::size_t j = k - offsets[leaf];
    Tensor& theta = *params[leaf];
    const double saved = theta[j];
    theta[j] = saved + h;
    const Probe up = probe(f, options.skip_kinks);
    theta[j] = saved - h;
    const Probe down = probe(f, options.skip_kinks);
    theta[j] = saved;

    if (up.active != down.active) {
      ++result.kink_crossings;
      continue;
    }
    const double numeric = (up.value - down.value) / (2.0 * h);
    const double analytic = grads.has(leaf) ? grads[leaf][j] : 0.0;
    const double err = std::abs(analytic - numeric) /
                       std::max(1e-8, std::abs(analytic) + std::abs(numeric));
    if (err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_leaf = leaf;
      result.worst_index = j;
      result.worst_analytic = analytic;
      result.worst_numeric = numeric;
    }
  }
  result.coordinates -= result.kink_crossings;
  return result;
}

GradCheckResult model_grad_check(Model& model, const Tensor& inputs, std::span<const int> labels,
                                 double cost_weight, const GradCheckOptions& options) {
  std::vector<Tensor*> params;
  for (auto& p : model.parameters()) params.push_back(&p.value);
  const std::vector<int> owned(labels.begin(), labels.end());
  TapeFn f = [&model, &inputs, owned, cost_weight](Tape& tape) {
    const auto pass = model.forward(tape, inputs, Mode::train, /*update_running=*/false);
    const NodeId loss = ops::softmax_cross_entropy(tape, pass.logits, owned);
    return ops::add(tape, loss, ops::scale(tape, transport_cost(tape, pass), cost_weight));
  };
  return grad_check(f, params, options);
}

double balanced_cost_weight(Model& model, const Tensor& inputs, std::span<const int> labels) {
  Tape tape;
  const auto pass = model.forward(tape, inputs, Mode::train, /*update_running=*/false);
  const double loss = tape.value(ops::softmax_cross_entropy(tape, pass.logits, labels)).item();
  const double cost = tape.value(transport_cost(tape, pass)).item();
  return cost > 0.0 ? loss / cost : 1.0;
}

}  // namespace lap
