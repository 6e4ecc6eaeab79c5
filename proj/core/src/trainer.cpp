#include "lap/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "lap/ops.hpp"

namespace lap {

double SgdConfig::rate_at(int epoch) const {
  double lr = learning_rate;
  for (const auto& [at, divisor] : schedule)
    if (epoch >= at) lr /= divisor;
  return lr;
}

SgdState::SgdState(const Model& model, SgdConfig config)
    : learning_rate(config.learning_rate), config_(std::move(config)) {
  for (const auto& p : model.parameters()) velocity_.push_back(Tensor::zeros_like(p.value));
}

void SgdState::step(Model& model, const Gradients& grads) {
  auto& params = model.parameters();
  if (params.size() != velocity_.size())
    throw std::logic_error("optimizer state does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads.has(i)) continue;
    if (!grads[i].all_finite())
      throw NumericError("non-finite gradient in parameter '" + params[i].name + "'");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads.has(i)) continue;
    Tensor& theta = params[i].value;
    Tensor& v = velocity_[i];
    const Tensor& g = grads[i];
    const double wd = params[i].decay ? config_.weight_decay : 0.0;
    for (std::size_t j = 0; j < theta.size(); ++j) {
      v[j] = config_.momentum * v[j] + (g[j] + wd * theta[j]);
      theta[j] -= learning_rate * v[j];
    }
  }
}

std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::vanilla: return "vanilla";
    case Regime::fixed_lambda: return "fixed_lambda";
    case Regime::lap: return "lap";
  }
  return "unknown";
}

Regime regime_from_string(std::string_view name) {
  if (name == "vanilla") return Regime::vanilla;
  if (name == "fixed_lambda" || name == "regularized") return Regime::fixed_lambda;
  if (name == "lap") return Regime::lap;
  throw std::invalid_argument("unknown training regime '" + std::string(name) + "'");
}

double next_lambda(double lambda, double tau, double loss) {
  const double next = lambda + tau * loss;
  if (!std::isfinite(next) || next > kLambdaLimit)
    throw NumericError("lambda overflow: " + std::to_string(lambda) + " + " + std::to_string(tau) +
                       " * " + std::to_string(loss) + " exceeds " + std::to_string(kLambdaLimit));
  return next;
}

double TrainHistory::best_test_accuracy() const {
  if (epochs.empty()) throw std::logic_error("empty training history");
  double best = epochs.front().test_accuracy;
  for (const auto& e : epochs) best = std::max(best, e.test_accuracy);
  return best;
}

void TrainHistory::write_csv(std::ostream& out) const {
  out << "epoch,train_loss,train_cost,test_acc,test_cost,lambda\n";
  const auto old = out.precision(17);
  for (const auto& e : epochs)
    out << e.epoch << ',' << e.train_loss << ',' << e.train_cost << ',' << e.test_accuracy << ','
        << e.test_cost << ',' << e.lambda << '\n';
  out.precision(old);
}

std::string TrainHistory::to_csv() const {
  std::ostringstream os;
  write_csv(os);
  return os.str();
}

Evaluation evaluate(Model& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) throw std::invalid_argument("evaluate on an empty dataset");
  if (batch_size == 0) batch_size = data.size();
  std::size_t correct = 0;
  double cost_sum = 0.0, loss_sum = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    const std::size_t end = std::min(data.size(), begin + batch_size);
    idx.resize(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    const auto labels = data.gather_labels(idx);
    Tape tape;
    const auto pass = model.forward(tape, data.gather_inputs(idx), Mode::eval);
    const Tensor& logits = tape.value(pass.logits);
    const std::size_t N = logits.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const double* row = logits.ptr() + b * N;
      const auto pred = static_cast<int>(std::max_element(row, row + N) - row);
      correct += pred == labels[b];
    }
    const double n = static_cast<double>(idx.size());
    loss_sum += n * tape.value(ops::softmax_cross_entropy(tape, pass.logits, labels)).item();
    for (double c : per_sample_cost(collect_trajectory(tape, pass))) cost_sum += c;
  }
  const double n = static_cast<double>(data.size());
  return {static_cast<double>(correct) / n, cost_sum / n, loss_sum / n};
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, int epoch) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::seed_seq seq{seed, std::uint64_t{0xBA7C4}, static_cast<std::uint64_t>(epoch)};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t begin = 0; begin < n; begin += batch_size) {
    const std::size_t end = std::min(n, begin + batch_size);
    if (end - begin == 1 && !out.empty()) {
      out.back().push_back(perm[begin]);
      break;
    }
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(begin),
                     perm.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

namespace {

struct StepResult {
  double loss;
  double cost;
};

// One SGD step on loss + cost_weight * cost (loss alone when !with_cost).
// The cost node is recorded either way so it can be reported.
StepResult sgd_step_on_batch(Model& model, SgdState& sgd, const Tensor& inputs,
                             std::span<const int> labels, double cost_weight, bool with_cost) {
  Tape tape;
  const auto pass = model.forward(tape, inputs, Mode::train);
  const NodeId loss = ops::softmax_cross_entropy(tape, pass.logits, labels);
  const NodeId cost = transport_cost(tape, pass);
  NodeId objective = loss;
  if (with_cost) objective = ops::add(tape, loss, ops::scale(tape, cost, cost_weight));
  sgd.step(model, tape.backward(objective));
  return {tape.value(loss).item(), tape.value(cost).item()};
}

double batch_loss_no_update(Model& model, const Tensor& inputs, std::span<const int> labels) {
  Tape tape;
  const auto pass = model.forward(tape, inputs, Mode::train, /*update_running=*/false);
  return tape.value(ops::softmax_cross_entropy(tape, pass.logits, labels)).item();
}

}  // namespace

TrainHistory train(Model& model, const Dataset& train_set, const Dataset& test_set,
                   const TrainConfig& config) {
  if (train_set.size() < 2) throw std::invalid_argument("training needs at least two samples");
  if (config.regime == Regime::fixed_lambda && config.lambda < 0.0)
    throw std::invalid_argument("fixed lambda must be >= 0");
  if (config.regime == Regime::lap) {
    if (!(config.lap.lambda0 > 0.0)) throw std::invalid_argument("lambda0 must be > 0");
    if (config.lap.steps == 0) throw std::invalid_argument("LAP inner steps must be positive");
    if (config.lap.tau < 0.0) throw std::invalid_argument("tau must be >= 0");
  }

  SgdState sgd(model, config.sgd);
  TrainHistory history;
  double lambda = config.regime == Regime::lap ? config.lap.lambda0 : config.lambda;
  if (config.regime == Regime::lap) history.lambda_trace.push_back(lambda);
  std::size_t inner = 0;  // steps taken since the last multiplier update

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    sgd.learning_rate = config.sgd.rate_at(epoch);
    double loss_sum = 0.0, cost_sum = 0.0;
    const auto batches = epoch_batches(train_set.size(), config.batch_size, config.seed, epoch);
    for (const auto& idx : batches) {
      const Tensor inputs = train_set.gather_inputs(idx);
      const auto labels = train_set.gather_labels(idx);
      StepResult r{};
      switch (config.regime) {
        case Regime::vanilla:
          r = sgd_step_on_batch(model, sgd, inputs, labels, 0.0, false);
          break;
        case Regime::fixed_lambda:
          r = sgd_step_on_batch(model, sgd, inputs, labels, config.lambda, true);
          break;
        case Regime::lap:
          r = sgd_step_on_batch(model, sgd, inputs, labels, 1.0 / lambda, true);
          if (++inner == config.lap.steps) {
            inner = 0;
            const double loss = config.lap.full_train_loss
                                    ? evaluate(model, train_set, config.eval_batch_size).loss
                                    : batch_loss_no_update(model, inputs, labels);
            const double next = next_lambda(lambda, config.lap.tau, loss);
            if (next < lambda)
              throw std::logic_error("lambda decreased: loss must be nonnegative");
            lambda = next;
            history.lambda_trace.push_back(lambda);
          }
          break;
      }
      loss_sum += r.loss;
      cost_sum += r.cost;
    }
    const auto eval = evaluate(model, test_set, config.eval_batch_size);
    const double nb = static_cast<double>(batches.size());
    history.epochs.push_back(EpochRecord{epoch + 1, loss_sum / nb, cost_sum / nb, eval.accuracy,
                                         eval.transport_cost,
                                         config.regime == Regime::vanilla ? 0.0 : lambda});
  }
  return history;
}

TrainHistory train_vanilla(Model& model, const Dataset& train_set, const Dataset& test_set,
                           TrainConfig config) {
  config.regime = Regime::vanilla;
  return train(model, train_set, test_set, config);
}

TrainHistory train_fixed_lambda(Model& model, const Dataset& train_set, const Dataset& test_set,
                                TrainConfig config, double lambda) {
  config.regime = Regime::fixed_lambda;
  config.lambda = lambda;
  return train(model, train_set, test_set, config);
}

TrainHistory train_lap(Model& model, const Dataset& train_set, const Dataset& test_set,
                       TrainConfig config, const LapConfig& lap) {
  config.regime = Regime::lap;
  config.lap = lap;
  return train(model, train_set, test_set, config);
}

}  // namespace lap
