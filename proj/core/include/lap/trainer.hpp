#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lap/data.hpp"
#include "lap/network.hpp"
#include "lap/tape.hpp"

namespace lap {

struct SgdConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  /// (epoch, divisor): from `epoch` on, the rate is divided by `divisor`
  /// (cumulatively across entries).
  std::vector<std::pair<int, double>> schedule;

  double rate_at(int epoch) const;
};

/// Heavy-ball SGD: v <- momentum * v + (g + wd * theta); theta <- theta - lr * v.
/// Weight decay is skipped for parameters with `decay == false`.
class SgdState {
 public:
  SgdState(const Model& model, SgdConfig config);

  /// Throws NumericError naming the parameter if any gradient is non-finite;
  /// the model is left untouched in that case.
  void step(Model& model, const Gradients& grads);

  double learning_rate = 0.0;
  const SgdConfig& config() const noexcept { return config_; }
  const std::vector<Tensor>& velocity() const noexcept { return velocity_; }

 private:
  SgdConfig config_;
  std::vector<Tensor> velocity_;
};

enum class Regime { vanilla, fixed_lambda, lap };

std::string_view to_string(Regime r);
Regime regime_from_string(std::string_view name);

/// Multiplier schedule of the least-action (Uzawa-style) trainer: after every
/// `steps` SGD steps on cost/lambda + loss, lambda <- lambda + tau * loss.
struct LapConfig {
  double lambda0 = 5.0;
  double tau = 1.0;
  std::size_t steps = 5;
  /// Evaluate the loss for the multiplier update on the full training set
  /// (eval mode) instead of the last inner minibatch.
  bool full_train_loss = false;
};

inline constexpr double kLambdaLimit = 1e12;

/// lambda_{i+1} = lambda_i + tau * loss; throws NumericError past kLambdaLimit.
double next_lambda(double lambda, double tau, double loss);

struct TrainConfig {
  Regime regime = Regime::vanilla;
  SgdConfig sgd{};
  LapConfig lap{};
  double lambda = 0.0;  // fixed_lambda weight
  int epochs = 30;
  std::size_t batch_size = 128;
  std::size_t eval_batch_size = 100;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;  // mean over the epoch's minibatches
  double train_cost = 0.0;  // mean over the epoch's minibatches
  double test_accuracy = 0.0;
  double test_cost = 0.0;
  double lambda = 0.0;  // multiplier at epoch end (fixed weight, or 0 for vanilla)
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  /// Every multiplier value taken by the least-action trainer, starting with
  /// lambda0. Empty for the other regimes.
  std::vector<double> lambda_trace;

  double best_test_accuracy() const;
  const EpochRecord& last() const { return epochs.at(epochs.size() - 1); }

  /// CSV with header: epoch,train_loss,train_cost,test_acc,test_cost,lambda
  void write_csv(std::ostream& out) const;
  std::string to_csv() const;
};

struct Evaluation {
  double accuracy = 0.0;
  double transport_cost = 0.0;  // mean over samples of sum_k ||v_k||^2
  double loss = 0.0;            // mean cross entropy
};

/// Eval-mode pass over the whole dataset in chunks of `batch_size`.
/// Prediction is the first index of the largest logit.
Evaluation evaluate(Model& model, const Dataset& data, std::size_t batch_size = 100);

/// Minibatch index lists of one epoch: a seeded permutation cut into
/// `batch_size` chunks; a trailing chunk of one row joins the previous one.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, int epoch);

/// Runs the configured regime. `test` is evaluated after every epoch.
TrainHistory train(Model& model, const Dataset& train_set, const Dataset& test_set,
                   const TrainConfig& config);

TrainHistory train_vanilla(Model& model, const Dataset& train_set, const Dataset& test_set,
                           TrainConfig config);
TrainHistory train_fixed_lambda(Model& model, const Dataset& train_set, const Dataset& test_set,
                                TrainConfig config, double lambda);
TrainHistory train_lap(Model& model, const Dataset& train_set, const Dataset& test_set,
                       TrainConfig config, const LapConfig& lap);

}  // namespace lap
