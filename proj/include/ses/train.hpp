#pragma once

#include "ses/dataset.hpp"
#include "ses/model.hpp"

#include <cstdint>
#include <iosfwd>
#include <vector>

namespace ses {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  void validate() const;
};

/// base * (1 + cos(pi * t / total)) / 2
double cosine_lr(double base, std::size_t t, std::size_t total);

/// SGD with heavy-ball momentum. Weight decay is added to the gradient
/// before the momentum update, so a zero learning rate changes nothing.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
  void step(const ParamList& params, double lr);

 private:
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<double>> velocity_;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 0 is the untrained network
  double lr = 0.0;
  double train_loss = 0.0;
  double val_acc = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  double initial_loss() const { return history.front().train_loss; }
  double final_loss() const { return history.back().train_loss; }
};

/// Runs the schedule over `train`. Before the first step an epoch-0 record
/// holds the untrained eval-mode loss on `train` and accuracy on `val`;
/// later records hold the mean training-mode loss of the epoch. Each record
/// is written to `log` as one JSON line. A non-finite loss throws NumericError.
TrainResult train(Network& net, const TrainConfig& tc, const Dataset& train, const Dataset& val,
                  std::ostream* log = nullptr);

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<std::size_t> per_class_count;
  std::size_t n = 0;
};

/// Eval-mode accuracy, mean loss and per-class accuracy.
EvalResult evaluate(Network& net, const Dataset& data, std::size_t batch_size = 64);

/// Stacks images[idx[0..n)] into [n,C,H,W].
Tensor make_batch(const Dataset& data, const std::vector<std::size_t>& idx);

}  // namespace ses
