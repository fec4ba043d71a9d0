#include "ses/train.hpp"

#include "ses/error.hpp"
#include "ses/ops.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>

namespace ses {

void TrainConfig::validate() const {
  if (epochs == 0 || batch_size == 0) throw ValueError("epochs and batch_size must be positive");
  if (!(lr >= 0.0) || !(momentum >= 0.0 && momentum < 1.0) || !(weight_decay >= 0.0))
    throw ValueError("lr >= 0, momentum in [0, 1) and weight_decay >= 0 required");
}

double cosine_lr(double base, std::size_t t, std::size_t total) {
  if (total == 0) return base;
  const double frac = static_cast<double>(std::min(t, total)) / static_cast<double>(total);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

void Sgd::step(const ParamList& params, double lr) {
  if (velocity_.size() != params.size()) {
    velocity_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i].tensor->numel(), 0.0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    Tensor& p = *params[i].tensor;
    auto w = p.mutable_data();
    auto& v = velocity_[i];
    const bool has = p.has_grad();
    const auto g = has ? p.grad_data() : std::span<const double>{};
    for (std::size_t e = 0; e < w.size(); ++e) {
      const double grad = (has ? g[e] : 0.0) + weight_decay_ * w[e];
      v[e] = momentum_ * v[e] + grad;
      w[e] -= lr * v[e];
    }
  }
}

Tensor make_batch(const Dataset& data, const std::vector<std::size_t>& idx) {
  if (idx.empty()) throw ValueError("empty batch");
  const Shape& s = data.images[idx[0]].shape();
  const std::size_t per = numel(s);
  Buffer buf(idx.size() * per);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const Tensor& img = data.images.at(idx[b]);
    if (img.shape() != s) throw ShapeError("batch images differ in shape");
    std::copy(img.data().begin(), img.data().end(), buf.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  Shape shape{idx.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  return Tensor(std::move(shape), std::move(buf));
}

EvalResult evaluate(Network& net, const Dataset& data, std::size_t batch_size) {
  NoGradGuard ng;
  const std::size_t classes = net.config().num_classes;
  EvalResult r;
  r.per_class_count.assign(classes, 0);
  std::vector<std::size_t> correct(classes, 0);
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    Tensor logits = net.forward(make_batch(data, idx), Mode::eval);
    std::vector<int> labels;
    for (auto i : idx) labels.push_back(data.labels[i]);
    loss_sum += cross_entropy(logits, labels).item() * static_cast<double>(idx.size());
    const auto lv = logits.data();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const double* row = lv.data() + b * classes;
      const auto pred = static_cast<int>(std::max_element(row, row + classes) - row);
      const auto lbl = static_cast<std::size_t>(labels[b]);
      ++r.per_class_count.at(lbl);
      if (pred == labels[b]) ++correct[lbl];
    }
  }
  r.n = data.size();
  std::size_t total_correct = 0;
  r.per_class_accuracy.assign(classes, 0.0);
  for (std::size_t c = 0; c < classes; ++c) {
    total_correct += correct[c];
    if (r.per_class_count[c] > 0)
      r.per_class_accuracy[c] = static_cast<double>(correct[c]) / static_cast<double>(r.per_class_count[c]);
  }
  r.accuracy = static_cast<double>(total_correct) / static_cast<double>(r.n);
  r.loss = loss_sum / static_cast<double>(r.n);
  return r;
}

namespace {

void emit(std::ostream* log, const EpochRecord& rec) {
  if (!log) return;
  nlohmann::json j{{"epoch", rec.epoch}, {"lr", rec.lr}, {"train_loss", rec.train_loss}, {"val_acc", rec.val_acc}};
  *log << j.dump() << '\n' << std::flush;
}

}  // namespace

TrainResult train(Network& net, const TrainConfig& tc, const Dataset& train_set, const Dataset& val,
                  std::ostream* log) {
  tc.validate();
  if (train_set.size() == 0) throw ValueError("empty training set");
  TrainResult result;
  {
    EpochRecord r0;
    r0.lr = tc.lr;
    r0.train_loss = evaluate(net, train_set).loss;
    r0.val_acc = evaluate(net, val).accuracy;
    result.history.push_back(r0);
    emit(log, r0);
  }

  const ParamList params = net.parameters();
  Sgd opt(tc.momentum, tc.weight_decay);
  Rng rng(tc.seed);
  const std::size_t steps_per_epoch = (train_set.size() + tc.batch_size - 1) / tc.batch_size;
  const std::size_t total = steps_per_epoch * tc.epochs;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t t = 0;

  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    double lr = tc.lr;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size, ++t) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + tc.batch_size)));
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train_set.labels[i]);
      for (const auto& p : params) p.tensor->zero_grad();
      Tensor loss;
      try {
        loss = cross_entropy(net.forward(make_batch(train_set, idx), Mode::train), labels);
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " step " + std::to_string(t) +
                           ": " + e.what());
      }
      const double l = loss.item();
      if (!std::isfinite(l))
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " step " + std::to_string(t) +
                           ": loss is not finite");
      loss.backward();
      lr = cosine_lr(tc.lr, t, total);
      opt.step(params, lr);
      loss_sum += l * static_cast<double>(idx.size());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.val_acc = evaluate(net, val).accuracy;
    result.history.push_back(rec);
    emit(log, rec);
  }
  return result;
}

}  // namespace ses
