#pragma once

// Cross-entropy, momentum SGD, step-decay schedule and the epoch loop.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <vector>

#include "nlvt/data.hpp"

namespace nlvt {

// base_lr * decay_factor^floor(epoch / decay_every), or a single decay from
// epoch decay_every onward when cfg.decay_once is set.
double lr_at(std::size_t epoch, const TrainConfig& cfg);

// Mean over the batch of -log softmax(logits)[target]. The backward rule is the
// fused (softmax - onehot) / B form. Throws ContractError for a target >= K.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets);

// Classical momentum: v = mu v + g (+ wd w), w -= lr v.
template <typename T>
class Sgd {
 public:
  explicit Sgd(double momentum = 0.9, double weight_decay = 0.0)
      : momentum_(momentum), weight_decay_(weight_decay) {}

  // Gradients are read from the parameters; a parameter without a gradient
  // counts as a zero gradient.
  void step(const ParamList<T>& params, double lr);
  // Explicit gradients, one buffer per parameter. Throws ContractError on a size mismatch.
  void step(const ParamList<T>& params, const std::vector<std::vector<T>>& grads, double lr);

  const std::vector<std::vector<T>>& velocity() const { return velocity_; }

 private:
  void ensure(const ParamList<T>& params);

  double momentum_;
  double weight_decay_;
  std::vector<std::vector<T>> velocity_;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = 0.0;
};

// `epoch,lr,train_loss,train_acc,eval_acc`
std::string format_metrics(const EpochMetrics& m);

template <typename T>
struct TrainState {
  Sgd<T> optimizer;
  std::size_t epoch = 0;
  std::size_t step = 0;
  double best_eval = -1.0;
};

template <typename T>
struct TrainResult {
  TrainState<T> state;
  std::vector<EpochMetrics> epochs;
  std::vector<double> step_losses;
};

struct TrainHooks {
  // Called after every epoch; `improved` is true when eval accuracy reached a new best.
  std::function<void(const EpochMetrics&, bool improved)> on_epoch;
  // Stops after this many optimizer steps (0 = run every epoch to completion).
  std::size_t max_steps = 0;
};

// Normalized [B, 3, side, side] batch for the given sample indices. When `augment`
// is set, each sample gets AugMix with a generator seeded from (seed, epoch, index).
template <typename T>
Tensor<T> make_batch(const Dataset& data, const std::vector<std::size_t>& indices,
                     const ModelConfig& model_cfg, const AugmixConfig* augment,
                     std::uint64_t seed, std::size_t epoch);

// One forward/backward/update on a prepared batch. Returns the batch loss and
// writes the number of correct predictions.
template <typename T>
double train_step(Model<T>& model, Sgd<T>& optimizer, const Tensor<T>& images,
                  const std::vector<std::size_t>& labels, double lr, std::size_t* correct = nullptr);

// Shuffled mini-batches, AugMix on the training split, per-epoch evaluation.
// Without an eval set, eval_acc is measured on the unaugmented training set.
// Deterministic for a given seed. Throws ConfigError for an empty dataset.
template <typename T>
TrainResult<T> train(Model<T>& model, const Dataset& train_set, const Dataset* eval_set,
                     const TrainConfig& cfg, const AugmixConfig& aug, const TrainHooks& hooks = {});

// Top-1 accuracy in inference mode; never records a tape or touches parameters.
template <typename T>
double evaluate(Model<T>& model, const Dataset& data, std::size_t batch);

template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits);

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b);

}  // namespace nlvt
