#include "nlvt/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "nlvt/ops.hpp"

namespace nlvt {

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  const std::size_t steps = cfg.decay_once ? (epoch >= cfg.decay_every ? 1 : 0) : epoch / cfg.decay_every;
  double lr = cfg.base_lr;
  for (std::size_t i = 0; i < steps; ++i) lr *= cfg.decay_factor;
  return lr;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& targets) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [B, K], got " + shape_str(logits.shape()));
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  if (targets.size() != b) {
    throw ContractError("cross_entropy: " + std::to_string(targets.size()) + " targets for batch of " +
                        std::to_string(b));
  }
  for (std::size_t t : targets) {
    if (t >= k) throw ContractError("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(k) + ")");
  }
  auto x = logits.data();
  // Row-wise softmax kept for the backward rule.
  auto probs = std::make_shared<std::vector<T>>(b * k);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const T* row = x.data() + i * k;
    const std::size_t top = static_cast<std::size_t>(std::max_element(row, row + k) - row);
    const double mx = static_cast<double>(row[top]);
    // log(1 + rest) via log1p keeps confident predictions accurate.
    double rest = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (j != top) rest += std::exp(static_cast<double>(row[j]) - mx);
    }
    const double lse = mx + std::log1p(rest);
    total += (mx - static_cast<double>(row[targets[i]])) + std::log1p(rest);
    for (std::size_t j = 0; j < k; ++j) {
      (*probs)[i * k + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
    }
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(b)));
  check_finite(out, "cross_entropy");
  if (should_record<T>({&logits})) {
    Tensor<T> in = logits;
    record_op(out, [in, probs, targets, b, k](const TensorImpl<T>& o) mutable {
      const T g = o.grad[0] / static_cast<T>(b);
      auto gi = in.mutable_grad();
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const T onehot = j == targets[i] ? T(1) : T(0);
          gi[i * k + j] += g * ((*probs)[i * k + j] - onehot);
        }
      }
    });
  }
  return out;
}

template <typename T>
void Sgd<T>::ensure(const ParamList<T>& params) {
  if (velocity_.empty()) {
    velocity_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i].tensor.numel(), T(0));
    return;
  }
  if (velocity_.size() != params.size()) {
    throw ContractError("sgd: parameter count changed from " + std::to_string(velocity_.size()) + " to " +
                        std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (velocity_[i].size() != params[i].tensor.numel()) {
      throw ContractError("sgd: momentum buffer does not match '" + params[i].name + "'");
    }
  }
}

template <typename T>
void Sgd<T>::step(const ParamList<T>& params, double lr) {
  ensure(params);
  const T mu = static_cast<T>(momentum_), wd = static_cast<T>(weight_decay_), rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> p = params[i].tensor;
    auto w = p.mutable_data();
    auto& v = velocity_[i];
    const bool has = p.has_grad();
    auto g = p.grad();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const T grad = (has ? g[j] : T(0)) + wd * w[j];
      v[j] = mu * v[j] + grad;
      w[j] -= rate * v[j];
    }
  }
}

template <typename T>
void Sgd<T>::step(const ParamList<T>& params, const std::vector<std::vector<T>>& grads, double lr) {
  if (grads.size() != params.size()) {
    throw ContractError("sgd: " + std::to_string(grads.size()) + " gradients for " + std::to_string(params.size()) +
                        " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].tensor.numel()) {
      throw ContractError("sgd: gradient for '" + params[i].name + "' has " + std::to_string(grads[i].size()) +
                          " elements, parameter has " + std::to_string(params[i].tensor.numel()));
    }
  }
  ensure(params);
  const T mu = static_cast<T>(momentum_), wd = static_cast<T>(weight_decay_), rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> p = params[i].tensor;
    auto w = p.mutable_data();
    auto& v = velocity_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = mu * v[j] + grads[i][j] + wd * w[j];
      w[j] -= rate * v[j];
    }
  }
}

std::string format_metrics(const EpochMetrics& m) {
  std::ostringstream out;
  out.precision(10);
  out << m.epoch << ',' << m.lr << ',' << m.train_loss << ',' << m.train_acc << ',' << m.eval_acc;
  return out.str();
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ b);
}

template <typename T>
Tensor<T> make_batch(const Dataset& data, const std::vector<std::size_t>& indices,
                     const ModelConfig& model_cfg, const AugmixConfig* augment, std::uint64_t seed,
                     std::size_t epoch) {
  if (indices.empty()) throw ContractError("make_batch: empty batch");
  const Shape& s = data.images.at(indices.front()).shape();
  if (s.size() != 3 || s[0] != model_cfg.in_channels || s[1] != model_cfg.image_size ||
      s[2] != model_cfg.image_size) {
    throw ShapeError("make_batch: dataset images are " + shape_str(s) + ", model expects [" +
                     std::to_string(model_cfg.in_channels) + ", " + std::to_string(model_cfg.image_size) + ", " +
                     std::to_string(model_cfg.image_size) + "]");
  }
  const std::size_t per = shape_numel(s);
  Tensor<T> batch(Shape{indices.size(), s[0], s[1], s[2]});
  auto out = batch.mutable_data();
  const long n = static_cast<long>(indices.size());
#pragma omp parallel for schedule(dynamic)
  for (long bi = 0; bi < n; ++bi) {
    const std::size_t idx = indices[static_cast<std::size_t>(bi)];
    Image img = data.images[idx];
    if (augment) {
      Rng rng(mix_seed(seed ^ augment->seed, epoch, idx));
      img = augmix(img, *augment, rng);
    }
    const Image norm = normalize(img, model_cfg.norm_mean, model_cfg.norm_std);
    auto src = norm.data();
    for (std::size_t j = 0; j < per; ++j) out[static_cast<std::size_t>(bi) * per + j] = static_cast<T>(src[j]);
  }
  return batch;
}

template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits) {
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  auto x = logits.data();
  std::vector<std::size_t> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    out[i] = static_cast<std::size_t>(std::max_element(x.begin() + i * k, x.begin() + (i + 1) * k) -
                                      (x.begin() + i * k));
  }
  return out;
}

template <typename T>
double train_step(Model<T>& model, Sgd<T>& optimizer, const Tensor<T>& images,
                  const std::vector<std::size_t>& labels, double lr, std::size_t* correct) {
  const ParamList<T> params = model.parameters();
  for (const auto& p : params) {
    Tensor<T> t = p.tensor;
    t.zero_grad();
  }
  Tape<T> tape;
  double loss_value = 0.0;
  {
    TapeScope<T> scope(tape);
    const Tensor<T> logits = model.forward(images, true);
    const Tensor<T> loss = cross_entropy(logits, labels);
    loss_value = static_cast<double>(loss.item());
    if (correct) {
      const auto pred = argmax_rows(logits);
      std::size_t c = 0;
      for (std::size_t i = 0; i < labels.size(); ++i) c += pred[i] == labels[i];
      *correct = c;
    }
    tape.backward(loss);
  }
  optimizer.step(params, lr);
  return loss_value;
}

template <typename T>
double evaluate(Model<T>& model, const Dataset& data, std::size_t batch) {
  if (data.size() == 0) throw ConfigError("evaluate: empty dataset");
  if (batch == 0) throw ConfigError("evaluate: batch must be >= 1");
  NoGradScope<T> no_grad;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    idx.resize(std::min(batch, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<T> images = make_batch<T>(data, idx, model.config(), nullptr, 0, 0);
    const auto pred = argmax_rows(model.forward(images, false));
    for (std::size_t i = 0; i < idx.size(); ++i) correct += pred[i] == data.labels[idx[i]];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

template <typename T>
TrainResult<T> train(Model<T>& model, const Dataset& train_set, const Dataset* eval_set,
                     const TrainConfig& cfg, const AugmixConfig& aug, const TrainHooks& hooks) {
  cfg.validate();
  if (cfg.augment) aug.validate();
  if (train_set.size() == 0) throw ConfigError("train: empty training set");
  if (eval_set && eval_set->size() == 0) throw ConfigError("train: empty evaluation set");
  if (train_set.num_classes > model.config().num_classes) {
    throw ConfigError("train: dataset has " + std::to_string(train_set.num_classes) + " classes, model has " +
                      std::to_string(model.config().num_classes));
  }

  TrainResult<T> result{TrainState<T>{Sgd<T>(cfg.momentum, cfg.weight_decay)}, {}, {}};
  TrainState<T>& state = result.state;
  std::vector<std::size_t> order(train_set.size());
  std::vector<std::size_t> idx, labels;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(cfg.seed, 0x5348554646ull, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t correct_sum = 0, seen = 0;
    bool stopped = false;
    for (std::size_t start = 0; start < order.size(); start += cfg.train_batch) {
      if (hooks.max_steps && state.step >= hooks.max_steps) {
        stopped = true;
        break;
      }
      const std::size_t n = std::min(cfg.train_batch, order.size() - start);
      idx.assign(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(start + n));
      labels.resize(n);
      for (std::size_t i = 0; i < n; ++i) labels[i] = train_set.labels[idx[i]];
      const Tensor<T> images =
          make_batch<T>(train_set, idx, model.config(), cfg.augment ? &aug : nullptr, cfg.seed, epoch);
      std::size_t correct = 0;
      const double loss = train_step(model, state.optimizer, images, labels, lr, &correct);
      result.step_losses.push_back(loss);
      loss_sum += loss * static_cast<double>(n);
      correct_sum += correct;
      seen += n;
      ++state.step;
    }
    if (seen == 0) break;

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = loss_sum / static_cast<double>(seen);
    m.train_acc = static_cast<double>(correct_sum) / static_cast<double>(seen);
    m.eval_acc = evaluate(model, eval_set ? *eval_set : train_set, cfg.eval_batch);
    const bool improved = m.eval_acc > state.best_eval;
    if (improved) state.best_eval = m.eval_acc;
    state.epoch = epoch + 1;
    result.epochs.push_back(m);
    if (hooks.on_epoch) hooks.on_epoch(m, improved);
    if (stopped) break;
  }
  return result;
}

#define NLVT_INSTANTIATE_TRAIN(T)                                                                        \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, const std::vector<std::size_t>&);               \
  template class Sgd<T>;                                                                                 \
  template Tensor<T> make_batch<T>(const Dataset&, const std::vector<std::size_t>&, const ModelConfig&, \
                                   const AugmixConfig*, std::uint64_t, std::size_t);                    \
  template std::vector<std::size_t> argmax_rows<T>(const Tensor<T>&);                                    \
  template double train_step<T>(Model<T>&, Sgd<T>&, const Tensor<T>&, const std::vector<std::size_t>&,  \
                                double, std::size_t*);                                                   \
  template double evaluate<T>(Model<T>&, const Dataset&, std::size_t);                                   \
  template TrainResult<T> train<T>(Model<T>&, const Dataset&, const Dataset*, const TrainConfig&,       \
                                   const AugmixConfig&, const TrainHooks&);

NLVT_INSTANTIATE_TRAIN(float)
NLVT_INSTANTIATE_TRAIN(double)

}  // namespace nlvt
