#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "error.hpp"
#include "label_algebra.hpp"
#include "random.hpp"
#include "tinyunet.hpp"
#include "volume.hpp"

namespace segcascade {

enum class Augmentation { None, Minimal };

inline const char* to_string(Augmentation a) { return a == Augmentation::None ? "none" : "minimal"; }

struct TrainConfig {
  int epochs = 250;
  int batch_size = 2;
  double lr0 = 0.01;
  double momentum = 0.99;
  double poly_exponent = 0.9;
  std::uint64_t seed = 0;
  Augmentation augmentation = Augmentation::Minimal;
  // 0: one shuffled pass over the cases. Otherwise a fixed number of full
  // batches drawn from successive shuffled passes, as in nnU-Net.
  int steps_per_epoch = 0;
  // Keep only cases containing at least one of these regions.
  std::optional<std::vector<RegionId>> presence_filter;
  LossWeights loss;
};

inline void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw Error(Errc::InvalidConfig, "epochs must be >= 1");
  if (c.batch_size < 1) throw Error(Errc::InvalidConfig, "batch_size must be >= 1");
  if (!(c.lr0 > 0.0)) throw Error(Errc::InvalidConfig, "lr0 must be > 0");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw Error(Errc::InvalidConfig, "momentum must lie in [0, 1)");
  if (!(c.poly_exponent > 0.0)) throw Error(Errc::InvalidConfig, "poly_exponent must be > 0");
  if (c.steps_per_epoch < 0) throw Error(Errc::InvalidConfig, "steps_per_epoch must be >= 0");
}

/// lr0 * (1 - epoch/epochs)^exponent. epoch == epochs is accepted and gives 0.
inline double poly_lr(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch > cfg.epochs) throw Error(Errc::InvalidConfig, "epoch outside schedule");
  return cfg.lr0 * std::pow(1.0 - static_cast<double>(epoch) / cfg.epochs, cfg.poly_exponent);
}

template <class T>
struct OptimizerState {
  std::vector<std::vector<T>> velocity;
  int epoch = 0;
};

template <class T>
OptimizerState<T> make_optimizer_state(const Network<T>& net) {
  OptimizerState<T> s;
  for (const auto& p : net.params) s.velocity.emplace_back(p.data.size(), T(0));
  return s;
}

/// Nesterov look-ahead form: v <- mu v - lr g; theta <- theta + mu v - lr g.
/// Parameters are left untouched when any update would be non-finite.
template <class T>
void sgd_nesterov_step(Network<T>& net, const std::vector<std::vector<T>>& grads,
                       OptimizerState<T>& state, double lr, double momentum) {
  if (grads.size() != net.params.size() || state.velocity.size() != net.params.size())
    throw Error(Errc::ShapeMismatch, "gradient/velocity count does not match parameters");
  for (std::size_t i = 0; i < net.params.size(); ++i)
    if (grads[i].size() != net.params[i].data.size() || state.velocity[i].size() != grads[i].size())
      throw Error(Errc::ShapeMismatch, "gradient shape mismatch for " + net.params[i].name);

  auto next = state.velocity;
  for (std::size_t i = 0; i < next.size(); ++i)
    for (std::size_t j = 0; j < next[i].size(); ++j) {
      const T v = static_cast<T>(momentum * state.velocity[i][j] - lr * grads[i][j]);
      const T theta = static_cast<T>(net.params[i].data[j] + momentum * v - lr * grads[i][j]);
      if (!std::isfinite(v) || !std::isfinite(theta))
        throw Error(Errc::NonFiniteUpdate, "non-finite update in " + net.params[i].name);
      next[i][j] = v;
    }
  for (std::size_t i = 0; i < next.size(); ++i)
    for (std::size_t j = 0; j < next[i].size(); ++j)
      net.params[i].data[j] = static_cast<T>(net.params[i].data[j] + momentum * next[i][j] - lr * grads[i][j]);
  state.velocity = std::move(next);
}

namespace detail {

template <class T>
void flip_axis(T* data, int channels, const Index3& e, int axis) {
  const std::size_t n = unet::nvox(e);
  for (int c = 0; c < channels; ++c) {
    T* d = data + c * n;
    for (int z = 0; z < e[2]; ++z)
      for (int y = 0; y < e[1]; ++y)
        for (int x = 0; x < e[0]; ++x) {
          Index3 p{x, y, z};
          Index3 q = p;
          q[axis] = e[axis] - 1 - p[axis];
          if (q[axis] <= p[axis]) continue;
          std::swap(d[(static_cast<std::size_t>(p[2]) * e[1] + p[1]) * e[0] + p[0]],
                    d[(static_cast<std::size_t>(q[2]) * e[1] + q[1]) * e[0] + q[0]]);
        }
  }
}

}  // namespace detail

inline constexpr double kAugmentNoiseSigma = 0.02;

/// Minimal mode: per sample, flip each axis with p = 0.5 (image and target
/// together), then add N(0, 0.02^2) noise to the image channels.
template <class T>
Batch<T> augment_batch(const Batch<T>& batch, Augmentation mode, std::uint64_t seed) {
  if (mode == Augmentation::None) return batch;
  Batch<T> out = batch;
  const auto& e = out.inputs.extents;
  const std::size_t n = out.inputs.voxels();
  for (int b = 0; b < out.inputs.batch; ++b) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    for (int axis = 0; axis < 3; ++axis)
      if (rng.bernoulli(0.5)) {
        detail::flip_axis(out.inputs.sample(b), out.inputs.channels, e, axis);
        detail::flip_axis(out.targets.data() + b * n, 1, e, axis);
      }
    T* x = out.inputs.sample(b);
    for (std::size_t i = 0; i < out.inputs.sample_size(); ++i)
      x[i] = static_cast<T>(x[i] + kAugmentNoiseSigma * rng.normal());
  }
  return out;
}

struct FoldSplit {
  int k = 5;
  std::map<std::string, int> assignments;

  /// Case ids of fold f, in the order they were dealt.
  std::vector<std::string> fold(int f) const {
    std::vector<std::string> out;
    for (const auto& id : order)
      if (assignments.at(id) == f) out.push_back(id);
    return out;
  }
  std::vector<std::string> complement(int f) const {
    std::vector<std::string> out;
    for (const auto& id : order)
      if (assignments.at(id) != f) out.push_back(id);
    return out;
  }

  std::vector<std::string> order;  // shuffled deal order
};

/// Seeded shuffle, then round-robin assignment.
inline FoldSplit kfold_split(const std::vector<std::string>& case_ids, int k, std::uint64_t seed) {
  if (k < 1) throw Error(Errc::InvalidConfig, "k must be >= 1");
  if (static_cast<int>(case_ids.size()) < k)
    throw Error(Errc::TooFewCases, std::to_string(case_ids.size()) + " cases for " + std::to_string(k) + " folds");
  FoldSplit split;
  split.k = k;
  split.order = case_ids;
  Rng rng(seed);
  rng.shuffle(split.order);
  for (std::size_t i = 0; i < split.order.size(); ++i) {
    if (!split.assignments.emplace(split.order[i], static_cast<int>(i % k)).second)
      throw Error(Errc::InvalidConfig, "duplicate case id " + split.order[i]);
  }
  return split;
}

/// One training case: network inputs (batch 1), full ground truth (for the
/// presence filter) and class-index targets on the same lattice.
struct TrainingCase {
  std::string case_id;
  Tensor5<float> inputs;
  LabelVolume truth;
  std::vector<std::uint8_t> targets;
};

/// Class indices for `out_labels` (index = position + 1); anything else is 0.
inline std::vector<std::uint8_t> class_targets(const LabelVolume& truth, const std::vector<Label>& out_labels) {
  std::vector<std::uint8_t> t(truth.size(), 0);
  for (std::size_t i = 0; i < truth.size(); ++i)
    for (std::size_t k = 0; k < out_labels.size(); ++k)
      if (truth.data[i] == out_labels[k]) t[i] = static_cast<std::uint8_t>(k + 1);
  return t;
}

inline bool contains_any(const LabelVolume& truth, const std::vector<RegionId>& regions) {
  for (auto v : truth.data)
    for (auto r : regions)
      if (in_region(v, r)) return true;
  return false;
}

inline std::vector<const TrainingCase*> apply_presence_filter(const std::vector<TrainingCase>& cases,
                                                              const std::optional<std::vector<RegionId>>& filter) {
  std::vector<const TrainingCase*> out;
  for (const auto& c : cases)
    if (!filter || contains_any(c.truth, *filter)) out.push_back(&c);
  return out;
}

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  Network<float> final_net;
  Network<float> best_net;
  int best_epoch = -1;
  std::vector<EpochRecord> history;
  std::optional<Error> failure;  // NonFiniteLoss / NonFiniteUpdate; history is partial
  std::size_t training_cases = 0;
  std::size_t steps = 0;
};

/// Optimisation loop: per epoch a seeded permutation of the (filtered) cases
/// is cut into ceil(n / batch_size) batches; one Nesterov step per batch.
/// Reported epoch loss is the mean batch loss; the best network is the one
/// after the lowest-loss epoch.
inline TrainResult train(Network<float> net, const std::vector<TrainingCase>& dataset, const TrainConfig& cfg) {
  validate(cfg);
  const auto cases = apply_presence_filter(dataset, cfg.presence_filter);
  if (cases.empty()) throw Error(Errc::TooFewCases, "no training cases after presence filter");
  const auto& e = cases.front()->inputs.extents;
  const int channels = cases.front()->inputs.channels;
  for (const auto* c : cases)
    if (c->inputs.extents != e || c->inputs.channels != channels || c->inputs.batch != 1 ||
        c->targets.size() != unet::nvox(e))
      throw Error(Errc::ShapeMismatch, "training case " + c->case_id + " has a different shape");

  TrainResult res;
  res.training_cases = cases.size();
  auto state = make_optimizer_state(net);
  double best_loss = std::numeric_limits<double>::infinity();
  const std::size_t n = unet::nvox(e);
  std::vector<std::size_t> order(cases.size());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.epoch = epoch;
    const double lr = poly_lr(epoch, cfg);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    std::vector<std::size_t> stream = order;
    const std::size_t want = static_cast<std::size_t>(cfg.steps_per_epoch) * cfg.batch_size;
    while (stream.size() < want) {
      rng.shuffle(order);
      stream.insert(stream.end(), order.begin(), order.end());
    }
    if (want > 0) stream.resize(want);
    double loss_sum = 0.0;
    int steps = 0;
    try {
      for (std::size_t start = 0; start < stream.size(); start += cfg.batch_size) {
        const int bs = static_cast<int>(std::min<std::size_t>(cfg.batch_size, stream.size() - start));
        Batch<float> batch{Tensor5<float>(bs, channels, e), std::vector<std::uint8_t>(bs * n)};
        for (int b = 0; b < bs; ++b) {
          const auto* c = cases[stream[start + b]];
          std::copy(c->inputs.data.begin(), c->inputs.data.end(), batch.inputs.sample(b));
          std::copy(c->targets.begin(), c->targets.end(), batch.targets.begin() + b * n);
        }
        const auto aug_seed = derive_seed(derive_seed(cfg.seed ^ 0xA5A5A5A5ull, epoch), start);
        const auto g = gradients(net, augment_batch(batch, cfg.augmentation, aug_seed), cfg.loss);
        sgd_nesterov_step(net, g.grads, state, lr, cfg.momentum);
        loss_sum += g.loss.total;
        ++steps;
        ++res.steps;
      }
    } catch (const Error& err) {
      if (err.code() != Errc::NonFiniteLoss && err.code() != Errc::NonFiniteUpdate) throw;
      res.failure = err;
      break;
    }
    const double mean_loss = loss_sum / steps;
    res.history.push_back({epoch, lr, mean_loss});
    if (mean_loss < best_loss) {
      best_loss = mean_loss;
      res.best_epoch = epoch;
      res.best_net = net;
    }
  }
  res.final_net = std::move(net);
  if (res.best_epoch < 0) res.best_net = res.final_net;
  return res;
}

/// Voxelwise mean of probability stacks with identical geometry and channels.
inline ChannelStack ensemble_probs(const std::vector<ChannelStack>& stacks) {
  if (stacks.empty()) throw Error(Errc::GeometryMismatch, "no stacks to ensemble");
  const auto& first = stacks.front();
  for (const auto& s : stacks) {
    require_same_grid(s.grid, first.grid, "ensemble members disagree on geometry");
    if (s.names != first.names || s.size() != first.size())
      throw Error(Errc::GeometryMismatch, "ensemble members disagree on channels");
    for (const auto& ch : s.channels)
      if (ch.size() != first.voxels()) throw Error(Errc::GeometryMismatch, "channel length mismatch");
  }
  if (stacks.size() == 1) return first;
  ChannelStack out = first;
  const double inv = 1.0 / static_cast<double>(stacks.size());
  std::vector<double> acc(first.voxels());
  for (std::size_t c = 0; c < first.size(); ++c) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (const auto& s : stacks)
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += s.channels[c][i];
    for (std::size_t i = 0; i < acc.size(); ++i) out.channels[c][i] = static_cast<float>(acc[i] * inv);
  }
  return out;
}

}  // namespace segcascade
