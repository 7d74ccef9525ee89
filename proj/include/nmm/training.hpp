#pragma once

// Joint SGD training: momentum + weight decay updates, truncated-BPTT
// epochs over contiguous batch streams, and the halve-on-stagnation
// learning-rate schedule.

#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "nmm/corpus.hpp"
#include "nmm/mixture.hpp"

namespace nmm {

struct TrainConfig {
  double learning_rate = 0.4;
  double momentum = 0.9;
  double weight_decay = 4e-5;
  double model_dropout = 0.4;
  int batch_size = 200;
  int bptt_steps = 5;
  int max_epochs = 50;
  // Minimum relative validation log-likelihood gain counted as progress.
  double halving_threshold = 1e-3;
  uint64_t seed = 1;
  bool clip_gradients = false;
  double clip_limit = 5.0;

  void validate() const {
    if (learning_rate < 0 || momentum < 0 || weight_decay < 0)
      throw std::invalid_argument("train config: rates must be non-negative");
    if (!(model_dropout >= 0.0 && model_dropout <= 1.0))
      throw std::invalid_argument("train config: model_dropout must be in [0, 1]");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (bptt_steps < 1) throw std::invalid_argument("train config: bptt_steps must be >= 1");
    if (max_epochs < 1) throw std::invalid_argument("train config: max_epochs must be >= 1");
  }

  // Large-corpus preset: plain SGD, larger batches.
  static TrainConfig ltcb_preset() {
    TrainConfig c;
    c.momentum = 0.0;
    c.model_dropout = 0.0;
    c.weight_decay = 0.0;
    c.batch_size = 400;
    return c;
  }
};

template <typename T>
struct TrainState {
  double lr = 0.0;
  int epoch = 0;
  double last_valid_ll = std::numeric_limits<double>::quiet_NaN();
  double best_valid_ll = -std::numeric_limits<double>::infinity();
  bool halving = false;
  bool stop = false;
  long long step_index = 0;
  std::vector<Matrix<T>> momentum;  // parallel to NmmModel::param_blocks()
  Rng rng{0};
};

template <typename T>
TrainState<T> init_train_state(NmmModel<T>& model, const TrainConfig& config, const Rng& rng) {
  config.validate();
  TrainState<T> st;
  st.lr = config.learning_rate;
  st.rng = rng;
  for (const ParamBlock<T>& b : model.param_blocks())
    st.momentum.emplace_back(b.value->rows(), b.value->cols());
  return st;
}

// buffer <- momentum * buffer - lr * (grad + weight_decay * param)
// param  <- param + buffer
// Weight decay skips bias blocks. Aborts on non-finite gradients.
template <typename T>
void sgd_step(std::vector<ParamBlock<T>>& blocks, TrainState<T>& state,
              const TrainConfig& config) {
  if (blocks.size() != state.momentum.size())
    throw std::logic_error("sgd_step: momentum buffers do not match parameter blocks");
  const T lr = static_cast<T>(state.lr);
  const T mom = static_cast<T>(config.momentum);
  for (size_t i = 0; i < blocks.size(); ++i) {
    ParamBlock<T>& blk = blocks[i];
    if (!all_finite(*blk.grad))
      throw std::runtime_error("sgd_step: non-finite gradient in block '" + blk.name +
                               "' at step " + std::to_string(state.step_index));
    const T decay = blk.decay ? static_cast<T>(config.weight_decay) : T(0);
    T* p = blk.value->data();
    const T* g = blk.grad->data();
    T* v = state.momentum[i].data();
    const size_t n = blk.value->size();
    for (size_t k = 0; k < n; ++k) {
      v[k] = mom * v[k] - lr * (g[k] + decay * p[k]);
      p[k] += v[k];
    }
  }
  ++state.step_index;
}

template <typename T>
void clip_gradients(std::vector<ParamBlock<T>>& blocks, double limit) {
  const T hi = static_cast<T>(limit);
  for (ParamBlock<T>& blk : blocks) {
    T* g = blk.grad->data();
    for (size_t k = 0; k < blk.grad->size(); ++k)
      g[k] = std::min(hi, std::max(-hi, g[k]));
  }
}

template <typename T>
void scale_gradients(std::vector<ParamBlock<T>>& blocks, double factor) {
  const T f = static_cast<T>(factor);
  for (ParamBlock<T>& blk : blocks) {
    T* g = blk.grad->data();
    for (size_t k = 0; k < blk.grad->size(); ++k) g[k] *= f;
  }
}

struct EpochStats {
  double mean_ce = 0.0;       // natural-log cross-entropy per target token
  long long tokens = 0;
  double seconds = 0.0;
  double tokens_per_sec = 0.0;
};

// One pass over the corpus: per block, sample a dropout mask per stream,
// forward bptt_steps, backward with truncation, one SGD step. Recurrent
// state carries (detached) across consecutive blocks of a stream.
template <typename T>
EpochStats run_epoch(NmmModel<T>& model, BatchCursor& cursor, int pad_token,
                     const TrainConfig& config, TrainState<T>& state) {
  const auto start = std::chrono::steady_clock::now();
  cursor.rewind();
  model.reset_states(cursor.batch_size(), pad_token);

  double total_loss = 0.0;
  long long total_tokens = 0;
  auto blocks = model.param_blocks();
  Batch batch;
  while (cursor.next(batch)) {
    const DropoutMask mask = sample_dropout(model.spec().components, config.model_dropout,
                                            batch.batch_size(), state.rng);
    model.zero_grads();
    model.forward(batch.inputs, mask, /*train_mode=*/true, /*keep_cache=*/true);
    total_loss += model.backward(batch.targets);
    const long long block_targets = static_cast<long long>(batch.batch_size()) * batch.steps();
    total_tokens += block_targets;
    // backward yields the summed-CE gradient; the update uses the per-target
    // mean so the learning rate is independent of batch and window sizes
    scale_gradients(blocks, 1.0 / static_cast<double>(block_targets));
    if (config.clip_gradients) clip_gradients(blocks, config.clip_limit);
    sgd_step(blocks, state, config);
  }
  if (total_tokens == 0)
    throw std::runtime_error("run_epoch: corpus yields no BPTT blocks at batch size " +
                             std::to_string(cursor.batch_size()));

  ++state.epoch;
  EpochStats stats;
  stats.mean_ce = total_loss / static_cast<double>(total_tokens);
  stats.tokens = total_tokens;
  stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  stats.tokens_per_sec = stats.seconds > 0 ? total_tokens / stats.seconds : 0.0;
  return stats;
}

// Halve-on-stagnation schedule: the first epoch whose relative validation
// log-likelihood gain falls below the threshold halves the rate; from then
// on the rate halves every epoch, and a second stagnation stops training.
template <typename T>
void lr_schedule(TrainState<T>& state, double valid_ll, const TrainConfig& config) {
  state.best_valid_ll = std::max(state.best_valid_ll, valid_ll);
  if (!std::isnan(state.last_valid_ll)) {
    const double denom = std::max(std::abs(state.last_valid_ll), 1e-12);
    const double gain = (valid_ll - state.last_valid_ll) / denom;
    const bool stagnant = gain < config.halving_threshold;
    if (state.halving) {
      state.lr /= 2;
      if (stagnant) state.stop = true;
    } else if (stagnant) {
      state.lr /= 2;
      state.halving = true;
    }
  }
  state.last_valid_ll = valid_ll;
}

}  // namespace nmm
