#pragma once

// The assembled mixture: shared embedding, parallel component models
// (feature layer), mixing weights into one hidden mixture layer, and a
// single softmax output layer. Model dropout deactivates non-recurrent
// components per training example.

#include <cstdint>
#include <memory>
#include <vector>

#include "nmm/components.hpp"
#include "nmm/corpus.hpp"
#include "nmm/linalg.hpp"
#include "nmm/mixture_spec.hpp"

namespace nmm {

// Per-component, per-batch-row activity for one training example (one
// stream of a BPTT block). Recurrent components are always active.
struct DropoutMask {
  std::vector<std::vector<uint8_t>> active;  // [component][row]
  double p_drop = 0.0;

  bool all_active() const {
    for (const auto& comp : active)
      for (uint8_t a : comp)
        if (!a) return false;
    return true;
  }

  static DropoutMask everything_active(int components, int batch) {
    DropoutMask m;
    m.active.assign(components, std::vector<uint8_t>(batch, 1));
    return m;
  }
};

// Each non-recurrent component is independently dropped with probability
// p_drop. p_drop = 1 deactivates every droppable component.
inline DropoutMask sample_dropout(const std::vector<ComponentDesc>& components, double p_drop,
                                  int batch, Rng& rng) {
  if (!(p_drop >= 0.0 && p_drop <= 1.0))
    throw std::invalid_argument("sample_dropout: p_drop must be in [0, 1], got " +
                                std::to_string(p_drop));
  DropoutMask m;
  m.p_drop = p_drop;
  m.active.assign(components.size(), std::vector<uint8_t>(batch, 1));
  for (size_t c = 0; c < components.size(); ++c) {
    if (components[c].recurrent()) continue;
    for (int b = 0; b < batch; ++b)
      if (rng.bernoulli(p_drop)) m.active[c][b] = 0;
  }
  return m;
}

template <typename T>
class NmmModel {
 public:
  explicit NmmModel(const MixtureSpec& spec) : spec_(spec) {
    if (spec.components.empty())
      throw std::invalid_argument("NmmModel: mixture needs at least one component");
    if (spec.embedding_size < 1 || spec.mixture_size < 1 || spec.vocab_size < 1)
      throw std::invalid_argument("NmmModel: embedding, mixture and vocab sizes must be set");
    emb_ = Matrix<T>(spec.vocab_size, spec.embedding_size);
    emb_g_ = emb_;
    for (const ComponentDesc& d : spec.components) {
      comps_.push_back(make_component<T>(d, spec.embedding_size));
      mix_w_.emplace_back(d.hidden, spec.mixture_size);
      mix_w_g_.emplace_back(d.hidden, spec.mixture_size);
    }
    mix_b_ = Matrix<T>(1, spec.mixture_size);
    mix_b_g_ = mix_b_;
    out_w_ = Matrix<T>(spec.mixture_size, spec.vocab_size);
    out_w_g_ = out_w_;
    out_b_ = Matrix<T>(1, spec.vocab_size);
    out_b_g_ = out_b_;
  }

  const MixtureSpec& spec() const { return spec_; }
  int vocab_size() const { return spec_.vocab_size; }
  int component_count() const { return static_cast<int>(comps_.size()); }

  void init_params(Rng& rng) {
    emb_ = glorot_init<T>(spec_.vocab_size, spec_.embedding_size, rng);
    for (auto& c : comps_) c->init_params(rng);
    for (size_t m = 0; m < mix_w_.size(); ++m)
      mix_w_[m] = glorot_init<T>(spec_.components[m].hidden, spec_.mixture_size, rng);
    out_w_ = glorot_init<T>(spec_.mixture_size, spec_.vocab_size, rng);
  }

  void reset_states(int batch_size, int pad_token) {
    for (auto& c : comps_) c->reset_state(batch_size, pad_token);
    cache_.clear();
  }

  // One BPTT window. inputs[t] holds the ids of w_{t-1} per batch row;
  // returns the per-step output distributions (rows sum to 1). In train
  // mode, dropped rows of droppable components are zeroed and surviving
  // ones scaled by 1/(1-p_drop) so evaluation needs no rescaling.
  std::vector<Matrix<T>> forward(const std::vector<std::vector<int>>& inputs,
                                 const DropoutMask& mask, bool train_mode, bool keep_cache) {
    if (inputs.empty()) throw std::invalid_argument("NmmModel::forward: empty window");
    if (mask.active.size() != comps_.size())
      throw std::invalid_argument("NmmModel::forward: dropout mask covers " +
                                  std::to_string(mask.active.size()) + " components, model has " +
                                  std::to_string(comps_.size()));
    if (keep_cache) {
      mask_ = mask;
      train_mode_ = train_mode;
    }
    const T scale = !train_mode || mask.p_drop >= 1.0
                        ? T(1)
                        : static_cast<T>(1.0 / (1.0 - mask.p_drop));

    std::vector<Matrix<T>> probs;
    probs.reserve(inputs.size());
    for (const std::vector<int>& step_inputs : inputs) {
      const int batch = static_cast<int>(step_inputs.size());
      StepCache sc;
      sc.comp_h.reserve(comps_.size());
      Matrix<T> mix_pre(batch, spec_.mixture_size);
      for (size_t m = 0; m < comps_.size(); ++m) {
        Matrix<T> h = comps_[m]->forward(emb_, step_inputs, keep_cache);
        if (train_mode && !comps_[m]->recurrent())
          apply_mask(h, mask.active[m], scale);
        matmul_acc(h, mix_w_[m], mix_pre);
        sc.comp_h.push_back(std::move(h));
      }
      add_row_inplace(mix_pre, mix_b_);
      Matrix<T> mix_h = relu(mix_pre);
      Matrix<T> logits = matmul(mix_h, out_w_);
      add_row_inplace(logits, out_b_);
      Matrix<T> o = softmax_rows(logits);
      probs.push_back(o);
      if (keep_cache) {
        sc.mix_pre = std::move(mix_pre);
        sc.mix_h = std::move(mix_h);
        sc.probs = std::move(o);
        cache_.push_back(std::move(sc));
      }
    }
    return probs;
  }

  // Backpropagates the summed cross-entropy of the cached window. Dropped
  // rows contribute neither parameter nor embedding gradients. Returns the
  // summed loss. Gradients accumulate; call zero_grads() first.
  double backward(const std::vector<std::vector<int>>& targets) {
    if (targets.size() != cache_.size())
      throw std::logic_error("NmmModel::backward: " + std::to_string(targets.size()) +
                             " target steps for " + std::to_string(cache_.size()) +
                             " cached steps");
    const T scale = !train_mode_ || mask_.p_drop >= 1.0
                        ? T(1)
                        : static_cast<T>(1.0 / (1.0 - mask_.p_drop));

    double loss = 0.0;
    std::vector<std::vector<Matrix<T>>> comp_grads(comps_.size());
    for (size_t t = 0; t < cache_.size(); ++t) {
      const StepCache& sc = cache_[t];
      const int batch = sc.probs.rows();
      if (static_cast<int>(targets[t].size()) != batch)
        throw std::logic_error("NmmModel::backward: target batch mismatch");

      Matrix<T> dlogits = sc.probs;
      for (int b = 0; b < batch; ++b) {
        const int y = targets[t][b];
        if (y < 0 || y >= spec_.vocab_size)
          throw std::invalid_argument("NmmModel::backward: target id out of range");
        loss -= std::log(std::max(static_cast<double>(sc.probs(b, y)), 1e-300));
        dlogits(b, y) -= T(1);
      }

      matmul_tn_acc(sc.mix_h, dlogits, out_w_g_);
      colsum_acc(dlogits, out_b_g_);
      Matrix<T> dmix_h = matmul_nt(dlogits, out_w_);
      Matrix<T> dmix_pre = relu_grad(sc.mix_pre, dmix_h);
      colsum_acc(dmix_pre, mix_b_g_);
      for (size_t m = 0; m < comps_.size(); ++m) {
        matmul_tn_acc(sc.comp_h[m], dmix_pre, mix_w_g_[m]);
        Matrix<T> dh = matmul_nt(dmix_pre, mix_w_[m]);
        if (train_mode_ && !comps_[m]->recurrent())
          apply_mask(dh, mask_.active[m], scale);
        comp_grads[m].push_back(std::move(dh));
      }
    }
    for (size_t m = 0; m < comps_.size(); ++m)
      comps_[m]->backward(emb_, comp_grads[m], emb_g_);
    cache_.clear();
    return loss;
  }

  void drop_cache() {
    cache_.clear();
    for (auto& c : comps_) c->drop_cache();
  }

  // Stable declaration order: embedding, components, mixing weights,
  // output layer. Checkpoints and momentum buffers rely on this order.
  std::vector<ParamBlock<T>> param_blocks() {
    std::vector<ParamBlock<T>> out;
    out.push_back({"embedding.U", &emb_, &emb_g_, true});
    for (size_t m = 0; m < comps_.size(); ++m)
      comps_[m]->collect_params("component" + std::to_string(m), out);
    for (size_t m = 0; m < mix_w_.size(); ++m)
      out.push_back({"mixture.S" + std::to_string(m), &mix_w_[m], &mix_w_g_[m], true});
    out.push_back({"mixture.b", &mix_b_, &mix_b_g_, false});
    out.push_back({"output.W", &out_w_, &out_w_g_, true});
    out.push_back({"output.b", &out_b_, &out_b_g_, false});
    return out;
  }

  void zero_grads() {
    for (ParamBlock<T>& b : param_blocks()) b.grad->zero();
  }

  long long parameter_count(bool include_biases = true) const {
    return count_params(spec_, include_biases);
  }

  Component<T>& component(int m) { return *comps_[m]; }
  Matrix<T>& embedding() { return emb_; }
  Matrix<T>& mixing_weights(int m) { return mix_w_[m]; }
  Matrix<T>& output_weights() { return out_w_; }
  Matrix<T>& output_bias() { return out_b_; }

 private:
  static void apply_mask(Matrix<T>& m, const std::vector<uint8_t>& active_rows, T scale) {
    if (active_rows.size() != static_cast<size_t>(m.rows()))
      throw std::logic_error("dropout mask rows do not match batch size");
    for (int b = 0; b < m.rows(); ++b) {
      T* r = m.row(b);
      if (!active_rows[b]) {
        std::fill(r, r + m.cols(), T(0));
      } else if (scale != T(1)) {
        for (int j = 0; j < m.cols(); ++j) r[j] *= scale;
      }
    }
  }

  struct StepCache {
    std::vector<Matrix<T>> comp_h;  // post-dropout features per component
    Matrix<T> mix_pre, mix_h, probs;
  };

  MixtureSpec spec_;
  Matrix<T> emb_, emb_g_;
  std::vector<std::unique_ptr<Component<T>>> comps_;
  std::vector<Matrix<T>> mix_w_, mix_w_g_;
  Matrix<T> mix_b_, mix_b_g_;
  Matrix<T> out_w_, out_w_g_;
  Matrix<T> out_b_, out_b_g_;

  std::vector<StepCache> cache_;
  DropoutMask mask_;
  bool train_mode_ = false;
};

}  // namespace nmm
