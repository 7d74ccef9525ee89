#pragma once

// Perplexity measurement over an encoded corpus and linear interpolation
// of separately trained models, including held-out weight tuning on a
// simplex grid.

#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include "nmm/corpus.hpp"
#include "nmm/mixture.hpp"

namespace nmm {

struct EvalOptions {
  int context_start_token = 1;  // fed as history before the first word (<eos>)
  bool include_eos = true;      // count <eos> targets in the perplexity sum
  int eos_id = 1;
  double prob_floor = 1e-12;  // guards scripted/degenerate models before log
};

struct EvalReport {
  long long token_count = 0;
  double total_log_likelihood = 0.0;  // natural log
  double perplexity = 0.0;
  long long nop = 0;  // filled by callers that know the model spec
  double param_growth = std::numeric_limits<double>::quiet_NaN();
};

// Anything that predicts a next-word distribution from a running history.
// Evaluation walks a corpus sequentially through this interface; tests
// script it directly.
template <typename T>
class SequenceModel {
 public:
  virtual ~SequenceModel() = default;
  virtual int vocab_size() const = 0;
  virtual void reset() = 0;
  // Consumes the previous token, returns p(. | history), length vocab_size.
  virtual std::vector<T> next_distribution(int previous_token) = 0;
};

// Evaluation-mode adapter over an NmmModel: batch of one, dropout off.
template <typename T>
class NmmPredictor : public SequenceModel<T> {
 public:
  NmmPredictor(NmmModel<T>& model, int pad_token)
      : model_(&model), pad_(pad_token),
        mask_(DropoutMask::everything_active(model.component_count(), 1)) {
    reset();
  }

  int vocab_size() const override { return model_->vocab_size(); }

  void reset() override { model_->reset_states(1, pad_); }

  std::vector<T> next_distribution(int previous_token) override {
    const auto probs =
        model_->forward({{previous_token}}, mask_, /*train_mode=*/false, /*keep_cache=*/false);
    const Matrix<T>& row = probs[0];
    return std::vector<T>(row.row(0), row.row(0) + row.cols());
  }

 private:
  NmmModel<T>* model_;
  int pad_;
  DropoutMask mask_;
};

namespace eval_detail {

inline void finish_report(EvalReport& r) {
  if (r.token_count == 0)
    throw std::invalid_argument("perplexity: no target tokens (empty corpus?)");
  r.perplexity = std::exp(-r.total_log_likelihood / static_cast<double>(r.token_count));
}

}  // namespace eval_detail

// Sequential full-corpus pass: PPL = exp(-(1/T) sum_t ln p(w_t | history)).
template <typename T>
EvalReport perplexity(SequenceModel<T>& model, const EncodedCorpus& corpus,
                      const EvalOptions& opt = {}) {
  if (corpus.ids.empty()) throw std::invalid_argument("perplexity: empty corpus");
  model.reset();
  EvalReport r;
  int prev = opt.context_start_token;
  for (int id : corpus.ids) {
    const std::vector<T> dist = model.next_distribution(prev);
    if (opt.include_eos || id != opt.eos_id) {
      r.total_log_likelihood +=
          std::log(std::max(static_cast<double>(dist[id]), opt.prob_floor));
      ++r.token_count;
    }
    prev = id;
  }
  eval_detail::finish_report(r);
  return r;
}

inline void check_weights(const std::vector<double>& weights, size_t models) {
  if (models < 2)
    throw std::invalid_argument("interpolate: need at least two models");
  if (weights.size() != models)
    throw std::invalid_argument("interpolate: " + std::to_string(weights.size()) +
                                " weights for " + std::to_string(models) + " models");
  double sum = 0.0;
  for (double w : weights) {
    if (w < 0) throw std::invalid_argument("interpolate: negative weight");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("interpolate: weights sum to " + std::to_string(sum) +
                                ", expected 1");
}

// Per-position mixture p = sum_k lambda_k p_k over the same corpus walk.
template <typename T>
EvalReport interpolate_ppl(const std::vector<SequenceModel<T>*>& models,
                           const std::vector<double>& weights, const EncodedCorpus& corpus,
                           const EvalOptions& opt = {}) {
  check_weights(weights, models.size());
  if (corpus.ids.empty()) throw std::invalid_argument("interpolate: empty corpus");
  const int vocab = models[0]->vocab_size();
  for (SequenceModel<T>* m : models)
    if (m->vocab_size() != vocab)
      throw std::invalid_argument("interpolate: models have different vocabulary sizes");

  for (SequenceModel<T>* m : models) m->reset();
  EvalReport r;
  int prev = opt.context_start_token;
  for (int id : corpus.ids) {
    double p = 0.0;
    for (size_t k = 0; k < models.size(); ++k) {
      const std::vector<T> dist = models[k]->next_distribution(prev);
      p += weights[k] * static_cast<double>(dist[id]);
    }
    if (opt.include_eos || id != opt.eos_id) {
      r.total_log_likelihood += std::log(std::max(p, opt.prob_floor));
      ++r.token_count;
    }
    prev = id;
  }
  eval_detail::finish_report(r);
  return r;
}

// All weight vectors on the k-simplex at the given resolution, in
// lexicographically ascending order. step must divide 1.
std::vector<std::vector<double>> simplex_weight_grid(int k, double step);

// Exhaustive grid search minimizing validation perplexity; ties resolve
// toward the lexicographically smallest weight vector.
template <typename T>
std::vector<double> grid_search_weights(const std::vector<SequenceModel<T>*>& models,
                                        const EncodedCorpus& valid, double step,
                                        const EvalOptions& opt = {}) {
  if (models.size() < 2)
    throw std::invalid_argument("grid_search_weights: need at least two models");
  if (valid.ids.empty()) throw std::invalid_argument("grid_search_weights: empty corpus");

  // One pass per model collects the target-token probabilities; mixing is
  // then pure arithmetic per candidate.
  std::vector<std::vector<double>> target_probs(models.size());
  for (size_t k = 0; k < models.size(); ++k) {
    models[k]->reset();
    int prev = opt.context_start_token;
    for (int id : valid.ids) {
      const std::vector<T> dist = models[k]->next_distribution(prev);
      if (opt.include_eos || id != opt.eos_id)
        target_probs[k].push_back(static_cast<double>(dist[id]));
      prev = id;
    }
  }
  if (target_probs[0].empty())
    throw std::invalid_argument("grid_search_weights: no target tokens");

  const auto candidates = simplex_weight_grid(static_cast<int>(models.size()), step);
  std::vector<double> best;
  double best_ll = -std::numeric_limits<double>::infinity();
  for (const auto& lambda : candidates) {
    double ll = 0.0;
    for (size_t t = 0; t < target_probs[0].size(); ++t) {
      double p = 0.0;
      for (size_t k = 0; k < lambda.size(); ++k) p += lambda[k] * target_probs[k][t];
      ll += std::log(std::max(p, opt.prob_floor));
    }
    if (ll > best_ll) {
      best_ll = ll;
      best = lambda;
    }
  }
  return best;
}

}  // namespace nmm
